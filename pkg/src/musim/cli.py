"""Command-line interface: features, synth, train, eval, sweep.

Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .corpus import SynthSpec, generate_synthetic_corpus, load_manifest
from .errors import MusimError, ShapeError
from .evaluation import (
    dimension_sweep,
    embed_tracks,
    filter_high_agreement,
    load_triplet_file,
    emit_report,
    triplet_prediction_score,
)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .similarity import Dimension, dimensions_for
from .store import CorpusView, FeatureStore
from .training import TrainConfig, train_loop, write_history

log = logging.getLogger("musim")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--jobs", type=int, default=1, help="worker process cap")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="musim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="extract and cache features for a corpus")
    p.add_argument("--manifest", required=True, help="JSON-lines corpus manifest")
    p.add_argument("--cache-dir", required=True, help="feature cache directory")
    _add_common(p)

    p = sub.add_parser("synth", help="generate a synthetic labelled corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--genres", default="bright,mellow")
    p.add_argument("--moods", default="flowing,percussive")
    p.add_argument("--instruments", default="organ,clarinet")
    p.add_argument("--eras", default="vintage,modern")
    p.add_argument("--tempos", default="80,120", help="comma-separated bpm values")
    p.add_argument("--keys", default="C:maj,G:min", help="comma-separated key strings")
    p.add_argument("--tracks-per-cell", type=int, default=3)
    p.add_argument("--duration", type=float, default=3.0, help="track length in seconds")
    _add_common(p)

    p = sub.add_parser("train", help="train an embedding model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--out", required=True, help="output directory (checkpoint + history)")
    p.add_argument("--dims", type=int, choices=(4, 6), default=6)
    p.add_argument("--multi-input", action="store_true")
    p.add_argument("--embedding-size", type=int, default=384)
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=12)
    p.add_argument("--batches-per-epoch", type=int, default=1)
    p.add_argument("--pool-size", type=int, default=64)
    p.add_argument("--branch-channels", type=int, default=8)
    p.add_argument("--block-channels", default="16,24,32,32,48,48")
    _add_common(p)

    p = sub.add_parser("eval", help="triplet prediction score for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--triplets", required=True, help="triplet CSV file")
    p.add_argument("--agreement", type=float, default=None, help="keep triplets with agreement >= F")
    p.add_argument("--subset", default="all", help="'all' or comma-separated dimension names")
    p.add_argument("--out", default=None, help="optional output directory for eval.json")
    _add_common(p)

    p = sub.add_parser("sweep", help="score all dimension subsets and emit reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--agreement", type=float, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    return parser


def _parse_subset(text: str, num_dims: int, parser) -> tuple[Dimension, ...]:
    if text.strip().lower() == "all":
        return dimensions_for(num_dims)
    try:
        dims = tuple(Dimension.from_label(part.strip()) for part in text.split(",") if part.strip())
    except MusimError as exc:
        parser.error(str(exc))
    if not dims:
        parser.error("subset must name at least one dimension")
    for d in dims:
        if int(d) >= num_dims:
            parser.error(f"dimension {d.label!r} is outside the checkpoint's {num_dims} dimensions")
    return dims


def _load_view(manifest: str, cache_dir: str, jobs: int) -> CorpusView:
    corpus = load_manifest(manifest)
    store = FeatureStore(cache_dir)
    report = store.build(corpus, jobs=jobs)
    if report.failed:
        raise MusimError(f"feature extraction failed for {sorted(report.failed)} tracks")
    return CorpusView(corpus, store)


def cmd_features(args) -> int:
    corpus = load_manifest(args.manifest)
    store = FeatureStore(args.cache_dir)
    report = store.build(corpus, jobs=args.jobs)
    log.info("features: %d written, %d up to date, %d failed", report.written, report.skipped, len(report.failed))
    if report.failed:
        for tid, msg in sorted(report.failed.items()):
            log.error("  %s: %s", tid, msg)
        return 1
    return 0


def cmd_synth(args) -> int:
    def split(text):
        return tuple(part.strip() for part in text.split(",") if part.strip())

    spec = SynthSpec(
        genres=split(args.genres),
        moods=split(args.moods),
        instruments=split(args.instruments),
        eras=split(args.eras),
        tempos=tuple(float(v) for v in split(args.tempos)),
        keys=split(args.keys),
        tracks_per_cell=args.tracks_per_cell,
        duration=args.duration,
    )
    corpus = generate_synthetic_corpus(spec, args.seed, args.out)
    log.info("synthesized %d tracks under %s", len(corpus), args.out)
    print(str(Path(args.out) / "manifest.jsonl"))
    return 0


def cmd_train(args, parser) -> int:
    try:
        model_config = ModelConfig(
            embedding_size=args.embedding_size,
            num_dims=args.dims,
            multi_input=args.multi_input,
            branch_channels=args.branch_channels,
            block_channels=tuple(int(v) for v in args.block_channels.split(",")),
            margin=args.margin,
            seed=args.seed,
        )
    except (ShapeError, ValueError) as exc:
        parser.error(f"invalid model configuration: {exc}")
    train_config = TrainConfig(
        learning_rate=args.lr,
        margin=args.margin,
        batch_size=args.batch_size,
        epochs=args.epochs,
        batches_per_epoch=args.batches_per_epoch,
        pool_size=args.pool_size,
        seed=args.seed,
    )
    view = _load_view(args.manifest, args.cache_dir, args.jobs)
    result = train_loop(model_config, train_config, view)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / "checkpoint.msck"
    save_checkpoint(result.model, checkpoint)
    write_history(out / "history.csv", result.history, dimensions_for(args.dims))
    log.info(
        "training %s after %d epochs; best val loss %.6f at epoch %d",
        result.stop_reason, len(result.history), result.best_val_loss, result.best_epoch,
    )
    print(str(checkpoint))
    return 0


def _eval_embeddings(args, model):
    view = _load_view(args.manifest, args.cache_dir, args.jobs)
    triplets = load_triplet_file(args.triplets)
    if args.agreement is not None:
        kept = filter_high_agreement(triplets, args.agreement)
        log.info("agreement >= %.2f keeps %d of %d triplets", args.agreement, len(kept), len(triplets))
        triplets = kept
    ids = sorted({tid for t in triplets for tid in (t.anchor, t.positive, t.negative)})
    embeddings = embed_tracks(model, view, ids=ids)
    return triplets, embeddings


def cmd_eval(args, parser) -> int:
    model = load_checkpoint(args.checkpoint)
    subset = _parse_subset(args.subset, model.config.num_dims, parser)
    triplets, embeddings = _eval_embeddings(args, model)
    score = triplet_prediction_score(triplets, embeddings, subset, model.config.num_dims)
    print(f"triplet prediction score [{','.join(d.label for d in subset)}]: {score:.4f} ({len(triplets)} triplets)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "score": score,
            "subset": [d.label for d in subset],
            "triplet_count": len(triplets),
            "agreement_threshold": args.agreement,
            "config": dataclasses.asdict(model.config),
        }
        (out / "eval.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return 0


def cmd_sweep(args) -> int:
    model = load_checkpoint(args.checkpoint)
    triplets, embeddings = _eval_embeddings(args, model)
    dims = dimensions_for(model.config.num_dims)
    report = dimension_sweep(triplets, embeddings, dims, model.config.num_dims)
    paths = emit_report(report, args.out, config_echo=dataclasses.asdict(model.config))
    best = report.rows[0]
    print(f"best subset [{'+'.join(best.dims)}]: {best.score:.4f}; wrote {paths['sweep'].parent}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "features":
            return cmd_features(args)
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "train":
            return cmd_train(args, parser)
        if args.command == "eval":
            return cmd_eval(args, parser)
        if args.command == "sweep":
            return cmd_sweep(args)
        parser.error(f"unknown command {args.command!r}")
    except (MusimError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
