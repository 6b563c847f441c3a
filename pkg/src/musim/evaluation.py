"""Track-level embeddings, triplet prediction scoring and the subspace sweep.

Evaluation distances are Euclidean over the active mask ranges; a triplet
counts as correct when the anchor-positive distance is strictly smaller
than the anchor-negative one (ties count as incorrect).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import segment_clips
from .errors import DomainError, EvalError
from .features import extract_features
from .model import Model, mask_vector
from .similarity import Dimension
from .store import CorpusView
from .triplets import SegmentRef

log = logging.getLogger(__name__)

HIGH_AGREEMENT_THRESHOLD = 0.9


@dataclass(frozen=True)
class EvalTriplet:
    """A human-annotated similarity triplet over track ids."""

    anchor: str
    positive: str
    negative: str
    agreement: float | None = None

    def __post_init__(self):
        if len({self.anchor, self.positive, self.negative}) != 3:
            raise EvalError(f"triplet ids must be distinct: {self.anchor}, {self.positive}, {self.negative}")
        if self.agreement is not None and not 0.0 <= self.agreement <= 1.0:
            raise EvalError(f"agreement {self.agreement} outside [0, 1]")


def load_triplet_file(path) -> tuple[EvalTriplet, ...]:
    """Read a triplet CSV with header anchor_id, positive_id, negative_id[, agreement]."""
    path = Path(path)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"anchor_id", "positive_id", "negative_id"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise EvalError(f"{path.name}: triplet file needs columns {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            agreement = row.get("agreement")
            try:
                value = float(agreement) if agreement not in (None, "") else None
            except ValueError:
                raise EvalError(f"{path.name}:{lineno}: bad agreement {agreement!r}") from None
            out.append(EvalTriplet(row["anchor_id"], row["positive_id"], row["negative_id"], value))
    return tuple(out)


def write_triplet_file(path, triplets) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["anchor_id", "positive_id", "negative_id", "agreement"])
        for t in triplets:
            writer.writerow([t.anchor, t.positive, t.negative, "" if t.agreement is None else repr(t.agreement)])


def filter_high_agreement(triplets, threshold: float = HIGH_AGREEMENT_THRESHOLD) -> tuple[EvalTriplet, ...]:
    """Keep triplets whose agreement rate is >= threshold; unrated ones are dropped."""
    unrated = sum(1 for t in triplets if t.agreement is None)
    if unrated:
        log.warning("%d triplets carry no agreement rate and are excluded", unrated)
    return tuple(t for t in triplets if t.agreement is not None and t.agreement >= threshold)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def track_embedding(model: Model, samples: np.ndarray, sample_rate: int = 22050) -> np.ndarray:
    """Mean embedding of consecutive non-overlapping 3-second sections.

    Tracks shorter than one section are zero-padded to a single section; a
    trailing partial section is discarded.
    """
    clips = segment_clips(samples, sample_rate)
    sets = [extract_features(c) for c in clips]
    mel = np.stack([f.mel.values for f in sets])
    cyclic = np.stack([f.cyclic_tempogram.values for f in sets])
    cens = np.stack([f.cens.values for f in sets])
    return model.embed(mel, cyclic, cens).mean(axis=0)


def embed_tracks(model: Model, view: CorpusView, ids=None, chunk: int = 48) -> dict[str, np.ndarray]:
    """Per-track mean segment embeddings from cached features."""
    ids = tuple(ids) if ids is not None else view.ids
    refs = []
    for tid in ids:
        refs.extend(SegmentRef(tid, k) for k in range(view.num_segments(tid)))
    rows = []
    for lo in range(0, len(refs), chunk):
        part = refs[lo : lo + chunk]
        mel, cyclic, cens = view.features_batch(part)
        rows.append(model.embed(mel, cyclic, cens))
    emb = np.concatenate(rows, axis=0) if rows else np.empty((0, model.config.embedding_size))
    out: dict[str, np.ndarray] = {}
    cursor = 0
    for tid in ids:
        n = view.num_segments(tid)
        out[tid] = emb[cursor : cursor + n].mean(axis=0)
        cursor += n
    return out


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def _subset_mask(subset, num_dims: int, size: int) -> np.ndarray:
    subset = tuple(subset)
    if not subset:
        raise DomainError("dimension subset must be non-empty")
    mask = np.zeros(size)
    for dim in subset:
        idx = int(dim)
        if not 0 <= idx < num_dims:
            raise DomainError(f"dimension {dim!r} outside the configured {num_dims} dimensions")
        mask += mask_vector(size, num_dims, idx)
    return mask


def subspace_distance(e1: np.ndarray, e2: np.ndarray, subset, num_dims: int) -> float:
    """Euclidean distance restricted to the mask ranges of `subset`."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    mask = _subset_mask(subset, num_dims, e1.shape[-1])
    diff = (e1 - e2) * mask
    return float(np.sqrt((diff * diff).sum()))


def triplet_correct(triplet: EvalTriplet, embeddings: dict[str, np.ndarray], subset, num_dims: int) -> bool:
    """True when the positive is strictly closer to the anchor than the negative."""
    try:
        a = embeddings[triplet.anchor]
        p = embeddings[triplet.positive]
        n = embeddings[triplet.negative]
    except KeyError as exc:
        raise EvalError(f"missing embedding for track {exc.args[0]!r}") from None
    return subspace_distance(a, p, subset, num_dims) < subspace_distance(a, n, subset, num_dims)


def triplet_prediction_score(triplets, embeddings, subset, num_dims: int) -> float:
    """Fraction of triplets predicted correctly in the given subspace."""
    triplets = tuple(triplets)
    if not triplets:
        raise EvalError("no triplets to score")
    correct = sum(triplet_correct(t, embeddings, subset, num_dims) for t in triplets)
    return correct / len(triplets)


@dataclass(frozen=True)
class SweepRow:
    bitmask: int
    dims: tuple[str, ...]
    score: float
    count: int


@dataclass(frozen=True)
class SweepReport:
    num_dims: int
    dim_names: tuple[str, ...]
    rows: tuple[SweepRow, ...]
    singleton_scores: dict[str, float]
    triplet_count: int


def dimension_sweep(triplets, embeddings, dims, num_dims: int | None = None) -> SweepReport:
    """Score every non-empty dimension subset, sorted by descending score."""
    dims = tuple(dims)
    if num_dims is None:
        num_dims = len(dims)
    triplets = tuple(triplets)
    rows = []
    singleton: dict[str, float] = {}
    for bitmask in range(1, 1 << len(dims)):
        subset = tuple(dims[i] for i in range(len(dims)) if bitmask & (1 << i))
        score = triplet_prediction_score(triplets, embeddings, subset, num_dims)
        rows.append(SweepRow(
            bitmask=bitmask,
            dims=tuple(Dimension(d).label for d in subset),
            score=score,
            count=len(triplets),
        ))
        if len(subset) == 1:
            singleton[Dimension(subset[0]).label] = score
    rows.sort(key=lambda r: (-r.score, r.bitmask))
    return SweepReport(
        num_dims=num_dims,
        dim_names=tuple(Dimension(d).label for d in dims),
        rows=tuple(rows),
        singleton_scores=singleton,
        triplet_count=len(triplets),
    )


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def _radar_svg(report: SweepReport) -> str:
    """Six-axis (or N-axis) radar of the singleton scores, fixed dimension order."""
    size = 420
    cx = cy = size / 2
    radius = 150
    n = len(report.dim_names)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for ring in (0.25, 0.5, 0.75, 1.0):
        pts = []
        for i in range(n):
            ang = -math.pi / 2 + 2 * math.pi * i / n
            pts.append(f"{cx + ring * radius * math.cos(ang):.2f},{cy + ring * radius * math.sin(ang):.2f}")
        lines.append(f'<polygon points="{" ".join(pts)}" fill="none" stroke="#cccccc" stroke-width="1"/>')
    pts = []
    for i, name in enumerate(report.dim_names):
        ang = -math.pi / 2 + 2 * math.pi * i / n
        x2, y2 = cx + radius * math.cos(ang), cy + radius * math.sin(ang)
        lines.append(f'<line x1="{cx}" y1="{cy}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="#999999" stroke-width="1"/>')
        lx, ly = cx + (radius + 24) * math.cos(ang), cy + (radius + 14) * math.sin(ang)
        score = report.singleton_scores.get(name, 0.0)
        lines.append(
            f'<text x="{lx:.2f}" y="{ly:.2f}" font-size="13" text-anchor="middle" '
            f'font-family="sans-serif">{name} ({score:.3f})</text>'
        )
        pts.append(f"{cx + score * radius * math.cos(ang):.2f},{cy + score * radius * math.sin(ang):.2f}")
    lines.append(
        f'<polygon points="{" ".join(pts)}" fill="#4477aa" fill-opacity="0.35" '
        f'stroke="#4477aa" stroke-width="2"/>'
    )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def emit_report(report: SweepReport, out_dir, config_echo: dict | None = None) -> dict[str, Path]:
    """Write sweep.csv, report.json and radar.svg; byte-stable for equal inputs."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bitmask", "dims", "score", "n"])
        for r in report.rows:
            writer.writerow([r.bitmask, "+".join(r.dims), repr(r.score), r.count])
    json_path = out_dir / "report.json"
    payload = {
        "num_dims": report.num_dims,
        "dim_names": list(report.dim_names),
        "triplet_count": report.triplet_count,
        "config": config_echo or {},
        "scores": [
            {"bitmask": r.bitmask, "dims": list(r.dims), "score": r.score, "n": r.count}
            for r in report.rows
        ],
        "singletons": report.singleton_scores,
    }
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    svg_path = out_dir / "radar.svg"
    svg_path.write_text(_radar_svg(report), encoding="utf-8")
    return {"sweep": csv_path, "report": json_path, "radar": svg_path}
