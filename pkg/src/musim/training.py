"""Conditional triplet training: loss, optimizer, LR schedule, loop.

The per-dimension loss is a margin hinge on masked cosine distances; the
total loss averages the per-dimension losses.  Adam drives the updates with
a reduce-on-plateau learning-rate schedule (factor 1/5 after 10 stagnant
epochs, floored at 1e-10).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DomainError, Exhausted, NoNegatives, NumericsError
from .metrics import cosine_distance
from .model import Model, ModelConfig, mask_vector
from .similarity import Dimension, dimensions_for
from .store import CorpusView
from .triplets import ConditionalTriplet, SegmentRef, build_batch, sample_anchor_positive

log = logging.getLogger(__name__)

_NORM_FLOOR_SQ = 1e-24


@dataclass(frozen=True)
class TrainConfig:
    """Optimization parameters; defaults follow the published recipe."""

    learning_rate: float = 1e-5
    lr_factor: float = 0.2
    lr_patience: int = 10
    lr_min: float = 1e-10
    margin: float = 0.1
    batch_size: int = 12
    epochs: int = 50
    batches_per_epoch: int = 1
    pool_size: int = 64
    retry_budget: int = 10
    val_fraction: float = 0.1
    val_triplets_per_dim: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_factor < 1:
            raise DomainError("lr_factor must be in (0, 1)")
        if self.lr_min > self.learning_rate:
            raise DomainError("lr_min must not exceed the initial learning rate")
        if not 0 <= self.val_fraction < 1:
            raise DomainError("val_fraction must be in [0, 1)")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _cosine_distance_t(x: Tensor, y: Tensor) -> Tensor:
    dot = ag.tsum(ag.mul(x, y), axis=-1)
    nx = ag.sqrt(ag.add(ag.tsum(ag.mul(x, x), axis=-1), _NORM_FLOOR_SQ))
    ny = ag.sqrt(ag.add(ag.tsum(ag.mul(y, y), axis=-1), _NORM_FLOOR_SQ))
    return ag.sub(1.0, ag.div(dot, ag.mul(nx, ny)))


def conditional_triplet_loss(anchor, positive, negative, dim_index: int, num_dims: int, margin: float = 0.1) -> Tensor:
    """Hinge on masked cosine distances: max(0, d(a,p) - d(a,n) + margin).

    Inputs may be (D,) or (B, D) tensors/arrays; the mask of ``dim_index``
    zeroes all coordinates outside that dimension's range before the
    distances are taken.
    """
    anchor, positive, negative = (ag.as_tensor(x) for x in (anchor, positive, negative))
    mask = Tensor(mask_vector(anchor.shape[-1], num_dims, dim_index).astype(anchor.data.dtype))
    d_ap = _cosine_distance_t(ag.mul(anchor, mask), ag.mul(positive, mask))
    d_an = _cosine_distance_t(ag.mul(anchor, mask), ag.mul(negative, mask))
    return ag.relu(ag.add(ag.sub(d_ap, d_an), margin))


def triplet_hinge_batch(emb_a: Tensor, emb_p: Tensor, emb_n: Tensor, mask_matrix: np.ndarray, margin: float) -> Tensor:
    """Per-triplet hinge losses for a batch whose rows carry their own masks."""
    mask = Tensor(np.asarray(mask_matrix, dtype=emb_a.data.dtype))
    d_ap = _cosine_distance_t(ag.mul(emb_a, mask), ag.mul(emb_p, mask))
    d_an = _cosine_distance_t(ag.mul(emb_a, mask), ag.mul(emb_n, mask))
    return ag.relu(ag.add(ag.sub(d_ap, d_an), margin))


def multi_dim_loss(losses):
    """Arithmetic mean of the per-dimension losses (tensor-aware)."""
    losses = list(losses)
    if not losses:
        raise DomainError("multi_dim_loss needs at least one per-dimension loss")
    if any(isinstance(v, Tensor) for v in losses):
        total = losses[0] if isinstance(losses[0], Tensor) else ag.as_tensor(losses[0])
        for v in losses[1:]:
            total = ag.add(total, v)
        return ag.div(total, float(len(losses)))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place; raises on non-finite gradients."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = t
    return params, state


class Adam:
    """Adam over a model's parameter tensors."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState()
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grads: dict[str, np.ndarray], lr: float):
        arrays = {name: p.data for name, p in self.params.items()}
        adam_step(arrays, grads, self.state, lr, self.beta1, self.beta2, self.eps)


class PlateauScheduler:
    """Reduce LR by a fixed factor when the best loss stalls for `patience` epochs."""

    def __init__(self, lr: float, factor: float = 0.2, patience: int = 10, lr_min: float = 1e-10):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.lr_min = lr_min
        self.best = np.inf
        self.stale = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr * self.factor, self.lr_min)
                self.stale = 0
        return self.lr


def plateau_schedule(val_loss_history, initial_lr: float, factor: float = 0.2, patience: int = 10, lr_min: float = 1e-10) -> float:
    """Learning rate after replaying a validation-loss history from `initial_lr`."""
    sched = PlateauScheduler(initial_lr, factor, patience, lr_min)
    lr = initial_lr
    for loss in val_loss_history:
        lr = sched.step(loss)
    return lr


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    dim_losses: tuple[float, ...]


@dataclass
class TrainResult:
    model: Model                      # weights from the best validation epoch
    history: list[EpochStats]
    best_epoch: int
    best_val_loss: float
    val_triplets: tuple[ConditionalTriplet, ...]
    stop_reason: str


class EmbeddingTable:
    """Embedding cache over segment refs against a frozen model snapshot."""

    def __init__(self, model: Model, view: CorpusView, chunk: int = 48):
        self.model = model
        self.view = view
        self.chunk = chunk
        self._cache: dict[SegmentRef, np.ndarray] = {}

    def refresh(self):
        self._cache.clear()

    def __call__(self, refs) -> np.ndarray:
        missing = [r for r in dict.fromkeys(refs) if r not in self._cache]
        for lo in range(0, len(missing), self.chunk):
            part = missing[lo : lo + self.chunk]
            mel, cyclic, cens = self.view.features_batch(part)
            emb = self.model.embed(mel, cyclic, cens)
            for ref, row in zip(part, emb):
                self._cache[ref] = row
        return np.stack([self._cache[r] for r in refs])


def _hash_split(ids, val_fraction: float) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Stable id-hash split; validation gets about `val_fraction` of tracks."""
    cut = int(round(val_fraction * 100))
    train, val = [], []
    for tid in ids:
        bucket = int.from_bytes(hashlib.sha1(tid.encode("utf-8")).digest()[:4], "big") % 100
        (val if bucket < cut else train).append(tid)
    return tuple(train), tuple(val)


def _build_val_triplets(view: CorpusView, dims, per_dim: int, rng) -> tuple[ConditionalTriplet, ...]:
    """Fixed validation triplets with random (not mined) negatives."""
    out = []
    for dim in dims:
        for _ in range(per_dim):
            try:
                anchor, positive = sample_anchor_positive(view, dim, rng)
            except Exhausted:
                break
            negatives = view.dissimilar(anchor.track_id, dim)
            if not negatives:
                break
            neg_id = negatives[int(rng.integers(len(negatives)))]
            negative = SegmentRef(neg_id, int(rng.integers(view.num_segments(neg_id))))
            out.append(ConditionalTriplet(anchor, positive, negative, dim))
    return tuple(out)


def evaluate_triplet_loss(model: Model, view: CorpusView, triplets, num_dims: int, margin: float) -> float:
    """Mean-over-dimensions hinge loss of fixed triplets under the current weights."""
    refs = []
    for t in triplets:
        refs.extend((t.anchor, t.positive, t.negative))
    table = EmbeddingTable(model, view)
    emb = table(refs)
    per_dim: dict[int, list[float]] = {}
    for i, t in enumerate(triplets):
        mask = mask_vector(emb.shape[1], num_dims, int(t.dimension))
        a, p, n = emb[3 * i] * mask, emb[3 * i + 1] * mask, emb[3 * i + 2] * mask
        hinge = max(0.0, cosine_distance(a, p) - cosine_distance(a, n) + margin)
        per_dim.setdefault(int(t.dimension), []).append(hinge)
    if not per_dim:
        raise DomainError("no triplets to evaluate")
    return float(np.mean([np.mean(v) for v in per_dim.values()]))


def triplet_accuracy(model: Model, view: CorpusView, triplets, num_dims: int) -> dict[Dimension, float]:
    """Fraction of triplets with d(a,p) < d(a,n) (masked cosine), per dimension."""
    refs = []
    for t in triplets:
        refs.extend((t.anchor, t.positive, t.negative))
    emb = EmbeddingTable(model, view)(refs)
    hits: dict[Dimension, list[bool]] = {}
    for i, t in enumerate(triplets):
        mask = mask_vector(emb.shape[1], num_dims, int(t.dimension))
        a, p, n = emb[3 * i] * mask, emb[3 * i + 1] * mask, emb[3 * i + 2] * mask
        hits.setdefault(t.dimension, []).append(
            cosine_distance(a, p) < cosine_distance(a, n)
        )
    return {dim: float(np.mean(v)) for dim, v in hits.items()}


def train_loop(model_config: ModelConfig, train_config: TrainConfig, view: CorpusView, on_epoch_end=None) -> TrainResult:
    """Train a model on a corpus view.

    Per epoch: mined batches are built against a frozen snapshot refreshed at
    each batch, the averaged hinge loss is backpropagated, Adam updates the
    weights, and the validation loss on a fixed triplet set drives the
    plateau schedule.  The best-validation weights are kept.

    ``on_epoch_end(stats, model) -> bool`` may stop training early.
    """
    tc = train_config
    dims = dimensions_for(model_config.num_dims)
    if tc.batch_size % len(dims):
        raise DomainError(f"batch_size {tc.batch_size} not divisible by {len(dims)} dimensions")
    model = Model(model_config)
    seeds = np.random.SeedSequence(tc.seed).spawn(2)
    batch_rng = np.random.Generator(np.random.PCG64(seeds[0]))
    val_rng = np.random.Generator(np.random.PCG64(seeds[1]))

    train_ids, val_ids = _hash_split(view.ids, tc.val_fraction)
    if not train_ids:
        train_ids, val_ids = view.ids, ()
    train_view = view.subset(train_ids)
    val_view = view.subset(val_ids) if val_ids else train_view
    val_triplets = _build_val_triplets(val_view, dims, tc.val_triplets_per_dim, val_rng)
    if not val_triplets:
        log.warning("validation split yields no triplets; validating on the training loss")

    adam = Adam(model.params, tc.adam_beta1, tc.adam_beta2, tc.adam_eps)
    sched = PlateauScheduler(tc.learning_rate, tc.lr_factor, tc.lr_patience, tc.lr_min)
    table = EmbeddingTable(model, train_view)
    mask_cache = {
        dim: mask_vector(model_config.embedding_size, len(dims), int(dim)) for dim in dims
    }

    history: list[EpochStats] = []
    best_val = np.inf
    best_epoch = -1
    best_state = model.state_arrays()
    best_state = {k: v.copy() for k, v in best_state.items()}
    lr = tc.learning_rate
    stop_reason = "completed"

    for epoch in range(tc.epochs):
        batch_losses = []
        dim_sums = {dim: 0.0 for dim in dims}
        dim_counts = {dim: 0 for dim in dims}
        aborted = False
        for _ in range(tc.batches_per_epoch):
            table.refresh()
            batch = build_batch(
                train_view, table, dims, tc.batch_size, batch_rng,
                pool_size=tc.pool_size, retry_budget=tc.retry_budget, margin=tc.margin,
            )
            emb = {}
            for role, refs in (
                ("a", [t.anchor for t in batch]),
                ("p", [t.positive for t in batch]),
                ("n", [t.negative for t in batch]),
            ):
                mel, cyclic, cens = train_view.features_batch(refs)
                emb[role] = model.forward(mel, cyclic, cens)
            mask_matrix = np.stack([mask_cache[t.dimension] for t in batch])
            losses = triplet_hinge_batch(emb["a"], emb["p"], emb["n"], mask_matrix, tc.margin)
            total = ag.tmean(losses)
            model.zero_grad()
            grads = model.backward(total)
            try:
                adam.step(grads, lr)
            except NumericsError as exc:
                log.error("epoch %d: %s; stopping with best checkpoint", epoch, exc)
                stop_reason = "numerics"
                aborted = True
                break
            batch_losses.append(float(total.data))
            for t, value in zip(batch, losses.data):
                dim_sums[t.dimension] += float(value)
                dim_counts[t.dimension] += 1
        if aborted:
            break
        train_loss = float(np.mean(batch_losses))
        dim_losses = tuple(
            dim_sums[d] / dim_counts[d] if dim_counts[d] else float("nan") for d in dims
        )
        if val_triplets:
            val_loss = evaluate_triplet_loss(model, view, val_triplets, len(dims), tc.margin)
        else:
            val_loss = train_loss
        stats = EpochStats(epoch=epoch, train_loss=train_loss, val_loss=val_loss, lr=lr, dim_losses=dim_losses)
        history.append(stats)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_arrays().items()}
        lr = sched.step(val_loss)
        if on_epoch_end is not None and on_epoch_end(stats, model):
            stop_reason = "stopped by callback"
            break

    model.load_state(best_state)
    return TrainResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_val_loss=float(best_val) if np.isfinite(best_val) else float("nan"),
        val_triplets=val_triplets,
        stop_reason=stop_reason,
    )


def write_history(path, history, dims) -> None:
    """Training history CSV: epoch, train/val loss, lr, per-dimension loss."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["epoch", "train_loss", "val_loss", "lr"] + [f"loss_{d.label}" for d in dims]
    lines = [",".join(header)]
    for s in history:
        row = [str(s.epoch), repr(s.train_loss), repr(s.val_loss), repr(s.lr)]
        row += [repr(v) for v in s.dim_losses]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
