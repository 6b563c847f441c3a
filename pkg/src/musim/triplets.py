"""Conditional triplet construction with semi-hard negative mining.

A triplet (anchor, positive, negative; dimension) pairs two tracks that are
similar under exactly the stated dimension with one that is not.  Negatives
are mined semi-hard: the closest candidate farther from the anchor than the
positive but within the mining margin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import BatchError, Exhausted, NoNegatives
from .metrics import cosine_distance
from .model import mask_vector
from .similarity import Dimension, dimension_similar
from .store import CorpusView

log = logging.getLogger(__name__)

SEGMENT_SECONDS = 3.0
DEFAULT_POOL_SIZE = 64
DEFAULT_RETRY_BUDGET = 10
MINING_MARGIN = 0.1


@dataclass(frozen=True)
class SegmentRef:
    """A 3-second excerpt of a track, addressed on the non-overlapping grid."""

    track_id: str
    segment: int

    @property
    def offset(self) -> float:
        return self.segment * SEGMENT_SECONDS


@dataclass(frozen=True)
class ConditionalTriplet:
    anchor: SegmentRef
    positive: SegmentRef
    negative: SegmentRef
    dimension: Dimension

    def __post_init__(self):
        ids = {self.anchor.track_id, self.positive.track_id, self.negative.track_id}
        if len(ids) != 3:
            raise BatchError(f"triplet tracks must be distinct, got {sorted(ids)}")


def sample_anchor_positive(view: CorpusView, dim: Dimension, rng: np.random.Generator) -> tuple[SegmentRef, SegmentRef]:
    """Draw two distinct tracks similar under `dim`, with random segment offsets."""
    partners = view.partners(dim)
    anchors = [tid for tid in view.eligible(dim) if partners.get(tid)]
    if not anchors:
        raise Exhausted(dim)
    anchor_id = anchors[int(rng.integers(len(anchors)))]
    mates = partners[anchor_id]
    positive_id = mates[int(rng.integers(len(mates)))]
    return (
        SegmentRef(anchor_id, int(rng.integers(view.num_segments(anchor_id)))),
        SegmentRef(positive_id, int(rng.integers(view.num_segments(positive_id)))),
    )


def mine_semi_hard_negative(anchor_emb: np.ndarray, positive_emb: np.ndarray, candidates, margin: float = MINING_MARGIN):
    """Pick a negative id from (id, embedding) candidates.

    Preference order: the closest candidate inside the semi-hard window
    (d_ap, d_ap + margin); else the closest one strictly beyond d_ap; else
    the farthest candidate.  Distances are cosine distances, so callers
    must pass embeddings already masked to the triplet's dimension.
    """
    candidates = list(candidates)
    if not candidates:
        raise NoNegatives("no mining candidates supplied")
    d_ap = cosine_distance(anchor_emb, positive_emb)
    embs = np.stack([emb for _, emb in candidates])
    dists = cosine_distance(np.broadcast_to(anchor_emb, embs.shape), embs)
    dists = np.atleast_1d(dists)
    semi_hard = (dists > d_ap) & (dists < d_ap + margin)
    if semi_hard.any():
        idx = int(np.flatnonzero(semi_hard)[np.argmin(dists[semi_hard])])
    else:
        beyond = dists > d_ap
        if beyond.any():
            idx = int(np.flatnonzero(beyond)[np.argmin(dists[beyond])])
        else:
            idx = int(np.argmax(dists))
    return candidates[idx][0]


def build_batch(view: CorpusView, embed_refs, dims, batch_size: int, rng: np.random.Generator, *, pool_size: int = DEFAULT_POOL_SIZE, retry_budget: int = DEFAULT_RETRY_BUDGET, margin: float = MINING_MARGIN) -> list[ConditionalTriplet]:
    """Build a round-robin batch with an equal triplet quota per dimension.

    ``embed_refs`` maps a list of SegmentRef to a (n, D) embedding array of
    the current model (a frozen snapshot is fine).  Sampling failures are
    retried up to ``retry_budget`` times per slot, then raise BatchError.
    """
    dims = tuple(dims)
    if not dims:
        raise ValueError("dims must be non-empty")
    if batch_size % len(dims):
        raise ValueError(f"batch_size {batch_size} is not divisible by {len(dims)} dimensions")
    num_dims = len(dims)
    quota = batch_size // num_dims
    triplets: list[ConditionalTriplet] = []
    for _ in range(quota):
        for dim in dims:
            failure: Exception | None = None
            for _attempt in range(retry_budget):
                try:
                    triplets.append(
                        _build_one(view, embed_refs, dim, num_dims, rng, pool_size, margin)
                    )
                    break
                except (Exhausted, NoNegatives) as exc:
                    failure = exc
            else:
                raise BatchError(
                    f"no valid triplet for dimension {dim.label!r} after {retry_budget} attempts"
                ) from failure
    return triplets


def _build_one(view, embed_refs, dim, num_dims, rng, pool_size, margin) -> ConditionalTriplet:
    anchor, positive = sample_anchor_positive(view, dim, rng)
    negatives = view.dissimilar(anchor.track_id, dim)
    if not negatives:
        raise NoNegatives(f"no dissimilar track for {anchor.track_id!r} under {dim.label!r}")
    k = min(pool_size, len(negatives))
    picked = rng.choice(len(negatives), size=k, replace=False)
    neg_refs = [
        SegmentRef(negatives[i], int(rng.integers(view.num_segments(negatives[i]))))
        for i in picked
    ]
    embeddings = embed_refs([anchor, positive] + neg_refs)
    mask = mask_vector(embeddings.shape[1], num_dims, int(dim)).astype(embeddings.dtype)
    masked = embeddings * mask
    negative = mine_semi_hard_negative(masked[0], masked[1], list(zip(neg_refs, masked[2:])), margin)
    triplet = ConditionalTriplet(anchor, positive, negative, dim)
    _check_triplet(view, triplet)
    return triplet


def _check_triplet(view: CorpusView, t: ConditionalTriplet):
    a = view.track(t.anchor.track_id)
    if not dimension_similar(a, view.track(t.positive.track_id), t.dimension):
        raise BatchError(f"anchor/positive not similar under {t.dimension.label!r}")
    if dimension_similar(a, view.track(t.negative.track_id), t.dimension):
        raise BatchError(f"anchor/negative similar under {t.dimension.label!r}")
