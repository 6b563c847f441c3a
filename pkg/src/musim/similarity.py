"""Per-dimension similarity predicates for triplet sampling.

The six dimensions have a fixed order (it defines the embedding mask
layout): genre, mood, instrument, era, tempo, key.
"""

from __future__ import annotations

import enum

from .corpus import Key, TrackMetadata
from .errors import DomainError, Unavailable

TEMPO_MARGIN_BPM = 5.0
TEMPO_OCTAVE_RANGE = 3


class Dimension(enum.IntEnum):
    GENRE = 0
    MOOD = 1
    INSTRUMENT = 2
    ERA = 3
    TEMPO = 4
    KEY = 5

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "Dimension":
        try:
            return cls[label.upper()]
        except KeyError:
            raise DomainError(f"unknown dimension {label!r}") from None


DIMENSION_NAMES = tuple(d.label for d in Dimension)
LABEL_DIMS = (Dimension.GENRE, Dimension.MOOD, Dimension.INSTRUMENT, Dimension.ERA)


def dimensions_for(count: int) -> tuple[Dimension, ...]:
    """The first `count` dimensions in mask order (4 = label dims only)."""
    if not 1 <= count <= len(Dimension):
        raise DomainError(f"dimension count must be in [1, {len(Dimension)}]")
    return tuple(Dimension(i) for i in range(count))


def tempo_similar(t1: float, t2: float, margin: float = TEMPO_MARGIN_BPM, octaves: int = TEMPO_OCTAVE_RANGE) -> bool:
    """True when the tempi agree within `margin` bpm at some tempo octave.

    Checks |t1 * 2**k - t2| <= margin for integer k in [-octaves, octaves].
    """
    if t1 <= 0 or t2 <= 0:
        raise DomainError("tempi must be positive")
    return any(abs(t1 * 2.0**k - t2) <= margin for k in range(-octaves, octaves + 1))


def key_similar(k1: Key, k2: Key) -> bool:
    """True for identical keys or parallel keys (same tonic, opposite mode)."""
    return k1.tonic == k2.tonic


def label_similar(a: frozenset | set, b: frozenset | set) -> bool:
    """True when the label sets intersect."""
    return bool(set(a) & set(b))


def has_dimension(track: TrackMetadata, dim: Dimension) -> bool:
    """Whether a track carries data for the given dimension."""
    if dim == Dimension.TEMPO:
        return track.tempo is not None
    if dim == Dimension.KEY:
        return track.key is not None
    return bool(track.labels.get(dim.label))


def dimension_similar(a: TrackMetadata, b: TrackMetadata, dim: Dimension) -> bool:
    """Dispatch to the predicate for `dim`; raises Unavailable on missing data."""
    if not has_dimension(a, dim) or not has_dimension(b, dim):
        raise Unavailable(f"dimension {dim.label!r} unavailable for {a.id!r}/{b.id!r}")
    if dim == Dimension.TEMPO:
        return tempo_similar(a.tempo, b.tempo)
    if dim == Dimension.KEY:
        return key_similar(a.key, b.key)
    return label_similar(a.labels[dim.label], b.labels[dim.label])
