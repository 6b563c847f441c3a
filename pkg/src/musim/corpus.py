"""Corpus handling: manifest IO, tag grouping, tempo/key annotation, synthesis.

The manifest is JSON-lines, one object per track:
``{"id", "path", "genre": [...], "mood": [...], "instrument": [...],
"era": [...], "tempo": float|null, "key": "TONIC:maj|min"|null}``.
The taxonomy is CSV ``raw_tag,dimension,label``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, click_track, save_wav
from .errors import DomainError, ManifestError, NoKey, NoTempo
from .features import TimeFrequencyMap, cyclic_bin_bpm

LABEL_DIMENSIONS = ("genre", "mood", "instrument", "era")

PITCH_CLASS_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")

# Krumhansl-Kessler tonal hierarchy profiles, C-based.
KK_MAJOR = np.array([6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88])
KK_MINOR = np.array([6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17])

TEMPO_BAND = (40.0, 200.0)
# A pulse train peaks at every multiple of its period; the unbiased window
# correction can push a subharmonic above the fundamental, so any in-band
# local maximum within this fraction of the global one competes, and the
# shortest such lag (highest octave) wins.
_TEMPO_PEAK_TOLERANCE = 0.5


@dataclass(frozen=True, order=True)
class Key:
    """A musical key: pitch-class tonic (C = 0) and major/minor mode."""

    tonic: int
    mode: str

    def __post_init__(self):
        if not 0 <= self.tonic <= 11:
            raise DomainError(f"tonic must be in [0, 11], got {self.tonic}")
        if self.mode not in ("major", "minor"):
            raise DomainError(f"mode must be 'major' or 'minor', got {self.mode!r}")

    def __str__(self):
        return f"{PITCH_CLASS_NAMES[self.tonic]}:{'maj' if self.mode == 'major' else 'min'}"


def parse_key(text: str) -> Key:
    """Parse a 'TONIC:maj|min' key string (sharps only, e.g. 'F#:min')."""
    try:
        name, mode = text.split(":")
    except ValueError:
        raise ManifestError(f"bad key string {text!r}, expected 'TONIC:maj|min'") from None
    if name not in PITCH_CLASS_NAMES:
        raise ManifestError(f"unknown tonic {name!r}")
    if mode not in ("maj", "min"):
        raise ManifestError(f"unknown mode {mode!r}")
    return Key(tonic=PITCH_CLASS_NAMES.index(name), mode="major" if mode == "maj" else "minor")


@dataclass(frozen=True)
class TrackMetadata:
    """Per-track labels plus optional tempo (bpm) and key."""

    id: str
    path: str
    labels: dict[str, frozenset[str]]
    tempo: float | None = None
    key: Key | None = None

    def __post_init__(self):
        if self.tempo is not None and not 20.0 < self.tempo < 400.0:
            raise ManifestError(f"track {self.id!r}: tempo {self.tempo} outside (20, 400)")
        labels = {dim: frozenset(self.labels.get(dim, ())) for dim in LABEL_DIMENSIONS}
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class Corpus:
    """An immutable list of tracks plus the directory audio paths resolve against."""

    tracks: tuple[TrackMetadata, ...]
    root: Path = field(default_factory=Path)

    def __iter__(self):
        return iter(self.tracks)

    def __len__(self):
        return len(self.tracks)

    def track(self, track_id: str) -> TrackMetadata:
        for t in self.tracks:
            if t.id == track_id:
                return t
        raise KeyError(track_id)

    def audio_file(self, track: TrackMetadata) -> Path:
        p = Path(track.path)
        return p if p.is_absolute() else self.root / p


def load_manifest(path: str | Path) -> Corpus:
    """Read and validate a JSON-lines manifest."""
    path = Path(path)
    tracks: list[TrackMetadata] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                track_id = row["id"]
                labels = {dim: frozenset(row.get(dim) or ()) for dim in LABEL_DIMENSIONS}
                tempo = row.get("tempo")
                key = row.get("key")
                track = TrackMetadata(
                    id=track_id,
                    path=row["path"],
                    labels=labels,
                    tempo=float(tempo) if tempo is not None else None,
                    key=parse_key(key) if key is not None else None,
                )
            except ManifestError as exc:
                raise ManifestError(f"{path.name}:{lineno}: {exc}") from None
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ManifestError(f"{path.name}:{lineno}: malformed row ({exc})") from None
            if track.id in seen:
                raise ManifestError(f"{path.name}:{lineno}: duplicate track id {track.id!r}")
            seen.add(track.id)
            tracks.append(track)
    return Corpus(tracks=tuple(tracks), root=path.parent)


def write_manifest(path: str | Path, corpus: Corpus) -> None:
    """Write a corpus back out in canonical form (sorted label lists)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for t in corpus.tracks:
            row = {"id": t.id, "path": t.path}
            for dim in LABEL_DIMENSIONS:
                row[dim] = sorted(t.labels[dim])
            row["tempo"] = t.tempo
            row["key"] = str(t.key) if t.key is not None else None
            fh.write(json.dumps(row, sort_keys=True) + "\n")


class Taxonomy:
    """Mapping from raw tags to (dimension, label) pairs."""

    def __init__(self, mapping: dict[str, tuple[str, str]]):
        for tag, (dim, _) in mapping.items():
            if dim not in LABEL_DIMENSIONS:
                raise ManifestError(f"tag {tag!r} maps to unknown dimension {dim!r}")
        self.mapping = dict(mapping)

    @classmethod
    def from_csv(cls, path: str | Path) -> "Taxonomy":
        mapping: dict[str, tuple[str, str]] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or row[0].startswith("#"):
                    continue
                if len(row) != 3:
                    raise ManifestError(f"taxonomy line {lineno}: expected raw_tag,dimension,label")
                tag, dim, label = (c.strip() for c in row)
                if tag in mapping and mapping[tag] != (dim, label):
                    raise ManifestError(f"taxonomy line {lineno}: tag {tag!r} mapped twice")
                mapping[tag] = (dim, label)
        return cls(mapping)


def group_tags(raw_tags, taxonomy: Taxonomy) -> dict[str, set[str]]:
    """Group raw tags into per-dimension label sets; unmapped tags are ignored."""
    out: dict[str, set[str]] = {}
    for tag in raw_tags:
        target = taxonomy.mapping.get(tag)
        if target is None:
            continue
        dim, label = target
        out.setdefault(dim, set()).add(label)
    return out


def _parabolic_offset(left: float, center: float, right: float) -> float:
    denom = left - 2.0 * center + right
    if denom == 0.0:
        return 0.0
    return max(-0.5, min(0.5, 0.5 * (left - right) / denom))


def estimate_tempo(tempogram: TimeFrequencyMap) -> float:
    """Estimate a global tempo (bpm) from a lag or cyclic tempogram.

    The time-averaged profile is scanned inside TEMPO_BAND; among local
    maxima within _TEMPO_PEAK_TOLERANCE of the strongest, the highest tempo
    wins (octave-related peaks of a periodic pulse are near-equal, and the
    fundamental is the shortest lag).  Parabolic interpolation refines the
    peak.
    """
    profile = tempogram.values.mean(axis=1)
    if tempogram.bin_kind == "tempo-lag":
        fr = tempogram.frame_rate
        lo = max(1, int(math.ceil(60.0 * fr / TEMPO_BAND[1])))
        hi = min(profile.size - 1, int(math.floor(60.0 * fr / TEMPO_BAND[0])))
        band = profile[lo : hi + 1]
        if band.size == 0 or band.max() <= 0:
            raise NoTempo("tempogram carries no energy in the tempo band")
        peak = band.max()
        best_lag = None
        for lag in range(lo, hi + 1):
            left = profile[lag - 1] if lag > 0 else 0.0
            right = profile[lag + 1] if lag + 1 < profile.size else 0.0
            if profile[lag] >= left and profile[lag] >= right and profile[lag] >= _TEMPO_PEAK_TOLERANCE * peak:
                best_lag = lag
                break
        if best_lag is None:
            best_lag = lo + int(np.argmax(band))
        left = profile[best_lag - 1] if best_lag > 0 else profile[best_lag]
        right = profile[best_lag + 1] if best_lag + 1 < profile.size else profile[best_lag]
        refined = best_lag + _parabolic_offset(left, profile[best_lag], right)
        return 60.0 * fr / refined
    if tempogram.bin_kind == "cyclic-tempo":
        if profile.max() <= 0:
            raise NoTempo("cyclic tempogram is silent")
        n = profile.size
        b = int(np.argmax(profile))
        offset = _parabolic_offset(profile[(b - 1) % n], profile[b], profile[(b + 1) % n])
        return cyclic_bin_bpm(b + offset, n)
    raise DomainError(f"cannot estimate tempo from bin kind {tempogram.bin_kind!r}")


def estimate_key(chroma) -> Key:
    """Krumhansl-Schmuckler template correlation on the time-averaged chroma.

    Ties break toward the lowest tonic, then major before minor.
    """
    values = chroma.values if isinstance(chroma, TimeFrequencyMap) else np.asarray(chroma)
    mean_chroma = values.mean(axis=1) if values.ndim == 2 else np.asarray(values, dtype=np.float64)
    if mean_chroma.shape != (12,):
        raise DomainError(f"expected 12 pitch classes, got shape {mean_chroma.shape}")
    if np.max(np.abs(mean_chroma)) == 0 or np.std(mean_chroma) == 0:
        raise NoKey("chroma is silent or constant")
    best: tuple[float, int, int] | None = None
    best_key = None
    for mode_rank, (mode, profile) in enumerate((("major", KK_MAJOR), ("minor", KK_MINOR))):
        for tonic in range(12):
            rotated = np.roll(profile, tonic)
            r = float(np.corrcoef(mean_chroma, rotated)[0, 1])
            rank = (-r, tonic, mode_rank)
            if best is None or rank < best:
                best = rank
                best_key = Key(tonic=tonic, mode=mode)
    return best_key


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

GENRE_TIMBRES = {
    "bright": {"n_harmonics": 10, "decay": 0.5},
    "mellow": {"n_harmonics": 5, "decay": 2.0},
}
MOOD_ENVELOPES = ("flowing", "percussive")
INSTRUMENT_WAVEFORMS = {
    "organ": {"odd_only": False},
    "clarinet": {"odd_only": True},
}
# Noise beds must stay clear of the click band (4.8-9.8 kHz): a steady
# noise floor there masks click flux under log compression.
ERA_NOISE_BANDS = {
    "vintage": (180.0, 2600.0),
    "modern": (9900.0, 10900.0),
}


@dataclass(frozen=True)
class SynthSpec:
    """Factor grid for the synthetic corpus; one cell per factor combination."""

    genres: tuple[str, ...] = ("bright", "mellow")
    moods: tuple[str, ...] = ("flowing", "percussive")
    instruments: tuple[str, ...] = ("organ", "clarinet")
    eras: tuple[str, ...] = ("vintage", "modern")
    tempos: tuple[float, ...] = (80.0, 120.0)
    keys: tuple[str, ...] = ("C:maj", "G:min")
    tracks_per_cell: int = 3
    duration: float = 3.0

    def __post_init__(self):
        for name, palette, values in (
            ("genre", GENRE_TIMBRES, self.genres),
            ("instrument", INSTRUMENT_WAVEFORMS, self.instruments),
            ("era", ERA_NOISE_BANDS, self.eras),
        ):
            unknown = set(values) - set(palette)
            if unknown:
                raise DomainError(f"unknown {name} factors {sorted(unknown)}; choose from {sorted(palette)}")
        if set(self.moods) - set(MOOD_ENVELOPES):
            raise DomainError(f"unknown mood factors; choose from {MOOD_ENVELOPES}")
        for k in self.keys:
            parse_key(k)
        if self.tracks_per_cell < 1 or self.duration < 3.0:
            raise DomainError("tracks_per_cell must be >= 1 and duration >= 3 s")

    @property
    def cells(self):
        for genre in self.genres:
            for mood in self.moods:
                for instrument in self.instruments:
                    for era in self.eras:
                        for tempo in self.tempos:
                            for key in self.keys:
                                yield genre, mood, instrument, era, tempo, key


def _midi_freq(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69.0) / 12.0)


def _bandpass_noise(n: int, band: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(n)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    spectrum[(freqs < band[0]) | (freqs > band[1])] = 0.0
    out = np.fft.irfft(spectrum, n=n)
    peak = np.max(np.abs(out))
    return out / peak if peak > 0 else out


def _beat_envelope(n: int, tempo: float, first_onset: float) -> np.ndarray:
    """Fast-attack gate on every beat; floor keeps the pad audible between beats.

    The attack must be short (20 ms): a slow rise puts the pad's onset
    energy well after the click and the offset cross-terms skew the
    autocorrelation tempogram away from the beat period.
    """
    floor = 0.12
    env = np.full(n, floor)
    period = 60.0 / tempo
    attack = int(0.02 * SAMPLE_RATE)
    release = int(0.06 * SAMPLE_RATE)
    hold = max(attack, int(0.5 * period * SAMPLE_RATE))
    gate = np.full(hold + release, floor)
    gate[:attack] = floor + (1.0 - floor) * 0.5 * (1.0 - np.cos(math.pi * np.arange(attack) / attack))
    gate[attack:hold] = 1.0
    gate[hold:] = floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(math.pi * np.arange(release) / release))
    onset = first_onset
    while True:
        start = int(round(onset * SAMPLE_RATE))
        if start >= n:
            break
        stop = min(start + gate.size, n)
        env[start:stop] = np.maximum(env[start:stop], gate[: stop - start])
        onset += period
    return env


def synthesize_track(genre: str, mood: str, instrument: str, era: str, tempo: float, key: Key, duration: float, rng: np.random.Generator) -> np.ndarray:
    """Render one synthetic track whose factors are audible in the feature maps.

    genre -> harmonic decay/brightness, instrument -> harmonic parity,
    mood -> amplitude envelope, era -> noise band, tempo -> click grid,
    key -> tonic triad.  Per-track variation comes only from rng (phases,
    small detunes, onset jitter).
    """
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    timbre = GENRE_TIMBRES[genre]
    odd_only = INSTRUMENT_WAVEFORMS[instrument]["odd_only"]
    harmonics = range(1, timbre["n_harmonics"] + 1)
    third_ratio = 5.0 / 4.0 if key.mode == "major" else 6.0 / 5.0
    base = _midi_freq(60 + key.tonic)
    # just intonation and one tuning offset per track: tempered intervals or
    # per-note detunes make shared harmonics beat at a few Hz, right inside
    # the tempo estimation band
    notes = [  # (frequency ratio to the tonic, weight); tonic doubled
        (0.5, 1.0),
        (1.0, 1.0),
        (third_ratio, 0.7),
        (1.5, 0.7),
    ]
    tonal = np.zeros(n)
    tuning = 2.0 ** (rng.uniform(-6.0, 6.0) / 1200.0)
    for ratio, weight in notes:
        f0 = base * ratio * tuning
        for h in harmonics:
            if odd_only and h % 2 == 0:
                continue
            fh = f0 * h
            if fh > 0.45 * SAMPLE_RATE:
                break
            amp = weight * h ** (-timbre["decay"])
            tonal += amp * np.sin(2.0 * math.pi * fh * t + rng.uniform(0.0, 2.0 * math.pi))
    tonal /= np.max(np.abs(tonal))
    first_onset = 0.05 + rng.uniform(0.0, 0.02)
    if mood == "percussive":
        tonal *= _beat_envelope(n, tempo, first_onset)
    else:
        fade = int(0.01 * SAMPLE_RATE)
        ramp = np.linspace(0.0, 1.0, fade)
        tonal[:fade] *= ramp
        tonal[-fade:] *= ramp[::-1]
    clicks = click_track(tempo, duration, first_onset=first_onset, amplitude=1.0)
    noise = _bandpass_noise(n, ERA_NOISE_BANDS[era], rng)
    mix = 0.55 * tonal + 0.8 * clicks + 0.05 * noise
    return 0.92 * mix / np.max(np.abs(mix))


def generate_synthetic_corpus(spec: SynthSpec, seed: int, out_dir: str | Path) -> Corpus:
    """Deterministically synthesize a labelled corpus and write manifest + WAVs."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out_dir}: {exc}") from exc
    tracks = []
    for cell_index, (genre, mood, instrument, era, tempo, key_str) in enumerate(spec.cells):
        key = parse_key(key_str)
        for k in range(spec.tracks_per_cell):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, cell_index, k])))
            samples = synthesize_track(genre, mood, instrument, era, tempo, key, spec.duration, rng)
            track_id = f"{genre}_{mood}_{instrument}_{era}_{int(round(tempo))}_{str(key).replace(':', '')}_{k:02d}"
            rel_path = f"audio/{track_id}.wav"
            save_wav(out_dir / rel_path, samples)
            tracks.append(
                TrackMetadata(
                    id=track_id,
                    path=rel_path,
                    labels={
                        "genre": frozenset([genre]),
                        "mood": frozenset([mood]),
                        "instrument": frozenset([instrument]),
                        "era": frozenset([era]),
                    },
                    tempo=tempo,
                    key=key,
                )
            )
    corpus = Corpus(tracks=tuple(tracks), root=out_dir)
    write_manifest(out_dir / "manifest.jsonl", corpus)
    return corpus
