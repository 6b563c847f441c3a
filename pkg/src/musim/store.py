"""Per-track feature cache and the corpus view used by training/evaluation.

Cache file layout (little-endian): a 16-byte header
``magic 'MUFC' | version u16 | flags u16 | frames u32 | frame_rate f32``
followed by three row-major float32 maps: mel (128 x frames), cyclic
tempogram (64 x frames), CENS (12 x frames).  A track caches the features
of its consecutive 3-second segments concatenated along time, so
``frames = 256 * n_segments``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import features as F
from .audio import load_audio, segment_clips
from .corpus import Corpus, TrackMetadata
from .errors import ManifestError, ShapeError
from .similarity import Dimension, dimension_similar, has_dimension

log = logging.getLogger(__name__)

MAGIC = b"MUFC"
FORMAT_VERSION = 1
EXTRACTOR_VERSION = 1
_HEADER = struct.Struct("<4sHHIf")
_ROWS = (F.N_MELS, F.N_CYCLIC, F.N_CHROMA)


def save_feature_file(path: str | Path, mel: np.ndarray, cyclic: np.ndarray, cens: np.ndarray, frame_rate: float) -> None:
    maps = (mel, cyclic, cens)
    frames = maps[0].shape[1]
    for m, rows in zip(maps, _ROWS):
        if m.shape != (rows, frames):
            raise ShapeError(f"expected ({rows}, {frames}) map, got {m.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, 0, frames, frame_rate))
        for m in maps:
            fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_feature_file(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ShapeError(f"{path}: truncated feature file")
        magic, version, _flags, frames, frame_rate = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ShapeError(f"{path}: not a feature cache file")
        if version != FORMAT_VERSION:
            raise ShapeError(f"{path}: unsupported feature file version {version}")
        maps = []
        for rows in _ROWS:
            buf = fh.read(rows * frames * 4)
            if len(buf) != rows * frames * 4:
                raise ShapeError(f"{path}: truncated feature payload")
            maps.append(np.frombuffer(buf, dtype="<f4").reshape(rows, frames).copy())
    return maps[0], maps[1], maps[2], frame_rate


def _content_hash(audio_path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(f"extractor-v{EXTRACTOR_VERSION}:".encode())
    digest.update(audio_path.read_bytes())
    return digest.hexdigest()[:16]


def extract_track(audio_path: Path, cache_path: Path) -> tuple[int, float]:
    """Extract per-segment features for one track and write its cache file."""
    clip = load_audio(audio_path)
    segments = segment_clips(clip.samples, clip.sample_rate)
    sets = [F.extract_features(seg) for seg in segments]
    mel = np.concatenate([s.mel.values for s in sets], axis=1)
    cyclic = np.concatenate([s.cyclic_tempogram.values for s in sets], axis=1)
    cens = np.concatenate([s.cens.values for s in sets], axis=1)
    save_feature_file(cache_path, mel, cyclic, cens, sets[0].frame_rate)
    return len(sets), clip.duration


def _extract_worker(args):
    track_id, audio_path, cache_path = args
    segments, duration = extract_track(Path(audio_path), Path(cache_path))
    return track_id, segments, duration


@dataclasses.dataclass
class BuildReport:
    written: int = 0
    skipped: int = 0
    failed: dict[str, str] = dataclasses.field(default_factory=dict)


class FeatureStore:
    """Feature cache directory with an index keyed by audio content hash."""

    def __init__(self, cache_dir: str | Path):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._index_path = self.cache_dir / "index.json"
        self._index: dict = {}
        self._ram: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        if self._index_path.exists():
            self._index = json.loads(self._index_path.read_text())
        if self._index.get("extractor_version") not in (None, EXTRACTOR_VERSION):
            self._index = {}
        self._index.setdefault("extractor_version", EXTRACTOR_VERSION)
        self._index.setdefault("tracks", {})

    def _save_index(self):
        self._index_path.write_text(json.dumps(self._index, sort_keys=True, indent=1))

    def build(self, corpus: Corpus, jobs: int = 1) -> BuildReport:
        """Extract features for every track; up-to-date entries are skipped."""
        report = BuildReport()
        todo = []
        for track in corpus:
            audio_path = corpus.audio_file(track)
            entry = self._index["tracks"].get(track.id)
            try:
                content = _content_hash(audio_path)
            except OSError as exc:
                report.failed[track.id] = str(exc)
                log.error("cannot read %s: %s", audio_path, exc)
                continue
            cache_path = self.cache_dir / f"{track.id}.mufc"
            if entry and entry["hash"] == content and cache_path.exists():
                report.skipped += 1
                continue
            todo.append((track.id, str(audio_path), str(cache_path), content))
        results = []
        if jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {t[0]: pool.submit(_extract_worker, t[:3]) for t in todo}
            for track_id, _, _, content in todo:
                try:
                    results.append((futures[track_id].result(), content))
                except Exception as exc:  # noqa: BLE001 - per-track isolation
                    report.failed[track_id] = str(exc)
                    log.error("feature extraction failed for %s: %s", track_id, exc)
        else:
            for t in todo:
                try:
                    results.append((_extract_worker(t[:3]), t[3]))
                except Exception as exc:  # noqa: BLE001
                    report.failed[t[0]] = str(exc)
                    log.error("feature extraction failed for %s: %s", t[0], exc)
        for (track_id, segments, duration), content in results:
            self._index["tracks"][track_id] = {
                "hash": content,
                "file": f"{track_id}.mufc",
                "segments": segments,
                "duration": duration,
            }
            report.written += 1
        self._save_index()
        return report

    def has(self, track_id: str) -> bool:
        return track_id in self._index["tracks"]

    def num_segments(self, track_id: str) -> int:
        return self._index["tracks"][track_id]["segments"]

    def duration(self, track_id: str) -> float:
        return self._index["tracks"][track_id]["duration"]

    def maps(self, track_id: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Full-track (mel, cyclic, cens) maps, memoized in RAM."""
        if track_id not in self._ram:
            entry = self._index["tracks"][track_id]
            mel, cyclic, cens, _ = load_feature_file(self.cache_dir / entry["file"])
            self._ram[track_id] = (mel, cyclic, cens)
        return self._ram[track_id]

    def segment_maps(self, track_id: str, segment: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mel, cyclic, cens = self.maps(track_id)
        n = self.num_segments(track_id)
        if not 0 <= segment < n:
            raise ShapeError(f"track {track_id!r} has {n} segments, asked for {segment}")
        sl = slice(segment * F.TRAIN_FRAMES, (segment + 1) * F.TRAIN_FRAMES)
        return mel[:, sl], cyclic[:, sl], cens[:, sl]


class CorpusView:
    """Binds corpus metadata to cached features and similarity indexes."""

    def __init__(self, corpus: Corpus, store: FeatureStore):
        self.corpus = corpus
        self.store = store
        self.ids = tuple(t.id for t in corpus)
        self._tracks = {t.id: t for t in corpus}
        self._partners: dict[Dimension, dict[str, tuple[str, ...]]] = {}
        self._eligible: dict[Dimension, tuple[str, ...]] = {}

    def track(self, track_id: str) -> TrackMetadata:
        try:
            return self._tracks[track_id]
        except KeyError:
            raise ManifestError(f"unknown track id {track_id!r}") from None

    def subset(self, ids) -> "CorpusView":
        keep = set(ids)
        sub = Corpus(tracks=tuple(t for t in self.corpus.tracks if t.id in keep), root=self.corpus.root)
        return CorpusView(sub, self.store)

    def num_segments(self, track_id: str) -> int:
        return self.store.num_segments(track_id)

    def eligible(self, dim: Dimension) -> tuple[str, ...]:
        if dim not in self._eligible:
            self._eligible[dim] = tuple(t.id for t in self.corpus if has_dimension(t, dim))
        return self._eligible[dim]

    def partners(self, dim: Dimension) -> dict[str, tuple[str, ...]]:
        """For each eligible track, the other tracks similar to it under `dim`."""
        if dim not in self._partners:
            ids = self.eligible(dim)
            sets: dict[str, list[str]] = {i: [] for i in ids}
            for i, a in enumerate(ids):
                ta = self._tracks[a]
                for b in ids[i + 1 :]:
                    if dimension_similar(ta, self._tracks[b], dim):
                        sets[a].append(b)
                        sets[b].append(a)
            self._partners[dim] = {k: tuple(v) for k, v in sets.items()}
        return self._partners[dim]

    def dissimilar(self, track_id: str, dim: Dimension) -> tuple[str, ...]:
        partners = set(self.partners(dim).get(track_id, ()))
        return tuple(i for i in self.eligible(dim) if i != track_id and i not in partners)

    def features_batch(self, refs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stack (mel, cyclic, cens) maps for a list of segment references."""
        mels, cyclics, censs = [], [], []
        for ref in refs:
            mel, cyclic, cens = self.store.segment_maps(ref.track_id, ref.segment)
            mels.append(mel)
            cyclics.append(cyclic)
            censs.append(cens)
        return np.stack(mels), np.stack(cyclics), np.stack(censs)
