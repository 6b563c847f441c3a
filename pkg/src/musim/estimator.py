"""scikit-learn style front door: a feature transformer and a trainable embedder.

Both classes follow the estimator protocol (``get_params``/``set_params``,
``fit`` returning self), so they compose with sklearn pipelines and model
selection utilities.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .audio import SAMPLE_RATE, AudioClip, load_audio
from .corpus import Corpus, load_manifest
from .errors import DomainError
from .evaluation import track_embedding
from .features import TRAIN_FRAMES, FeatureSet, extract_features
from .model import ModelConfig
from .store import CorpusView, FeatureStore
from .training import TrainConfig, train_loop


def _as_clip(item) -> AudioClip:
    if isinstance(item, AudioClip):
        return item
    if isinstance(item, (str, Path)):
        return load_audio(item)
    if isinstance(item, tuple) and len(item) == 2:
        samples, rate = item
        return AudioClip(samples=np.asarray(samples, dtype=np.float64), sample_rate=int(rate))
    arr = np.asarray(item, dtype=np.float64)
    if arr.ndim == 1:
        return AudioClip(samples=arr, sample_rate=SAMPLE_RATE)
    raise DomainError(f"cannot interpret {type(item).__name__} as audio")


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer: audio-like inputs to aligned feature sets.

    Accepts AudioClip instances, 1-D sample arrays (assumed 22050 Hz),
    ``(samples, rate)`` tuples, or WAV paths.
    """

    def __init__(self, num_frames: int = TRAIN_FRAMES):
        self.num_frames = num_frames

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> list[FeatureSet]:
        return [extract_features(_as_clip(item), num_frames=self.num_frames) for item in X]


class DisentangledEmbedder(BaseEstimator):
    """Trainable multi-dimensional similarity embedder.

    ``fit`` takes a corpus (manifest path, Corpus, or CorpusView) and trains
    the masked triplet objective; ``transform`` maps audio-like inputs to
    track embeddings of shape (n, embedding_size).  Defaults are sized for
    desk-scale corpora; the published full-scale setting uses
    embedding_size=384 with learning_rate=1e-5.
    """

    def __init__(
        self,
        embedding_size: int = 48,
        num_dims: int = 6,
        multi_input: bool = True,
        margin: float = 0.1,
        learning_rate: float = 1e-3,
        epochs: int = 60,
        batch_size: int = 12,
        batches_per_epoch: int = 1,
        pool_size: int = 64,
        branch_channels: int = 8,
        block_channels: tuple[int, ...] = (16, 24, 32, 32, 48, 48),
        cache_dir: str | None = None,
        seed: int = 0,
    ):
        self.embedding_size = embedding_size
        self.num_dims = num_dims
        self.multi_input = multi_input
        self.margin = margin
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.batches_per_epoch = batches_per_epoch
        self.pool_size = pool_size
        self.branch_channels = branch_channels
        self.block_channels = block_channels
        self.cache_dir = cache_dir
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            embedding_size=self.embedding_size,
            num_dims=self.num_dims,
            multi_input=self.multi_input,
            branch_channels=self.branch_channels,
            block_channels=tuple(self.block_channels),
            margin=self.margin,
            seed=self.seed,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            margin=self.margin,
            batch_size=self.batch_size,
            epochs=self.epochs,
            batches_per_epoch=self.batches_per_epoch,
            pool_size=self.pool_size,
            seed=self.seed,
        )

    def _as_view(self, X) -> CorpusView:
        if isinstance(X, CorpusView):
            return X
        corpus = X if isinstance(X, Corpus) else load_manifest(X)
        cache = self.cache_dir or tempfile.mkdtemp(prefix="musim-cache-")
        store = FeatureStore(cache)
        store.build(corpus)
        return CorpusView(corpus, store)

    def fit(self, X, y=None, on_epoch_end=None):
        view = self._as_view(X)
        result = train_loop(self._model_config(), self._train_config(), view, on_epoch_end=on_epoch_end)
        self.model_ = result.model
        self.history_ = result.history
        self.train_result_ = result
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("DisentangledEmbedder must be fitted before transform")
        rows = []
        for item in X:
            clip = _as_clip(item)
            rows.append(track_embedding(self.model_, clip.samples, clip.sample_rate))
        return np.stack(rows)
