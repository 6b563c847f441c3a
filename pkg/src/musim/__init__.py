"""Multi-dimensional music similarity embeddings with disentangled subspaces."""

from .audio import AudioClip, load_audio, save_wav
from .corpus import (
    Corpus,
    Key,
    SynthSpec,
    Taxonomy,
    TrackMetadata,
    estimate_key,
    estimate_tempo,
    generate_synthetic_corpus,
    group_tags,
    load_manifest,
    write_manifest,
)
from .errors import MusimError
from .estimator import DisentangledEmbedder, FeatureExtractor
from .evaluation import (
    EvalTriplet,
    dimension_sweep,
    embed_tracks,
    emit_report,
    filter_high_agreement,
    load_triplet_file,
    subspace_distance,
    track_embedding,
    triplet_correct,
    triplet_prediction_score,
)
from .features import FeatureSet, TimeFrequencyMap, extract_features
from .model import Model, ModelConfig, apply_mask, load_checkpoint, save_checkpoint
from .similarity import Dimension, dimension_similar, key_similar, label_similar, tempo_similar
from .store import CorpusView, FeatureStore
from .training import TrainConfig, TrainResult, train_loop
from .triplets import ConditionalTriplet, SegmentRef, build_batch, mine_semi_hard_negative

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "ConditionalTriplet",
    "Corpus",
    "CorpusView",
    "Dimension",
    "DisentangledEmbedder",
    "EvalTriplet",
    "FeatureExtractor",
    "FeatureSet",
    "FeatureStore",
    "Key",
    "Model",
    "ModelConfig",
    "MusimError",
    "SegmentRef",
    "SynthSpec",
    "Taxonomy",
    "TimeFrequencyMap",
    "TrackMetadata",
    "TrainConfig",
    "TrainResult",
    "apply_mask",
    "build_batch",
    "dimension_similar",
    "dimension_sweep",
    "embed_tracks",
    "emit_report",
    "estimate_key",
    "estimate_tempo",
    "extract_features",
    "filter_high_agreement",
    "generate_synthetic_corpus",
    "group_tags",
    "key_similar",
    "label_similar",
    "load_audio",
    "load_checkpoint",
    "load_manifest",
    "load_triplet_file",
    "mine_semi_hard_negative",
    "save_checkpoint",
    "save_wav",
    "subspace_distance",
    "tempo_similar",
    "track_embedding",
    "train_loop",
    "triplet_correct",
    "triplet_prediction_score",
    "write_manifest",
]
