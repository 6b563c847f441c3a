"""Time-aligned audio representations: log-mel, CENS chroma, cyclic tempogram.

All three maps are computed on one hop grid (hop 256 at 22050 Hz, about
86.13 frames/s) so a single frame index addresses the same instant in every
representation.  A 3-second training excerpt is normalized to exactly 256
frames.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .audio import SAMPLE_RATE, AudioClip
from .errors import DomainError, InputTooShort, ShapeError

WINDOW = 512            # 23 ms at 22050 Hz
HOP = 256               # 50 % overlap
FRAME_RATE = SAMPLE_RATE / HOP
N_MELS = 128
N_CHROMA = 12
CHROMA_WINDOW = 4096    # long analysis window for the low-frequency grid
CQ_BINS_PER_OCTAVE = 36
CQ_OCTAVES = 6
CQ_FMIN = 440.0 * 2.0 ** ((36 - 69) / 12.0)  # C2 ~ 65.41 Hz
CENS_THRESHOLDS = (0.05, 0.1, 0.2, 0.4)
CENS_SMOOTH = 41
TEMPO_WINDOW = 384      # autocorrelation window and lag count, in frames
N_CYCLIC = 64
CYCLIC_LO_BPM = 60.0    # folded octave [60, 120)
TRAIN_FRAMES = 256

BIN_KINDS = ("linear-freq", "mel", "chroma", "tempo-lag", "cyclic-tempo")


@dataclass(frozen=True)
class TimeFrequencyMap:
    """A (bins x frames) real matrix on a known frame grid."""

    values: np.ndarray
    bin_kind: str
    frame_rate: float

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[1] == 0:
            raise ShapeError(f"TimeFrequencyMap expects (bins, frames>0), got {values.shape}")
        if self.bin_kind not in BIN_KINDS:
            raise ShapeError(f"unknown bin kind {self.bin_kind!r}")
        if not self.frame_rate > 0:
            raise DomainError("frame_rate must be positive")
        if not np.all(np.isfinite(values)):
            raise DomainError("TimeFrequencyMap values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureSet:
    """The three aligned input maps for one excerpt (mel 128, cyclic 64, cens 12)."""

    mel: TimeFrequencyMap
    cyclic_tempogram: TimeFrequencyMap
    cens: TimeFrequencyMap

    def __post_init__(self):
        if self.mel.values.shape[0] != N_MELS:
            raise ShapeError(f"mel map must have {N_MELS} rows")
        if self.cyclic_tempogram.values.shape[0] != N_CYCLIC:
            raise ShapeError(f"cyclic tempogram must have {N_CYCLIC} rows")
        if self.cens.values.shape[0] != N_CHROMA:
            raise ShapeError(f"cens map must have {N_CHROMA} rows")
        frames = {self.mel.frames, self.cyclic_tempogram.frames, self.cens.frames}
        if len(frames) != 1:
            raise ShapeError(f"feature maps disagree on frame count: {frames}")
        rates = {self.mel.frame_rate, self.cyclic_tempogram.frame_rate, self.cens.frame_rate}
        if len(rates) != 1:
            raise ShapeError(f"feature maps disagree on frame rate: {rates}")

    @property
    def frames(self) -> int:
        return self.mel.frames

    @property
    def frame_rate(self) -> float:
        return self.mel.frame_rate


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * math.pi * np.arange(n) / n)


def compute_stft(clip: AudioClip, window: int = WINDOW, hop: int = HOP) -> TimeFrequencyMap:
    """Magnitude STFT with centered zero padding.

    Frames are spaced ``hop`` samples apart; the clip is padded by half a
    window on each side, giving ``1 + len // hop`` frames.
    """
    samples = clip.samples
    if samples.size < window:
        raise InputTooShort(f"clip has {samples.size} samples, needs at least {window}")
    pad = window // 2
    padded = np.pad(samples, (pad, pad))
    n_frames = 1 + samples.size // hop
    starts = np.arange(n_frames) * hop
    idx = starts[:, None] + np.arange(window)[None, :]
    frames = padded[idx] * _hann(window)
    mags = np.abs(np.fft.rfft(frames, axis=1)).T
    return TimeFrequencyMap(values=mags, bin_kind="linear-freq", frame_rate=clip.sample_rate / hop)


@functools.lru_cache(maxsize=8)
def _mel_filterbank(n_fft: int, n_mels: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters (HTK scale) over rfft bin frequencies."""

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    edges = from_mel(np.linspace(to_mel(0.0), to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, freqs.size))
    for b in range(n_mels):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        rise = (freqs - lo) / max(mid - lo, 1e-12)
        fall = (hi - freqs) / max(hi - mid, 1e-12)
        fb[b] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


def mel_spectrogram(clip: AudioClip) -> TimeFrequencyMap:
    """128-band mel energy map from the power STFT."""
    stft = compute_stft(clip)
    power = stft.values**2
    fb = _mel_filterbank(WINDOW, N_MELS, clip.sample_rate)
    return TimeFrequencyMap(values=fb @ power, bin_kind="mel", frame_rate=stft.frame_rate)


def log_compress(values: np.ndarray) -> np.ndarray:
    """Elementwise log10(1 + 10*x) for non-negative energy maps."""
    values = np.asarray(values)
    if np.any(values < 0):
        raise DomainError("log compression requires non-negative input")
    return np.log10(1.0 + 10.0 * values)


def zscore(values: np.ndarray) -> np.ndarray:
    """Standardize by global mean/std; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DomainError("zscore requires finite input")
    std = values.std()
    if std == 0.0:
        return np.zeros_like(values)
    return (values - values.mean()) / std


@functools.lru_cache(maxsize=8)
def _chroma_map(n_fft: int, sample_rate: int) -> np.ndarray:
    """Pitch-class aggregation matrix over a constant-Q grid.

    Each rfft bin is quantized onto a 36-bins-per-octave grid spanning
    CQ_OCTAVES octaves above CQ_FMIN, then folded to 12 pitch classes
    (C = 0) by nearest semitone.
    """
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fmax = CQ_FMIN * 2.0**CQ_OCTAVES
    n_q = CQ_BINS_PER_OCTAVE * CQ_OCTAVES
    out = np.zeros((N_CHROMA, freqs.size))
    for j, f in enumerate(freqs):
        if f <= 0:
            continue
        q = int(round(CQ_BINS_PER_OCTAVE * math.log2(f / CQ_FMIN)))
        if q < 0 or q >= n_q:
            continue
        pitch_class = int(round(q / 3.0)) % N_CHROMA
        out[pitch_class, j] = 1.0
    return out


def cqt_chroma(clip: AudioClip) -> TimeFrequencyMap:
    """12-row chroma energies from a constant-Q analysis on the shared hop grid."""
    stft = compute_stft(clip, window=CHROMA_WINDOW, hop=HOP)
    power = stft.values**2
    cmap = _chroma_map(CHROMA_WINDOW, clip.sample_rate)
    return TimeFrequencyMap(values=cmap @ power, bin_kind="chroma", frame_rate=stft.frame_rate)


def cens(chroma: TimeFrequencyMap) -> TimeFrequencyMap:
    """Chroma energy normalized statistics.

    Per frame: l1-normalize, quantize against CENS_THRESHOLDS to levels 0-4,
    smooth each pitch-class row with a 41-point Hann window, then
    l2-normalize each frame (all-zero frames stay zero).
    """
    values = np.asarray(chroma.values, dtype=np.float64)
    if np.any(values < 0):
        raise DomainError("cens requires non-negative chroma")
    l1 = values.sum(axis=0)
    safe = np.where(l1 > 0, l1, 1.0)
    normed = values / safe
    quantized = np.zeros_like(normed)
    for threshold in CENS_THRESHOLDS:
        quantized += normed > threshold
    win = np.hanning(CENS_SMOOTH)
    smoothed = np.empty_like(quantized)
    for row in range(quantized.shape[0]):
        smoothed[row] = np.convolve(quantized[row], win, mode="same")
    norms = np.sqrt((smoothed**2).sum(axis=0))
    out = smoothed / np.where(norms > 0, norms, 1.0)
    return TimeFrequencyMap(values=out, bin_kind="chroma", frame_rate=chroma.frame_rate)


def onset_novelty(mel_db: np.ndarray) -> np.ndarray:
    """Half-wave-rectified spectral flux of a log-mel map, summed over bands."""
    mel_db = np.asarray(mel_db)
    flux = np.maximum(np.diff(mel_db, axis=1), 0.0).sum(axis=0)
    return np.concatenate([[0.0], flux])


def autocorrelation_tempogram(novelty: np.ndarray, frame_rate: float = FRAME_RATE) -> TimeFrequencyMap:
    """Windowed local autocorrelation of the novelty curve.

    For each frame, a centered window of TEMPO_WINDOW frames (zero padded at
    the edges) is autocorrelated over lags 0..TEMPO_WINDOW-1.  Each lag is
    averaged over its overlap length, and every frame is normalized by its
    lag-0 value when nonzero, so a constant novelty yields a flat lag profile.
    """
    novelty = np.asarray(novelty, dtype=np.float64)
    if np.any(novelty < 0):
        raise DomainError("novelty must be non-negative")
    w = TEMPO_WINDOW
    padded = np.pad(novelty, (w // 2, w - w // 2 - 1))
    segments = np.lib.stride_tricks.sliding_window_view(padded, w)
    spectra = np.abs(np.fft.rfft(segments, n=2 * w, axis=1)) ** 2
    ac = np.fft.irfft(spectra, n=2 * w, axis=1)[:, :w]
    ac /= (w - np.arange(w))[None, :]
    lag0 = ac[:, 0].copy()
    ac /= np.where(lag0 > 0, lag0, 1.0)[:, None]
    ac = np.maximum(ac, 0.0)  # clip FFT round-off below zero
    return TimeFrequencyMap(values=ac.T, bin_kind="tempo-lag", frame_rate=frame_rate)


def _fold_bpm(bpm: float, lo: float = CYCLIC_LO_BPM) -> float:
    """Fold a tempo into [lo, 2*lo) by exact doubling/halving."""
    while bpm < lo:
        bpm *= 2.0
    while bpm >= 2.0 * lo:
        bpm /= 2.0
    return bpm


@functools.lru_cache(maxsize=8)
def _fold_matrix(n_lags: int, n_bins: int, frame_rate: float) -> np.ndarray:
    """(n_bins x n_lags) averaging matrix folding lags onto one tempo octave.

    Lags beyond half the autocorrelation window are left out: their
    overlap-corrected estimates average fewer than half the window's
    products and are dominated by odd subharmonics of a pulse train.
    """
    max_lag = n_lags // 2
    assignment = np.full(n_lags, -1, dtype=np.int64)
    for lag in range(1, max_lag + 1):
        bpm = _fold_bpm(60.0 * frame_rate / lag)
        b = int(math.floor(n_bins * math.log2(bpm / CYCLIC_LO_BPM)))
        assignment[lag] = min(max(b, 0), n_bins - 1)
    counts = np.bincount(assignment[assignment >= 0], minlength=n_bins)
    if np.any(counts == 0):
        raise ShapeError("cyclic fold produced empty tempo bins")
    fold = np.zeros((n_bins, n_lags))
    for lag in range(1, n_lags):
        if assignment[lag] >= 0:
            fold[assignment[lag], lag] = 1.0 / counts[assignment[lag]]
    return fold


def cyclic_fold(tempogram: TimeFrequencyMap) -> TimeFrequencyMap:
    """Fold a lag tempogram onto one tempo octave with 64 log-spaced bins.

    Octave-related tempi land on the same bin; each bin averages the energy
    of the lags mapped to it.
    """
    if tempogram.bin_kind != "tempo-lag":
        raise ShapeError("cyclic_fold expects a tempo-lag map")
    fold = _fold_matrix(tempogram.values.shape[0], N_CYCLIC, tempogram.frame_rate)
    return TimeFrequencyMap(
        values=fold @ tempogram.values, bin_kind="cyclic-tempo", frame_rate=tempogram.frame_rate
    )


def cyclic_bin_bpm(bin_index: float, n_bins: int = N_CYCLIC) -> float:
    """Tempo (bpm) at a (possibly fractional) cyclic-tempogram bin center."""
    return CYCLIC_LO_BPM * 2.0 ** ((bin_index + 0.5) / n_bins)


def _fit_frames(values: np.ndarray, frames: int) -> np.ndarray:
    t = values.shape[1]
    if t == frames:
        return values
    if t > frames:
        start = (t - frames) // 2
        return values[:, start : start + frames]
    out = np.zeros((values.shape[0], frames), dtype=values.dtype)
    left = (frames - t) // 2
    out[:, left : left + t] = values
    return out


def extract_features(clip: AudioClip, num_frames: int | None = TRAIN_FRAMES) -> FeatureSet:
    """Run the full extraction chain on one excerpt.

    mel -> log compression -> z-score; chroma -> CENS; log-mel -> novelty ->
    autocorrelation tempogram -> cyclic fold.  All maps are cropped to their
    common frame count, then center-cropped or zero-padded to ``num_frames``
    (pass None to keep the natural length).
    """
    mel = mel_spectrogram(clip)
    log_mel = log_compress(mel.values)
    mel_std = zscore(log_mel)
    chroma = cens(cqt_chroma(clip))
    novelty = onset_novelty(log_mel)
    cyclic = cyclic_fold(autocorrelation_tempogram(novelty, mel.frame_rate))
    common = min(mel_std.shape[1], chroma.frames, cyclic.frames)
    maps = []
    for values, kind in ((mel_std, "mel"), (cyclic.values, "cyclic-tempo"), (chroma.values, "chroma")):
        values = values[:, :common]
        if num_frames is not None:
            values = _fit_frames(values, num_frames)
        maps.append(TimeFrequencyMap(values=values.astype(np.float32), bin_kind=kind, frame_rate=mel.frame_rate))
    return FeatureSet(mel=maps[0], cyclic_tempogram=maps[1], cens=maps[2])
