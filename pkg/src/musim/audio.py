"""Audio ingestion: WAV reading, downmixing, resampling to the working rate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import DomainError

SAMPLE_RATE = 22050

_PCM_SCALE = {
    np.dtype(np.int16): 2.0**15,
    np.dtype(np.int32): 2.0**31,
}


@dataclass(frozen=True)
class AudioClip:
    """Mono audio at the working sample rate, amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DomainError(f"AudioClip expects mono samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DomainError("AudioClip samples must be finite")
        if samples.size and np.max(np.abs(samples)) > 1.0 + 1e-9:
            raise DomainError("AudioClip samples must lie in [-1, 1]")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype in _PCM_SCALE:
        return data.astype(np.float64) / _PCM_SCALE[data.dtype]
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.floating):
        return data.astype(np.float64)
    raise DomainError(f"unsupported WAV sample format: {data.dtype}")


def resample(samples: np.ndarray, rate_in: int, rate_out: int = SAMPLE_RATE) -> np.ndarray:
    """Polyphase (windowed-sinc) resampling between integer rates."""
    if rate_in == rate_out:
        return np.asarray(samples, dtype=np.float64)
    ratio = Fraction(rate_out, rate_in)
    return resample_poly(np.asarray(samples, dtype=np.float64), ratio.numerator, ratio.denominator)


def load_audio(path: str | Path, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Read a WAV file (PCM 16/24/32-bit or float, mono or stereo).

    Stereo is downmixed by channel averaging; other rates are resampled to
    ``target_rate``; amplitudes are clipped to [-1, 1].
    """
    rate, data = wavfile.read(str(path))
    samples = _to_float(data)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if rate != target_rate:
        samples = resample(samples, rate, target_rate)
    np.clip(samples, -1.0, 1.0, out=samples)
    return AudioClip(samples=samples, sample_rate=target_rate)


def save_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write mono float samples as 16-bit PCM."""
    samples = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), sample_rate, pcm)


def segment_clips(samples: np.ndarray, sample_rate: int = SAMPLE_RATE, length: float = 3.0) -> list[AudioClip]:
    """Split audio into consecutive non-overlapping fixed-length clips.

    Yields ``floor(duration / length)`` clips starting at zero; a trailing
    partial chunk is discarded.  Audio shorter than one length is zero-padded
    to a single clip.
    """
    seg = int(round(length * sample_rate))
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < seg:
        padded = np.zeros(seg, dtype=np.float64)
        padded[: samples.size] = samples
        return [AudioClip(samples=padded, sample_rate=sample_rate)]
    count = samples.size // seg
    return [
        AudioClip(samples=samples[i * seg : (i + 1) * seg], sample_rate=sample_rate)
        for i in range(count)
    ]


def sine(frequency: float, duration: float, sample_rate: int = SAMPLE_RATE, amplitude: float = 0.8, phase: float = 0.0) -> np.ndarray:
    """Test/synthesis helper: a plain sine tone."""
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    return amplitude * np.sin(2.0 * math.pi * frequency * t + phase)


def click_track(bpm: float, duration: float, sample_rate: int = SAMPLE_RATE, band: tuple[float, float] = (4800.0, 9800.0), first_onset: float = 0.05, amplitude: float = 0.8) -> np.ndarray:
    """Synthesize a click track: short decaying noise bursts on every beat.

    The burst is band-limited above the chroma analysis range (default
    4.8-9.8 kHz) so clicks drive the onset novelty across many mel bands
    without polluting pitch-class energies.  The burst shape is fixed, so
    the function is deterministic.
    """
    n = int(round(duration * sample_rate))
    out = np.zeros(n, dtype=np.float64)
    period = 60.0 / bpm
    burst_len = int(0.02 * sample_rate)
    noise = np.random.Generator(np.random.PCG64(1234)).standard_normal(burst_len)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(burst_len, d=1.0 / sample_rate)
    spectrum[(freqs < band[0]) | (freqs > band[1])] = 0.0
    noise = np.fft.irfft(spectrum, n=burst_len)
    t = np.arange(burst_len) / sample_rate
    burst = noise * np.exp(-t / 0.004)
    burst = amplitude * burst / np.max(np.abs(burst))
    onset = first_onset
    while True:
        start = int(round(onset * sample_rate))
        if start >= n:
            break
        stop = min(start + burst_len, n)
        out[start:stop] += burst[: stop - start]
        onset += period
    return np.clip(out, -1.0, 1.0)
