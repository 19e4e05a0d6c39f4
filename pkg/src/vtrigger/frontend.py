"""Audio frontend: log-mel filterbank, frame splicing, positional encoding.

Pipeline for the phonetic models::

    audio -> compute_melfb -> normalize -> splice_subsample -> add_positional_encoding

The BiLSTM path stops after splicing. Everything here is a pure function of
its inputs; the only module state is a read-only positional-encoding table.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import AudioTooShortError, FormatError

STAGES = ("mel", "spliced", "encoded")
LOG_FLOOR = 1e-10


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("audio must be mono (1-D samples)")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrontendConfig:
    n_mels: int = 40
    fps: int = 100
    splice: int = 7
    subsample: int = 3
    window_ms: float = 25.0
    fft_size: int = 512
    fmin: float = 0.0
    fmax: float | None = None

    def __post_init__(self):
        if self.splice < 1 or self.splice % 2 == 0:
            raise ValueError(f"splice must be a positive odd number, got {self.splice}")
        if self.subsample < 1:
            raise ValueError(f"subsample must be >= 1, got {self.subsample}")

    @property
    def spliced_dim(self) -> int:
        return self.n_mels * self.splice


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_rate: float = 100.0
    stage: str = "mel"

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be a T x D matrix, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


# ---------------------------------------------------------------------------
# mel filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Return the n_mels + 2 band edges in Hz (first/last are the outer feet)."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(mels)


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the rfft bin grid, shape (n_mels, fft_size // 2 + 1)."""
    edges = mel_band_edges(n_mels, sample_rate, fmin, fmax)
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def compute_melfb(audio: AudioBuffer, cfg: FrontendConfig = FrontendConfig()) -> FeatureSequence:
    """Log mel energies at ``cfg.fps`` frames per second.

    Frame t starts at sample t * hop; the signal is zero-padded at the end by
    (window - hop) samples so that T = floor(n_samples / hop).
    """
    sr = audio.sample_rate
    hop = sr // cfg.fps
    win = int(round(sr * cfg.window_ms / 1000.0))
    if win > cfg.fft_size:
        raise ValueError(f"window of {win} samples does not fit fft_size {cfg.fft_size}")
    x = audio.samples
    if len(x) < win:
        raise AudioTooShortError(
            f"audio too short: {len(x)} samples, need at least one {win}-sample window"
        )
    padded = np.concatenate([x, np.zeros(win - hop)])
    n_frames = 1 + (len(padded) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    window = np.hanning(win + 1)[:-1]
    spec = np.fft.rfft(padded[idx] * window, n=cfg.fft_size, axis=1)
    power = spec.real**2 + spec.imag**2
    fb = mel_filterbank(cfg.n_mels, cfg.fft_size, sr, cfg.fmin, cfg.fmax)
    energies = power @ fb.T
    return FeatureSequence(np.log(np.maximum(energies, LOG_FLOOR)), float(cfg.fps), "mel")


def normalize(mel: FeatureSequence, mean: np.ndarray, std: np.ndarray) -> FeatureSequence:
    """Apply global (corpus-level) mean/variance normalization at the mel stage."""
    if mel.stage != "mel":
        raise ValueError(f"normalization applies to mel features, got stage {mel.stage!r}")
    return FeatureSequence((mel.frames - mean) / std, mel.frame_rate, "mel")


# ---------------------------------------------------------------------------
# splicing and positional encoding


def splice_subsample(mel: FeatureSequence, cfg: FrontendConfig = FrontendConfig()) -> FeatureSequence:
    if mel.stage != "mel":
        raise ValueError(f"splice_subsample expects mel features, got stage {mel.stage!r}")
    T = mel.n_frames
    half = cfg.splice // 2
    centers = np.arange(0, T, cfg.subsample)
    idx = np.clip(centers[:, None] + np.arange(-half, half + 1)[None, :], 0, T - 1)
    out = mel.frames[idx].reshape(len(centers), cfg.splice * mel.dim)
    return FeatureSequence(out, mel.frame_rate / cfg.subsample, "spliced")


@lru_cache(maxsize=32)
def _pe_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    rates = 1.0 / 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: d // 2])
    pe.setflags(write=False)
    return pe


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal table, rows 0..n-1. Tables are built in power-of-two lengths."""
    size = 512
    while size < n:
        size *= 2
    return _pe_table(size, d)[:n]


def add_positional_encoding(x: FeatureSequence) -> FeatureSequence:
    if x.stage != "spliced":
        raise ValueError(f"positional encoding expects spliced features, got stage {x.stage!r}")
    pe = positional_encoding(x.n_frames, x.dim)
    return FeatureSequence(x.frames + pe, x.frame_rate, "encoded")


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationSpec:
    rir: np.ndarray
    residual: np.ndarray = field(default_factory=lambda: np.zeros(1))
    residual_gain: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        self.rir = np.asarray(self.rir, dtype=np.float64)
        self.residual = np.asarray(self.residual, dtype=np.float64)
        if self.rir.size == 0:
            raise ValueError("room impulse response must be non-empty")
        if self.residual.size == 0:
            raise ValueError("residual must be non-empty")
        if self.residual_gain < 0:
            raise ValueError("residual_gain must be >= 0")


def augment(audio: AudioBuffer, spec: AugmentationSpec) -> AudioBuffer:
    """Reverberate with ``spec.rir`` and mix in the scaled residual.

    A residual longer than the reverberated signal is read from a seeded
    random offset; a shorter one is extended cyclically.
    """
    wet = np.convolve(audio.samples, spec.rir)
    n = len(wet)
    res = spec.residual
    if len(res) > n:
        start = int(np.random.default_rng(spec.rng_seed).integers(0, len(res) - n + 1))
        res = res[start:start + n]
    else:
        res = np.resize(res, n)
    return AudioBuffer(wet + spec.residual_gain * res, audio.sample_rate)


def synthetic_rir(rng: np.random.Generator, sample_rate: int = 16000, rt60: float = 0.3,
                  length_s: float = 0.25) -> np.ndarray:
    """Exponentially decaying noise tail with a unit direct path."""
    n = max(1, int(length_s * sample_rate))
    t = np.arange(n) / sample_rate
    tail = rng.standard_normal(n) * np.exp(-6.9 * t / rt60)
    tail[0] = 1.0
    return tail / np.abs(tail).sum() * 4.0


def synthetic_residual(rng: np.random.Generator, n: int, sample_rate: int = 16000) -> np.ndarray:
    """Band-limited noise with a slow amplitude envelope, a stand-in for echo residuals."""
    noise = rng.standard_normal(n + 64)
    kernel = np.hanning(64)
    noise = np.convolve(noise, kernel / kernel.sum(), mode="valid")[:n]
    env = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * np.arange(n) / sample_rate)
    return noise * env


# ---------------------------------------------------------------------------
# file formats

VTFE_MAGIC = b"VTFE"
VTFE_VERSION = 1
_VTFE_HEADER = struct.Struct("<4sIII")


def write_features(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    T, D = frames.shape
    with open(path, "wb") as f:
        f.write(_VTFE_HEADER.pack(VTFE_MAGIC, VTFE_VERSION, T, D))
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _VTFE_HEADER.size:
        raise FormatError(f"{path}: truncated feature file")
    magic, version, T, D = _VTFE_HEADER.unpack_from(data)
    if magic != VTFE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {VTFE_MAGIC!r}")
    if version != VTFE_VERSION:
        raise FormatError(f"{path}: unsupported VTFE version {version}")
    body = data[_VTFE_HEADER.size:]
    if len(body) != 4 * T * D:
        raise FormatError(f"{path}: expected {4 * T * D} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(T, D)


def read_wav(path) -> AudioBuffer:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise FormatError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit PCM")
        raw = w.readframes(w.getnframes())
        sr = w.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, sr)


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.tobytes())


def model_input(mel: np.ndarray, cfg: FrontendConfig = FrontendConfig(), *,
                mean: np.ndarray | None = None, std: np.ndarray | None = None,
                positional: bool = True) -> np.ndarray:
    """Normalized, spliced (and optionally position-encoded) model input matrix."""
    seq = FeatureSequence(np.asarray(mel, dtype=np.float64), float(cfg.fps), "mel")
    if mean is not None:
        seq = normalize(seq, mean, std)
    seq = splice_subsample(seq, cfg)
    if positional:
        seq = add_positional_encoding(seq)
    return seq.frames


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def n_windows(n_mel_frames: int, cfg: FrontendConfig = FrontendConfig()) -> int:
    return ceil_div(n_mel_frames, cfg.subsample)


__all__ = [
    "AudioBuffer", "FrontendConfig", "FeatureSequence", "AugmentationSpec",
    "compute_melfb", "splice_subsample", "add_positional_encoding", "positional_encoding",
    "augment", "normalize", "mel_filterbank", "mel_band_edges", "model_input",
    "read_features", "write_features", "read_wav", "write_wav", "n_windows",
    "synthetic_rir", "synthetic_residual",
]
