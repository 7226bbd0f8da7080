"""WAV reading and 40-dimensional MFCC extraction."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"ATFEAT01"


class FormatError(ValueError):
    """Audio or feature file that does not match the supported layout."""


@dataclass(frozen=True)
class Signal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


@dataclass(frozen=True)
class MfccConfig:
    num_ceps: int = 40
    num_filters: int = 64
    frame_length: float = 0.025
    frame_shift: float = 0.010
    preemphasis: float = 0.97
    log_floor: float = 1e-10
    # "none", "mean" (per-utterance mean subtraction) or "meanvar"
    normalize: str = "none"

    def window(self, sample_rate: int) -> int:
        return int(round(self.frame_length * sample_rate))

    def hop(self, sample_rate: int) -> int:
        return int(round(self.frame_shift * sample_rate))


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_shift: float = 0.010
    frame_length: float = 0.025

    def __len__(self):
        return self.frames.shape[0]


def read_wav(path) -> Signal:
    """Read a 16-bit PCM mono RIFF file; anything else is rejected."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            if w.getcomptype() != "NONE":
                raise FormatError(f"{path}: compressed audio is not supported")
            if channels != 1:
                raise FormatError(f"{path}: expected mono audio, got {channels} channels")
            if width != 2:
                raise FormatError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Signal(samples, rate)


def write_wav(path, signal: Signal) -> None:
    pcm = np.clip(np.round(np.asarray(signal.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(signal.sample_rate)
        w.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def num_frames(num_samples: int, window: int, hop: int) -> int:
    if num_samples < window:
        return 0
    return 1 + (num_samples - window) // hop


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def mel_filterbank(num_filters: int, nfft: int, sample_rate: int):
    """Triangular filters equally spaced in mel from 0 Hz to Nyquist.

    Returns the (num_filters, nfft // 2 + 1) weight matrix and the centre
    frequencies in Hz. Weights peak at 1 on the centre frequency.
    """
    mels = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), num_filters + 2)
    edges = mel_to_hz(mels)
    bins = np.arange(nfft // 2 + 1) * sample_rate / nfft
    left, centre, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - left) / (centre - left)
    down = (right - bins[None, :]) / (right - centre)
    return np.maximum(0.0, np.minimum(up, down)), edges[1:-1]


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II, rows are basis functions."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    d[0] /= np.sqrt(2.0)
    return d


def _frames(signal: Signal, config: MfccConfig) -> np.ndarray:
    x = np.asarray(signal.samples, dtype=np.float64)
    win, hop = config.window(signal.sample_rate), config.hop(signal.sample_rate)
    T = num_frames(len(x), win, hop)
    if T == 0:
        return np.zeros((0, win))
    x = np.append(x[:1], x[1:] - config.preemphasis * x[:-1])
    idx = np.arange(T)[:, None] * hop + np.arange(win)[None, :]
    return x[idx] * np.hamming(win)[None, :]


def mel_energies(signal: Signal, config: MfccConfig = MfccConfig()) -> np.ndarray:
    """Mel filterbank power per frame, before the log (T × num_filters)."""
    frames = _frames(signal, config)
    win = config.window(signal.sample_rate)
    nfft = next_pow2(win)
    fb, _ = mel_filterbank(config.num_filters, nfft, signal.sample_rate)
    if len(frames) == 0:
        return np.zeros((0, config.num_filters))
    power = np.abs(np.fft.rfft(frames, n=nfft, axis=1)) ** 2 / nfft
    return power @ fb.T


def mfcc(signal: Signal, config: MfccConfig = MfccConfig()) -> FeatureSequence:
    if signal.sample_rate < 8000:
        raise ValueError(f"sample rate {signal.sample_rate} Hz is below 8000 Hz")
    energies = mel_energies(signal, config)
    logmel = np.log(np.maximum(energies, config.log_floor))
    ceps = logmel @ dct_matrix(config.num_filters)[: config.num_ceps].T
    if len(ceps) and config.normalize in ("mean", "meanvar"):
        ceps = ceps - ceps.mean(axis=0, keepdims=True)
        if config.normalize == "meanvar":
            ceps = ceps / np.maximum(ceps.std(axis=0, keepdims=True), 1e-5)
    elif config.normalize not in ("none", "mean", "meanvar"):
        raise ValueError(f"unknown normalization {config.normalize!r}")
    return FeatureSequence(ceps.astype(np.float32), config.frame_shift, config.frame_length)


def save_features(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    T, dim = frames.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", T, dim))
        f.write(frames.tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != FEATURE_MAGIC or len(blob) < 16:
        raise FormatError(f"{path}: not a feature cache file")
    T, dim = struct.unpack("<II", blob[8:16])
    if len(blob) != 16 + 4 * T * dim:
        raise FormatError(f"{path}: truncated feature payload")
    return np.frombuffer(blob[16:], dtype="<f4").reshape(T, dim).astype(np.float32)
