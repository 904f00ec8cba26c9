"""Audio container, WAV I/O, segmentation and the fidelity/robustness metrics.

All audio is handled as mono float64 in [-1, 1]. Multichannel files are
averaged to mono on load. Float-32 WAV is the canonical output encoding;
16-bit PCM is accepted for ingestion and available for output.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

__all__ = [
    "AudioSignal",
    "Watermark",
    "WavFormatError",
    "load_wav",
    "save_wav",
    "snr",
    "bit_accuracy",
    "segment",
    "join_segments",
    "hard_bits",
]


class WavFormatError(ValueError):
    """Raised for unreadable, malformed or unsupported WAV input."""


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"AudioSignal expects 1-D samples, got shape {x.shape}")
        if x.size == 0:
            raise ValueError("AudioSignal must contain at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("AudioSignal samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples) -> "AudioSignal":
        return AudioSignal(np.asarray(samples, dtype=np.float64), self.sample_rate)


@dataclass(frozen=True)
class Watermark:
    """A bit vector with entries in {-1, +1}."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.float64).ravel()
        if b.size < 1:
            raise ValueError("watermark must have at least one bit")
        if not np.all((b == 1.0) | (b == -1.0)):
            raise ValueError("watermark entries must be exactly -1 or +1")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    def __len__(self) -> int:
        return self.bits.size

    @classmethod
    def random(cls, length: int, rng: np.random.Generator) -> "Watermark":
        return cls(rng.choice(np.array([-1.0, 1.0]), size=length))

    @classmethod
    def from_string(cls, text: str) -> "Watermark":
        """Parse a 0/1 string or a hex string (``0x`` prefix optional) into bits.

        A string made only of 0 and 1 is read as binary, otherwise as hex
        (4 bits per digit, most significant first). 0 maps to -1, 1 to +1.
        """
        s = text.strip().replace("_", "").replace(" ", "")
        if s.lower().startswith("0x"):
            digits = s[2:]
            is_hex = True
        else:
            digits = s
            is_hex = not set(s) <= {"0", "1"}
        if not digits:
            raise ValueError("empty bit string")
        if is_hex:
            try:
                raw = "".join(f"{int(c, 16):04b}" for c in digits)
            except ValueError:
                raise ValueError(f"not a binary or hex bit string: {text!r}") from None
        else:
            raw = digits
        return cls(np.array([1.0 if c == "1" else -1.0 for c in raw]))

    def to_string(self) -> str:
        return "".join("1" if b > 0 else "0" for b in self.bits)


def hard_bits(soft) -> np.ndarray:
    """Map soft values to {-1, +1}; zero maps to +1."""
    soft = np.asarray(soft, dtype=np.float64)
    return np.where(soft >= 0, 1.0, -1.0)


def load_wav(path) -> AudioSignal:
    """Read a PCM-16 or float-32 WAV file as mono audio in [-1, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except (ValueError, EOFError, OSError, struct.error) as exc:
        raise WavFormatError(f"unsupported encoding in {path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise WavFormatError(f"unsupported encoding in {path}: sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise WavFormatError(f"zero-length audio in {path}")
    return AudioSignal(x, rate)


def save_wav(signal: AudioSignal, path, encoding: str = "float32") -> None:
    """Write mono audio. ``encoding`` is ``"float32"`` (lossless) or ``"pcm16"``."""
    x = signal.samples
    if encoding == "float32":
        data = x.astype(np.float32)
    elif encoding == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    wavfile.write(Path(path), signal.sample_rate, data)


def _as_array(x) -> np.ndarray:
    if isinstance(x, AudioSignal):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def snr(reference, test) -> float:
    """10*log10(sum(ref^2) / sum((test-ref)^2)) in dB; ``inf`` for identical inputs."""
    ref = _as_array(reference)
    tst = _as_array(test)
    if ref.shape != tst.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {tst.shape}")
    power = float(np.sum(ref**2))
    if power == 0.0:
        raise ValueError("reference signal is all zero")
    residual = float(np.sum((tst - ref) ** 2))
    if residual == 0.0:
        return math.inf
    return 10.0 * math.log10(power / residual)


def bit_accuracy(truth, estimate) -> float:
    """Fraction of positions where sign(estimate) matches truth (sign(0) = +1)."""
    t = truth.bits if isinstance(truth, Watermark) else np.asarray(truth, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if t.shape != e.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {e.shape}")
    return float(np.mean(hard_bits(e) == t))


def segment(signal: AudioSignal, segment_length: int) -> list[AudioSignal]:
    """Split into non-overlapping segments, zero-padding the last one."""
    if segment_length < 2 or segment_length % 2:
        raise ValueError(f"segment_length must be even and >= 2, got {segment_length}")
    x = signal.samples
    count = math.ceil(x.size / segment_length)
    padded = np.zeros(count * segment_length)
    padded[: x.size] = x
    return [
        AudioSignal(padded[i * segment_length : (i + 1) * segment_length], signal.sample_rate)
        for i in range(count)
    ]


def join_segments(segments: list[AudioSignal], length: int) -> AudioSignal:
    """Concatenate segments and drop trailing padding beyond ``length`` samples."""
    x = np.concatenate([s.samples for s in segments])[:length]
    return AudioSignal(x, segments[0].sample_rate)
