"""Audio-level embedding and extraction with segment voting and shift search.

Audio is cut into segments of the model's length N. Every segment carries one
L-bit chunk of the payload; a payload of k*L bits is spread over the segments
round-robin. Extraction decodes every *full* segment, averages the soft values
of segments carrying the same chunk, and takes signs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .nets import ModelBundle
from .signal import AudioSignal, Watermark, bit_accuracy, segment, snr
from .wavelet import analysis, synthesis

SYNC_DIRECTIONS = ("forward", "backward", "both")


@dataclass(frozen=True)
class SyncConfig:
    """Shift search range in samples. ``forward`` undoes a delay (drops leading
    samples), ``backward`` undoes an advance (prepends zeros)."""

    shift_min: int = 0
    shift_max: int = 8000
    shift_step: int = 1
    direction: str = "forward"

    def __post_init__(self):
        if not 0 <= self.shift_min <= self.shift_max:
            raise ValueError(f"need 0 <= shift_min <= shift_max, got {self.shift_min}, {self.shift_max}")
        if self.shift_step < 1:
            raise ValueError("shift_step must be >= 1")
        if self.direction not in SYNC_DIRECTIONS:
            raise ValueError(f"direction must be one of {SYNC_DIRECTIONS}")

    def candidates(self) -> list[int]:
        """Signed shifts in search order (smaller magnitudes first on ties)."""
        mags = range(self.shift_min, self.shift_max + 1, self.shift_step)
        out = []
        for m in mags:
            if self.direction in ("forward", "both"):
                out.append(m)
            if self.direction in ("backward", "both") and (m != 0 or self.direction == "backward"):
                out.append(-m)
        return out


@dataclass
class EmbedResult:
    signal: AudioSignal
    snr_db: float
    n_segments: int
    strength: float


@dataclass
class ExtractResult:
    bits: np.ndarray
    soft: np.ndarray
    n_segments: int
    shift: int = 0
    accuracy: float | None = None
    heuristic: bool = False
    searched: int = 1


def _payload(bits, watermark_length: int) -> np.ndarray:
    arr = bits.bits if isinstance(bits, Watermark) else np.asarray(bits, dtype=np.float64).ravel()
    if arr.size == 0 or arr.size % watermark_length:
        raise ValueError(
            f"payload has {arr.size} bits; the model expects {watermark_length} bits "
            f"(or a multiple of {watermark_length})"
        )
    if not np.all(np.abs(arr) == 1):
        raise ValueError("payload bits must be +-1")
    return arr.reshape(-1, watermark_length)


def _check_audio(bundle: ModelBundle, signal: AudioSignal) -> None:
    if signal.sample_rate != bundle.sample_rate:
        warnings.warn(
            f"audio sample rate {signal.sample_rate} Hz differs from the model's {bundle.sample_rate} Hz",
            stacklevel=3,
        )
    if len(signal.samples) < bundle.segment_length:
        raise ValueError(
            f"audio has {len(signal.samples)} samples, shorter than the model segment length {bundle.segment_length}"
        )


def embed_coefficients(bundle: ModelBundle, segments: np.ndarray, bits: np.ndarray, strength: float) -> np.ndarray:
    """Embed ``bits`` (batch, L) into float64 ``segments`` (batch, N); returns float64 audio.

    The residual is computed by the network in its own precision; the addition
    to the coefficients happens in float64, so strength 0 is an exact identity
    up to the DWT round trip.
    """
    a, d = analysis(segments[:, None, :])
    if strength != 0:
        residual = bundle.encode_residual(a.astype(bundle.dtype), bits).data.astype(np.float64)
        a = a + strength * residual
    return synthesis(a, d)[:, 0, :]


def embed_audio(bundle: ModelBundle, signal: AudioSignal, bits, strength: float | None = None) -> EmbedResult:
    s = bundle.strength if strength is None else float(strength)
    if s < 0:
        raise ValueError("strength must be non-negative")
    payload = _payload(bits, bundle.watermark_length)
    _check_audio(bundle, signal)
    segs = np.stack([seg.samples for seg in segment(signal, bundle.segment_length)])
    chunk = payload[np.arange(len(segs)) % len(payload)]
    out = embed_coefficients(bundle, segs, chunk, s).reshape(-1)[: len(signal.samples)]
    marked = signal.with_samples(out)
    return EmbedResult(marked, snr(signal.samples, out), len(segs), s)


def _decode_batch(bundle: ModelBundle, segments: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(segments), batch):
        a, _ = analysis(segments[i : i + batch, None, :])
        out.append(bundle.decode(a.astype(bundle.dtype)).data[:, 0, :].astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, bundle.watermark_length))


def _full_segments(samples: np.ndarray, n: int) -> np.ndarray:
    count = len(samples) // n
    return samples[: count * n].reshape(count, n)


def _vote(soft_segments: np.ndarray, chunks: int) -> np.ndarray:
    """Average soft values over segments carrying the same chunk -> (chunks*L,)."""
    count, L = soft_segments.shape
    votes = np.zeros((chunks, L))
    for c in range(chunks):
        rows = soft_segments[c::chunks]
        if len(rows):
            votes[c] = rows.mean(axis=0)
    return votes.reshape(-1)


def _shifted(samples: np.ndarray, shift: int) -> np.ndarray:
    return samples[shift:] if shift >= 0 else np.concatenate([np.zeros(-shift), samples])


def extract_audio(
    bundle: ModelBundle,
    signal: AudioSignal,
    sync: SyncConfig | None = None,
    truth=None,
    chunks: int | None = None,
    batch: int = 64,
) -> ExtractResult:
    """Decode the payload, optionally searching over sample shifts.

    With ``truth`` the shift maximising bit accuracy is chosen; without it the
    shift maximising mean |soft value| (a confidence proxy, not ground truth).
    Ties go to the earliest candidate, so with ``truth`` the search stops at
    the first perfect match; ``searched`` counts the shifts actually decoded.
    """
    n = bundle.segment_length
    truth_bits = _payload(truth, bundle.watermark_length).reshape(-1) if truth is not None else None
    if chunks is None:
        chunks = len(truth_bits) // bundle.watermark_length if truth_bits is not None else 1
    if chunks < 1:
        raise ValueError("chunks must be >= 1")
    if signal.sample_rate != bundle.sample_rate:
        warnings.warn(
            f"audio sample rate {signal.sample_rate} Hz differs from the model's {bundle.sample_rate} Hz",
            stacklevel=2,
        )
    samples = np.asarray(signal.samples, dtype=np.float64)
    shifts = sync.candidates() if sync is not None else [0]
    usable = [k for k in shifts if len(_shifted(samples, k)) >= n]
    if not usable:
        raise ValueError(f"audio has {len(samples)} samples; at least {n} are needed after shifting")

    best = None
    decoded = 0
    # evaluate shifts in groups so each decoder call sees a reasonably large batch
    group = max(1, batch // max(1, len(samples) // n))
    for g in range(0, len(usable), group):
        cand = usable[g : g + group]
        segs = [_full_segments(_shifted(samples, k), n) for k in cand]
        soft_all = _decode_batch(bundle, np.concatenate(segs), batch)
        decoded += len(cand)
        pos = 0
        for k, s in zip(cand, segs):
            soft = _vote(soft_all[pos : pos + len(s)], chunks)
            pos += len(s)
            bits = np.where(soft >= 0, 1.0, -1.0)
            score = bit_accuracy(truth_bits, bits) if truth_bits is not None else float(np.mean(np.abs(soft)))
            if best is None or score > best[0]:
                best = (score, k, soft, bits, len(s))
        if truth_bits is not None and best[0] == 1.0:
            break  # nothing beats perfect accuracy and ties keep the first shift
    score, k, soft, bits, count = best
    return ExtractResult(
        bits=bits,
        soft=soft,
        n_segments=count,
        shift=k,
        accuracy=score if truth_bits is not None else None,
        heuristic=sync is not None and truth_bits is None,
        searched=decoded,
    )
