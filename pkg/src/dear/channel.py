"""Re-recording distortion layer and the evaluation-time attack suite.

The differentiable path works on engine tensors shaped ``(..., length)``:
environment reverberation (convolution with an impulse response), band-pass
filtering (high-pass then low-pass, linear-phase FIR), and audio-aware Gaussian
noise, composed as noise(bandpass(reverb(x))). The enhanced distortion set adds
resampling, sample dropout, amplitude scaling, 8-bit requantization and a
3-tap median filter; requantization uses a straight-through gradient and the
median filter routes the gradient to the selected element.

``attack`` applies the same operations (plus MP3 through an external codec) to
plain audio for evaluation.
"""

from __future__ import annotations

import logging
import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve, firwin

from .engine import Tensor, linear_map, mul_scalar, straight_through
from .signal import AudioSignal, load_wav, save_wav

log = logging.getLogger(__name__)

REFERENCE_RATE = 44100
REFERENCE_TAPS = 511
ENHANCED_OPS = ("resample", "dropout", "amplitude", "requantize", "median_filter")


class AttackError(ValueError):
    pass


class CodecUnavailable(RuntimeError):
    pass


# impulse responses -------------------------------------------------------------

@dataclass(frozen=True)
class ImpulseResponse:
    taps: np.ndarray
    sample_rate: int
    source: str = "synthetic"

    def __post_init__(self):
        h = np.asarray(self.taps, dtype=np.float64).ravel()
        if h.size == 0:
            raise ValueError("impulse response is empty")
        if not np.all(np.isfinite(h)):
            raise ValueError("impulse response taps must be finite")
        peak = np.max(np.abs(h))
        if peak == 0:
            raise ValueError("impulse response is all zero")
        h = h / peak
        h.setflags(write=False)
        object.__setattr__(self, "taps", h)

    def __len__(self) -> int:
        return self.taps.size


@dataclass(frozen=True)
class IrSet:
    responses: tuple[ImpulseResponse, ...]
    seed: int = 0

    def __post_init__(self):
        if not self.responses:
            raise ValueError("IR set must not be empty")

    def __len__(self) -> int:
        return len(self.responses)

    def sample(self, rng: np.random.Generator) -> ImpulseResponse:
        return self.responses[int(rng.integers(len(self.responses)))]


def decay_envelope(t: np.ndarray, rt60: float) -> np.ndarray:
    """Amplitude envelope reaching -60 dB at t = rt60."""
    return 10.0 ** (-3.0 * np.asarray(t) / rt60)


def synth_ir(
    rng: np.random.Generator,
    length: int,
    rt60: float,
    sample_rate: int = REFERENCE_RATE,
    tail_level: float = 0.1,
) -> ImpulseResponse:
    """Unit direct path followed by an exponentially decaying Gaussian tail.

    ``tail_level`` is the tail's standard deviation right after the direct
    path, relative to the direct tap.
    """
    if length < 1:
        raise ValueError("IR length must be >= 1")
    if rt60 <= 0:
        raise ValueError("rt60 must be positive")
    t = np.arange(length) / sample_rate
    h = tail_level * rng.standard_normal(length) * decay_envelope(t, rt60)
    h[0] = 1.0
    return ImpulseResponse(h, sample_rate, "synthetic")


def synthetic_ir_set(
    count: int = 16,
    seed: int = 0,
    length: int = 4096,
    rt60_range=(0.05, 0.15),
    sample_rate: int = REFERENCE_RATE,
    tail_level: float = 0.1,
) -> IrSet:
    rng = np.random.default_rng(seed)
    irs = tuple(
        synth_ir(rng, length, float(rng.uniform(*rt60_range)), sample_rate, tail_level) for _ in range(count)
    )
    return IrSet(irs, seed)


def load_ir_dir(path, max_len: int = 4096, seed: int = 0) -> IrSet:
    """Each WAV file in ``path`` becomes one impulse response (truncated to ``max_len``)."""
    files = sorted(Path(path).glob("*.wav"))
    irs = []
    for f in files:
        sig = load_wav(f)
        irs.append(ImpulseResponse(sig.samples[:max_len], sig.sample_rate, str(f)))
    if not irs:
        raise ValueError(f"no impulse responses found in {path}")
    return IrSet(tuple(irs), seed)


# config --------------------------------------------------------------------------

@dataclass(frozen=True)
class DistortionConfig:
    highpass: float = 1000.0
    lowpass: float = 4000.0
    noise_snr_range: tuple[float, float] = (20.0, 25.0)
    ir_set: IrSet | None = None
    enhanced_ops: tuple[str, ...] = ()
    sample_rate: int = REFERENCE_RATE
    reverb: bool = True
    bandpass: bool = True
    noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.highpass < self.lowpass < self.sample_rate / 2:
            raise ValueError(
                f"need 0 < highpass < lowpass < fs/2, got {self.highpass}, {self.lowpass}, fs={self.sample_rate}"
            )
        lo, hi = self.noise_snr_range
        if lo > hi:
            raise ValueError("noise_snr_range must be (min, max)")
        unknown = set(self.enhanced_ops) - set(ENHANCED_OPS) - {"dar"}
        if unknown:
            raise ValueError(f"unknown distortion tags: {sorted(unknown)}")
        if self.reverb and self.ir_set is None:
            object.__setattr__(self, "ir_set", synthetic_ir_set(sample_rate=self.sample_rate, seed=self.seed))

    def without(self, component: str) -> "DistortionConfig":
        """Copy with one of ``reverb``, ``bandpass`` or ``noise`` disabled."""
        if component not in ("reverb", "bandpass", "noise"):
            raise ValueError(component)
        return replace(self, **{component: False})


# filters ---------------------------------------------------------------------------

def _fir_taps(sample_rate: int) -> int:
    n = int(round(REFERENCE_TAPS * sample_rate / REFERENCE_RATE))
    return max(n | 1, 3)


def lowpass_kernel(cutoff: float, sample_rate: int, taps: int | None = None) -> np.ndarray:
    """Hamming-windowed sinc low-pass with unit DC gain."""
    taps = taps or _fir_taps(sample_rate)
    m = np.arange(taps) - (taps - 1) / 2
    fc = cutoff / sample_rate
    h = 2 * fc * np.sinc(2 * fc * m) * np.hamming(taps)
    return h / h.sum()


def highpass_kernel(cutoff: float, sample_rate: int, taps: int | None = None) -> np.ndarray:
    """Spectral inversion of the matching low-pass."""
    h = -lowpass_kernel(cutoff, sample_rate, taps)
    h[(h.size - 1) // 2] += 1.0
    return h


def _conv_full(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    kernel = h.reshape((1,) * (x.ndim - 1) + (-1,))
    return fftconvolve(x, kernel, axes=-1).astype(x.dtype, copy=False)


def _conv_same(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    c = (h.size - 1) // 2
    return _conv_full(x, h)[..., c : c + x.shape[-1]]


def _conv_head(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    return _conv_full(x, h)[..., : x.shape[-1]]


def _conv_head_adjoint(g: np.ndarray, h: np.ndarray) -> np.ndarray:
    k = h.size
    return _conv_full(g, h[::-1])[..., k - 1 : k - 1 + g.shape[-1]]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def fir_filter(x: Tensor, kernel: np.ndarray, name: str = "fir") -> Tensor:
    """Zero-phase application of an odd-length symmetric FIR (delay compensated)."""
    if kernel.size % 2 == 0:
        raise ValueError("linear-phase kernel must have odd length")
    if not np.allclose(kernel, kernel[::-1]):
        raise ValueError("kernel must be symmetric")
    # a symmetric kernel with centred cropping is self-adjoint
    return linear_map(x, lambda v: _conv_same(v, kernel), lambda g: _conv_same(g, kernel), name)


# differentiable distortions ------------------------------------------------------

def env_reverb(audio, ir: ImpulseResponse) -> Tensor:
    """Convolve with the impulse response, keeping the first N samples."""
    h = ir.taps
    return linear_map(_as_tensor(audio), lambda v: _conv_head(v, h), lambda g: _conv_head_adjoint(g, h), "reverb")


def band_pass(audio, alpha: float, beta: float, sample_rate: int = REFERENCE_RATE) -> Tensor:
    """High-pass at ``alpha`` Hz then low-pass at ``beta`` Hz."""
    if not 0 < alpha < beta < sample_rate / 2:
        raise ValueError(f"need 0 < alpha < beta < fs/2, got {alpha}, {beta}")
    x = fir_filter(_as_tensor(audio), highpass_kernel(alpha, sample_rate), "highpass")
    return fir_filter(x, lowpass_kernel(beta, sample_rate), "lowpass")


def gaussian_noise(audio, target_snr_db: float, rng: np.random.Generator) -> Tensor:
    """Add white noise scaled so that signal power / noise power hits the target.

    The noise scale depends on the input's mean power, and that dependence is
    part of the gradient.
    """
    x = _as_tensor(audio)
    if math.isinf(target_snr_db) and target_snr_db > 0:
        return x
    power = np.mean(x.data**2, axis=-1, keepdims=True)
    if np.any(power == 0):
        raise ValueError("cannot calibrate noise on all-zero audio")
    k = 10.0 ** (target_snr_db / 10.0)
    sigma = np.sqrt(power / k)
    omega = rng.standard_normal(x.shape).astype(x.dtype)
    n = x.shape[-1]

    def backward(g):
        proj = np.sum(g * omega, axis=-1, keepdims=True)
        return (g + proj * x.data / (n * k * sigma),)

    return Tensor.from_op(x.data + sigma * omega, (x,), backward, "gaussian_noise")


def dar(audio, config: DistortionConfig, rng: np.random.Generator) -> Tensor:
    """Simulated re-recording: noise(bandpass(reverb(audio)))."""
    x = _as_tensor(audio)
    if config.reverb:
        x = env_reverb(x, config.ir_set.sample(rng))
    if config.bandpass:
        x = band_pass(x, config.highpass, config.lowpass, config.sample_rate)
    if config.noise:
        lo, hi = config.noise_snr_range
        x = gaussian_noise(x, float(rng.uniform(lo, hi)), rng)
    return x


def _resample_kernel(up: int, down: int) -> np.ndarray:
    half = 10 * max(up, down)
    return firwin(2 * half + 1, 1.0 / max(up, down), window=("kaiser", 5.0)) * up


def _upfirdn_centered(x: np.ndarray, up: int, down: int, h: np.ndarray, n_out: int) -> np.ndarray:
    v = np.zeros(x.shape[:-1] + (x.shape[-1] * up,), dtype=x.dtype)
    v[..., ::up] = x
    w = _conv_full(v, h)
    half = (h.size - 1) // 2
    idx = half + down * np.arange(n_out)
    out = np.zeros(x.shape[:-1] + (n_out,), dtype=x.dtype)
    ok = idx < w.shape[-1]
    out[..., ok] = w[..., idx[ok]]
    return out


def _upfirdn_centered_adjoint(g: np.ndarray, up: int, down: int, h: np.ndarray, n_in: int) -> np.ndarray:
    k = h.size
    half = (k - 1) // 2
    n_v = n_in * up
    w = np.zeros(g.shape[:-1] + (n_v + k - 1,), dtype=g.dtype)
    idx = half + down * np.arange(g.shape[-1])
    ok = idx < w.shape[-1]
    w[..., idx[ok]] = g[..., ok]
    v = _conv_full(w, h[::-1])[..., k - 1 : k - 1 + n_v]
    return v[..., ::up]


def _resample_roundtrip(up: int, down: int, n: int):
    """Linear map (and adjoint) of resampling by up/down and back, cropped to n samples."""
    h1 = _resample_kernel(up, down)
    h2 = _resample_kernel(down, up)
    m = -(-n * up // down)
    m2 = -(-m * down // up)

    def fwd(v):
        y = _upfirdn_centered(v, up, down, h1, m)
        z = _upfirdn_centered(y, down, up, h2, m2)
        return _fit_length(z, n)

    def adj(g):
        gz = _fit_length(g, m2)
        gy = _upfirdn_centered_adjoint(gz, down, up, h2, m)
        return _upfirdn_centered_adjoint(gy, up, down, h1, n)

    return fwd, adj


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if x.shape[-1] >= n:
        return x[..., :n]
    out = np.zeros(x.shape[:-1] + (n,), dtype=x.dtype)
    out[..., : x.shape[-1]] = x
    return out


def resample(audio, ratio: float = 0.9) -> Tensor:
    """Resample to ``ratio`` times the rate and back (rational, polyphase)."""
    x = _as_tensor(audio)
    frac = _ratio(ratio)
    fwd, adj = _resample_roundtrip(frac[0], frac[1], x.shape[-1])
    return linear_map(x, fwd, adj, "resample")


def _ratio(ratio: float) -> tuple[int, int]:
    from fractions import Fraction

    f = Fraction(ratio).limit_denominator(1000)
    if f <= 0:
        raise ValueError("resample ratio must be positive")
    return f.numerator, f.denominator


def dropout(audio, every: int = 100) -> Tensor:
    """Zero the last sample of each complete run of ``every`` samples."""
    x = _as_tensor(audio)
    n = x.shape[-1]
    mask = np.ones(n, dtype=x.dtype)
    mask[every - 1 : (n // every) * every : every] = 0
    return linear_map(x, lambda v: v * mask, lambda g: g * mask, "dropout")


def amplitude(audio, scale: float = 0.9) -> Tensor:
    return mul_scalar(_as_tensor(audio), scale)


def _quantize(v: np.ndarray, bits: int) -> np.ndarray:
    levels = 2 ** (bits - 1)
    return np.clip(np.round(v * levels), -levels, levels - 1) / levels


def requantize(audio, bits: int = 8) -> Tensor:
    """Round to a signed ``bits``-bit grid; straight-through gradient."""
    return straight_through(_as_tensor(audio), lambda v: _quantize(v, bits), "requantize")


def median_filter(audio, window: int = 3) -> Tensor:
    """Running median with zero padding; the gradient goes to the chosen element."""
    if window < 1 or window % 2 == 0:
        raise ValueError("median window must be odd and positive")
    x = _as_tensor(audio)
    r = window // 2
    n = x.shape[-1]
    pad = [(0, 0)] * (x.data.ndim - 1) + [(r, r)]
    xp = np.pad(x.data, pad)
    win = sliding_window_view(xp, window, axis=-1)
    pick = np.argsort(win, axis=-1, kind="stable")[..., r]
    out = np.take_along_axis(win, pick[..., None], axis=-1)[..., 0]
    src = np.arange(n) + pick  # index into xp

    def backward(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        flat = gp.reshape(-1, xp.shape[-1])
        s = src.reshape(-1, n)
        rows = np.broadcast_to(np.arange(flat.shape[0])[:, None], s.shape)
        np.add.at(flat, (rows, s), g.reshape(-1, n))
        return (gp[..., r : r + n],)

    return Tensor.from_op(out, (x,), backward, "median_filter")


_ENHANCED = {
    "resample": lambda x, cfg, rng: resample(x, 0.9),
    "dropout": lambda x, cfg, rng: dropout(x, 100),
    "amplitude": lambda x, cfg, rng: amplitude(x, 0.9),
    "requantize": lambda x, cfg, rng: requantize(x, 8),
    "median_filter": lambda x, cfg, rng: median_filter(x, 3),
    "dar": lambda x, cfg, rng: dar(x, cfg, rng),
}


def enhanced_sample(audio, config: DistortionConfig, rng: np.random.Generator) -> tuple[Tensor, str]:
    """Pick one distortion uniformly from DAR plus ``config.enhanced_ops``."""
    if not config.enhanced_ops:
        raise ValueError("enhanced_ops is empty")
    choices = ["dar"] + [op for op in config.enhanced_ops if op != "dar"]
    tag = choices[int(rng.integers(len(choices)))]
    return _ENHANCED[tag](audio, config, rng), tag


# evaluation-time attacks ---------------------------------------------------------

@dataclass
class AttackSpec:
    name: str
    params: dict = field(default_factory=dict)

    def label(self) -> str:
        if not self.params:
            return self.name
        return self.name + ":" + ",".join(f"{k}={v}" for k, v in self.params.items())


_ALIASES = {
    "gaussian": "gaussian_noise",
    "noise": "gaussian_noise",
    "median": "median_filter",
    "rerecord": "simulated_rerecording",
    "dar": "simulated_rerecording",
    "hp": "highpass",
    "lp": "lowpass",
    "none": "identity",
}

# positional value -> key for "name:value" shorthands
_POSITIONAL = {
    "gaussian_noise": "snr",
    "highpass": "cutoff",
    "lowpass": "cutoff",
    "resample": "ratio",
    "dropout": "every",
    "amplitude": "scale",
    "requantize": "bits",
    "median_filter": "window",
    "mp3": "bitrate",
    "simulated_rerecording": "snr",
}

ATTACK_NAMES = (
    "identity",
    "gaussian_noise",
    "band_pass",
    "highpass",
    "lowpass",
    "resample",
    "dropout",
    "amplitude",
    "requantize",
    "median_filter",
    "simulated_rerecording",
    "mp3",
)


def _number(text: str):
    t = text.strip().lower()
    for suffix in ("db", "khz", "hz", "kbps", "k", "bits", "bit", "%"):
        if t.endswith(suffix):
            num = float(t[: -len(suffix)])
            if suffix == "khz":
                return num * 1000
            if suffix == "%":
                return num / 100
            return num
    try:
        return float(t)
    except ValueError:
        return text.strip()


def parse_attack(text: str) -> AttackSpec:
    """Parse ``name`` / ``name:value`` / ``name:key=value,key=value``."""
    name, _, rest = text.strip().partition(":")
    name = name.strip().lower().replace("-", "_")
    name = _ALIASES.get(name, name)
    if name == "bandpass":
        name = "band_pass"
    if name not in ATTACK_NAMES:
        raise AttackError(f"unknown attack {name!r}; known: {', '.join(ATTACK_NAMES)}")
    params = {}
    for part in filter(None, (p.strip() for p in rest.split(","))):
        if "=" in part:
            k, _, v = part.partition("=")
            params[k.strip()] = _number(v)
        elif name in _POSITIONAL and _POSITIONAL[name] not in params:
            params[_POSITIONAL[name]] = _number(part)
        else:
            raise AttackError(f"cannot interpret parameter {part!r} for {name}")
    return AttackSpec(name, params)


def attack(audio: AudioSignal, spec, seed: int = 0, ir_set: IrSet | None = None) -> AudioSignal:
    """Apply a named attack to raw audio (not differentiable)."""
    if isinstance(spec, str):
        spec = parse_attack(spec)
    p = spec.params
    fs = audio.sample_rate
    x = audio.samples
    rng = np.random.default_rng(seed)
    name = spec.name
    if name == "identity":
        y = x.copy()
    elif name == "gaussian_noise":
        y = gaussian_noise(x, float(p.get("snr", 20.0)), rng).data
    elif name == "band_pass":
        y = band_pass(x, float(p.get("low", 1000.0)), float(p.get("high", 4000.0)), fs).data
    elif name == "highpass":
        y = fir_filter(Tensor(x), highpass_kernel(float(p.get("cutoff", 1000.0)), fs)).data
    elif name == "lowpass":
        y = fir_filter(Tensor(x), lowpass_kernel(float(p.get("cutoff", 4000.0)), fs)).data
    elif name == "resample":
        y = resample(x, float(p.get("ratio", 0.9))).data
    elif name == "dropout":
        y = dropout(x, int(p.get("every", 100))).data
    elif name == "amplitude":
        y = amplitude(x, float(p.get("scale", 0.9))).data
    elif name == "requantize":
        y = requantize(x, int(p.get("bits", 8))).data
    elif name == "median_filter":
        y = median_filter(x, int(p.get("window", 3))).data
    elif name == "simulated_rerecording":
        irs = ir_set
        src = p.get("ir", "synthetic")
        if src != "synthetic" and irs is None:
            irs = load_ir_dir(src, seed=seed)
        cfg = DistortionConfig(
            highpass=float(p.get("low", 1000.0)),
            lowpass=float(p.get("high", 4000.0)),
            noise_snr_range=(float(p["snr"]),) * 2 if "snr" in p else (20.0, 25.0),
            ir_set=irs,
            sample_rate=fs,
            seed=int(p.get("ir_seed", 0)),
        )
        y = dar(x, cfg, rng).data
    elif name == "mp3":
        y = mp3_roundtrip(audio, int(p.get("bitrate", 128))).samples
    else:  # pragma: no cover - parse_attack guards the name
        raise AttackError(name)
    return AudioSignal(np.asarray(y, dtype=np.float64), fs)


MP3_ENV = "DEAR_MP3_CMD"


def mp3_roundtrip(audio: AudioSignal, bitrate: int) -> AudioSignal:
    """Encode and decode through the shell command template in ``$DEAR_MP3_CMD``.

    The template receives ``{input}``, ``{output}`` (both WAV paths) and
    ``{bitrate}`` (kbps), e.g.
    ``ffmpeg -loglevel error -y -i {input} -b:a {bitrate}k /tmp/x.mp3 && ffmpeg -loglevel error -y -i /tmp/x.mp3 {output}``.
    """
    template = os.environ.get(MP3_ENV)
    if not template:
        raise CodecUnavailable(f"mp3 attack needs an external codec command in ${MP3_ENV}")
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "in.wav"
        dst = Path(tmp) / "out.wav"
        save_wav(audio, src, encoding="pcm16")
        cmd = template.format(input=shlex.quote(str(src)), output=shlex.quote(str(dst)), bitrate=bitrate)
        proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
        if proc.returncode != 0 or not dst.exists():
            raise CodecUnavailable(f"codec command failed ({proc.returncode}): {proc.stderr.strip()[:200]}")
        out = load_wav(dst)
    y = _fit_length(out.samples, len(audio))
    return AudioSignal(y, audio.sample_rate)
