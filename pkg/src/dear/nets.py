"""Encoder, decoder and discriminator networks plus the model bundle.

All three are 1-D fully convolutional stacks over approximate DWT
coefficients. The watermark enters the encoder as a second input channel:
bits tiled over the coefficient length, then multiplied by a keyed +-1 chip
sequence. The decoder undoes that spreading after its first conv stack, so a
block mean of its features correlates against the key. With ``chip_key=None``
the chips are all ones and the plain tiling scheme is used.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine as E
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .engine import Adam, Tensor
from .signal import Watermark

FORMAT_VERSION = 1
CLAMP_LO, CLAMP_HI = 1e-6, 1 - 1e-6


@dataclass
class Architecture:
    channels: int = 16
    kernel: int = 9
    encoder_blocks: int = 4
    decoder_blocks: int = 4
    decoder_downsample: int = 4
    discriminator_blocks: int = 3
    discriminator_downsample: int = 1
    slope: float = 0.2
    skip: bool = True

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")


def block_bounds(length: int, blocks: int) -> np.ndarray:
    """Start offsets (plus the end) of ``blocks`` contiguous blocks covering ``length``.

    The first ``length % blocks`` blocks get one extra element.
    """
    if blocks < 1 or blocks > length:
        raise ValueError(f"cannot split length {length} into {blocks} blocks")
    base, extra = divmod(length, blocks)
    sizes = np.full(blocks, base)
    sizes[:extra] += 1
    return np.concatenate([[0], np.cumsum(sizes)])


def fuse_watermark(w, target_length: int) -> np.ndarray:
    """Tile the bits over ``target_length`` positions in contiguous, order-preserving blocks."""
    bits = w.bits if isinstance(w, Watermark) else np.asarray(w, dtype=np.float64)
    if bits.ndim == 1:
        bits = bits[None]
    L = bits.shape[-1]
    if L > target_length:
        raise ValueError(f"watermark length {L} exceeds target length {target_length}")
    sizes = np.diff(block_bounds(target_length, L))
    return np.repeat(bits, sizes, axis=-1)


def chip_sequence(key: int | None, length: int) -> np.ndarray:
    if key is None:
        return np.ones(length)
    return np.random.default_rng(key).choice(np.array([-1.0, 1.0]), size=length)


def blockwise_mean(x: Tensor, blocks: int) -> Tensor:
    """Mean over balanced blocks of the length axis (see ``block_bounds``)."""
    n = x.shape[-1]
    if n % blocks == 0:
        return E.block_mean(x, blocks)
    bounds = block_bounds(n, blocks)
    sizes = np.diff(bounds)
    out = np.add.reduceat(x.data, bounds[:-1], axis=-1) / sizes
    shape = x.shape

    def backward(g):
        return (np.repeat(g / sizes, sizes, axis=-1).reshape(shape),)

    return Tensor.from_op(out, (x,), backward, "block_mean")


class ConvNet:
    """Parameter container with named conv layers."""

    def __init__(self):
        self.layers: dict[str, tuple[Tensor, Tensor]] = {}

    def _add(self, name, c_out, c_in, k, rng, dtype):
        self.layers[name] = E.conv_init(c_out, c_in, k, rng, dtype, name)

    def conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w, b = self.layers[name]
        return E.conv1d(x, w, b, stride=stride)

    def parameters(self) -> list[Tensor]:
        return [p for pair in self.layers.values() for p in pair]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}


class Encoder(ConvNet):
    def __init__(self, arch: Architecture, rng, dtype=np.float32):
        super().__init__()
        self.arch = arch
        c, k = arch.channels, arch.kernel
        extra = 2 if arch.skip else 0
        for i in range(arch.encoder_blocks):
            c_in = 2 if i == 0 else c + extra
            self._add(f"enc{i}", c, c_in, k, rng, dtype)
        self._add("enc_out", 1, c + extra, k, rng, dtype)

    def __call__(self, a_ac: Tensor, spread_bits: Tensor) -> Tensor:
        x0 = E.concat_channels([a_ac, spread_bits])
        h = x0
        for i in range(self.arch.encoder_blocks):
            if i > 0 and self.arch.skip:
                h = E.concat_channels([h, x0])
            h = E.leaky_relu(self.conv(f"enc{i}", h), self.arch.slope)
        if self.arch.skip:
            h = E.concat_channels([h, x0])
        return E.tanh(self.conv("enc_out", h))


class Decoder(ConvNet):
    def __init__(self, arch: Architecture, rng, dtype=np.float32):
        super().__init__()
        self.arch = arch
        c, k = arch.channels, arch.kernel
        extra = 1 if arch.skip else 0
        for i in range(arch.decoder_blocks):
            self._add(f"dec{i}", c, 1 if i == 0 else c + extra, k, rng, dtype)
        for i in range(arch.decoder_downsample):
            self._add(f"down{i}", c, c, k, rng, dtype)
        self._add("dec_out", 1, c, 1, rng, dtype)

    def min_length(self, bits: int) -> int:
        return bits * 2**self.arch.decoder_downsample

    def __call__(self, a_ac: Tensor, chips: np.ndarray | None, bits: int) -> Tensor:
        n = a_ac.shape[-1]
        if n < self.min_length(bits):
            raise ValueError(
                f"decoder input of length {n} is too short for {bits} bits "
                f"(needs >= {self.min_length(bits)})"
            )
        h = a_ac
        for i in range(self.arch.decoder_blocks):
            if i > 0 and self.arch.skip:
                h = E.concat_channels([h, a_ac])
            h = E.leaky_relu(self.conv(f"dec{i}", h), self.arch.slope)
        if chips is not None:
            h = E.mul(h, Tensor(np.broadcast_to(chips.astype(h.dtype), h.shape)))
        for i in range(self.arch.decoder_downsample):
            h = E.leaky_relu(self.conv(f"down{i}", h, stride=2), self.arch.slope)
        h = self.conv("dec_out", h)
        return E.tanh(blockwise_mean(h, bits))


class Discriminator(ConvNet):
    """Outputs a probability per item. Trained with the losses as written, it
    scores watermark-free coefficients high."""

    def __init__(self, arch: Architecture, rng, dtype=np.float32):
        super().__init__()
        self.arch = arch
        c, k = arch.channels, arch.kernel
        for i in range(arch.discriminator_blocks):
            self._add(f"dis{i}", c, 1 if i == 0 else c, k, rng, dtype)
        for i in range(arch.discriminator_downsample):
            self._add(f"dis_down{i}", c, c, k, rng, dtype)
        self._add("dis_out", 1, c, 1, rng, dtype)

    def __call__(self, a_ac: Tensor) -> Tensor:
        h = a_ac
        for i in range(self.arch.discriminator_blocks):
            h = E.leaky_relu(self.conv(f"dis{i}", h), self.arch.slope)
        for i in range(self.arch.discriminator_downsample):
            h = E.leaky_relu(self.conv(f"dis_down{i}", h, stride=2), self.arch.slope)
        h = E.mean_over_length(self.conv("dis_out", h))
        return E.sigmoid(h)


@dataclass
class ModelBundle:
    encoder: Encoder
    decoder: Decoder
    discriminator: Discriminator
    arch: Architecture
    watermark_length: int = 16
    segment_length: int = 16384
    sample_rate: int = 44100
    strength: float = 1.0
    chip_key: int | None = 7
    wavelet: str = "haar"
    version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strength <= 0:
            raise ValueError("strength factor must be positive")
        if self.watermark_length < 1:
            raise ValueError("watermark length must be >= 1")
        if self.segment_length % 2:
            raise ValueError("segment length must be even")
        if self.watermark_length > self.segment_length // 2:
            raise ValueError("watermark length exceeds N/2")

    @classmethod
    def create(
        cls,
        arch: Architecture | None = None,
        watermark_length: int = 16,
        segment_length: int = 16384,
        seed: int = 0,
        dtype=np.float32,
        **kwargs,
    ) -> "ModelBundle":
        arch = arch or Architecture()
        rng = np.random.default_rng(seed)
        return cls(
            Encoder(arch, rng, dtype),
            Decoder(arch, rng, dtype),
            Discriminator(arch, rng, dtype),
            arch,
            watermark_length,
            segment_length,
            **kwargs,
        )

    @property
    def coeff_length(self) -> int:
        return self.segment_length // 2

    @property
    def dtype(self):
        return self.encoder.parameters()[0].dtype

    def chips(self, length: int | None = None) -> np.ndarray:
        return chip_sequence(self.chip_key, length or self.coeff_length)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for net in (self.encoder, self.decoder, self.discriminator):
            out.update(net.named_parameters())
        return out

    def architecture_descriptor(self) -> dict:
        return {
            "arch": asdict(self.arch),
            "watermark_length": self.watermark_length,
            "segment_length": self.segment_length,
            "sample_rate": self.sample_rate,
            "strength": self.strength,
            "chip_key": self.chip_key,
            "wavelet": self.wavelet,
            "version": self.version,
            "meta": self.meta,
        }

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)

    # inference -----------------------------------------------------------------

    def _coeffs(self, a_ac) -> Tensor:
        if isinstance(a_ac, Tensor):
            return a_ac
        a = np.asarray(a_ac, dtype=self.dtype)
        while a.ndim < 3:
            a = a[None]
        return Tensor(a)

    def spread_bits(self, bits: np.ndarray, length: int) -> np.ndarray:
        """(batch, L) bits -> (batch, 1, length) spread watermark channel."""
        tiled = fuse_watermark(np.atleast_2d(bits), length)
        return (tiled * self.chips(length))[:, None, :].astype(self.dtype)

    def encode_residual(self, a_ac, w) -> Tensor:
        """Encoder residual in [-1, 1], same shape as the coefficients."""
        a = self._coeffs(a_ac)
        bits = _bits_array(w)
        n = a.shape[-1]
        if bits.shape[-1] > n:
            raise ValueError(f"watermark length {bits.shape[-1]} exceeds coefficient length {n}")
        if bits.shape[0] != a.shape[0]:
            bits = np.broadcast_to(bits, (a.shape[0], bits.shape[-1]))
        return self.encoder(a, Tensor(self.spread_bits(bits, n)))

    def embed(self, a_ac, w, strength: float | None = None) -> Tensor:
        """Watermarked coefficients ``S * En(a, w) + a``."""
        s = self.strength if strength is None else float(strength)
        if s < 0:
            raise ValueError("strength must be non-negative")
        a = self._coeffs(a_ac)
        if s == 0:
            return a
        return E.add(E.mul_scalar(self.encode_residual(a, w), s), a)

    def decode(self, a_ac) -> Tensor:
        a = self._coeffs(a_ac)
        chips = self.chips(a.shape[-1]) if self.chip_key is not None else None
        return self.decoder(a, chips, self.watermark_length)

    def discriminate(self, a_ac, clamp: bool = True) -> Tensor:
        p = self.discriminator(self._coeffs(a_ac))
        return E.clamp(p, CLAMP_LO, CLAMP_HI) if clamp else p


def _bits_array(w) -> np.ndarray:
    if isinstance(w, Watermark):
        return w.bits[None]
    if isinstance(w, (list, tuple)) and w and isinstance(w[0], Watermark):
        return np.stack([x.bits for x in w])
    return np.atleast_2d(np.asarray(w, dtype=np.float64))


# persistence -------------------------------------------------------------------


def save_bundle(bundle: ModelBundle, path, optimizers: dict | None = None, extra: dict | None = None) -> None:
    """Write the bundle (and optionally Adam states keyed by group) to ``path``."""
    tensors = {name: p.data for name, p in bundle.named_parameters().items()}
    meta = {"bundle": bundle.architecture_descriptor(), "optimizers": {}, "extra": extra or {}}
    for group, opt in (optimizers or {}).items():
        meta["optimizers"][group] = {
            "step_count": opt.step_count,
            "lr": opt.lr,
            "betas": [opt.beta1, opt.beta2],
            "eps": opt.eps,
            "params": [p.name for p in opt.params],
        }
        for p, m, v in zip(opt.params, opt.m, opt.v):
            tensors[f"adam/{group}/m/{p.name}"] = m
            tensors[f"adam/{group}/v/{p.name}"] = v
    save_checkpoint(path, tensors, meta)


def load_bundle(path, dtype=np.float32) -> tuple[ModelBundle, dict]:
    """Read a bundle; returns it with the raw metadata (optimizer info, extras)."""
    tensors, meta = load_checkpoint(path)
    try:
        desc = meta["bundle"]
        arch = Architecture(**desc["arch"])
        bundle = ModelBundle.create(
            arch,
            desc["watermark_length"],
            desc["segment_length"],
            dtype=dtype,
            sample_rate=desc["sample_rate"],
            strength=desc["strength"],
            chip_key=desc["chip_key"],
            wavelet=desc["wavelet"],
            meta=desc.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint metadata is not a model bundle: {exc}") from exc
    if desc.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported model format version {desc.get('version')}")
    for name, p in bundle.named_parameters().items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(
                f"tensor {name} has shape {tensors[name].shape}, architecture expects {p.shape}"
            )
        p.data = tensors[name].astype(dtype)
    meta["tensors"] = tensors
    return bundle, meta


def restore_optimizer(opt: Adam, group: str, meta: dict) -> None:
    """Load Adam moments and step count saved by ``save_bundle`` into ``opt``."""
    info = meta["optimizers"].get(group)
    if info is None:
        raise CheckpointError(f"checkpoint has no optimizer state for {group!r}")
    tensors = meta["tensors"]
    opt.step_count = int(info["step_count"])
    for i, p in enumerate(opt.params):
        opt.m[i] = tensors[f"adam/{group}/m/{p.name}"].astype(p.dtype)
        opt.v[i] = tensors[f"adam/{group}/v/{p.name}"].astype(p.dtype)
