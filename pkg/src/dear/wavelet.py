"""Single-level orthonormal Haar DWT and its inverse.

Both transforms are orthonormal linear maps, so each one's adjoint (used for
backpropagation) is the other transform. The array functions act on the last
axis; ``dwt_op``/``idwt_op`` wrap them as differentiable tensor ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np

from .engine import Tensor, linear_map
from .signal import AudioSignal

SQRT_HALF = math.sqrt(0.5)  # Python float keeps the input dtype
WAVELETS = ("haar",)


@dataclass(frozen=True)
class CoefficientPair:
    approx: np.ndarray
    detail: np.ndarray
    source_length: int

    def __post_init__(self):
        if self.source_length % 2:
            raise ValueError("source_length must be even")
        if self.approx.shape[-1] != self.source_length // 2 or self.detail.shape != self.approx.shape:
            raise ValueError(
                f"coefficient lengths {self.approx.shape}/{self.detail.shape} "
                f"do not match source_length {self.source_length}"
            )


def analysis(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if x.shape[-1] % 2:
        raise ValueError(f"DWT needs an even length, got {x.shape[-1]}")
    even, odd = x[..., 0::2], x[..., 1::2]
    return (even + odd) * SQRT_HALF, (even - odd) * SQRT_HALF


def synthesis(approx: np.ndarray, detail: np.ndarray) -> np.ndarray:
    if approx.shape != detail.shape:
        raise ValueError(f"mismatched coefficient shapes {approx.shape} and {detail.shape}")
    out = np.empty(approx.shape[:-1] + (2 * approx.shape[-1],), dtype=np.result_type(approx, detail))
    out[..., 0::2] = (approx + detail) * SQRT_HALF
    out[..., 1::2] = (approx - detail) * SQRT_HALF
    return out


def dwt(signal) -> CoefficientPair:
    x = signal.samples if isinstance(signal, AudioSignal) else np.asarray(signal, dtype=np.float64)
    a, d = analysis(x)
    return CoefficientPair(a, d, x.shape[-1])


def idwt(coeffs: CoefficientPair, sample_rate: int | None = None):
    x = synthesis(coeffs.approx, coeffs.detail)
    if sample_rate is not None:
        return AudioSignal(x, sample_rate)
    return x


# Backward passes. Orthonormality makes each adjoint the opposite transform.
def dwt_backward(grad_approx: np.ndarray, grad_detail: np.ndarray) -> np.ndarray:
    return synthesis(grad_approx, grad_detail)


def idwt_backward(grad_signal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return analysis(grad_signal)


def dwt_op(x: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable DWT of a tensor along its length axis."""
    both = linear_map(
        x,
        lambda v: np.concatenate(analysis(v), axis=-2),
        lambda g: _split_backward(g),
        name="dwt",
    )
    c = x.shape[-2]
    return both[..., :c, :], both[..., c:, :]


def _split_backward(g: np.ndarray) -> np.ndarray:
    c = g.shape[-2] // 2
    return dwt_backward(g[..., :c, :], g[..., c:, :])


def idwt_op(approx: Tensor, detail: Tensor) -> Tensor:
    """Differentiable IDWT; gradients flow to both coefficient tensors."""
    from .engine import concat_channels

    both = concat_channels([approx, detail])
    c = approx.shape[-2]
    return linear_map(
        both,
        lambda v: synthesis(v[..., :c, :], v[..., c:, :]),
        lambda g: np.concatenate(idwt_backward(g), axis=-2),
        name="idwt",
    )
