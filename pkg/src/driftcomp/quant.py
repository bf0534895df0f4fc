"""Symmetric fake quantization for weights and activations.

The backbone weights are post-training quantized to a symmetric,
zero-inclusive integer grid (codes in [-(2^(b-1)-1), +(2^(b-1)-1)]) with an
affine scale per tensor or per output channel. Weight code 0 therefore maps
exactly to the midpoint of the conductance range. Activations are
quantize-dequantized on the fly against their own max.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

_ALLOWED_BITS = range(2, 9)


@dataclass(frozen=True)
class QuantScheme:
    """Bit widths and granularity of the fake-quantization grid."""

    weight_bits: int = 4
    act_bits: int = 4
    symmetric: bool = True
    per: str = "tensor"  # "tensor" | "output-channel"

    def __post_init__(self):
        for name in ("weight_bits", "act_bits"):
            bits = getattr(self, name)
            if bits not in _ALLOWED_BITS:
                raise DomainError(f"{name}={bits} outside supported range 2..8")
        if not self.symmetric:
            raise DomainError("only symmetric quantization is supported")
        if self.per not in ("tensor", "output-channel"):
            raise DomainError(f"unknown granularity {self.per!r}")


def qmax(bits: int) -> int:
    """Largest code on the symmetric grid, e.g. 7 for 4 bits."""
    return 2 ** (bits - 1) - 1


@dataclass
class QuantizedTensor:
    """Integer weight codes plus their affine scale.

    ``scale`` is a scalar for per-tensor granularity or a 1-D array with one
    entry per output channel (axis 0 of ``codes``).
    """

    codes: np.ndarray
    scale: np.ndarray
    bits: int = 4

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int8)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        limit = qmax(self.bits)
        if self.codes.size and (self.codes.max() > limit or self.codes.min() < -limit):
            raise DomainError(f"codes exceed the +-{limit} grid for {self.bits} bits")
        if np.any(self.scale <= 0):
            raise DomainError("scale must be strictly positive")

    @property
    def shape(self) -> tuple:
        return self.codes.shape

    def _scale_col(self) -> np.ndarray:
        """Scale broadcast against the codes (per-channel along axis 0)."""
        if self.scale.ndim == 0:
            return self.scale
        return self.scale.reshape((-1,) + (1,) * (self.codes.ndim - 1))

    def w_absmax(self) -> float:
        """Largest magnitude the grid can represent (max over channels)."""
        return float(np.max(self.scale) * qmax(self.bits))

    def w_absmax_per_channel(self):
        """Grid limit per output channel, broadcastable against the codes.

        With per-tensor scale this is a scalar; with per-channel scale each
        output channel gets its own conductance range, which keeps the
        relative drift damage uniform across channels of unequal magnitude.
        """
        limit = self.scale * qmax(self.bits)
        if limit.ndim == 0:
            return float(limit)
        return limit.reshape((-1,) + (1,) * (self.codes.ndim - 1))


def calibrate_scale(w: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Scale = max|w| / qmax per granularity unit; 1.0 for all-zero tensors."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise DomainError("cannot calibrate an empty tensor")
    levels = qmax(scheme.weight_bits)
    if scheme.per == "tensor":
        peak = np.max(np.abs(w))
        return np.float64(peak / levels if peak > 0 else 1.0)
    peak = np.abs(w).reshape(w.shape[0], -1).max(axis=1)
    scale = peak / levels
    scale[peak == 0] = 1.0
    return scale


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round is banker's rounding; the grid contract is half-away-from-zero.
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(w: np.ndarray, scale: np.ndarray, scheme: QuantScheme) -> QuantizedTensor:
    """Snap real weights to integer codes, clamping to the grid."""
    w = np.asarray(w, dtype=np.float64)
    scale_arr = np.asarray(scale, dtype=np.float64)
    if np.any(scale_arr <= 0):
        raise DomainError("scale must be strictly positive")
    col = scale_arr if scale_arr.ndim == 0 else scale_arr.reshape(
        (-1,) + (1,) * (w.ndim - 1)
    )
    limit = qmax(scheme.weight_bits)
    codes = np.clip(_round_half_away(w / col), -limit, limit)
    return QuantizedTensor(codes=codes, scale=scale_arr, bits=scheme.weight_bits)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """codes * scale as float64."""
    return q.codes.astype(np.float64) * q._scale_col()


def fake_quant_activation(
    x: np.ndarray, bits: int, *, axis: tuple | None = None
) -> np.ndarray:
    """Quantize-dequantize activations symmetrically against their max.

    With ``axis=None`` the scale comes from the whole tensor (the batch max).
    Model forwards pass per-sample reduction axes instead so results do not
    depend on how an evaluation set was batched.
    """
    if bits not in _ALLOWED_BITS:
        raise DomainError(f"act bits={bits} outside supported range 2..8")
    x = np.asarray(x)
    levels = qmax(bits)
    peak = np.max(np.abs(x), axis=axis, keepdims=axis is not None)
    scale = np.where(peak > 0, peak / levels, 1.0)
    return _round_half_away(x / scale) * scale
