"""Weight/activation quantizers, straight-through gradients and ternary weight splitting.

Scales are reduced in float64 and rounded once to the working dtype.  That
keeps the lattice bit-stable: re-quantizing an already quantized tensor, or
summing the two halves of a split ternary weight, reproduces the original
values exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, straight_through

FULL_PRECISION = "full_precision"
BINARY = "binary"
TERNARY = "ternary"
UNIFORM4 = "uniform4"
KINDS = (FULL_PRECISION, BINARY, TERNARY, UNIFORM4)

TERNARY_THRESHOLD = 0.7
UNIFORM4_LEVELS = 7

BITS = {FULL_PRECISION: 32, BINARY: 1, TERNARY: 2, UNIFORM4: 4}


class QuantizationWarning(UserWarning):
    """A quantizer met degenerate input (e.g. an all-zero tensor)."""


@dataclass(frozen=True)
class QuantSpec:
    kind: str = FULL_PRECISION
    ste_clip: float = 1.0
    granularity: str = "per_tensor"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown quantizer kind {self.kind!r}; expected one of {KINDS}")
        if not self.ste_clip > 0:
            raise ValueError("ste_clip must be > 0")
        if self.granularity != "per_tensor":
            raise ValueError("only per_tensor granularity is supported")

    @property
    def bits(self) -> int:
        return BITS[self.kind]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ste_clip": self.ste_clip}

    @classmethod
    def from_dict(cls, d) -> "QuantSpec":
        if isinstance(d, str):
            return cls(kind=d)
        return cls(kind=d.get("kind", FULL_PRECISION), ste_clip=float(d.get("ste_clip", 1.0)))


def _check_nonempty(x: np.ndarray, op: str) -> None:
    if x.size == 0:
        raise ValueError(f"{op}: empty tensor")


def binarize(latent) -> tuple[np.ndarray, float]:
    """``scale * sign(latent)`` with ``scale = mean|latent|`` and ``sign(0) = +1``."""
    w = np.asarray(latent)
    _check_nonempty(w, "binarize")
    dtype = w.dtype.type if np.issubdtype(w.dtype, np.floating) else np.float32
    scale = dtype(np.abs(w).mean(dtype=np.float64))
    if scale == 0:
        warnings.warn("binarize: all-zero latent, scale is 0", QuantizationWarning, stacklevel=2)
        return np.zeros(w.shape, dtype=dtype), 0.0
    q = np.where(w >= 0, scale, -scale).astype(dtype)
    return q, float(scale)


def ternarize(latent) -> tuple[np.ndarray, float]:
    """Zero entries with ``|w| <= 0.7 mean|w|``; survivors become ``scale * sign(w)``.

    ``scale`` is the mean magnitude of the survivors.
    """
    w = np.asarray(latent)
    _check_nonempty(w, "ternarize")
    dtype = w.dtype.type if np.issubdtype(w.dtype, np.floating) else np.float32
    mag = np.abs(w).astype(np.float64)
    delta = TERNARY_THRESHOLD * mag.mean()
    keep = mag > delta
    if not keep.any():
        warnings.warn("ternarize: no entry exceeds the threshold", QuantizationWarning, stacklevel=2)
        return np.zeros(w.shape, dtype=dtype), 0.0
    scale = dtype(mag[keep].mean())
    q = np.where(keep, np.where(w >= 0, scale, -scale), 0).astype(dtype)
    return q, float(scale)


def quantize_uniform4(x, mask=None, axes=None) -> tuple[np.ndarray, np.ndarray | float]:
    """Symmetric 15-level quantization: ``clip(round(x / s), -7, 7) * s``, ``s = max|x| / 7``.

    ``axes`` selects the reduction for the scale (all axes by default, i.e.
    one scale per tensor); ``mask`` (broadcastable to ``x``) excludes entries
    such as padding from the max.  An all-zero slice uses ``s = 1``.
    """
    x = np.asarray(x)
    _check_nonempty(x, "quantize_uniform4")
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    mag = np.abs(x).astype(np.float64)
    if mask is not None:
        mag = mag * np.broadcast_to(np.asarray(mask, dtype=np.float64), x.shape)
    if axes is None:
        mx = np.asarray(mag.max())
    else:
        mx = mag.max(axis=axes, keepdims=True)
    mx = np.where(mx > 0, mx, float(UNIFORM4_LEVELS))
    k = np.clip(np.round(x.astype(np.float64) * UNIFORM4_LEVELS / mx), -UNIFORM4_LEVELS, UNIFORM4_LEVELS)
    s = mx / UNIFORM4_LEVELS
    q = (k * s).astype(dtype)
    return q, (float(s) if np.ndim(s) == 0 else s)


def ste_backward(upstream_grad, latent, spec: QuantSpec, scale=None) -> np.ndarray:
    """Straight-through gradient for ``spec``.

    Weight quantizers (binary/ternary) use the hard-tanh window
    ``|latent| <= ste_clip``.  The uniform4 activation quantizer passes the
    gradient inside its clipping range ``[-7 s, 7 s]``; ``scale`` is ``s``.
    """
    g = np.asarray(upstream_grad)
    w = np.asarray(latent)
    if g.shape != w.shape:
        raise ValueError(f"ste_backward: shape mismatch {g.shape} vs {w.shape}")
    return g * _ste_mask(w, spec, scale)


def _ste_mask(w: np.ndarray, spec: QuantSpec, scale=None) -> np.ndarray:
    if spec.kind == FULL_PRECISION:
        return np.ones(w.shape, dtype=bool)
    if spec.kind == UNIFORM4:
        if scale is None:
            _, scale = quantize_uniform4(w)
        return np.abs(w) <= UNIFORM4_LEVELS * np.asarray(scale) * (1 + 1e-6)
    return np.abs(w) <= spec.ste_clip


_QUANTIZERS = {BINARY: binarize, TERNARY: ternarize}


def quantize_weight(latent: Tensor, spec: QuantSpec) -> Tensor:
    """Differentiable view of a weight under ``spec`` (identity for full precision)."""
    if spec.kind == FULL_PRECISION:
        return latent
    if spec.kind == UNIFORM4:
        q, s = quantize_uniform4(latent.data)
        return straight_through(latent, q, _ste_mask(latent.data, spec, s))
    q, _ = _QUANTIZERS[spec.kind](latent.data)
    mask = None if np.isinf(spec.ste_clip) else np.abs(latent.data) <= spec.ste_clip
    return straight_through(latent, q, mask)


def quantize_activation(x: Tensor, mask=None, axes=None) -> Tensor:
    """uniform4 fake-quantization of an activation with a straight-through gradient."""
    q, s = quantize_uniform4(x.data, mask=mask, axes=axes)
    inside = np.abs(x.data) <= UNIFORM4_LEVELS * np.asarray(s) * (1 + 1e-6)
    return straight_through(x, q, inside)


@dataclass
class QuantizedParam:
    """Latent master weights plus the rule deriving their quantized view.

    The scale is recomputed from the latent on every access, so updates to
    the latent are always reflected.
    """

    latent: Tensor
    spec: QuantSpec

    def quantize(self) -> tuple[np.ndarray, float]:
        if self.spec.kind == FULL_PRECISION:
            return self.latent.data, 1.0
        if self.spec.kind == UNIFORM4:
            return quantize_uniform4(self.latent.data)
        return _QUANTIZERS[self.spec.kind](self.latent.data)

    @property
    def quantized(self) -> np.ndarray:
        return self.quantize()[0]

    @property
    def scale(self) -> float:
        return self.quantize()[1]

    def forward(self) -> Tensor:
        return quantize_weight(self.latent, self.spec)


def split_latents(latent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a ternary latent into two binary latents that re-binarize exactly.

    With ternary values in ``{-a, 0, +a}`` and ``b = a / 2``:
    ``+a -> (+b, +b)``, ``-a -> (-b, -b)``, and ``0 -> (+b, -b)`` on odd
    flattened indices, ``(-b, +b)`` on even ones.  Every split latent has
    magnitude exactly ``b``, so ``mean|latent|`` recovers ``b`` bit-exactly
    and ``binarize(a) + binarize(b)`` equals the ternary tensor.
    """
    w = np.asarray(latent)
    q, alpha = ternarize(w)
    dtype = q.dtype
    beta = dtype.type(alpha) / dtype.type(2)
    if beta * dtype.type(2) != dtype.type(alpha):
        # only subnormal scales lose their last bit when halved
        raise ValueError(f"split_latents: ternary scale {alpha!r} cannot be halved exactly in {dtype}")
    flat = q.reshape(-1)
    odd = np.arange(flat.size) % 2 == 1
    sign_a = np.where(flat > 0, 1, np.where(flat < 0, -1, np.where(odd, 1, -1)))
    sign_b = -sign_a * (flat == 0) + sign_a * (flat != 0)
    a = (sign_a * beta).astype(dtype).reshape(w.shape)
    b = (sign_b * beta).astype(dtype).reshape(w.shape)
    return a, b


def ternary_weight_split(param: QuantizedParam) -> tuple[QuantizedParam, QuantizedParam]:
    """Replace a ternary parameter by two binary ones whose quantized sum is identical."""
    if param.spec.kind != TERNARY:
        raise ValueError(f"ternary_weight_split expects a ternary parameter, got {param.spec.kind!r}")
    a, b = split_latents(param.latent.data)
    spec = QuantSpec(BINARY, ste_clip=param.spec.ste_clip)
    return (QuantizedParam(Tensor(a, requires_grad=param.latent.requires_grad), spec),
            QuantizedParam(Tensor(b, requires_grad=param.latent.requires_grad), spec))
