"""Affine integer quantization with a straight-through estimator.

A quantization grid is a learned/fitted pair (scale s, offset b) over a signed
n-bit code range.  Fake quantization keeps FP-32 storage:

    q  = clamp(round(W / s + b), qmin, qmax)
    W~ = s * (q - b)

Real quantization packs the integer codes (1, 2 or 4 codes per byte for
n = 8/4/2, low bits first) behind a small little-endian header; dequantizing a
packed tensor reproduces fake quantization bit-for-bit because both paths
share the same code and reconstruction arithmetic.  Scale/offset are snapped
to FP-32-representable values at fit time so serialization is lossless.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, record_op

SUPPORTED_BITS = (2, 4, 8)


@dataclass(frozen=True)
class QuantSpec:
    """Signed n-bit affine grid: codes in [-2^(n-1), 2^(n-1)-1]."""

    bits: int
    scale: float
    offset: float

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"quant spec: bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"quant spec: scale must be positive and finite, got {self.scale}")
        if not np.isfinite(self.offset):
            raise ValueError(f"quant spec: offset must be finite, got {self.offset}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def num_levels(self) -> int:
        return 1 << self.bits


def _f32(x: float) -> float:
    """Snap to the nearest FP-32 value (headers store scale/offset as f32)."""
    return float(np.float32(x))


def fit_affine_params(w: np.ndarray, bits: int) -> QuantSpec:
    """Min/max fit: scale spans the value range, offset maps min(W) to qmin.

    A constant tensor degenerates to scale 1 and offset -W[0], putting every
    code at zero.
    """
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("fit_affine_params: empty tensor")
    if not np.all(np.isfinite(w)):
        raise ValueError("fit_affine_params: non-finite values")
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"fit_affine_params: bits must be one of {SUPPORTED_BITS}, got {bits}")
    lo = float(w.min())
    hi = float(w.max())
    qmin = -(1 << (bits - 1))
    qmax = (1 << (bits - 1)) - 1
    scale = _f32((hi - lo) / (qmax - qmin))
    if scale <= 0.0:  # constant tensor (or a range below FP-32 resolution)
        return QuantSpec(bits=bits, scale=1.0, offset=_f32(-float(w.flat[0])))
    offset = _f32(qmin - lo / scale)
    return QuantSpec(bits=bits, scale=scale, offset=offset)


def quant_codes(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Clamped half-to-even rounded codes, in the input's float dtype."""
    w = np.asarray(w)
    return np.clip(np.round(w / spec.scale + spec.offset), spec.qmin, spec.qmax)


def _reconstruct(codes: np.ndarray, spec: QuantSpec) -> np.ndarray:
    # single shared expression => fake and real paths agree bit-for-bit
    return (codes - spec.offset) * spec.scale


def fake_quantize(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Quantize-dequantize in FP storage; idempotent for a fixed spec."""
    return _reconstruct(quant_codes(w, spec), spec)


def ste_mask(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """True where the rounded (pre-clamp) code stays inside [qmin, qmax]."""
    raw = np.round(np.asarray(w) / spec.scale + spec.offset)
    return (raw >= spec.qmin) & (raw <= spec.qmax)


def ste_backward(grad_out: np.ndarray, w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Straight-through gradient: pass where unclamped, zero where clamped."""
    grad_out = np.asarray(grad_out)
    return np.where(ste_mask(w, spec), grad_out, 0.0).astype(grad_out.dtype, copy=False)


# ---------------------------------------------------------------------------
# real (packed) quantization

_HEADER = struct.Struct("<BffB")  # bits, scale, offset, rank


@dataclass
class PackedTensor:
    """Integer codes plus the grid needed to reconstruct FP-32 values."""

    shape: tuple
    codes: np.ndarray  # int8, flat, one entry per element
    spec: QuantSpec

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        n = int(np.prod(self.shape)) if self.shape else 1
        if self.codes.size != n:
            raise ValueError(f"packed tensor: {self.codes.size} codes for shape {self.shape}")

    def nbytes(self) -> int:
        return len(self.to_bytes())

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(self.spec.bits, self.spec.scale, self.spec.offset, len(self.shape))
        dims = struct.pack(f"<{len(self.shape)}I", *self.shape) if self.shape else b""
        return head + dims + _pack_codes(self.codes, self.spec.bits)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PackedTensor":
        if len(blob) < _HEADER.size:
            raise ValueError("packed tensor: truncated header")
        bits, scale, offset, rank = _HEADER.unpack_from(blob, 0)
        pos = _HEADER.size
        if len(blob) < pos + 4 * rank:
            raise ValueError("packed tensor: truncated dims")
        shape = struct.unpack_from(f"<{rank}I", blob, pos) if rank else ()
        pos += 4 * rank
        spec = QuantSpec(bits=bits, scale=float(scale), offset=float(offset))
        n = int(np.prod(shape)) if shape else 1
        codes = _unpack_codes(blob[pos:], bits, n)
        if codes.size and (codes.min() < spec.qmin or codes.max() > spec.qmax):
            raise ValueError("packed tensor: code out of range for bit width")
        return cls(shape=tuple(shape), codes=codes, spec=spec)


def _pack_codes(codes: np.ndarray, bits: int) -> bytes:
    per_byte = 8 // bits
    u = (codes.astype(np.int16) & ((1 << bits) - 1)).astype(np.uint8)
    if per_byte == 1:
        return codes.astype("<i1").tobytes()
    pad = (-len(u)) % per_byte
    if pad:
        u = np.concatenate([u, np.zeros(pad, dtype=np.uint8)])
    u = u.reshape(-1, per_byte)
    out = np.zeros(len(u), dtype=np.uint8)
    for j in range(per_byte):  # low bits first
        out |= u[:, j] << (bits * j)
    return out.tobytes()


def _unpack_codes(blob: bytes, bits: int, n: int) -> np.ndarray:
    per_byte = 8 // bits
    need = (n + per_byte - 1) // per_byte if per_byte > 1 else n
    if len(blob) < need:
        raise ValueError("packed tensor: truncated codes")
    if per_byte == 1:
        return np.frombuffer(blob[:n], dtype="<i1").copy()
    raw = np.frombuffer(blob[:need], dtype=np.uint8)
    mask = (1 << bits) - 1
    parts = [(raw >> (bits * j)) & mask for j in range(per_byte)]
    u = np.stack(parts, axis=1).reshape(-1)[:n].astype(np.int16)
    sign = 1 << (bits - 1)
    return ((u ^ sign) - sign).astype(np.int8)


def real_quantize(w: np.ndarray, spec: QuantSpec) -> PackedTensor:
    w = np.asarray(w)
    codes = quant_codes(w, spec).astype(np.int8).reshape(-1)
    return PackedTensor(shape=w.shape, codes=codes, spec=spec)


def dequantize(packed: PackedTensor) -> np.ndarray:
    codes = packed.codes.astype(np.float32)
    return _reconstruct(codes, packed.spec).reshape(packed.shape)


# ---------------------------------------------------------------------------
# autodiff ops


def fake_quantize_op(w: Tensor, spec: QuantSpec) -> Tensor:
    """Fake quantization as a graph op with the clamp-masked STE backward."""
    mask = ste_mask(w.data, spec)

    def bwd(g):
        return (np.where(mask, g, 0.0).astype(g.dtype, copy=False),)

    return record_op("fake_quantize", (w,), fake_quantize(w.data, spec), bwd,
                     lambda v: fake_quantize(v, spec))


def fake_quantize_learned(w: Tensor, scale: Tensor, offset: Tensor, bits: int) -> Tensor:
    """Fake quantization with trainable scalar scale/offset.

    The rounded code is treated as locally constant, so d/ds = (q - b),
    d/db = -s, and the weight gradient is the usual clamp-masked pass-through.
    """
    if scale.shape != () or offset.shape != ():
        raise ValueError("fake_quantize_learned: scale and offset must be scalars")
    s = float(scale.data)
    b = float(offset.data)
    spec = QuantSpec(bits=bits, scale=s, offset=b)
    codes = quant_codes(w.data, spec)
    mask = ste_mask(w.data, spec)
    out = (codes - b) * s

    def bwd(g):
        gw = np.where(mask, g, 0.0).astype(g.dtype, copy=False)
        gs = np.asarray(np.sum(g * (codes - b)), dtype=scale.dtype)
        gb = np.asarray(np.sum(g) * (-s), dtype=offset.dtype)
        return gw, gs, gb

    def fwd(wv, sv, bv):
        sp = QuantSpec(bits=bits, scale=float(sv), offset=float(bv))
        return (quant_codes(wv, sp) - float(bv)) * float(sv)

    return record_op("fake_quantize_learned", (w, scale, offset), out, bwd, fwd)
