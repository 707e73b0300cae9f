"""Affine quantization of layer updates to unsigned 8/16/32-bit codes."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

BIT_WIDTHS = (8, 16, 32)
_CODE_DTYPES = {8: np.dtype("<u1"), 16: np.dtype("<u2"), 32: np.dtype("<u4")}
_HEADER = struct.Struct("<IIddddQ")


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    s: float
    z0: float
    q_min: int
    q_max: int
    bits: int
    x_min: float
    x_max: float


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    q: np.ndarray
    params: QuantParams
    layer_index: int = 0

    @property
    def element_count(self) -> int:
        return int(self.q.size)


def derive_quant_params(x_min: float, x_max: float, bits: int = 8) -> QuantParams:
    """Scale by the three-case rule and a real-valued, clamped zero-point."""
    if bits not in BIT_WIDTHS:
        raise ValueError(f"bits must be one of {BIT_WIDTHS}, got {bits}")
    x_min, x_max = float(x_min), float(x_max)
    if not (np.isfinite(x_min) and np.isfinite(x_max)):
        raise ValueError("range bounds must be finite")
    if x_min > x_max:
        raise ValueError(f"x_min={x_min} exceeds x_max={x_max}")
    q_min, q_max = 0, 2**bits - 1
    span = q_max - q_min
    if x_max == x_min == 0.0:
        s = 1.0 / span
    elif x_max == x_min:
        s = x_min / span
        if s < 0:
            raise ValueError("degenerate negative range gives a negative scale")
    else:
        s = (x_max - x_min) / span
    z0 = min(max(q_min - x_min / s, q_min), q_max)
    return QuantParams(s, z0, q_min, q_max, bits, x_min, x_max)


def quantize(x, params: QuantParams, layer_index: int = 0) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("cannot quantize NaN")
    q = round_half_away(x / params.s + params.z0)
    q = np.clip(q, params.q_min, params.q_max)
    return QuantizedTensor(q.astype(_CODE_DTYPES[params.bits]), params, layer_index)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    p = qt.params
    return p.s * (qt.q.astype(np.float64) - p.z0)


def dequantize_codes(codes, params: QuantParams) -> np.ndarray:
    """Dequantize real-valued codes, e.g. an average of several clients' codes."""
    return params.s * (np.asarray(codes, dtype=np.float64) - params.z0)


def to_bytes(qt: QuantizedTensor) -> bytes:
    p = qt.params
    head = _HEADER.pack(qt.layer_index, p.bits, p.s, p.z0, p.x_min, p.x_max, qt.element_count)
    return head + qt.q.astype(_CODE_DTYPES[p.bits]).tobytes()


def from_bytes(data: bytes) -> QuantizedTensor:
    if len(data) < _HEADER.size:
        raise ValueError("truncated quantized tensor")
    layer, bits, s, z0, x_min, x_max, count = _HEADER.unpack_from(data)
    if bits not in BIT_WIDTHS:
        raise ValueError(f"bad bit width {bits}")
    dtype = _CODE_DTYPES[bits]
    body = data[_HEADER.size :]
    if len(body) != count * dtype.itemsize:
        raise ValueError("code payload length does not match element count")
    params = QuantParams(s, z0, 0, 2**bits - 1, bits, x_min, x_max)
    return QuantizedTensor(np.frombuffer(body, dtype=dtype).copy(), params, layer)


def payload_nbytes(element_count: int, bits: int) -> int:
    """Wire size of one quantized layer, header included."""
    return _HEADER.size + element_count * bits // 8
