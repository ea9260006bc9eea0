"""Per-tensor affine and scale quantization.

Integers live in ``[-2**(b-1), 2**(b-1) - 1]``. Rounding is round-to-nearest
with ties away from zero. Training uses affine fake quantization with a
straight-through estimator; inference uses scale quantization so that a
convolution becomes an integer convolution followed by one multiply.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from qstdb.errors import ConfigurationError, InternalError
from qstdb.tensor_core import ConvGeometry, conv2d_forward, conv3d_forward

EPS = 1e-12
SCHEMES = ("affine", "scale")


@dataclass(frozen=True)
class QuantParams:
    scheme: str
    bits: int
    scale: float
    zero_point: int
    w_min: float
    w_max: float

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(str(d["scheme"]), int(d["bits"]), float(d["scale"]), int(d["zero_point"]),
                   float(d["w_min"]), float(d["w_max"]))


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def calibrate_params(t, bits: int, scheme: str = "affine") -> QuantParams:
    """Derive per-tensor parameters from the tensor's current extrema."""
    if bits < 2:
        raise ConfigurationError(f"bit width must be >= 2, got {bits}")
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown quantization scheme {scheme!r}")
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise ConfigurationError("cannot calibrate quantization on an empty tensor")
    w_min, w_max = float(t.min()), float(t.max())
    alpha = max(abs(w_min), abs(w_max), EPS)
    if scheme == "scale":
        return QuantParams("scale", bits, (2 ** (bits - 1) - 1) / alpha, 0, w_min, w_max)
    lo, hi = w_min, w_max
    if hi - lo < EPS:
        # (near-)constant tensor: symmetric range around zero that still contains the values
        lo, hi = -alpha, alpha
    s = (2**bits - 1) / (hi - lo)
    z = int(-(2 ** (bits - 1)) - round_half_away(s * lo))
    return QuantParams("affine", bits, s, z, w_min, w_max)


def quantize(w, p: QuantParams) -> np.ndarray:
    q = round_half_away(p.scale * np.asarray(w, dtype=np.float64)) + p.zero_point
    return np.clip(q, p.qmin, p.qmax).astype(np.int64)


def dequantize(q, p: QuantParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) - p.zero_point) / p.scale


def fake_quantize(w, p: QuantParams) -> np.ndarray:
    return dequantize(quantize(w, p), p)


def ste_backward(grad, w, p: QuantParams) -> np.ndarray:
    """Straight-through gradient: identity inside [w_min, w_max], zero outside."""
    w = np.asarray(w)
    inside = (w >= p.w_min) & (w <= p.w_max)
    return np.where(inside, grad, 0.0)


def _int_conv(xq, wq, geom: ConvGeometry):
    xq = np.asarray(xq, dtype=np.int64)
    wq = np.asarray(wq, dtype=np.int64)
    fan_in = geom.in_channels * int(np.prod(geom.kernel))
    bound = int(np.abs(xq).max(initial=0)) * int(np.abs(wq).max(initial=0)) * fan_in
    if bound >= 2**63:
        raise InternalError(f"integer accumulator overflow: worst-case sum {bound} exceeds int64")
    conv = conv3d_forward if geom.ndim == 3 else conv2d_forward
    return conv(xq, wq, geom)


def scale_quantized_conv(xq, wq, s_x: float, s_w: float, geom: ConvGeometry) -> np.ndarray:
    """Integer convolution of quantized tensors followed by one scaling by 1/(s_x*s_w).

    For hidden spiking layers ``xq`` is the binary spike tensor and ``s_x = 1``.
    """
    acc = _int_conv(xq, wq, geom)
    return acc.astype(np.float64) * (1.0 / (s_x * s_w))


def affine_quantized_conv(xq, wq, px: QuantParams, pw: QuantParams, geom: ConvGeometry) -> np.ndarray:
    """Affine-quantized convolution via the three-term integer expansion.

    ``(Xq*Wq - Zx*(Wq - Zw) - Xq*Zw) / (sx*sw)``. The last term depends on the
    runtime activations, which is the inference overhead scale quantization avoids.
    """
    xq = np.asarray(xq, dtype=np.int64)
    wq = np.asarray(wq, dtype=np.int64)
    zx = np.full_like(xq, px.zero_point)
    zw = np.full_like(wq, pw.zero_point)
    num = _int_conv(xq, wq, geom) - _int_conv(zx, wq - zw, geom) - _int_conv(xq, zw, geom)
    return num.astype(np.float64) / (px.scale * pw.scale)


def fake_quantize_tensor(w, bits: int | None, scheme: str = "affine"):
    """Calibrate on ``w`` and fake-quantize it; ``bits=None`` is a pass-through."""
    if bits is None:
        return np.asarray(w, dtype=np.float64), None
    p = calibrate_params(w, bits, scheme)
    return fake_quantize(w, p), p
