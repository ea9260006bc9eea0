"""Dense forward/backward kernels on float64 numpy arrays.

Every kernel accepts either a single sample or a batch with a leading sample
axis. Convolutions are cross-correlations (no kernel flip) and carry no bias.
Kernel axis order for 3-D convolution is (spectral, height, width).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from qstdb.errors import ConfigurationError

_AXES3 = ("spectral", "height", "width")
_AXES2 = ("height", "width")


def _triple(v, n):
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(a) for a in v)
    if len(v) != n:
        raise ConfigurationError(f"expected {n} values, got {v}")
    return v


@dataclass(frozen=True)
class ConvGeometry:
    """Kernel/stride/padding of a convolution plus its channel counts.

    ``kernel`` has three entries (spectral, height, width) for a 3-D
    convolution and two (height, width) for a 2-D one.
    """

    kernel: tuple
    stride: tuple
    padding: tuple
    in_channels: int
    out_channels: int

    def __post_init__(self):
        n = len(self.kernel)
        if n not in (2, 3):
            raise ConfigurationError(f"kernel must have 2 or 3 extents, got {self.kernel}")
        object.__setattr__(self, "kernel", _triple(self.kernel, n))
        object.__setattr__(self, "stride", _triple(self.stride, n))
        object.__setattr__(self, "padding", _triple(self.padding, n))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigurationError(f"invalid geometry {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError(f"channel counts must be positive: {self}")

    @property
    def ndim(self) -> int:
        return len(self.kernel)

    @classmethod
    def for_weights(cls, w: np.ndarray, stride=1, padding=0) -> "ConvGeometry":
        n = w.ndim - 2
        return cls(tuple(w.shape[2:]), _triple(stride, n), _triple(padding, n), w.shape[1], w.shape[0])

    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels) + self.kernel

    def output_extents(self, extents) -> tuple:
        names = _AXES3 if self.ndim == 3 else _AXES2
        out = []
        for name, n, k, s, p in zip(names, extents, self.kernel, self.stride, self.padding):
            o = (n + 2 * p - k) // s + 1
            if n + 2 * p < k or o < 1:
                raise ConfigurationError(
                    f"{name} axis: input extent {n} with padding {p} is smaller than kernel {k}"
                )
            out.append(o)
        return tuple(out)


def _check_conv(x: np.ndarray, w: np.ndarray, geom: ConvGeometry, ndim: int):
    if geom.ndim != ndim:
        raise ConfigurationError(f"expected a {ndim}-D geometry, got kernel {geom.kernel}")
    if w.shape != geom.weight_shape():
        raise ConfigurationError(f"weight shape {w.shape} does not match geometry {geom.weight_shape()}")
    if x.ndim not in (ndim + 1, ndim + 2):
        raise ConfigurationError(f"input must have {ndim + 1} or {ndim + 2} axes, got shape {x.shape}")
    batched = x.ndim == ndim + 2
    xb = x if batched else x[None]
    if xb.shape[1] != geom.in_channels:
        raise ConfigurationError(f"channel axis: input has {xb.shape[1]} channels, weights expect {geom.in_channels}")
    return xb, batched


def _windows(xp: np.ndarray, kernel, stride, out_ext):
    """Strided view [B, C, Do, Ho, Wo, kz, kx, ky] over a padded 5-D input."""
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    sz, sx, sy = stride
    dz, dx, dy = out_ext
    return win[:, :, : dz * sz : sz, : dx * sx : sx, : dy * sy : sy]


def _pad3(xb: np.ndarray, padding):
    pz, px, py = padding
    if pz == px == py == 0:
        return xb
    return np.pad(xb, ((0, 0), (0, 0), (pz, pz), (px, px), (py, py)))


def conv3d_forward(x: np.ndarray, w: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """3-D cross-correlation of ``x`` [(B,) C, D, H, W] with ``w`` [Co, Ci, kz, kx, ky]."""
    xb, batched = _check_conv(x, w, geom, 3)
    out_ext = geom.output_extents(xb.shape[2:])
    win = _windows(_pad3(xb, geom.padding), geom.kernel, geom.stride, out_ext)
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # [B, Do, Ho, Wo, Co]
    out = np.ascontiguousarray(np.moveaxis(out, 4, 1))
    return out if batched else out[0]


def conv3d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray, geom: ConvGeometry):
    """Adjoint of :func:`conv3d_forward`; returns ``(grad_input, grad_weight)``."""
    xb, batched = _check_conv(x, w, geom, 3)
    out_ext = geom.output_extents(xb.shape[2:])
    gb = grad if batched else grad[None]
    expected = (xb.shape[0], geom.out_channels) + out_ext
    if gb.shape != expected:
        raise ConfigurationError(f"upstream gradient shape {gb.shape} != forward output shape {expected}")
    xp = _pad3(xb, geom.padding)
    win = _windows(xp, geom.kernel, geom.stride, out_ext)
    gw = np.tensordot(gb, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # [Co, Ci, kz, kx, ky]

    cols = np.tensordot(gb, w, axes=([1], [0]))  # [B, Do, Ho, Wo, Ci, kz, kx, ky]
    cols = np.moveaxis(cols, 4, 1)  # [B, Ci, Do, Ho, Wo, kz, kx, ky]
    gxp = np.zeros_like(xp)
    sz, sx, sy = geom.stride
    dz, dx, dy = out_ext
    kz, kx, ky = geom.kernel
    for i in range(kz):
        for j in range(kx):
            for k in range(ky):
                gxp[:, :, i : i + dz * sz : sz, j : j + dx * sx : sx, k : k + dy * sy : sy] += cols[..., i, j, k]
    pz, px, py = geom.padding
    gx = gxp[:, :, pz : gxp.shape[2] - pz, px : gxp.shape[3] - px, py : gxp.shape[4] - py]
    gx = np.ascontiguousarray(gx)
    return (gx if batched else gx[0]), gw


def _geom3(geom: ConvGeometry) -> ConvGeometry:
    return ConvGeometry((1,) + geom.kernel, (1,) + geom.stride, (0,) + geom.padding,
                        geom.in_channels, geom.out_channels)


def conv2d_forward(x: np.ndarray, w: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """2-D cross-correlation of ``x`` [(B,) C, H, W] with ``w`` [Co, Ci, kx, ky]."""
    xb, batched = _check_conv(x, w, geom, 2)
    geom.output_extents(xb.shape[2:])
    out = conv3d_forward(xb[:, :, None], w[:, :, None], _geom3(geom))[:, :, 0]
    return out if batched else out[0]


def conv2d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray, geom: ConvGeometry):
    xb, batched = _check_conv(x, w, geom, 2)
    gb = grad if batched else grad[None]
    gx, gw = conv3d_backward(gb[:, :, None], xb[:, :, None], w[:, :, None], _geom3(geom))
    gx, gw = gx[:, :, 0], gw[:, :, 0]
    return (gx if batched else gx[0]), gw


def linear_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Bias-free matrix product: ``x`` [(B,) f_in], ``w`` [f_out, f_in]."""
    if w.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ConfigurationError(f"linear: input shape {x.shape} incompatible with weights {w.shape}")
    return x @ w.T


def linear_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray):
    if grad.shape != x.shape[:-1] + (w.shape[0],):
        raise ConfigurationError(f"linear: upstream gradient {grad.shape} does not match output shape")
    gx = grad @ w
    gw = np.outer(grad, x) if x.ndim == 1 else grad.T @ x
    return gx, gw


def _pool_dims(x: np.ndarray, window, stride):
    window = _triple(window, 2)
    stride = _triple(stride, 2)
    if x.ndim not in (3, 4):
        raise ConfigurationError(f"avgpool2d expects [(B,) C, H, W], got {x.shape}")
    out = []
    for name, n, k, s in zip(_AXES2, x.shape[-2:], window, stride):
        if k > n or (n - k) % s != 0:
            raise ConfigurationError(f"{name} axis: pooling window {k}/stride {s} does not cover extent {n}")
        out.append((n - k) // s + 1)
    return window, stride, tuple(out)


def avgpool2d_forward(x: np.ndarray, window, stride) -> np.ndarray:
    window, stride, (ho, wo) = _pool_dims(x, window, stride)
    win = sliding_window_view(x, window, axis=(-2, -1))
    win = win[..., : ho * stride[0] : stride[0], : wo * stride[1] : stride[1], :, :]
    return win.mean(axis=(-2, -1))


def avgpool2d_backward(grad: np.ndarray, x: np.ndarray, window, stride) -> np.ndarray:
    window, stride, (ho, wo) = _pool_dims(x, window, stride)
    if grad.shape != x.shape[:-2] + (ho, wo):
        raise ConfigurationError(f"avgpool2d: upstream gradient {grad.shape} does not match output shape")
    gx = np.zeros_like(x, dtype=np.float64)
    share = grad / (window[0] * window[1])
    for i in range(window[0]):
        for j in range(window[1]):
            gx[..., i : i + ho * stride[0] : stride[0], j : j + wo * stride[1] : stride[1]] += share
    return gx


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout_apply(x: np.ndarray, rate: float, rng: np.random.Generator, training: bool) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    return x * dropout_mask(x.shape, rate, rng)
