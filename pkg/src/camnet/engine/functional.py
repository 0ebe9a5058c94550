"""Differentiable network primitives.

Spatial operations take ``C x H x W`` tensors or batched ``N x C x H x W``
tensors.  Normalized coordinates follow one convention everywhere: pixel
``i`` of an axis with extent ``n`` has center ``(2i + 1) / n - 1``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError
from .autodiff import Tensor, record, reshape

# coordinates closer than this (in pixels) to a pixel center snap onto it
_SNAP = 1e-4


def _batched(fn=None, *, spatial_args=1):
    """Let a 4-D op also accept single 3-D samples.

    The first ``spatial_args`` positional tensors gain a leading batch axis.
    """
    if fn is None:
        return lambda f: _batched(f, spatial_args=spatial_args)

    def wrapper(*args, **kwargs):
        x = args[0]
        if x.ndim == 3:
            lead = [reshape(a, (1,) + a.shape) for a in args[:spatial_args]]
            out = fn(*lead, *args[spatial_args:], **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise ShapeError(f"{fn.__name__} expects a 3-D or 4-D tensor, got {x.shape}")
        return fn(*args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return record(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1, slope).astype(x.dtype)
    return record(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1 / (1 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1 + ez)
    return record(out, (x,), lambda g: (g * out * (1 - out),))


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / x.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    inv_t = x.dtype.type(1.0 / temperature)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) * inv_t,)

    return record(out, (x,), bw)


def l2_normalize(x: Tensor, axis: int = 0, epsilon: float = 1e-8) -> Tensor:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, x.dtype.type(epsilon))
    out = x.data / denom
    live = norm > epsilon

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * proj * live) / denom,)

    return record(out, (x,), bw)


# ---------------------------------------------------------------------------
# convolution


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigError(
            f"extent {n} with kernel {k}, stride {stride}, pad {pad} gives a non-integral output")
    return span // stride + 1


@_batched
def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``kernel`` (``c_out x c_in x k x k``)."""
    if stride < 1 or pad < 0:
        raise ConfigError(f"stride must be >= 1 and pad >= 0 (got {stride}, {pad})")
    n, c, h, w = x.shape
    if kernel.ndim != 4 or kernel.shape[1] != c or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel {kernel.shape} does not fit input with {c} channels")
    o, _, k, _ = kernel.shape
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias {bias.shape} does not match {o} output channels")
    ho = conv_output_extent(h, k, stride, pad)
    wo = conv_output_extent(w, k, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = kernel.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record(np.ascontiguousarray(out), inputs, bw)


# ---------------------------------------------------------------------------
# normalization


@_batched
def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool = True, momentum: float = 0.1,
               eps: float = 1e-5, track: bool = True) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    In training mode batch statistics are used and, when ``track`` is set,
    the running estimates are updated in place.
    """
    if not eps > 0:
        raise ConfigError("batch-norm epsilon must be positive")
    n, c, h, w = x.shape
    m = n * h * w
    if m == 0:
        raise ShapeError(f"batch_norm over zero spatial extent {x.shape}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    dt = x.dtype.type
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if track:
            unbiased = var * (m / max(m - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    invstd = (1 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * invstd[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        scale = (gamma.data * invstd)[None, :, None, None]
        if training:
            gx = scale / m * (m * g - gb[None, :, None, None] - xhat * gg[None, :, None, None])
        else:
            gx = g * scale
        return gx.astype(x.dtype), gg, gb

    return record(out.astype(x.dtype), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# coordinates and sampling


def pixel_centers(n: int, dtype=np.float32) -> np.ndarray:
    return ((2 * np.arange(n, dtype=np.float64) + 1) / n - 1).astype(dtype)


def coordinate_grid(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """``2 x h x w`` normalized pixel-center grid (x first, then y)."""
    ys, xs = np.meshgrid(pixel_centers(h, dtype), pixel_centers(w, dtype), indexing="ij")
    return np.stack([xs, ys]).astype(dtype)


def _to_pixel(c: np.ndarray, n: int) -> np.ndarray:
    p = ((c.astype(np.float64) + 1) * n - 1) / 2
    r = np.rint(p)
    return np.where(np.abs(p - r) < _SNAP, r, p)


@_batched(spatial_args=2)
def bilinear_sample(image: Tensor, coords: Tensor, padding: str = "zeros") -> Tensor:
    """Sample ``image`` at normalized ``coords`` (``2 x h' x w'``).

    ``padding="zeros"`` treats everything outside the pixel lattice as 0;
    ``padding="border"`` clamps sample positions onto the outermost centers.
    """
    if padding not in ("zeros", "border"):
        raise ValueError(f"unknown padding {padding!r}")
    n, c, h, w = image.shape
    if coords.ndim != 4 or coords.shape[0] != n or coords.shape[1] != 2:
        raise ShapeError(f"coords {coords.shape} do not fit image {image.shape}")
    if h == 0 or w == 0:
        raise ShapeError("cannot sample an empty image")
    ho, wo = coords.shape[2:]
    dt = image.dtype
    px = _to_pixel(coords.data[:, 0], w)
    py = _to_pixel(coords.data[:, 1], h)
    if padding == "border":
        gate_x = ((px > 0) & (px < w - 1)).astype(dt)
        gate_y = ((py > 0) & (py < h - 1)).astype(dt)
        px = np.clip(px, 0, w - 1)
        py = np.clip(py, 0, h - 1)
    x0 = np.floor(px)
    y0 = np.floor(py)
    if padding == "border":
        # keep the right/bottom neighbour inside the lattice at the clamp edge
        x0 = np.minimum(x0, max(w - 2, 0))
        y0 = np.minimum(y0, max(h - 2, 0))
    fx = (px - x0).astype(dt)
    fy = (py - y0).astype(dt)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    flat = image.data.reshape(n, c, h * w)
    corners = []
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.where(valid, yi * w + xi, 0).reshape(n, 1, ho * wo)
            vals = np.take_along_axis(flat, np.broadcast_to(idx, (n, c, ho * wo)), axis=2)
            vals = vals.reshape(n, c, ho, wo) * valid[:, None].astype(dt)
            corners.append((idx, valid, wy, wx, vals))
    out = sum(v * (wy * wx)[:, None] for _, _, wy, wx, v in corners)

    def bw(g):
        gimg = gcoords = None
        if image.requires_grad:
            base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1)
            total = np.zeros(n * c * h * w, dtype=np.float64)
            for idx, valid, wy, wx, _ in corners:
                wts = (g * (wy * wx * valid)[:, None]).reshape(n, c, ho * wo)
                total += np.bincount((base + idx).ravel(), weights=wts.ravel(),
                                     minlength=n * c * h * w)
            gimg = total.reshape(image.shape).astype(dt)
        if coords.requires_grad:
            v00, v01, v10, v11 = (cr[4] for cr in corners)
            dx_ = ((v01 - v00) * (1 - fy)[:, None] + (v11 - v10) * fy[:, None]) * g
            dy_ = ((v10 - v00) * (1 - fx)[:, None] + (v11 - v01) * fx[:, None]) * g
            gx = dx_.sum(axis=1) * dt.type(w / 2)
            gy = dy_.sum(axis=1) * dt.type(h / 2)
            if padding == "border":
                gx = gx * gate_x
                gy = gy * gate_y
            gcoords = np.stack([gx, gy], axis=1).astype(dt)
        return gimg, gcoords

    return record(out.astype(dt), (image, coords), bw)


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Linear resampling between pixel-center lattices, extrapolating past the
    outermost input centers so affine fields are reproduced exactly."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1
        return m.astype(dtype)
    u = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    i0 = np.clip(np.floor(u), 0, n_in - 2).astype(int)
    f = u - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1 - f
    m[rows, i0 + 1] += f
    return m.astype(dtype)


@_batched
def upsample_linear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable linear resize of ``N x C x h x w`` onto an ``out_h x out_w`` lattice."""
    n, c, h, w = x.shape
    ry = _interp_matrix(out_h, h, x.dtype)
    rx = _interp_matrix(out_w, w, x.dtype)
    out = ry @ x.data @ rx.T
    return record(out, (x,), lambda g: (ry.T @ g @ rx,))
