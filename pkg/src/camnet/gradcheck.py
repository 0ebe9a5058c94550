"""Finite-difference verification of every differentiable operation.

Each case projects the op output onto a fixed random tensor, so one scalar
probe covers every output element.  Inputs are drawn in double precision
and kept away from kinks (ReLU at 0, clip bounds, pixel-lattice lines,
argmax ties) where central differences are meaningless.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from . import networks as N
from .engine import autodiff as A
from .engine import functional as F
from .engine.autodiff import Tape, Tensor

EPS = 1e-4
RTOL = 1e-3
ATOL = 1e-6


@dataclass
class GradCheckResult:
    name: str
    max_rel: float
    max_abs: float
    passed: bool
    seconds: float

    def row(self):
        return (self.name, self.max_rel, self.max_abs, "pass" if self.passed else "FAIL", self.seconds)


def _scalar(fn, arrays, probe):
    out = fn(*[Tensor(a) for a in arrays])
    out = out if isinstance(out, Tensor) else out[0]
    return float(np.sum(out.data * probe))


def check_gradients(fn: Callable, arrays: Sequence[np.ndarray], eps=EPS, rtol=RTOL, atol=ATOL, seed=0):
    """Compare tape gradients of ``fn`` against central differences.

    An element passes when its absolute error is below ``atol`` or its
    relative error is below ``rtol``.  Returns ``(max_rel, max_abs, passed)``
    where ``max_rel`` skips elements whose gradient is below ``atol``.
    """
    arrays = [np.ascontiguousarray(a, dtype=np.float64).copy() for a in arrays]
    with A.no_grad():
        first = fn(*[Tensor(a) for a in arrays])
    first = first if isinstance(first, Tensor) else first[0]
    probe = np.random.default_rng(seed).standard_normal(first.shape)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
        out = out if isinstance(out, Tensor) else out[0]
        tape.backward(A.sum_(A.mul(out, Tensor(probe))))
    max_rel = max_abs = 0.0
    ok = True
    for k, leaf in enumerate(leaves):
        analytic = np.zeros_like(arrays[k]) if leaf.grad is None else leaf.grad
        numeric = np.zeros_like(arrays[k])
        flat = arrays[k].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = _scalar(fn, arrays, probe)
            flat[i] = keep - eps
            lo = _scalar(fn, arrays, probe)
            flat[i] = keep
            numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
        diff = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        rel = diff / np.maximum(scale, 1e-300)
        max_abs = max(max_abs, float(diff.max(initial=0)))
        max_rel = max(max_rel, float(np.where(scale > atol, rel, 0).max(initial=0)))
        ok &= bool(np.all((diff <= atol) | (rel < rtol)))
    return max_rel, max_abs, ok


# ---------------------------------------------------------------------------
# input generators


def _shape(rng, rank, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=rank))


def _away_from(rng, shape, points=(0.0,), margin=0.05, scale=1.0):
    x = rng.standard_normal(shape) * scale
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, p + np.sign(x - p + 1e-12) * margin * 2, x)
    return x


def _lattice_coords(rng, shape, n_y, n_x, lo=0.15, hi=0.85, outside=0.0):
    """Normalized coordinates whose pixel positions avoid integer lattice lines."""
    def axis(n):
        base = rng.integers(int(np.floor(-outside)), n - 1 + int(np.ceil(outside)), size=shape)
        base = np.clip(base, -1 if outside else 0, n - 2 + (1 if outside else 0))
        p = base + rng.uniform(lo, hi, size=shape)
        return (2 * p + 1) / n - 1
    return np.stack([axis(n_x), axis(n_y)])


def _peaked_corr(rng, n, q, h, w, margin=0.05):
    c = rng.uniform(-1, 1, size=(n, q, h, w))
    top = c.argmax(axis=1)
    best = np.take_along_axis(c, top[:, None], axis=1)
    c = np.where(np.arange(q)[None, :, None, None] == top[:, None], best + margin, c)
    return c


def _binary(rng, shape, p=0.5):
    return (rng.uniform(size=shape) < p).astype(np.float64)


# ---------------------------------------------------------------------------
# cases


def _cases(rng):
    s = _shape(rng, 3)
    b = s[1:]
    pos = rng.uniform(0.5, 2.0, size=s)
    cases = {
        "add": (A.add, [rng.standard_normal(s), rng.standard_normal(b)]),
        "sub": (A.sub, [rng.standard_normal(s), rng.standard_normal(s)]),
        "mul": (A.mul, [rng.standard_normal(s), rng.standard_normal(b)]),
        "div": (A.div, [rng.standard_normal(s), pos]),
        "neg": (A.neg, [rng.standard_normal(s)]),
        "scalar_mul": (lambda x: A.scalar_mul(x, 1.7), [rng.standard_normal(s)]),
        "square": (A.square, [rng.standard_normal(s)]),
        "sqrt": (A.sqrt, [pos]),
        "exp": (A.exp, [rng.standard_normal(s)]),
        "log": (A.log, [pos]),
        "clip": (lambda x: A.clip(x, -0.5, 0.5), [_away_from(rng, s, (-0.5, 0.5))]),
        "sum": (lambda x: A.sum_(x, axis=1), [rng.standard_normal(s)]),
        "mean": (lambda x: A.mean(x, axis=(0, 2)), [rng.standard_normal(s)]),
        "reshape": (lambda x: A.reshape(x, (-1,)), [rng.standard_normal(s)]),
        "transpose": (lambda x: A.transpose(x, (2, 0, 1)), [rng.standard_normal(s)]),
        "concat": (lambda x, y: A.concat([x, y], axis=1), [rng.standard_normal(s), rng.standard_normal(s)]),
        "stack": (lambda x, y: A.stack([x, y], axis=0), [rng.standard_normal(s), rng.standard_normal(s)]),
        "getitem": (lambda x: A.getitem(x, (slice(None), slice(0, 1))), [rng.standard_normal(s)]),
        "matmul": (A.matmul, [rng.standard_normal((2,) + s[1:]), rng.standard_normal((2, s[2], 3))]),
        "relu": (F.relu, [_away_from(rng, s)]),
        "leaky_relu": (lambda x: F.leaky_relu(x, 0.2), [_away_from(rng, s)]),
        "sigmoid": (F.sigmoid, [rng.standard_normal(s)]),
        "softmax": (lambda x: F.softmax(x, axis=1, temperature=0.5), [rng.standard_normal(s)]),
        "l2_normalize": (lambda x: F.l2_normalize(x, axis=0), [rng.standard_normal(s)]),
    }
    n, c, h, w = 2, int(rng.integers(1, 4)), int(rng.integers(4, 9)), int(rng.integers(4, 9))
    x4 = rng.standard_normal((n, c, h, w))
    for stride, pad, k in ((1, 1, 3), (2, 1, 4), (1, 0, 2)):
        kern = rng.standard_normal((3, c, k, k))
        h2, w2 = (h // 2) * 2, (w // 2) * 2
        xin = x4[..., :h2, :w2] if stride == 2 else x4
        cases[f"conv2d_k{k}_s{stride}_p{pad}"] = (
            lambda x, kk, bb, s_=stride, p_=pad: F.conv2d(x, kk, bb, s_, p_),
            [xin, kern, rng.standard_normal(3)])
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2, c)
    cases["batch_norm_train"] = (
        lambda x, g, bb: F.batch_norm(x, g, bb, rm.copy(), rv.copy(), training=True, track=False),
        [x4, rng.uniform(0.5, 1.5, c), rng.standard_normal(c)])
    cases["batch_norm_eval"] = (
        lambda x, g, bb: F.batch_norm(x, g, bb, rm, rv, training=False),
        [x4, rng.uniform(0.5, 1.5, c), rng.standard_normal(c)])
    ho, wo = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    zeros_coords = _lattice_coords(rng, (n, ho, wo), h, w, outside=1.0).transpose(1, 0, 2, 3)
    border_coords = _lattice_coords(rng, (n, ho, wo), h, w).transpose(1, 0, 2, 3)
    cases["bilinear_sample_zeros"] = (lambda im, co: F.bilinear_sample(im, co, "zeros"), [x4, zeros_coords])
    cases["bilinear_sample_border"] = (lambda im, co: F.bilinear_sample(im, co, "border"), [x4, border_coords])
    cases["upsample_linear"] = (lambda x: F.upsample_linear(x, 2 * h - 1, w + 3), [x4])

    # matcher pipeline
    hs, ws, hf, wf = 2, 3, int(rng.integers(2, 5)), int(rng.integers(2, 5))
    d = 3
    cases["correlation"] = (N.correlation, [rng.standard_normal((1, d, hs, ws)), rng.standard_normal((1, d, hf, wf))])
    cases["transpose_correlation"] = (lambda cc: N.transpose_correlation(cc, (hs, ws), (hf, wf)),
                                      [rng.standard_normal((1, hs * ws, hf, wf))])
    cases["kernel_soft_argmax"] = (lambda cc: N.kernel_soft_argmax(cc, (hs, ws), 0.5, 1.0),
                                   [_peaked_corr(rng, 1, hs * ws, hf, wf)])
    conf = rng.uniform(0.1, 0.9, size=(1, 1, hf, wf))
    cases["fuse_flows"] = (N.fuse_flows, [rng.standard_normal((1, 2, hf, wf)),
                                          rng.standard_normal((1, 2, hf, wf)), conf])
    img = rng.standard_normal((1, 2, 8, 8))
    cases["warp"] = (N.warp, [img, _small_flow(rng, 4, 4, 8)])

    # objectives
    mt, ms = _binary(rng, (1, 1, 8, 8)), _binary(rng, (1, 1, 8, 8))
    cases["mask_consistency_loss"] = (lambda a, bb: L.mask_consistency_loss(a, bb, mt, ms),
                                      [_small_flow(rng, 4, 4, 8), _small_flow(rng, 4, 4, 8)])
    fg = np.ones((1, 1, 4, 4))
    cases["flow_consistency_loss"] = (lambda a, bb: L.flow_consistency_loss(a, bb, fg, fg),
                                      [_small_flow(rng, 4, 4, 4), _small_flow(rng, 4, 4, 4)])
    lab = _binary(rng, (1, 1, hf, wf))
    cases["binary_cross_entropy"] = (lambda p: L.binary_cross_entropy(p, lab, np.ones_like(lab)), [conf])
    cases["adversarial_generator_loss"] = (L.adversarial_generator_loss,
                                           [rng.uniform(0.1, 0.9, (1, 1, 2, 2)), rng.uniform(0.1, 0.9, (1, 1, 2, 2))])
    cases["discriminator_loss"] = (L.discriminator_loss, [rng.uniform(0.1, 0.9, (1, 1, 2, 2)) for _ in range(4)])
    return cases


def _small_flow(rng, h, w, image_extent):
    """Flows whose upsampled sample positions stay off the pixel lattice of ``image_extent``."""
    grid = F.coordinate_grid(h, w, np.float64)[None]
    target = _lattice_coords(rng, (1, h, w), image_extent, image_extent, 0.3, 0.7).transpose(1, 0, 2, 3)
    # keep each vector short: move toward its own cell by at most a lattice cell
    flow = np.clip(target - grid, -2 / image_extent, 2 / image_extent)
    return flow + 0.37 / image_extent


CASE_NAMES = tuple(_cases(np.random.default_rng(0)))


def run_suite(seed: int = 0, names=None, eps=EPS, rtol=RTOL, atol=ATOL):
    """Check every registered case on randomized double-precision inputs."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, arrays) in _cases(rng).items():
        if names is not None and name not in names:
            continue
        start = time.perf_counter()
        max_rel, max_abs, ok = check_gradients(fn, arrays, eps, rtol, atol, seed)
        results.append(GradCheckResult(name, max_rel, max_abs, ok, time.perf_counter() - start))
    return results
