"""Training objectives.

All losses take batched ``N x C x H x W`` tensors (single samples are promoted)
and return scalar tensors.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .engine import functional as F
from .engine.autodiff import Tensor, add, clip, log, mean, mul, reshape, scalar_mul, square, sub, sum_
from .errors import ShapeError
from .networks import MatchOutputs, warp

BCE_CLAMP = 1e-7

REPORT_COLUMNS = (
    "mask_st", "mask_ts", "flow_consistency", "L_a_base", "L_a_refined", "L_align",
    "L_confi_base", "L_confi_refined", "L_confi", "L_adv", "L_G", "L_real", "L_fake", "L_D",
)


class EmptyForegroundWarning(UserWarning):
    pass


@dataclass
class LossWeights:
    lam: float = 0.188
    gamma: float = 0.4
    beta: float = 0.4
    mu1: float = 288.0
    mu2: float = 18.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {value}")


def _lead(x):
    if isinstance(x, np.ndarray):
        x = Tensor(x)
    return x if x.ndim == 4 else reshape(x, (1,) + x.shape)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_binary(mask):
    m = _data(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("masks must be binary {0, 1}")


def feature_mask(mask, shape) -> np.ndarray:
    """Binarize an image-resolution mask onto a coarser ``h x w`` lattice by block vote."""
    m = _data(mask)
    if m.ndim == 3:
        m = m[None]
    h, w = shape
    n, c, H, W = m.shape
    if (H, W) == (h, w):
        return m.astype(np.float32)
    if H % h or W % w:
        raise ShapeError(f"mask {m.shape[-2:]} is not a multiple of {shape}")
    blocks = m.reshape(n, c, h, H // h, w, W // w).mean(axis=(3, 5))
    return (blocks >= 0.5).astype(np.float32)


# ---------------------------------------------------------------------------
# alignment


def mask_terms(flow_st, flow_ts, mask_t, mask_s):
    """Per-direction squared disagreement between warped and reference masks."""
    _check_binary(mask_t)
    _check_binary(mask_s)
    flow_st, flow_ts = _lead(flow_st), _lead(flow_ts)
    mask_t, mask_s = _lead(mask_t), _lead(mask_s)
    st = mean(square(sub(warp(mask_s, flow_st), mask_t)))
    ts = mean(square(sub(warp(mask_t, flow_ts), mask_s)))
    return st, ts


def mask_consistency_loss(flow_st, flow_ts, mask_t, mask_s) -> Tensor:
    st, ts = mask_terms(flow_st, flow_ts, mask_t, mask_s)
    return scalar_mul(add(st, ts), 0.5)


def _cycle_term(flow_a, flow_b, fg):
    """Mean of |a(p) + b(p + a(p))|^2 over foreground cells whose match is in frame."""
    n, _, h, w = flow_a.shape
    grid = F.coordinate_grid(h, w, flow_a.dtype)
    pos = add(flow_a, Tensor(grid))
    lo_x, hi_x = F.pixel_centers(w, flow_a.dtype)[[0, -1]]
    lo_y, hi_y = F.pixel_centers(h, flow_a.dtype)[[0, -1]]
    px, py = pos.data[:, 0], pos.data[:, 1]
    inside = (px >= lo_x) & (px <= hi_x) & (py >= lo_y) & (py <= hi_y)
    weight = (fg[:, 0] * inside).astype(flow_a.dtype)[:, None]
    total = float(weight.sum())
    back = F.bilinear_sample(flow_b, pos, padding="border")
    resid = sum_(square(add(flow_a, back)), axis=1, keepdims=True)
    return mul(resid, Tensor(weight)), total


def flow_consistency_loss(flow_st, flow_ts, mask_t, mask_s) -> Tensor:
    """Bidirectional cycle consistency on foreground cells.

    Warns with EmptyForegroundWarning and returns 0 when no foreground cell
    has an in-frame match.
    """
    flow_st, flow_ts = _lead(flow_st), _lead(flow_ts)
    if flow_st.shape != flow_ts.shape:
        raise ShapeError(f"flow shapes {flow_st.shape} and {flow_ts.shape} differ")
    shape = flow_st.shape[-2:]
    fg_t = feature_mask(mask_t, shape)
    fg_s = feature_mask(mask_s, shape)
    terms = []
    for a, b, fg in ((flow_st, flow_ts, fg_t), (flow_ts, flow_st, fg_s)):
        weighted, total = _cycle_term(a, b, fg)
        if total == 0:
            warnings.warn("flow consistency over an empty foreground", EmptyForegroundWarning)
            terms.append(scalar_mul(sum_(weighted), 0.0))
        else:
            terms.append(scalar_mul(sum_(weighted), 1.0 / total))
    return scalar_mul(add(terms[0], terms[1]), 0.5)


def alignment_level(flow_st, flow_ts, mask_t, mask_s, w: LossWeights):
    st, ts = mask_terms(flow_st, flow_ts, mask_t, mask_s)
    flow = flow_consistency_loss(flow_st, flow_ts, mask_t, mask_s)
    total = add(scalar_mul(add(st, ts), 0.5 * w.lam), flow)
    return total, {"mask_st": st, "mask_ts": ts, "flow_consistency": flow}


def alignment_loss(outputs: MatchOutputs, mask_t, mask_s, w: LossWeights):
    """Weighted base + refined alignment.

    The per-term components reported are those of the refined level.
    """
    base, _ = alignment_level(outputs.st.flow_base, outputs.ts.flow_base, mask_t, mask_s, w)
    refined, parts = alignment_level(outputs.st.flow_refined, outputs.ts.flow_refined, mask_t, mask_s, w)
    total = add(scalar_mul(base, w.gamma), refined)
    parts.update(L_a_base=base, L_a_refined=refined, L_align=total)
    return total, parts


# ---------------------------------------------------------------------------
# confidence


def binary_cross_entropy(conf, label, fg=None) -> Tensor:
    """Pixel-mean BCE, restricted to ``fg`` cells when a mask is given."""
    conf = _lead(conf)
    label = _data(label).astype(conf.dtype)
    if label.ndim == 3:
        label = label[None]
    if label.shape != conf.shape:
        raise ShapeError(f"labels {label.shape} do not match confidence {conf.shape}")
    c = clip(conf, BCE_CLAMP, 1 - BCE_CLAMP)
    pos = mul(log(c), Tensor(label))
    negs = mul(log(sub(1.0, c)), Tensor(1 - label))
    per_pixel = add(pos, negs)
    if fg is None:
        return scalar_mul(mean(per_pixel), -1.0)
    fg = _data(fg).astype(conf.dtype)
    if fg.ndim == 3:
        fg = fg[None]
    total = float(fg.sum())
    if total == 0:
        warnings.warn("confidence loss over an empty foreground", EmptyForegroundWarning)
        return scalar_mul(sum_(mul(per_pixel, Tensor(fg))), 0.0)
    return scalar_mul(sum_(mul(per_pixel, Tensor(fg))), -1.0 / total)


def confidence_level(conf_st, conf_ts, label_st, label_ts, fg_t=None, fg_s=None) -> Tensor:
    return add(binary_cross_entropy(conf_st, label_st, fg_t), binary_cross_entropy(conf_ts, label_ts, fg_s))


def confidence_loss(outputs: MatchOutputs, labels: dict, w: LossWeights, fg_t=None, fg_s=None):
    """``labels`` maps ``base_st``, ``base_ts``, ``refined_st``, ``refined_ts`` to {0,1} maps."""
    base = confidence_level(outputs.st.conf_base, outputs.ts.conf_base,
                            labels["base_st"], labels["base_ts"], fg_t, fg_s)
    refined = confidence_level(outputs.st.conf_refined, outputs.ts.conf_refined,
                               labels["refined_st"], labels["refined_ts"], fg_t, fg_s)
    total = add(scalar_mul(base, w.beta), refined)
    return total, {"L_confi_base": base, "L_confi_refined": refined, "L_confi": total}


# ---------------------------------------------------------------------------
# adversarial


def _lsq(score, target: float) -> Tensor:
    return mean(square(sub(score, target)))


def adversarial_generator_loss(fake_s, fake_t) -> Tensor:
    return add(_lsq(fake_s, 1.0), _lsq(fake_t, 1.0))


def generator_total_loss(l_align, l_confi, l_adv, w: LossWeights) -> Tensor:
    terms = [Tensor(np.asarray(x, dtype=np.float64)) if not isinstance(x, Tensor) else x
             for x in (l_align, l_confi, l_adv)]
    return add(add(scalar_mul(terms[0], w.mu1), scalar_mul(terms[1], w.mu2)), terms[2])


def discriminator_loss(real_s, real_t, fake_s, fake_t):
    """Returns ``(L_D, L_real, L_fake)``; fake maps must come from detached generator output."""
    real = add(_lsq(real_s, 1.0), _lsq(real_t, 1.0))
    fake = add(_lsq(fake_s, 0.0), _lsq(fake_t, 0.0))
    return add(real, fake), real, fake
