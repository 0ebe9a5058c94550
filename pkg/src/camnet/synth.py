"""Procedural self-supervised training pairs.

A source image with a foreground mask is warped by a random affine map; the
map gives exact flows in both directions, keypoints and confidence labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engine import functional as F
from .engine.autodiff import Tensor, no_grad
from .errors import ConfigError, SampleRejected, ShapeError
from .networks import FEATURE_STRIDE

N_KEYPOINTS = 20


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit levels a PPM can hold."""
    return (np.rint(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


# ---------------------------------------------------------------------------
# images


def _texture(rng, xx, yy, amplitude):
    out = np.zeros_like(xx)
    for _ in range(3):
        freq = rng.uniform(2, 9)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return amplitude * out / 3


def _shape_mask(rng, kind, xx, yy):
    cx, cy = rng.uniform(0.22, 0.78, size=2)
    angle = rng.uniform(0, np.pi)
    ca, sa = np.cos(angle), np.sin(angle)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    if kind == "ellipse":
        a, b = rng.uniform(0.08, 0.25, size=2)
        return (u / a) ** 2 + (v / b) ** 2 <= 1, (cx, cy)
    if kind == "bar":
        a = rng.uniform(0.15, 0.35)
        b = rng.uniform(0.04, 0.09)
        return (np.abs(u) <= a) & (np.abs(v) <= b), (cx, cy)
    n = rng.integers(3, 7)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = rng.uniform(0.1, 0.25, size=n)
    px, py = radii * np.cos(angles), radii * np.sin(angles)
    inside = np.ones_like(u, dtype=bool)
    for i in range(n):
        j = (i + 1) % n
        cross = (px[j] - px[i]) * (v - py[i]) - (py[j] - py[i]) * (u - px[i])
        inside &= cross >= 0
    return inside, (cx, cy)


def generate_image(seed: int, size: int = 64):
    """Deterministic composite of 2-5 textured shapes over a textured background.

    Returns ``(image, mask)`` with shapes ``3 x size x size`` and ``1 x size x size``.
    """
    if size < 32:
        raise ConfigError(f"image size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)
    t = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    for _ in range(100):
        base = rng.uniform(0.2, 0.8, size=3)
        tilt = rng.uniform(-0.15, 0.15, size=(3, 2))
        img = np.stack([base[c] + tilt[c, 0] * (xx - 0.5) + tilt[c, 1] * (yy - 0.5)
                        + _texture(rng, xx, yy, 0.06) for c in range(3)])
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(rng.integers(2, 6)):
            kind = rng.choice(["ellipse", "polygon", "bar"])
            m, (cx, cy) = _shape_mask(rng, kind, xx, yy)
            color = rng.uniform(0.0, 1.0, size=3)
            grad = rng.uniform(-1.2, 1.2, size=(3, 2))
            stripes = _texture(rng, xx, yy, rng.uniform(0.05, 0.2))
            for c in range(3):
                shade = color[c] + grad[c, 0] * (xx - cx) + grad[c, 1] * (yy - cy) + stripes
                img[c][m] = shade[m]
            mask |= m
        frac = mask.mean()
        if 0.1 <= frac <= 0.6:
            break
    return quantize(img), mask[None].astype(np.float32)


# ---------------------------------------------------------------------------
# transforms


@dataclass
class TransformConfig:
    max_rotation: float = 20.0  # degrees
    max_scale_log: float = 0.2
    max_translation: float = 0.25  # normalized units
    max_shear: float = 0.1

    def validate(self):
        if min(self.max_rotation, self.max_scale_log, self.max_translation, self.max_shear) < 0:
            raise ConfigError("transform bounds must be non-negative")
        if np.exp(-2 * self.max_scale_log) < 0.25:
            raise ConfigError("max_scale_log allows |det| < 0.25")


def _invert_affine(matrix: np.ndarray) -> np.ndarray:
    (a, b, tx), (c, d, ty) = matrix
    det = a * d - b * c
    lin = np.array([[d, -b], [-c, a]]) / det
    return np.hstack([lin, -(lin @ np.array([[tx], [ty]]))])


@dataclass
class TransformSpec:
    """Affine map from normalized source coordinates to normalized target coordinates."""

    matrix: np.ndarray
    inverse: np.ndarray = field(default=None)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(2, 3)
        if abs(np.linalg.det(self.matrix[:, :2])) <= 1e-3:
            raise ConfigError("affine map is (nearly) singular")
        if self.inverse is None:
            self.inverse = _invert_affine(self.matrix)
        self.inverse = np.asarray(self.inverse, dtype=np.float64).reshape(2, 3)

    @classmethod
    def identity(cls):
        return cls(np.array([[1.0, 0, 0], [0, 1.0, 0]]))

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix[:, :2]))

    def inverted(self) -> "TransformSpec":
        return TransformSpec(self.inverse.copy(), self.matrix.copy())

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map ``(..., 2)`` normalized source points into the target frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.matrix[:, :2].T + self.matrix[:, 2]

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.inverse[:, :2].T + self.inverse[:, 2]


def sample_transform(rng: np.random.Generator, config: Optional[TransformConfig] = None) -> TransformSpec:
    """Draw rotation * scale * shear plus translation within ``config`` bounds."""
    config = config or TransformConfig()
    config.validate()
    while True:
        theta = np.deg2rad(rng.uniform(-config.max_rotation, config.max_rotation))
        scale = np.exp(rng.uniform(-config.max_scale_log, config.max_scale_log))
        shear = rng.uniform(-config.max_shear, config.max_shear)
        tx, ty = rng.uniform(-config.max_translation, config.max_translation, size=2)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        lin = rot @ (scale * np.array([[1.0, shear], [0.0, 1.0]]))
        if abs(np.linalg.det(lin)) > 1e-3:
            return TransformSpec(np.hstack([lin, [[tx], [ty]]]))


def transform_params(spec: TransformSpec):
    """Recover (rotation deg, log scale, shear, tx, ty) from a rotation*scale*shear map."""
    lin = spec.matrix[:, :2]
    theta = np.arctan2(lin[1, 0], lin[0, 0])
    rot_t = np.array([[np.cos(theta), np.sin(theta)], [-np.sin(theta), np.cos(theta)]])
    upper = rot_t @ lin
    scale = upper[0, 0]
    return np.rad2deg(theta), np.log(scale), upper[0, 1] / scale, spec.matrix[0, 2], spec.matrix[1, 2]


# ---------------------------------------------------------------------------
# flows and pairs


def gt_flow(spec: TransformSpec, h: int, w: int, direction: str = "st") -> np.ndarray:
    """Exact ``2 x h x w`` flow of ``spec`` on an ``h x w`` lattice.

    ``"st"`` (source <- target) is defined on target cells and points at the
    source position that maps onto each cell; ``"ts"`` is its converse.
    """
    grid = F.coordinate_grid(h, w, np.float64).reshape(2, -1).T
    if direction == "st":
        pos = spec.apply_inverse(grid)
    elif direction == "ts":
        pos = spec.apply(grid)
    else:
        raise ValueError(f"direction must be 'st' or 'ts', got {direction!r}")
    return (pos - grid).T.reshape(2, h, w).astype(np.float32)


def _sample(img: np.ndarray, coords: np.ndarray, padding="zeros") -> np.ndarray:
    with no_grad():
        return F.bilinear_sample(Tensor(img), Tensor(coords.astype(np.float32)), padding).data


def warp_exact(image: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Warp a source-frame image into the target frame of ``spec``."""
    h, w = image.shape[-2:]
    grid = F.coordinate_grid(h, w, np.float32)
    return _sample(image, grid + gt_flow(spec, h, w, "st"))


def pixel_to_norm(p, n):
    return (2 * np.asarray(p, dtype=np.float64) + 1) / n - 1


def norm_to_pixel(c, n):
    return ((np.asarray(c, dtype=np.float64) + 1) * n - 1) / 2


@dataclass
class SyntheticSample:
    source: np.ndarray
    target: np.ndarray
    source_mask: np.ndarray
    target_mask: np.ndarray
    flow_st: np.ndarray
    flow_ts: np.ndarray
    keypoints: np.ndarray  # K x 4: x_src, y_src, x_tgt, y_tgt (pixels)
    spec: Optional[TransformSpec] = None
    bbox: Optional[tuple] = None  # target object box (x, y, w, h)

    @property
    def size(self):
        return self.source.shape[-2:]


def mask_bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask.reshape(mask.shape[-2:]) > 0.5)
    if len(xs) == 0:
        return None
    return (float(xs.min()), float(ys.min()), float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))


def make_pair(image, mask, spec: TransformSpec, rng=None, n_keypoints=N_KEYPOINTS,
              stride=FEATURE_STRIDE, max_attempts=100) -> SyntheticSample:
    """Build a training pair by warping ``image``/``mask`` with ``spec``.

    Raises SampleRejected when ``n_keypoints`` in-frame keypoints cannot be
    found in ``max_attempts`` draws.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    h, w = image.shape[-2:]
    if mask.shape[-2:] != (h, w):
        raise ShapeError(f"mask {mask.shape} does not match image {image.shape}")
    target = quantize(warp_exact(image, spec))
    target_mask = (warp_exact(mask, spec) >= 0.5).astype(np.float32)

    ys, xs = np.nonzero(mask[0] > 0.5)
    found = []
    for _ in range(max_attempts):
        if len(xs) == 0:
            break
        k = rng.integers(len(xs))
        ps = np.array([xs[k], ys[k]], dtype=np.float64) + rng.uniform(-0.5, 0.5, size=2)
        ps = np.clip(ps, 0, [w - 1, h - 1])
        norm = spec.apply(np.array([pixel_to_norm(ps[0], w), pixel_to_norm(ps[1], h)]))
        pt = np.array([norm_to_pixel(norm[0], w), norm_to_pixel(norm[1], h)])
        if 0 <= pt[0] <= w - 1 and 0 <= pt[1] <= h - 1:
            found.append([ps[0], ps[1], pt[0], pt[1]])
            if len(found) == n_keypoints:
                break
    if len(found) < n_keypoints:
        raise SampleRejected(f"only {len(found)} of {n_keypoints} keypoints landed in frame")
    hf, wf = h // stride, w // stride
    return SyntheticSample(
        source=image.astype(np.float32), target=target,
        source_mask=mask.astype(np.float32), target_mask=target_mask,
        flow_st=gt_flow(spec, hf, wf, "st"), flow_ts=gt_flow(spec, hf, wf, "ts"),
        keypoints=np.array(found, dtype=np.float64), spec=spec, bbox=mask_bbox(target_mask),
    )


def label_confidence(flow_pred, flow_gt, tau: float) -> np.ndarray:
    """1 where the predicted flow lies within ``tau`` of the truth, else 0."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    pred = flow_pred.data if isinstance(flow_pred, Tensor) else np.asarray(flow_pred)
    gt = flow_gt.data if isinstance(flow_gt, Tensor) else np.asarray(flow_gt)
    if pred.shape != gt.shape or pred.shape[-3] != 2:
        raise ShapeError(f"flow shapes {pred.shape} and {gt.shape} differ")
    err = np.sqrt(((pred.astype(np.float64) - gt) ** 2).sum(axis=-3, keepdims=True))
    return (err < tau).astype(np.float32)


def default_tau(feature_h: int) -> float:
    """One feature cell in normalized units."""
    return 2.0 / feature_h


def make_dataset(count: int, seed: int = 0, size: int = 64, config: Optional[TransformConfig] = None,
                 identity: bool = False) -> list:
    """``count`` deterministic samples; sample ``i`` depends only on ``(seed, i)``."""
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        image, mask = generate_image(int(rng.integers(2 ** 31)), size)
        while True:
            spec = TransformSpec.identity() if identity else sample_transform(rng, config)
            try:
                samples.append(make_pair(image, mask, spec, rng))
                break
            except SampleRejected:
                if identity:
                    raise
    return samples
