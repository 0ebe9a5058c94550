"""Learned components and the differentiable matching pipeline.

Flows are offsets in normalized coordinates on the target lattice: adding a
flow to the target pixel-center grid gives the matched source position.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .engine import functional as F
from .engine.autodiff import (Tensor, add, concat, getitem, matmul, mul, reshape, stack,
                              sub, sum_, transpose)
from .engine.layers import Conv2d, ConvBNReLU, Module
from .errors import ShapeError

FEATURE_STRIDE = 4


@dataclass
class MatcherConfig:
    feature_dim: int = 16
    temperature: float = 0.05
    sigma: float = 1.0
    confidence_hidden: int = 32
    growth: int = 16
    dense_layers: int = 4
    bottleneck: int = 32
    leaky_slope: float = 0.2
    # lets confidence supervision reach the feature extractor through f_t
    confidence_grad_to_features: bool = False


def _lead(x: Tensor) -> Tensor:
    return x if x.ndim == 4 else reshape(x, (1,) + x.shape)


def _channels(x: Tensor, start: int, stop: int) -> Tensor:
    return getitem(x, (slice(None), slice(start, stop)))


# ---------------------------------------------------------------------------
# modules


class FeatureExtractor(Module):
    """Four conv stages (3 -> 16 -> 32 -> 32 -> d), total stride 4."""

    def __init__(self, feature_dim=16, rng=None):
        self.conv1 = ConvBNReLU(3, 16, 3, rng=rng)
        self.conv2 = ConvBNReLU(16, 32, 4, stride=2, pad=1, rng=rng)
        self.conv3 = ConvBNReLU(32, 32, 4, stride=2, pad=1, rng=rng)
        self.head = Conv2d(32, feature_dim, 3, rng=rng, init_scale=0.5)

    def forward(self, image):
        h, w = image.shape[-2:]
        if h % FEATURE_STRIDE or w % FEATURE_STRIDE:
            raise ShapeError(f"image extents {h}x{w} are not divisible by {FEATURE_STRIDE}")
        x = self.conv3(self.conv2(self.conv1(image)))
        return F.l2_normalize(self.head(x), axis=-3)


class ConfidenceNet(Module):
    """Scores how likely each flow vector is correct (two-way softmax)."""

    def __init__(self, feature_dim=16, hidden=32, rng=None):
        self.conv1 = ConvBNReLU(feature_dim + 2, hidden, 3, rng=rng)
        self.conv2 = ConvBNReLU(hidden, hidden, 3, rng=rng)
        self.head = Conv2d(hidden, 2, 3, rng=rng, init_scale=0.5)

    def probabilities(self, features, flow):
        if features.shape[-2:] != flow.shape[-2:] or flow.shape[-3] != 2:
            raise ShapeError(f"features {features.shape} and flow {flow.shape} do not align")
        x = concat([features, flow], axis=-3)
        return F.softmax(self.head(self.conv2(self.conv1(x))), axis=-3)

    def forward(self, features, flow):
        p = self.probabilities(_lead(features), _lead(flow))
        out = _channels(p, 1, 2)
        return out if flow.ndim == 4 else reshape(out, out.shape[1:])


class RefineNet(Module):
    """Dense conv block over the confidence-gated correlation volume.

    A 1x1 bottleneck first compresses the correlation channels.
    """

    def __init__(self, in_channels, growth=16, layers=4, bottleneck=32, rng=None):
        self.in_channels = in_channels
        self.compress = ConvBNReLU(in_channels, bottleneck, 1, rng=rng)
        self.blocks = [ConvBNReLU(bottleneck + i * growth, growth, 3, rng=rng)
                       for i in range(layers)]
        self.head = Conv2d(bottleneck + layers * growth, 2, 3, rng=rng, init_scale=0.1)

    def gate(self, confidence, corr):
        if confidence.shape[-2:] != corr.shape[-2:] or confidence.shape[-3] != 1:
            raise ShapeError(f"confidence {confidence.shape} does not gate correlation {corr.shape}")
        return mul(corr, confidence)

    def forward(self, confidence, corr):
        feats = [self.compress(self.gate(confidence, corr))]
        for block in self.blocks:
            feats.append(block(concat(feats, axis=-3) if len(feats) > 1 else feats[0]))
        return self.head(concat(feats, axis=-3))


class Discriminator(Module):
    """PatchGAN: three stride-2 stages then a per-patch sigmoid score."""

    def __init__(self, slope=0.2, rng=None):
        self.slope = slope
        self.conv1 = Conv2d(6, 32, 4, stride=2, pad=1, rng=rng)
        self.conv2 = Conv2d(32, 64, 4, stride=2, pad=1, rng=rng)
        self.conv3 = Conv2d(64, 128, 4, stride=2, pad=1, rng=rng)
        self.head = Conv2d(128, 1, 3, rng=rng, init_scale=0.5)

    def forward(self, warped, target):
        if warped.shape != target.shape:
            raise ShapeError(f"warped {warped.shape} and target {target.shape} differ")
        x = concat([warped, target], axis=-3)
        for conv in (self.conv1, self.conv2, self.conv3):
            x = F.leaky_relu(conv(x), self.slope)
        return F.sigmoid(self.head(x))


class CAMNet(Module):
    """Holds every learned parameter: extractor, confidence, refinement, discriminator."""

    def __init__(self, image_size=64, config: MatcherConfig = None, seed=0):
        self.config = config or MatcherConfig()
        if image_size % FEATURE_STRIDE:
            raise ShapeError(f"image size {image_size} not divisible by {FEATURE_STRIDE}")
        self.image_size = image_size
        cells = (image_size // FEATURE_STRIDE) ** 2
        rng = np.random.default_rng(seed)
        c = self.config
        self.extractor = FeatureExtractor(c.feature_dim, rng=rng)
        self.confidence = ConfidenceNet(c.feature_dim, c.confidence_hidden, rng=rng)
        self.refine = RefineNet(cells, c.growth, c.dense_layers, c.bottleneck, rng=rng)
        self.discriminator = Discriminator(c.leaky_slope, rng=rng)

    def generator_parameters(self):
        out = {}
        for name in ("extractor", "confidence", "refine"):
            out.update(getattr(self, name).named_parameters(name + "."))
        return out

    def discriminator_parameters(self):
        return self.discriminator.named_parameters("discriminator.")

    def generator_modules(self):
        return (self.extractor, self.confidence, self.refine)


# ---------------------------------------------------------------------------
# pipeline operations


def extract_features(image, model: CAMNet):
    return model.extractor(image)


def correlation(f_s: Tensor, f_t: Tensor) -> Tensor:
    """Cosine-similarity volume ``(h_s*w_s) x h_t x w_t`` between normalized maps."""
    if f_s.shape[-3] != f_t.shape[-3]:
        raise ShapeError(f"channel mismatch {f_s.shape} vs {f_t.shape}")
    single = f_s.ndim == 3
    a, b = _lead(f_s), _lead(f_t)
    if a.shape[0] != b.shape[0]:
        raise ShapeError("batch mismatch")
    n, d, hs, ws = a.shape
    ht, wt = b.shape[2:]
    src = transpose(reshape(a, (n, d, hs * ws)), (0, 2, 1))
    s = reshape(matmul(src, reshape(b, (n, d, ht * wt))), (n, hs * ws, ht, wt))
    return reshape(s, s.shape[1:]) if single else s


def transpose_correlation(corr: Tensor, src_hw, tgt_hw) -> Tensor:
    """Swap the source and target roles of a correlation volume."""
    single = corr.ndim == 3
    s = _lead(corr)
    n = s.shape[0]
    hs, ws = src_hw
    ht, wt = tgt_hw
    out = reshape(transpose(reshape(s, (n, hs * ws, ht * wt)), (0, 2, 1)), (n, ht * wt, hs, ws))
    return reshape(out, out.shape[1:]) if single else out


def kernel_soft_argmax(corr: Tensor, src_hw=None, temperature=0.05, sigma=1.0) -> Tensor:
    """Decode a correlation volume into a flow field.

    Per target cell: locate the hard-argmax source cell (lowest index wins
    ties), damp scores with a Gaussian of width ``sigma`` grid cells centred
    there, take a temperature softmax and return the expected source
    position minus the target cell centre.
    """
    if not (temperature > 0 and sigma > 0):
        raise ValueError("temperature and sigma must be positive")
    single = corr.ndim == 3
    s = _lead(corr)
    n, q, ht, wt = s.shape
    if src_hw is None:
        side = int(round(np.sqrt(q)))
        src_hw = (side, side)
    hs, ws = src_hw
    if hs * ws != q:
        raise ShapeError(f"{q} correlation channels do not match source grid {src_hw}")
    dt = s.dtype
    qy, qx = np.divmod(np.arange(q), ws)
    best = s.data.argmax(axis=1)
    by, bx = np.divmod(best, ws)
    d2 = ((qx[None, :, None, None] - bx[:, None]) ** 2
          + (qy[None, :, None, None] - by[:, None]) ** 2)
    kmask = np.exp(-d2 / (2.0 * sigma ** 2)).astype(dt)
    weights = F.softmax(mul(s, Tensor(kmask)), axis=1, temperature=temperature)
    cx = F.pixel_centers(ws, dt)[qx].reshape(1, q, 1, 1)
    cy = F.pixel_centers(hs, dt)[qy].reshape(1, q, 1, 1)
    pos = stack([sum_(mul(weights, Tensor(cx)), axis=1), sum_(mul(weights, Tensor(cy)), axis=1)], axis=1)
    flow = sub(pos, Tensor(F.coordinate_grid(ht, wt, dt)))
    return reshape(flow, flow.shape[1:]) if single else flow


def estimate_confidence(f_t: Tensor, flow: Tensor, model: CAMNet) -> Tensor:
    feats = f_t if model.config.confidence_grad_to_features else f_t.detach()
    return model.confidence(feats, flow.detach())


def refine_flow(conf: Tensor, corr: Tensor, model: CAMNet) -> Tensor:
    return model.refine(conf, corr)


def fuse_flows(flow_base: Tensor, flow_updated: Tensor, conf: Tensor) -> Tensor:
    """Confidence-gated blend: keep confident base vectors, replace the rest."""
    if flow_base.shape != flow_updated.shape:
        raise ShapeError(f"flows {flow_base.shape} and {flow_updated.shape} differ")
    if conf.shape[-2:] != flow_base.shape[-2:] or conf.shape[-3] != 1 or conf.ndim != flow_base.ndim:
        raise ShapeError(f"confidence {conf.shape} does not match flow {flow_base.shape}")
    return add(mul(flow_base, conf), mul(flow_updated, sub(1.0, conf)))


def warp(image: Tensor, flow: Tensor) -> Tensor:
    """Resample ``image`` into the target frame through a (coarse) flow field."""
    h, w = image.shape[-2:]
    up = F.upsample_linear(flow, h, w)
    coords = add(up, Tensor(F.coordinate_grid(h, w, up.dtype)))
    return F.bilinear_sample(image, coords, padding="zeros")


def discriminate(warped: Tensor, target: Tensor, model: CAMNet) -> Tensor:
    return model.discriminator(warped, target)


@dataclass
class DirectionOutputs:
    flow_base: Tensor
    conf_base: Tensor
    flow_updated: Tensor
    flow_refined: Tensor
    conf_refined: Tensor


@dataclass
class MatchOutputs:
    st: DirectionOutputs
    ts: DirectionOutputs

    def as_dict(self):
        out = {}
        for tag in ("st", "ts"):
            d = getattr(self, tag)
            for f in fields(d):
                out[f"{f.name}_{tag}"] = getattr(d, f.name)
        return out


def forward_pass(source: Tensor, target: Tensor, model: CAMNet) -> MatchOutputs:
    """Run the matcher in both directions (s<-t and t<-s).

    Both directions share one batched pass through each sub-network.
    """
    if source.shape != target.shape:
        raise ShapeError(f"source {source.shape} and target {target.shape} differ")
    single = source.ndim == 3
    src, tgt = _lead(source), _lead(target)
    n = src.shape[0]
    feats = model.extractor(concat([src, tgt], axis=0))
    f_s = getitem(feats, slice(0, n))
    f_t = getitem(feats, slice(n, 2 * n))
    hf, wf = feats.shape[2:]
    c = model.config
    s_st = correlation(f_s, f_t)
    s_ts = transpose_correlation(s_st, (hf, wf), (hf, wf))
    corr = concat([s_st, s_ts], axis=0)
    query = concat([f_t, f_s], axis=0)  # features on each direction's target lattice
    flow_b = kernel_soft_argmax(corr, (hf, wf), c.temperature, c.sigma)
    conf_b = estimate_confidence(query, flow_b, model)
    flow_u = refine_flow(conf_b, corr, model)
    flow_r = fuse_flows(flow_b, flow_u, conf_b)
    conf_r = estimate_confidence(query, flow_r, model)

    def split(t, lo, hi):
        part = getitem(t, slice(lo, hi))
        return reshape(part, part.shape[1:]) if single else part

    dirs = [DirectionOutputs(*(split(t, lo, lo + n) for t in (flow_b, conf_b, flow_u, flow_r, conf_r)))
            for lo in (0, n)]
    return MatchOutputs(st=dirs[0], ts=dirs[1])
