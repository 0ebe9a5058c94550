"""Keypoint transfer and PCK."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .engine import functional as F
from .engine.autodiff import Tensor, no_grad
from .errors import MissingDataError, ParseError
from .io import pnm_size
from .losses import feature_mask
from .networks import CAMNet, forward_pass
from .synth import default_tau, label_confidence, norm_to_pixel, pixel_to_norm

log = logging.getLogger(__name__)

RESULT_HEADER = ("alpha", "reference", "level", "correct", "total", "pck")


@dataclass
class KeypointSet:
    points: np.ndarray  # K x 4: x_src, y_src, x_tgt, y_tgt (pixels)
    bbox: Optional[tuple] = None  # x, y, w, h of the target object

    @property
    def source(self):
        return self.points[:, :2]

    @property
    def target(self):
        return self.points[:, 2:]


@dataclass
class PairRecord:
    src: str
    tgt: str
    keypoints: KeypointSet


@dataclass
class PckResult:
    alpha: float
    reference: str
    correct: list = field(default_factory=list)  # per pair
    total: list = field(default_factory=list)
    level: str = "refined"

    @property
    def pck(self) -> float:
        n = sum(self.total)
        return sum(self.correct) / n if n else 0.0

    def merge(self, other: "PckResult"):
        self.correct.extend(other.correct)
        self.total.extend(other.total)
        return self

    def row(self):
        return (self.alpha, self.reference, self.level, sum(self.correct), sum(self.total), self.pck)


def transfer_keypoints(flow, target_points, image_size) -> np.ndarray:
    """Move target keypoints (pixels) to the source frame through a source<-target flow."""
    flow = flow.data if isinstance(flow, Tensor) else np.asarray(flow)
    h, w = image_size
    pts = np.asarray(target_points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return pts.copy()
    nx = pixel_to_norm(pts[:, 0], w)
    ny = pixel_to_norm(pts[:, 1], h)
    with no_grad():
        up = F.upsample_linear(Tensor(flow.astype(np.float64)), h, w)
        coords = np.stack([nx, ny]).reshape(2, 1, -1)
        off = F.bilinear_sample(up, Tensor(coords), padding="border").data.reshape(2, -1)
    return np.stack([norm_to_pixel(nx + off[0], w), norm_to_pixel(ny + off[1], h)], axis=1)


def reference_length(reference: str, image_size=None, bbox=None) -> float:
    if reference == "image":
        if image_size is None:
            raise MissingDataError("image reference needs the image size")
        return float(max(image_size))
    if reference == "bbox":
        if bbox is None:
            raise MissingDataError("bbox reference requested but the pair has no bounding box")
        return float(max(bbox[2], bbox[3]))
    raise ValueError(f"reference must be 'image' or 'bbox', got {reference!r}")


def pck(predicted, ground_truth, alpha: float, reference: str = "image", image_size=None,
        bbox=None, level: str = "refined") -> PckResult:
    """A keypoint is correct iff its pixel error is <= alpha * reference length."""
    pred = np.asarray(predicted, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth keypoints")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    thresh = alpha * reference_length(reference, image_size, bbox)
    err = np.sqrt(((pred - gt) ** 2).sum(axis=1))
    return PckResult(alpha, reference, [int((err <= thresh).sum())], [len(gt)], level)


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass
class EvalReport:
    results: list
    confidence: dict  # level -> (mean conf on correct cells, mean conf on wrong cells)
    skipped: int = 0

    def table(self):
        return [r.row() for r in self.results]

    def get(self, alpha, level="refined", reference="image"):
        for r in self.results:
            if r.alpha == alpha and r.level == level and r.reference == reference:
                return r
        raise KeyError((alpha, level, reference))


def predict_flows(model: CAMNet, sources, targets, batch_size: int = 16):
    """Eval-mode forward pass; returns dict of stacked numpy maps (s<-t direction)."""
    was_training = model.training
    model.eval()
    keys = ("flow_base", "conf_base", "flow_updated", "flow_refined", "conf_refined")
    out = {k: [] for k in keys}
    try:
        with no_grad():
            for i in range(0, len(sources), batch_size):
                res = forward_pass(Tensor(np.stack(sources[i:i + batch_size])),
                                   Tensor(np.stack(targets[i:i + batch_size])), model)
                for k in keys:
                    out[k].append(getattr(res.st, k).data)
    finally:
        model.train(was_training)
    return {k: np.concatenate(v) if v else np.zeros((0,)) for k, v in out.items()}


def evaluate_samples(model: CAMNet, samples: Sequence, alphas=(0.05, 0.1, 0.15),
                     levels=("base", "refined"), reference="image", tau=None,
                     batch_size: int = 16) -> EvalReport:
    """PCK per alpha and flow level, plus mean confidence split by flow correctness.

    Confidence statistics cover foreground target cells and use ground-truth
    flows when the samples carry them.
    """
    pred = predict_flows(model, [s.source for s in samples], [s.target for s in samples], batch_size)
    results = {(a, lv): PckResult(a, reference, level=lv) for lv in levels for a in alphas}
    conf_stats = {lv: [[], []] for lv in levels}
    for i, s in enumerate(samples):
        size = s.source.shape[-2:]
        for lv in levels:
            moved = transfer_keypoints(pred[f"flow_{lv}"][i], s.keypoints[:, 2:], size)
            for a in alphas:
                results[(a, lv)].merge(pck(moved, s.keypoints[:, :2], a, reference, size, s.bbox, lv))
            if s.flow_st is not None:
                flow = pred[f"flow_{lv}"][i]
                t = tau if tau is not None else default_tau(flow.shape[-2])
                ok = label_confidence(flow, s.flow_st, t)[0] > 0.5
                fg = feature_mask(s.target_mask, flow.shape[-2:])[0, 0] > 0.5
                conf = pred[f"conf_{lv}"][i][0]
                conf_stats[lv][0].extend(conf[ok & fg].tolist())
                conf_stats[lv][1].extend(conf[~ok & fg].tolist())
    confidence = {lv: (float(np.mean(c)) if c else float("nan"), float(np.mean(w)) if w else float("nan"))
                  for lv, (c, w) in conf_stats.items()}
    return EvalReport([results[(a, lv)] for lv in levels for a in alphas], confidence)


def evaluate_dataset(model, directory, alphas=(0.05, 0.1, 0.15), levels=("base", "refined"),
                     reference="image") -> EvalReport:
    """Evaluate a model (or checkpoint path) on a directory indexed by ``pairs.csv``.

    Pairs whose files cannot be read are skipped and counted in the report.
    """
    from .dataset import read_keypoints  # noqa: F401  (keeps import graph acyclic)
    from .io import read_pnm
    from .synth import SyntheticSample
    from .trainer import load_model

    if not isinstance(model, CAMNet):
        model = load_model(model)
    records = load_pf_pairs(Path(directory) / "pairs.csv")
    samples, skipped = [], 0
    for rec in records:
        try:
            src, tgt = read_pnm(rec.src), read_pnm(rec.tgt)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", rec.src, exc)
            skipped += 1
            continue
        stem = Path(rec.src).name.rsplit("_src", 1)[0]
        base = Path(rec.src).parent
        flow_st = mask_t = None
        try:
            from .io import read_flow
            flow_st = read_flow(base / f"{stem}_flow_st.caflo")
            mask_t = read_pnm(base / f"{stem}_tgt_mask.pgm")
        except (OSError, ValueError):
            pass
        samples.append(SyntheticSample(src, tgt, None, mask_t, flow_st, None,
                                       rec.keypoints.points, bbox=rec.keypoints.bbox))
    report = evaluate_samples(model, samples, alphas, levels, reference)
    report.skipped = skipped
    return report


def write_results(fh, results):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(RESULT_HEADER)
    for r in results:
        alpha, ref, level, correct, total, value = r.row()
        writer.writerow([repr(float(alpha)), ref, level, correct, total, repr(float(value))])


# ---------------------------------------------------------------------------
# PF-style pair files


def load_pf_pairs(path) -> list:
    """Parse a ``src,tgt,kps,bbox_x,bbox_y,bbox_w,bbox_h`` index.

    Relative paths resolve against the index's directory.  Keypoints are
    checked against the image extents read from the PNM headers.
    """
    from .dataset import read_keypoints

    path = Path(path)
    root = path.parent
    records = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if lineno == 1 and row and row[0].strip() == "src":
                continue
            if not row:
                continue
            if len(row) != 7:
                raise ParseError(f"{path}: expected 7 fields, got {len(row)}", lineno)
            src, tgt, kps = (str(root / v.strip()) for v in row[:3])
            box_fields = [v.strip() for v in row[3:]]
            if all(box_fields):
                try:
                    bbox = tuple(float(v) for v in box_fields)
                except ValueError as exc:
                    raise ParseError(f"{path}: malformed bbox {box_fields}", lineno) from exc
            elif any(box_fields):
                raise ParseError(f"{path}: partial bbox {box_fields}", lineno)
            else:
                bbox = None
            points = read_keypoints(kps)
            _check_bounds(points, src, tgt, path, lineno)
            records.append(PairRecord(src, tgt, KeypointSet(points, bbox)))
    return records


def _check_bounds(points, src, tgt, path, lineno):
    for cols, img in (((0, 1), src), ((2, 3), tgt)):
        try:
            h, w = pnm_size(img)
        except OSError:
            continue
        xs, ys = points[:, cols[0]], points[:, cols[1]]
        if np.any(xs < 0) or np.any(ys < 0) or np.any(xs > w - 1) or np.any(ys > h - 1):
            raise ParseError(f"{path}: keypoints outside the {w}x{h} frame of {img}", lineno)


def write_pf_pairs(path, records):
    from .dataset import write_keypoints

    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("src", "tgt", "kps", "bbox_x", "bbox_y", "bbox_w", "bbox_h"))
        for i, rec in enumerate(records):
            kps_name = Path(rec.src).stem + f"_{i:05d}_kps.csv"
            write_keypoints(path.parent / kps_name, rec.keypoints.points)
            box = [repr(float(v)) for v in rec.keypoints.bbox] if rec.keypoints.bbox else ["", "", "", ""]
            writer.writerow([rec.src, rec.tgt, kps_name, *box])
