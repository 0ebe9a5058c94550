"""On-disk layout for synthetic corpora.

Each sample ``NNNNN`` is stored as ``NNNNN_src.ppm``, ``NNNNN_tgt.ppm``,
``NNNNN_src_mask.pgm``, ``NNNNN_tgt_mask.pgm``, ``NNNNN_flow_st.caflo``,
``NNNNN_flow_ts.caflo`` and ``NNNNN_kps.csv``; ``pairs.csv`` indexes them.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import MissingDataError, ParseError
from .io import read_flow, read_pnm, write_flow, write_pnm
from .synth import SyntheticSample

PAIR_HEADER = ("src", "tgt", "kps", "bbox_x", "bbox_y", "bbox_w", "bbox_h")
KPS_HEADER = ("x_src", "y_src", "x_tgt", "y_tgt")


def write_keypoints(path, points: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(KPS_HEADER)
        for row in np.asarray(points, dtype=np.float64):
            writer.writerow([repr(float(v)) for v in row])


def read_keypoints(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or (lineno == 1 and row[0].strip() == KPS_HEADER[0]):
                continue
            if len(row) != 4:
                raise ParseError(f"{path}: expected 4 fields, got {len(row)}", lineno)
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"{path}: non-numeric keypoint {row}", lineno) from exc
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def write_dataset(samples, directory) -> Path:
    """Write ``samples`` plus a ``pairs.csv`` index; returns the index path."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    index = root / "pairs.csv"
    with open(index, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PAIR_HEADER)
        for i, s in enumerate(samples):
            stem = f"{i:05d}"
            write_pnm(root / f"{stem}_src.ppm", s.source)
            write_pnm(root / f"{stem}_tgt.ppm", s.target)
            write_pnm(root / f"{stem}_src_mask.pgm", s.source_mask)
            write_pnm(root / f"{stem}_tgt_mask.pgm", s.target_mask)
            write_flow(root / f"{stem}_flow_st.caflo", s.flow_st)
            write_flow(root / f"{stem}_flow_ts.caflo", s.flow_ts)
            write_keypoints(root / f"{stem}_kps.csv", s.keypoints)
            box = s.bbox if s.bbox is not None else ("", "", "", "")
            writer.writerow([f"{stem}_src.ppm", f"{stem}_tgt.ppm", f"{stem}_kps.csv", *box])
    return index


def read_dataset(directory) -> list:
    """Load every pair listed in ``pairs.csv`` with its masks and flows."""
    from .evaluation import load_pf_pairs

    root = Path(directory)
    index = root / "pairs.csv"
    if not index.exists():
        raise MissingDataError(f"no pairs.csv in {root}")
    samples = []
    for rec in load_pf_pairs(index):
        stem = Path(rec.src).name[: -len("_src.ppm")]
        base = Path(rec.src).parent
        samples.append(SyntheticSample(
            source=read_pnm(rec.src), target=read_pnm(rec.tgt),
            source_mask=read_pnm(base / f"{stem}_src_mask.pgm"),
            target_mask=read_pnm(base / f"{stem}_tgt_mask.pgm"),
            flow_st=read_flow(base / f"{stem}_flow_st.caflo"),
            flow_ts=read_flow(base / f"{stem}_flow_ts.caflo"),
            keypoints=rec.keypoints.points, bbox=rec.keypoints.bbox,
        ))
    return samples
