"""Image artifacts for inspecting a prediction."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .engine.autodiff import Tensor, no_grad
from .io import write_pnm
from .networks import CAMNet, forward_pass, warp

CHECKER = 8


def confidence_image(conf: np.ndarray, size) -> np.ndarray:
    """Grayscale ``3 x H x W`` heatmap; each feature cell becomes a constant block."""
    c = np.asarray(conf, dtype=np.float32).reshape(conf.shape[-2:])
    h, w = size
    ry = (np.arange(h) * c.shape[0]) // h
    rx = (np.arange(w) * c.shape[1]) // w
    gray = np.clip(c[ry][:, rx], 0, 1)
    return np.repeat(gray[None], 3, axis=0)


def checkerboard(a: np.ndarray, b: np.ndarray, cell: int = CHECKER) -> np.ndarray:
    """Alternate ``cell`` x ``cell`` blocks of ``a`` and ``b``."""
    h, w = a.shape[-2:]
    yy, xx = np.meshgrid(np.arange(h) // cell, np.arange(w) // cell, indexing="ij")
    return np.where(((yy + xx) % 2 == 0)[None], a, b)


def render(model: CAMNet, source: np.ndarray, target: np.ndarray) -> dict:
    """Eval-mode prediction rendered as ``confidence``, ``warped`` and ``overlay`` images."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = forward_pass(Tensor(source), Tensor(target), model)
            warped = warp(Tensor(source), out.st.flow_refined).data
    finally:
        model.train(was_training)
    warped = np.clip(warped, 0, 1)
    return {
        "confidence": confidence_image(out.st.conf_refined.data, source.shape[-2:]),
        "warped": warped,
        "overlay": checkerboard(warped, target),
    }


def write_visualization(images: dict, directory) -> list:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, img in images.items():
        path = root / f"{name}.ppm"
        write_pnm(path, img)
        paths.append(path)
    return paths
