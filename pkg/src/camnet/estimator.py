"""scikit-learn style facade over training and inference."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ShapeError
from .networks import FEATURE_STRIDE
from .synth import SyntheticSample
from .trainer import TrainConfig, Trainer


def check_pairs(X, image_size=None) -> np.ndarray:
    """Validate image pairs shaped ``n x 2 x 3 x H x W`` (source, target) in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5 or X.shape[1] != 2 or X.shape[2] != 3:
        raise ShapeError(f"expected pairs shaped n x 2 x 3 x H x W, got {X.shape}")
    h, w = X.shape[-2:]
    if h % FEATURE_STRIDE or w % FEATURE_STRIDE:
        raise ShapeError(f"image extents {h}x{w} are not divisible by {FEATURE_STRIDE}")
    if image_size is not None and (h, w) != (image_size, image_size):
        raise ShapeError(f"model expects {image_size}x{image_size} images, got {h}x{w}")
    if not np.all(np.isfinite(X)):
        raise ValueError("pairs contain non-finite values")
    return X


def check_samples(samples) -> list:
    """Resolve a corpus directory or a sequence of SyntheticSample."""
    if isinstance(samples, (str, bytes)) or hasattr(samples, "__fspath__"):
        from .dataset import read_dataset

        return read_dataset(samples)
    samples = list(samples)
    if not samples or not all(isinstance(s, SyntheticSample) for s in samples):
        raise TypeError("expected a non-empty sequence of SyntheticSample or a corpus directory")
    return samples


def pairs_from_samples(samples) -> np.ndarray:
    return np.stack([np.stack([s.source, s.target]) for s in samples])


class SemanticMatcher(BaseEstimator):
    """Confidence-aware dense matcher trained on self-supervised pairs.

    ``fit`` takes SyntheticSample objects (or a corpus directory); ``predict``
    takes image pairs and returns refined source<-target flows at feature
    resolution in normalized units.
    """

    def __init__(self, image_size=64, iterations=2000, batch_size=4, seed=0, lr_g=1e-3, lr_d=1e-4,
                 lam=0.188, gamma=0.4, beta=0.4, mu1=288.0, mu2=18.0, val_period=100,
                 temperature=0.05, sigma=1.0, tau=0.0, jitter=False, checkpoint_dir=""):
        self.image_size = image_size
        self.iterations = iterations
        self.batch_size = batch_size
        self.seed = seed
        self.lr_g = lr_g
        self.lr_d = lr_d
        self.lam = lam
        self.gamma = gamma
        self.beta = beta
        self.mu1 = mu1
        self.mu2 = mu2
        self.val_period = val_period
        self.temperature = temperature
        self.sigma = sigma
        self.tau = tau
        self.jitter = jitter
        self.checkpoint_dir = checkpoint_dir

    def _config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y=None, validation=None):
        samples = check_samples(X)
        val = check_samples(validation) if validation is not None else []
        trainer = Trainer(self._config(), train_samples=samples, val_samples=val)
        result = trainer.fit()
        self.model_ = result.checkpoint.model
        self.model_.eval()
        self.history_ = result.trace
        self.validation_ = result.validation
        return self

    def _outputs(self, X):
        from .evaluation import predict_flows

        check_is_fitted(self, "model_")
        X = check_pairs(X, self.model_.image_size)
        return predict_flows(self.model_, list(X[:, 0]), list(X[:, 1]))

    def predict(self, X, level="refined") -> np.ndarray:
        if level not in ("base", "refined"):
            raise ValueError(f"level must be 'base' or 'refined', got {level!r}")
        return self._outputs(X)[f"flow_{level}"]

    def predict_confidence(self, X, level="refined") -> np.ndarray:
        if level not in ("base", "refined"):
            raise ValueError(f"level must be 'base' or 'refined', got {level!r}")
        return self._outputs(X)[f"conf_{level}"]

    def score(self, X, y=None, alpha=0.1) -> float:
        """PCK@alpha (image reference) of the refined flow on SyntheticSample pairs."""
        from .evaluation import evaluate_samples

        check_is_fitted(self, "model_")
        samples = check_samples(X)
        report = evaluate_samples(self.model_, samples, alphas=(alpha,), levels=("refined",))
        return report.get(alpha, "refined").pck
