"""Confidence-aware semantic matching with self-supervised adversarial training."""

from .estimator import SemanticMatcher
from .networks import CAMNet, MatcherConfig, forward_pass
from .trainer import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = ["CAMNet", "MatcherConfig", "SemanticMatcher", "TrainConfig", "Trainer", "forward_pass", "train"]
