"""Alternating adversarial training, checkpoints and model selection."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .engine.autodiff import Tape, Tensor, mul, no_grad
from .engine.layers import frozen, stats_frozen
from .engine.optim import Adam
from .errors import ConfigError, FormatError, TrainingDiverged
from .io import (fmt, format_config, load_tensors, parse_config, save_tensors, tensor_to_text,
                 text_to_tensor, write_csv)
from .losses import (REPORT_COLUMNS, LossWeights, adversarial_generator_loss, alignment_loss,
                     confidence_loss, discriminator_loss, feature_mask, generator_total_loss)
from .networks import FEATURE_STRIDE, CAMNet, MatcherConfig, forward_pass, warp
from .synth import default_tau, label_confidence, make_dataset

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("step",) + REPORT_COLUMNS
VALIDATION_COLUMNS = ("step", "pck_base", "pck_refined")
VAL_ALPHA = 0.1


@dataclass
class TrainConfig:
    image_size: int = 64
    feature_stride: int = FEATURE_STRIDE
    train_data: str = ""  # empty: generate train_count pairs in memory
    val_data: str = ""
    train_count: int = 200
    val_count: int = 50
    iterations: int = 2000
    batch_size: int = 4
    seed: int = 0
    lam: float = 0.188
    gamma: float = 0.4
    beta: float = 0.4
    mu1: float = 288.0
    mu2: float = 18.0
    lr_g: float = 1e-3
    lr_d: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    val_period: int = 100
    checkpoint_dir: str = ""
    tau: float = 0.0  # 0 selects one feature cell
    temperature: float = 0.05
    sigma: float = 1.0
    jitter: bool = False
    confidence_grad_to_features: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.iterations < 1 or self.batch_size < 1 or self.val_period < 1:
            raise ConfigError("iterations, batch_size and val_period must be >= 1")
        if self.feature_stride != FEATURE_STRIDE:
            raise ConfigError(f"the extractor has a fixed stride of {FEATURE_STRIDE}")
        if self.image_size % FEATURE_STRIDE or self.image_size < 32:
            raise ConfigError(f"image_size must be a multiple of {FEATURE_STRIDE} and >= 32")
        for name in ("lr_g", "lr_d", "temperature", "sigma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")
        try:
            self.weights
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lam, self.gamma, self.beta, self.mu1, self.mu2)

    @property
    def matcher(self) -> MatcherConfig:
        return MatcherConfig(temperature=self.temperature, sigma=self.sigma,
                             confidence_grad_to_features=self.confidence_grad_to_features)

    def effective_tau(self) -> float:
        return self.tau if self.tau > 0 else default_tau(self.image_size // FEATURE_STRIDE)

    def to_text(self) -> str:
        return format_config({k: fmt(v) for k, v in asdict(self).items()})

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        values = parse_config(text)
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, kinds[key])
        kwargs.update(overrides)
        return cls(**kwargs)


def _coerce(key, raw, kind):
    try:
        if kind in ("bool", bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    source: np.ndarray
    target: np.ndarray
    source_mask: np.ndarray
    target_mask: np.ndarray
    flow_st: np.ndarray
    flow_ts: np.ndarray

    @classmethod
    def stack(cls, samples):
        return cls(*(np.stack([getattr(s, f.name) for s in samples])
                     for f in fields(cls)))


def batch_indices(seed: int, step: int, count: int, batch_size: int) -> np.ndarray:
    """Sample indices for ``step``; a pure function of ``(seed, step)`` so resumes need no RNG state."""
    rng = np.random.default_rng([seed, 1, step])
    return rng.choice(count, size=batch_size, replace=batch_size > count)


def _jitter(images: np.ndarray, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 2, step])
    n = images.shape[0]
    gain = rng.uniform(0.9, 1.1, size=(n, 1, 1, 1))
    shift = rng.uniform(-0.1, 0.1, size=(n, 1, 1, 1))
    mean = images.mean(axis=(1, 2, 3), keepdims=True)
    return np.clip((images - mean) * gain + mean + shift, 0, 1).astype(images.dtype)


# ---------------------------------------------------------------------------
# steps


def _scalar_report(terms: dict) -> dict:
    return {k: float(v.item() if isinstance(v, Tensor) else v) for k, v in terms.items()}


def _check_finite(report: dict, phase: str):
    bad = [k for k, v in report.items() if not math.isfinite(v)]
    if bad:
        raise TrainingDiverged(f"{phase} step produced non-finite {', '.join(bad)}", report)


def _fake_pairs(batch: Batch, outputs, first_s=None, first_t=None):
    """Masked (warped, reference) pairs in each frame: (I~_t, I_t) and (I~_s, I_s)."""
    src = Tensor(batch.source if first_s is None else first_s)
    tgt = Tensor(batch.target if first_t is None else first_t)
    m_t, m_s = Tensor(batch.target_mask), Tensor(batch.source_mask)
    fake_t = mul(warp(src, outputs.st.flow_refined), m_t)
    fake_s = mul(warp(tgt, outputs.ts.flow_refined), m_s)
    return (fake_s, mul(Tensor(batch.source), m_s)), (fake_t, mul(Tensor(batch.target), m_t))


def train_step_generator(model: CAMNet, batch: Batch, opt: Adam, weights: LossWeights, tau: float,
                         jittered=None) -> dict:
    """One generator update with the discriminator frozen.

    Confidence labels are recomputed from the live flows against ground truth.
    """
    with frozen(model.discriminator), Tape() as tape:
        out = forward_pass(Tensor(batch.source), Tensor(batch.target), model)
        l_align, parts = alignment_loss(out, batch.target_mask, batch.source_mask, weights)
        labels = {
            "base_st": label_confidence(out.st.flow_base, batch.flow_st, tau),
            "base_ts": label_confidence(out.ts.flow_base, batch.flow_ts, tau),
            "refined_st": label_confidence(out.st.flow_refined, batch.flow_st, tau),
            "refined_ts": label_confidence(out.ts.flow_refined, batch.flow_ts, tau),
        }
        shape = out.st.flow_base.shape[-2:]
        fg_t = feature_mask(batch.target_mask, shape)
        fg_s = feature_mask(batch.source_mask, shape)
        l_confi, cparts = confidence_loss(out, labels, weights, fg_t, fg_s)
        js, jt = jittered if jittered is not None else (None, None)
        (fake_s, real_s), (fake_t, real_t) = _fake_pairs(batch, out, js, jt)
        l_adv = adversarial_generator_loss(model.discriminator(fake_s, real_s),
                                           model.discriminator(fake_t, real_t))
        l_g = generator_total_loss(l_align, l_confi, l_adv, weights)
        report = _scalar_report({**parts, **cparts, "L_adv": l_adv, "L_G": l_g})
        _check_finite(report, "generator")
        opt.zero_grad()
        tape.backward(l_g)
    opt.step()
    return report


def train_step_discriminator(model: CAMNet, batch: Batch, opt: Adam, jittered=None) -> dict:
    """One discriminator update on detached generator output."""
    with no_grad(), stats_frozen(*model.generator_modules()):
        out = forward_pass(Tensor(batch.source), Tensor(batch.target), model)
        js, jt = jittered if jittered is not None else (None, None)
        (fake_s, ref_s), (fake_t, ref_t) = _fake_pairs(batch, out, js, jt)
        m_s, m_t = Tensor(batch.source_mask), Tensor(batch.target_mask)
        real_first_s = ref_s if js is None else mul(Tensor(js), m_s)
        real_first_t = ref_t if jt is None else mul(Tensor(jt), m_t)
    with frozen(*model.generator_modules()), Tape() as tape:
        d = model.discriminator
        l_d, l_real, l_fake = discriminator_loss(d(real_first_s, ref_s), d(real_first_t, ref_t),
                                                 d(fake_s.detach(), ref_s), d(fake_t.detach(), ref_t))
        report = _scalar_report({"L_real": l_real, "L_fake": l_fake, "L_D": l_d})
        _check_finite(report, "discriminator")
        opt.zero_grad()
        tape.backward(l_d)
    opt.step()
    return report


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: CAMNet
    opt_g: Adam
    opt_d: Adam
    step: int
    config: TrainConfig
    best_pck: float = -1.0
    best_step: int = -1


def build_model(config: TrainConfig):
    model = CAMNet(config.image_size, config.matcher, seed=config.seed)
    opt_g = Adam(model.generator_parameters(), config.lr_g, (config.beta1, config.beta2))
    opt_d = Adam(model.discriminator_parameters(), config.lr_d, (config.beta1, config.beta2))
    return model, opt_g, opt_d


def checkpoint_tensors(ckpt: Checkpoint):
    tensors = {f"model.{k}": v for k, v in ckpt.model.state_dict().items()}
    tensors.update(ckpt.opt_g.state_dict("opt_g."))
    tensors.update(ckpt.opt_d.state_dict("opt_d."))
    tensors["step"] = np.array([ckpt.step], dtype=np.float32)
    tensors["best"] = np.array([ckpt.best_pck, ckpt.best_step], dtype=np.float32)
    tensors["config"] = text_to_tensor(ckpt.config.to_text())
    return tensors


def save_checkpoint(ckpt: Checkpoint, path):
    save_tensors(path, checkpoint_tensors(ckpt))


def load_checkpoint(path) -> Checkpoint:
    tensors = load_tensors(path)
    for key in ("step", "config", "best"):
        if key not in tensors:
            raise FormatError(f"{path}: checkpoint lacks {key!r}")
    config = TrainConfig.from_text(tensor_to_text(tensors["config"]))
    model, opt_g, opt_d = build_model(config)
    prefix = "model."
    model.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    opt_g.load_state_dict(tensors, "opt_g.")
    opt_d.load_state_dict(tensors, "opt_d.")
    best = tensors["best"]
    return Checkpoint(model, opt_g, opt_d, int(tensors["step"][0]), config,
                      float(best[0]), int(best[1]))


def load_model(path) -> CAMNet:
    model = load_checkpoint(path).model
    model.eval()
    return model


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list  # one dict per iteration
    validation: list  # (step, pck_base, pck_refined)
    seconds: float


def _load_split(path, count, seed, size):
    from .dataset import read_dataset

    if path:
        return read_dataset(path)
    return make_dataset(count, seed=seed, size=size)


def validate(model: CAMNet, samples) -> tuple:
    from .evaluation import evaluate_samples

    report = evaluate_samples(model, samples, alphas=(VAL_ALPHA,), levels=("base", "refined"))
    return report.get(VAL_ALPHA, "base").pck, report.get(VAL_ALPHA, "refined").pck


class Trainer:
    """Owns the model, both optimizers and the data for one training run.

    Each iteration runs one discriminator step and then one generator step.
    Validation PCK@0.1 of the refined flow selects ``best.ckpt``.
    """

    def __init__(self, config: TrainConfig, train_samples=None, val_samples=None,
                 resume: Optional[str] = None):
        self.config = config
        seed, size = config.seed, config.image_size
        self.train_samples = (train_samples if train_samples is not None
                              else _load_split(config.train_data, config.train_count, seed, size))
        self.val_samples = (val_samples if val_samples is not None
                            else _load_split(config.val_data, config.val_count, seed + 1, size))
        if not self.train_samples:
            raise ConfigError("training split is empty")
        if resume:
            self.ckpt = load_checkpoint(resume)
            self.ckpt.config = config
        else:
            self.ckpt = Checkpoint(*build_model(config), step=0, config=config)
        self.tau = config.effective_tau()
        self.trace = []
        self.validation = []
        self.out_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def batch(self, step: int) -> Batch:
        idx = batch_indices(self.config.seed, step, len(self.train_samples), self.config.batch_size)
        return Batch.stack([self.train_samples[i] for i in idx])

    def step(self) -> dict:
        c = self.ckpt
        step = c.step + 1
        batch = self.batch(step)
        jittered = None
        if self.config.jitter:
            jittered = (_jitter(batch.source, self.config.seed, step),
                        _jitter(batch.target, self.config.seed + 1, step))
        report = train_step_discriminator(c.model, batch, c.opt_d, jittered)
        report.update(train_step_generator(c.model, batch, c.opt_g, self.config.weights, self.tau,
                                           jittered))
        c.step = step
        row = {"step": step, **{k: report[k] for k in REPORT_COLUMNS}}
        self.trace.append(row)
        return row

    def run_validation(self):
        c = self.ckpt
        base, refined = validate(c.model, self.val_samples) if self.val_samples else (0.0, 0.0)
        self.validation.append((c.step, base, refined))
        log.info("step %d: PCK@%.2f base %.4f refined %.4f", c.step, VAL_ALPHA, base, refined)
        score = float(np.float32(refined))  # checkpoints hold it as float32
        if score > c.best_pck:
            c.best_pck, c.best_step = score, c.step
            self._save("best.ckpt")
        return base, refined

    def _save(self, name):
        if self.out_dir:
            save_checkpoint(self.ckpt, self.out_dir / name)

    def fit(self, iterations: Optional[int] = None) -> TrainResult:
        """Train until ``iterations`` total steps (config value by default)."""
        total = self.config.iterations if iterations is None else iterations
        start = time.perf_counter()
        if self.ckpt.step == 0 and not self.validation:
            self.run_validation()  # untrained baseline
        try:
            while self.ckpt.step < total:
                self.step()
                if self.ckpt.step % self.config.val_period == 0 or self.ckpt.step == total:
                    self.run_validation()
                    self._save("last.ckpt")
        except TrainingDiverged:
            log.error("training diverged at step %d; last.ckpt keeps the last good state",
                      self.ckpt.step + 1)
            self._write_logs()
            raise
        self._save("final.ckpt")
        self._write_logs()
        return TrainResult(self.ckpt, self.trace, self.validation, time.perf_counter() - start)

    def _write_logs(self):
        if not self.out_dir:
            return
        trace_path = self.out_dir / "trace.csv"
        earlier = []
        if self.trace and trace_path.exists():
            first = self.trace[0]["step"]
            earlier = [r for r in read_trace(trace_path) if r[0] < first]
        rows = earlier + [[r["step"]] + [fmt(r[k]) for k in REPORT_COLUMNS] for r in self.trace]
        write_csv(trace_path, TRACE_COLUMNS, rows)
        write_csv(self.out_dir / "validation.csv", VALIDATION_COLUMNS,
                  [[s, fmt(b), fmt(r)] for s, b, r in self.validation])


def read_trace(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [[int(r[0])] + r[1:] for r in rows]


def train(config: TrainConfig, resume: Optional[str] = None, **kwargs) -> TrainResult:
    return Trainer(config, resume=resume, **kwargs).fit()
