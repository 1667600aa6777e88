"""Adam, early stopping on validation F1, and evaluation."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import softmax

from . import tensor as T
from .data import Dataset
from .errors import ConfigError, ShapeError, TrainingDiverged
from .metrics import METRIC_NAMES, MetricsReport, compute_metrics
from .nn import Module, cross_entropy
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    ``lr`` may be zero (a no-op optimiser, useful for checks); every other
    numeric field must be positive and ``patience <= max_epochs``.
    """

    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be finite and >= 0, got {self.lr}")
        for name in ("batch_size", "max_epochs", "patience"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) exceeds max_epochs ({self.max_epochs})")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"adam betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        object.__setattr__(self, "betas", (float(b1), float(b2)))


# -- optimiser ------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
              state: AdamState, cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Entries whose gradient is ``None`` (unused parameters) are left alone.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimiser state have different lengths")
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} / state {m.shape} do not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype)
    return state


class Adam:
    """Adam over the parameters of a :class:`Module`."""

    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params],
                  self.state, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- early stopping and logging --------------------------------------------------------


class EarlyStopping:
    """Tracks the best score; only strict improvements count, so ties keep the earlier epoch."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch: int | None = None
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record ``score`` for ``epoch``; return whether it is a new best."""
        if math.isfinite(score) and score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val: MetricsReport
    wall_time_s: float = 0.0


@dataclass
class RunLog:
    """Per-epoch history of a training run.

    The CSV form leaves out wall-clock so two identical runs produce
    identical files; timings stay available on the records.
    """

    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    CSV_HEADER = ("epoch", "train_loss") + tuple(f"val_{m}" for m in METRIC_NAMES)

    @property
    def best(self) -> EpochRecord:
        for rec in self.epochs:
            if rec.epoch == self.best_epoch:
                return rec
        raise LookupError("run has no best epoch")

    @property
    def wall_time_s(self) -> float:
        return float(sum(r.wall_time_s for r in self.epochs))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_HEADER)
        for rec in self.epochs:
            writer.writerow([rec.epoch, repr(rec.train_loss)] + [repr(v) for v in rec.val.as_tuple()])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


# -- evaluation -----------------------------------------------------------------------


def predict_proba(model: Module, series: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class probabilities ``(n, K)`` in float64, computed in eval mode."""
    outs = []
    with T.no_grad():
        for start in range(0, len(series), batch_size):
            logits = model(series[start:start + batch_size], training=False)
            outs.append(logits.data.astype(np.float64))
    return softmax(np.concatenate(outs), axis=1)


def evaluate(model: Module, dataset: Dataset, batch_size: int = 256) -> MetricsReport:
    if len(dataset) == 0:
        raise ShapeError("cannot evaluate on an empty dataset")
    probs = predict_proba(model, dataset.series, batch_size)
    return compute_metrics(dataset.labels, probs, dataset.n_classes)


# -- training -------------------------------------------------------------------------


def run_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent shuffle and noise (dropout / augmentation) generators for ``seed``."""
    shuffle_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle_seq), np.random.default_rng(noise_seq)


ValMetricsFn = Callable[[int, Module], MetricsReport]


def train(model: Module, train_set: Dataset, val_set: Dataset, cfg: TrainConfig,
          val_metrics_fn: ValMetricsFn | None = None,
          on_epoch_end: Callable[[EpochRecord], None] | None = None,
          ) -> tuple[dict[str, np.ndarray], RunLog]:
    """Fit ``model`` with Adam and early stopping on validation macro F1.

    Args:
        model: Model mapping ``(B, T, C)`` batches to logits; updated in place
            and left holding the best-epoch parameters on return.
        train_set: Training samples, reshuffled each epoch from ``cfg.seed``.
        val_set: Samples scored after every epoch.
        cfg: Optimiser and stopping settings.
        val_metrics_fn: Replaces the validation pass, called as
            ``fn(epoch, model)``.
        on_epoch_end: Progress callback.

    Returns:
        The best-epoch parameters and the run log.

    Raises:
        TrainingDiverged: The loss of some batch is not finite.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ShapeError("train and validation sets must be nonempty")
    shuffle_rng, noise_rng = run_streams(cfg.seed)
    optimiser = Adam(model.parameters(), cfg)
    stopper = EarlyStopping(cfg.patience)
    log = RunLog()
    best_params = model.state_dict()
    n = len(train_set)

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            optimiser.zero_grad()
            try:
                logits = model(train_set.series[idx], training=True, rng=noise_rng)
                loss = cross_entropy(logits, train_set.labels[idx])
            except FloatingPointError as exc:  # NaN caught inside a softmax
                raise TrainingDiverged(epoch, b, math.nan) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            loss.backward()
            optimiser.step()
            total += value * len(idx)

        report = val_metrics_fn(epoch, model) if val_metrics_fn else evaluate(model, val_set)
        if stopper.update(epoch, report.f1):
            best_params = model.state_dict()
        rec = EpochRecord(epoch, total / n, report, time.perf_counter() - t0)
        log.epochs.append(rec)
        log.best_epoch = stopper.best_epoch
        if on_epoch_end is not None:
            on_epoch_end(rec)
        if stopper.should_stop:
            log.stopped_early = True
            break

    model.load_state_dict(best_params)
    return best_params, log
