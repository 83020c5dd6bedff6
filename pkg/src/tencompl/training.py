"""Adam with weight decay, mini-batch training and early stopping."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyTensorError, NumericError
from .losses import MetricsReport, WeightScheme, compute_weights, metrics
from .model import FactorModel, gradients, init_model, predict, project_nonnegative, shift_nonnegative
from .tensor import SparseTensor3

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "EarlyStopping",
    "EpochRecord",
    "TrainHistory",
    "train",
    "evaluate",
    "write_history",
]

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class TrainConfig:
    rank: int = 300
    learning_rate: float = 0.001
    weight_decay: float = 5e-4
    max_epochs: int = 100
    patience: int = 5
    batch_size: int = 8192
    loss: str = "mse"  # or "weighted"
    lam: float = 0.0
    t1: float = 0.585
    t2: float = 2.0
    w1: float = 5.0
    w2: float = 50.0
    seed: int = 0
    monitor: str = "mse"  # or "weighted_mae"
    init_scale: float = 0.0  # 0 selects model.default_scale(rank)
    plain_bias: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.rank >= 1, "rank", "must be >= 1"),
            (self.learning_rate >= 0, "learning_rate", "must be >= 0"),
            (self.weight_decay >= 0, "weight_decay", "must be >= 0"),
            (self.max_epochs >= 1, "max_epochs", "must be >= 1"),
            (self.patience >= 1, "patience", "must be >= 1"),
            (self.batch_size >= 1, "batch_size", "must be >= 1"),
            (self.lam >= 0, "lam", "must be >= 0"),
            (self.loss in ("mse", "weighted"), "loss", "must be 'mse' or 'weighted'"),
            (self.monitor in ("mse", "weighted_mae"), "monitor", "must be 'mse' or 'weighted_mae'"),
            (self.init_scale >= 0, "init_scale", "must be >= 0"),
        ]
        for ok, name, why in checks:
            if not ok:
                raise ConfigError(f"{name} {why}, got {getattr(self, name)!r}", flag="--" + name.replace("_", "-"))
        self.scheme  # validates thresholds and tier weights

    @property
    def scheme(self) -> WeightScheme:
        return WeightScheme(self.t1, self.t2, self.w1, self.w2)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        """Build from string values, as read from a key=value file or flags."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown training option {key!r}", flag="--" + key.replace("_", "-"))
            kwargs[key] = _coerce(key, types[key], raw)
        return cls(**kwargs)

    def to_dict(self):
        return dataclasses.asdict(self)


def _coerce(key, typ, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        if typ in ("bool", bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}", flag="--" + key.replace("_", "-")) from None
    return raw


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(model: FactorModel, grads, state: AdamState, config: TrainConfig) -> FactorModel:
    """One bias-corrected Adam update, in place.

    Weight decay enters as ``decay * theta`` added to the gradient of factor
    and attention matrices; biases are not decayed.  Non-negative variants
    are projected onto the non-negative orthant afterwards.
    """
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {key}")
    state.t += 1
    lr, decay = config.learning_rate, config.weight_decay
    bc1 = 1.0 - BETA1**state.t
    bc2 = 1.0 - BETA2**state.t
    decayed = set(model.factor_keys())
    for key, g in grads.items():
        theta = model.params[key]
        if decay and key in decayed:
            g = g + decay * theta
        if key not in state.m:
            state.m[key] = np.zeros_like(theta)
            state.v[key] = np.zeros_like(theta)
        m, v = state.m[key], state.v[key]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        if lr:
            theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + EPS)
    if model.nonneg:
        project_nonnegative(model)
    return model


class EarlyStopping:
    """Patience counter over a monitored metric (lower is better).

    Epochs are numbered from 1.  Training should stop once ``patience``
    consecutive epochs fail to improve strictly on the best value.
    """

    def __init__(self, patience: int = 5):
        if patience < 1:
            raise ConfigError("patience must be >= 1", flag="--patience")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        """Record one epoch; returns True if it is the new best."""
        self.epoch += 1
        if value < self.best:
            self.best = value
            self.best_epoch = self.epoch
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
    validation: MetricsReport | None


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""
    monitor: str = "mse"

    def monitored(self):
        out = []
        for rec in self.epochs:
            if rec.validation is None:
                out.append(rec.train_loss)
            else:
                out.append(getattr(rec.validation, self.monitor))
        return out


def evaluate(model: FactorModel, tensor: SparseTensor3, scheme: WeightScheme = WeightScheme()) -> MetricsReport:
    """Metrics of the model's data-unit predictions on observed entries."""
    yhat = predict(model, tensor.coords, data_units=True)
    return metrics(tensor.values, yhat, compute_weights(tensor.values, scheme), scheme.thresholds)


def train(
    train_tensor: SparseTensor3,
    validation: SparseTensor3 | None,
    variant: str = "attention",
    config: TrainConfig | None = None,
    *,
    progress=None,
):
    """Fit a factor model by mini-batch Adam with early stopping.

    Parameters
    ----------
    train_tensor, validation : SparseTensor3
        Disjoint observed entry sets.  Without a validation tensor the
        training loss is monitored.
    variant : str
        One of :data:`tencompl.model.VARIANTS`.
    config : TrainConfig
    progress : callable, optional
        Called with each :class:`EpochRecord`.

    Returns
    -------
    (FactorModel, TrainHistory)
        The model from the best epoch, not the last one.

    Raises
    ------
    NumericError
        On divergence; the partial history is attached as ``.history``.
    """
    config = config or TrainConfig()
    if train_tensor.nnz == 0:
        raise EmptyTensorError("training tensor has no entries")
    if validation is not None and validation.nnz == 0:
        validation = None
    scheme = config.scheme
    y_data = train_tensor.values
    w = compute_weights(y_data, scheme) if config.loss == "weighted" else None
    lam = config.lam if config.loss == "weighted" else 0.0

    offset = 0.0
    if variant.startswith("nonneg"):
        train_tensor, offset = shift_nonnegative(train_tensor)
    model = init_model(
        train_tensor.dims,
        config.rank,
        variant,
        seed=config.seed,
        scale=config.init_scale or None,
        use_bias=True if config.plain_bias else None,
    )
    model.offset = offset
    coords, y = train_tensor.coords, train_tensor.values
    if model.use_bias:
        model.params["bias_global"][0] = float(np.mean(y))

    rng = np.random.default_rng([config.seed, 1])
    state = AdamState()
    stopper = EarlyStopping(config.patience)
    history = TrainHistory(monitor=config.monitor)
    best = model.copy()
    n, bs = y.shape[0], config.batch_size

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        try:
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                grads, loss = gradients(model, coords[idx], y[idx], None if w is None else w[idx], lam)
                adam_step(model, grads, state, config)
                total += loss * idx.shape[0]
            model.check_finite()
        except NumericError as exc:
            history.stop_reason = "diverged"
            exc.history = history
            raise
        train_loss = total / n
        report = evaluate(model, validation, scheme) if validation is not None else None
        rec = EpochRecord(epoch, train_loss, report)
        history.epochs.append(rec)
        value = train_loss if report is None else getattr(report, config.monitor)
        if not math.isfinite(value):
            history.stop_reason = "diverged"
            exc = NumericError(f"non-finite monitored metric at epoch {epoch}")
            exc.history = history
            raise exc
        if stopper.update(value):
            best = model.copy()
        if progress is not None:
            progress(rec)
        log.info("epoch %d train_loss=%.6g monitored=%.6g", epoch, train_loss, value)
        if stopper.should_stop:
            history.stop_reason = "patience"
            break
    else:
        history.stop_reason = "max_epochs"
    history.best_epoch = stopper.best_epoch
    best.meta["best_epoch"] = history.best_epoch
    return best, history


def write_history(history: TrainHistory, dest) -> None:
    """One line per epoch: ``epoch train_loss val_mse val_mae val_wmae val_maxae``."""
    lines = []
    for rec in history.epochs:
        vals = rec.validation.as_row() if rec.validation is not None else (math.nan,) * 4
        lines.append(" ".join([str(rec.epoch), repr(float(rec.train_loss))] + [repr(float(v)) for v in vals]))
    text = "\n".join(lines) + ("\n" if lines else "")
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        with open(dest, "w", newline="\n") as fh:
            fh.write(text)
