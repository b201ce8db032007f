"""Training loops, schedulers, distillation and evaluation metrics."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import ArrayDataset, DataError, PreparedData, prepare
from .models import Model, build_model
from .tensor import NumericalError


@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int
    batch_size: int
    lr_init: float
    early_stop_patience: int | None = None
    plateau_factor: float | None = None
    plateau_patience: int | None = None
    lr_min: float = 1e-6
    val_fraction: float = 0.2
    seed: int = 0
    shuffle: bool = False
    loss: str = "mse"
    init_output_bias: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs_max < 1:
            raise ValueError("batch_size and epochs_max must be >= 1")
        if self.early_stop_patience is not None and not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1) when early stopping is on")
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min exceeds lr_init")
        if self.loss != "mse":
            raise ValueError(f"only the mse loss is supported, got {self.loss!r}")


# Only the rnn recipe names a learning rate.  The image models reuse it; the
# 6.5k-parameter student fitting smooth teacher outputs uses Adam's usual 1e-3.
RECIPES = {
    "cnn": TrainConfig(epochs_max=10_000, batch_size=8, lr_init=1e-4),
    "rnn": TrainConfig(epochs_max=10_000, batch_size=32, lr_init=1e-4, early_stop_patience=80,
                       plateau_factor=0.5, plateau_patience=30, lr_min=1e-6, val_fraction=0.2),
    "fused": TrainConfig(epochs_max=5_000, batch_size=32, lr_init=1e-4),
    "student": TrainConfig(epochs_max=10_000, batch_size=8, lr_init=1e-3),
}


def recipe(model: str, **overrides) -> TrainConfig:
    return replace(RECIPES[model], **overrides)


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float | None] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False
    wall_time: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def rows(self):
        for i, (tl, vl, lr) in enumerate(zip(self.train_loss, self.val_loss, self.lr), start=1):
            yield i, tl, vl, lr

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_loss,lr\n")
            for i, tl, vl, lr in self.rows():
                fh.write(f"{i},{tl!r},{'' if vl is None else repr(vl)},{lr!r}\n")


class EarlyStopping:
    """Stop after ``patience`` epochs without a strict improvement; keep the best weights."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch: int | None = None
        self.best_weights = None
        self.wait = 0

    def update(self, epoch: int, loss: float, snapshot: Callable[[], object] | None = None) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.wait = loss, epoch, 0
            if snapshot is not None:
                self.best_weights = snapshot()
            return False
        self.wait += 1
        return self.wait >= self.patience


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` stagnant epochs."""

    def __init__(self, lr: float, factor: float, patience: int, lr_min: float = 0.0):
        self.lr, self.factor, self.patience, self.lr_min = lr, factor, patience, lr_min
        self.best = math.inf
        self.wait = 0

    def update(self, loss: float) -> float:
        if loss < self.best:
            self.best, self.wait = loss, 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                new = max(self.lr * self.factor, self.lr_min)
                if new < self.lr:
                    self.lr = new
                self.wait = 0
        return self.lr


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Consecutive batches; a trailing batch of one joins the previous one
    (batch norm cannot train on a single sample)."""
    cuts = list(range(0, n, batch_size)) + [n]
    if len(cuts) > 2 and cuts[-1] - cuts[-2] == 1:
        del cuts[-2]
    return [slice(a, b) for a, b in zip(cuts[:-1], cuts[1:])]


def set_output_bias(model: Model, value: float):
    """Start the final linear unit at ``value`` (the mean training target)."""
    last = list(model.layers())[-1]
    last.params["bias"].data[...] = value


def batch_mse(model: Model, ds: ArrayDataset, batch_size: int = 64) -> float:
    pred = model.predict(ds.inputs, batch_size)
    return float(np.mean((pred.astype(np.float64) - ds.y.reshape(-1)) ** 2))


def train(model: Model, train_set: ArrayDataset, cfg: TrainConfig,
          callback: Callable[[int, Model, TrainLog], bool] | None = None) -> tuple[Model, TrainLog]:
    """Mini-batch Adam on MSE with optional early stopping and plateau decay.

    With early stopping the last ``val_fraction`` of ``train_set`` is held out
    for validation and the best weights are restored at the end.  Unless
    ``cfg.init_output_bias`` is off, the output bias starts at the mean target
    so the first steps are not spent learning the offset.  ``callback``
    runs after every epoch and may return True to stop.
    """
    if len(train_set) == 0:
        raise DataError("empty training set")
    started = time.perf_counter()
    fit_set, val_set = train_set, None
    if cfg.early_stop_patience is not None:
        cut = int(len(train_set) * (1 - cfg.val_fraction))
        if cut < 1 or cut >= len(train_set):
            raise DataError(f"cannot hold out {cfg.val_fraction:.0%} of {len(train_set)} samples")
        fit_set, val_set = train_set.subset(np.s_[:cut]), train_set.subset(np.s_[cut:])

    if cfg.init_output_bias:
        set_output_bias(model, float(np.mean(fit_set.y)))
    params = model.parameters()
    state = T.AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.lr_init
    sched = (PlateauScheduler(lr, cfg.plateau_factor, cfg.plateau_patience, cfg.lr_min)
             if cfg.plateau_factor is not None and cfg.plateau_patience is not None else None)
    stopper = EarlyStopping(cfg.early_stop_patience) if cfg.early_stop_patience is not None else None
    log = TrainLog()
    n = len(fit_set)

    for epoch in range(1, cfg.epochs_max + 1):
        order = rng.permutation(n) if cfg.shuffle else None
        total = 0.0
        for b, sl in enumerate(batch_slices(n, cfg.batch_size), start=1):
            sel = order[sl] if order is not None else sl
            inputs = {k: v[sel] for k, v in fit_set.inputs.items()}
            target = fit_set.y[sel]
            model.zero_grad()
            loss = T.mse(model.forward(inputs, training=True), target)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}, lr {lr:g}")
            T.backward(loss)
            T.adam_step(params, state, lr)
            total += value * len(target)
        log.train_loss.append(total / n)
        log.lr.append(lr)
        val = batch_mse(model, val_set) if val_set is not None else None
        log.val_loss.append(val)
        monitor = val if val is not None else log.train_loss[-1]
        if not math.isfinite(monitor):
            raise NumericalError(f"non-finite monitored loss at epoch {epoch}, lr {lr:g}")
        if sched is not None:
            lr = sched.update(monitor)
        if stopper is not None and stopper.update(epoch, monitor, model.get_weights):
            log.stopped_early = True
            break
        if callback is not None and callback(epoch, model, log):
            break

    if stopper is not None and stopper.best_weights is not None:
        model.set_weights(stopper.best_weights)
        log.best_epoch = stopper.best_epoch
    else:
        log.best_epoch = log.epochs
    log.wall_time = time.perf_counter() - started
    return model, log


# -------------------------------------------------------------------- metrics

def mae(pred, y) -> float:
    pred, y = np.asarray(pred, dtype=np.float64).ravel(), np.asarray(y, dtype=np.float64).ravel()
    return float(np.mean(np.abs(pred - y)))


def r2(pred, y) -> float | None:
    """Coefficient of determination; None when the targets have zero variance."""
    pred, y = np.asarray(pred, dtype=np.float64).ravel(), np.asarray(y, dtype=np.float64).ravel()
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return None
    return 1.0 - float(np.sum((pred - y) ** 2)) / ss_tot


@dataclass
class MetricsReport:
    model: str
    target: str
    mae: float
    r2: float | None
    n: int

    @property
    def r2_defined(self) -> bool:
        return self.r2 is not None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Predictions:
    index: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray
    y_teacher: np.ndarray | None = None

    def to_csv(self, path):
        cols = ["index", "y_true", "y_pred"] + (["y_teacher"] if self.y_teacher is not None else [])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(len(self.index)):
                row = [str(int(self.index[i])), fmt_value(self.y_true[i]), fmt_value(self.y_pred[i])]
                if self.y_teacher is not None:
                    row.append(fmt_value(self.y_teacher[i]))
                fh.write(",".join(row) + "\n")


def fmt_value(x) -> str:
    """Shortest repr that round-trips a float32."""
    return np.format_float_positional(np.float32(x), unique=True, trim="-")


def report(pred, y, model: str, target: str) -> MetricsReport:
    if len(y) == 0:
        raise DataError("cannot evaluate on an empty set")
    return MetricsReport(model, target, mae(pred, y), r2(pred, y), int(len(y)))


def evaluate(model: Model, test_set: ArrayDataset, target: str,
             name: str | None = None) -> tuple[MetricsReport, Predictions]:
    if len(test_set) == 0:
        raise DataError("cannot evaluate on an empty test set")
    pred = model.predict(test_set.inputs)
    y = test_set.y.reshape(-1)
    return report(pred, y, name or model.name, target), Predictions(test_set.index, y, pred)


# --------------------------------------------------------------- distillation

def model_kind(model) -> str:
    return getattr(model, "kind", None) or model.name


def model_seq_len(model) -> int:
    shape = model.inputs.get("absorptivity")
    return shape[0] if shape is not None and len(shape) == 2 else 1


def inputs_for(model, prepared: PreparedData, part: str = "all") -> ArrayDataset:
    """Arrays matching ``model``'s input ports, checking modalities fit the data."""
    kind = model_kind(model)
    image_shape = model.inputs.get("image")
    if image_shape is not None:
        frame = prepared.samples[0].frame.shape
        if tuple(image_shape) != tuple(frame) + (1,):
            raise DataError(f"model {kind!r} expects images {tuple(image_shape)}, dataset frames are {frame}")
    if kind not in ("cnn", "rnn", "fused", "student"):
        kind = {("image",): "cnn", ("absorptivity",): "rnn"}.get(tuple(sorted(model.inputs)), "fused")
    return prepared.arrays(kind, part, seq_len=model_seq_len(model))


def teacher_outputs(teacher, prepared: PreparedData) -> tuple[np.ndarray, np.ndarray]:
    """Teacher predictions over every usable sample, as (time_index, value).

    Besides the model ports, ``predict`` receives an ``index`` entry with the
    sample time indices; real models ignore it.
    """
    ds = inputs_for(teacher, prepared, "all")
    pred = np.asarray(teacher.predict({**ds.inputs, "index": ds.index}), dtype=np.float32).reshape(-1)
    if pred.shape != ds.index.shape:
        raise DataError(f"teacher returned {pred.shape[0]} predictions for {len(ds.index)} samples")
    return ds.index, pred


@dataclass
class DistillResult:
    student: Model
    log: TrainLog
    teacher_index: np.ndarray
    teacher_pred: np.ndarray
    vs_teacher: MetricsReport
    vs_labels: MetricsReport
    predictions: Predictions

    def save_teacher_predictions(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("index,y_teacher\n")
            for i, v in zip(self.teacher_index, self.teacher_pred):
                fh.write(f"{int(i)},{fmt_value(v)}\n")


def distill(teacher, prepared: PreparedData, cfg: TrainConfig, seq_len: int = 5,
            student: Model | None = None) -> DistillResult:
    """Teacher-to-student output matching on absorptivity windows.

    1. teacher predictions for every sample are computed and kept;
    2. windows of ``seq_len`` scaled absorptivity values are paired with the
       teacher prediction at the window's last sample;
    3. the student trains on those pairs only (labels never enter training);
    4. test windows are scored against both teacher outputs and labels.
    """
    t_index, t_pred = teacher_outputs(teacher, prepared)
    lookup = dict(zip(t_index.tolist(), t_pred.tolist()))
    samples = prepared.samples
    have = [s.time_index in lookup for s in samples]
    if not all(have):
        # teachers with their own history window have no output for the first samples
        first = have.index(True)
        samples = samples[first:]
    sub = replace(prepared, samples=samples)
    teacher_y = np.array([lookup[s.time_index] for s in samples], dtype=np.float32)
    student = student or build_model("student", seed=cfg.seed, seq_len=seq_len)
    train_ds = sub.arrays("student", "train", seq_len, targets=teacher_y)
    test_t = sub.arrays("student", "test", seq_len, targets=teacher_y)
    test_l = sub.arrays("student", "test", seq_len)
    if len(train_ds) == 0 or len(test_t) == 0:
        raise DataError(f"not enough samples for windows of length {seq_len}")
    student, log = train(student, train_ds, cfg)
    pred = student.predict(test_t.inputs)
    target = prepared.target
    vs_teacher = report(pred, test_t.y.reshape(-1), "student", target)
    vs_labels = report(pred, test_l.y.reshape(-1), "student", target)
    preds = Predictions(test_l.index, test_l.y.reshape(-1), pred, test_t.y.reshape(-1))
    return DistillResult(student, log, t_index, t_pred, vs_teacher, vs_labels, preds)


# ------------------------------------------------------------------- pipeline

def fit_and_evaluate(kind: str, prepared: PreparedData, cfg: TrainConfig, seq_len: int | None = None,
                     callback=None) -> tuple[Model, TrainLog, MetricsReport, Predictions]:
    """Build, train and test one of the supervised models (cnn, rnn, fused)."""
    kw = {}
    if kind in ("rnn", "student"):
        kw["seq_len"] = seq_len or (1 if kind == "rnn" else 5)
    model = build_model(kind, seed=cfg.seed, **kw)
    train_ds = prepared.arrays(kind, "train", kw.get("seq_len", 1))
    test_ds = prepared.arrays(kind, "test", kw.get("seq_len", 1))
    model, log = train(model, train_ds, cfg, callback)
    rep, preds = evaluate(model, test_ds, prepared.target)
    return model, log, rep, preds


def write_metrics(path, rep: MetricsReport, seed: int, config_hash: str, extra: dict | None = None):
    doc = {**rep.to_dict(), "seed": seed, "config_hash": config_hash}
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_predictions(path) -> dict[str, list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {k: [r[k] for r in rows] for k in (rows[0].keys() if rows else [])}


# Epoch caps for desk-scale comparisons; the full recipes run for thousands of epochs.
DESK_SCALE = {
    "cnn": {"epochs_max": 20},
    "rnn": {"epochs_max": 1000},
    "fused": {"epochs_max": 30},
    "student": {"epochs_max": 300},
}


def compare_models(samples, target: str = "mp_ratio", seed: int = 0,
                   overrides: dict | None = None, fraction: float = 0.8) -> dict[str, MetricsReport]:
    """Train cnn, rnn and fused, distill a student from fused; test-set reports.

    The student's report is scored against the true labels.
    """
    overrides = DESK_SCALE if overrides is None else overrides
    prepared = prepare(samples, target, fraction)
    reports, teacher = {}, None
    for kind in ("cnn", "rnn", "fused"):
        cfg = recipe(kind, seed=seed, **overrides.get(kind, {}))
        model, _, reports[kind], _ = fit_and_evaluate(kind, prepared, cfg)
        if kind == "fused":
            teacher = model
    res = distill(teacher, prepared, recipe("student", seed=seed, **overrides.get("student", {})))
    reports["student"] = res.vs_labels
    return reports
