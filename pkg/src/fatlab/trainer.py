"""Single-step adversarial training: the min-max loop, SGD, learning-rate
schedules, weight averaging and the catastrophic-overfitting monitor."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fatlab.attacks import (AttackConfig, AttackError, PRIOR_SCHEMES, PriorState, fgsm_step, pgd_config, project,
                            sample_init, update_prior_state)
from fatlab.augment import AugmentSpec, augment_batch, dominant_label
from fatlab.autodiff import NonFiniteError
from fatlab.averaging import EmaState, auto_ema_update, ema_update, init_ema, quality_ratio
from fatlab.data import Dataset
from fatlab.evaluation import evaluate
from fatlab.models import ModelParams, ModelSpec, init_params, model_forward, save_checkpoint
from fatlab.regularizers import RegularizerSpec, attack_gradient_fn, composite_loss
from fatlab.rng import keyed_rng

log = logging.getLogger(__name__)

WA_KINDS = ("none", "ema", "auto_ema")


class TrainingError(Exception):
    pass


# -- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class MultiStep:
    base: float = 0.1
    milestones: tuple[int, ...] = ()
    factor: float = 0.1

    kind = "multistep"


@dataclass(frozen=True)
class Cyclic:
    max_lr: float = 0.2

    kind = "cyclic"


@dataclass(frozen=True)
class WeightAveraging:
    kind: str = "auto_ema"
    tau: float = 0.999
    threshold: float = 0.82
    gate: str = "le"

    def __post_init__(self):
        if self.kind not in WA_KINDS:
            raise ValueError(f"unknown weight averaging {self.kind!r}; expected one of {WA_KINDS}")


@dataclass(frozen=True)
class MonitorConfig:
    eval_attack: AttackConfig = field(default_factory=lambda: pgd_config(8 / 255, steps=10))
    collapse_fraction: float = 0.2
    eval_samples: int = 1000
    eval_live: bool = True  # also evaluate the un-averaged weights when averaging

    def __post_init__(self):
        if not 0.0 <= self.collapse_fraction <= 1.0:
            raise ValueError(f"collapse_fraction must lie in [0, 1], got {self.collapse_fraction}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 110
    batch_size: int = 128
    lr_schedule: MultiStep | Cyclic = field(default_factory=lambda: MultiStep(0.1, (100, 105), 0.1))
    momentum: float = 0.9
    weight_decay: float = 5e-4
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(8 / 255, init_scheme="bernoulli_half"))
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    wa: WeightAveraging = field(default_factory=WeightAveraging)
    seed: int = 0
    co_monitor: MonitorConfig = field(default_factory=MonitorConfig)
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if isinstance(self.lr_schedule, MultiStep):
            ms = self.lr_schedule.milestones
            if any(b <= a for a, b in zip(ms, ms[1:])):
                raise ValueError(f"milestones must be strictly increasing, got {ms}")
            if ms and ms[0] < 1:
                raise ValueError(f"milestones must be >= 1, got {ms}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")


# -- schedule and optimiser ------------------------------------------------

def lr_at(schedule: MultiStep | Cyclic, epoch: int, step: int, steps_per_epoch: int, epochs: int) -> float:
    """Learning rate for ``step`` (0-based) within ``epoch`` (0-based).

    The cyclic schedule is a triangle over the global step index, 0 at the
    first and last step and ``max_lr`` halfway.
    """
    if isinstance(schedule, MultiStep):
        passed = sum(1 for m in schedule.milestones if epoch >= m)
        return schedule.base * schedule.factor ** passed
    total = steps_per_epoch * epochs
    if total <= 1:
        return 0.0
    t = epoch * steps_per_epoch + step
    last = total - 1
    return float(np.interp(t, [0, last / 2, last], [0.0, schedule.max_lr, 0.0]))


def sgd_step(params: ModelParams, grads, velocity, lr: float, momentum: float, weight_decay: float):
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""
    names = params.spec.param_names()
    new_p, new_v = [], []
    for name, p, g, v in zip(names, params, grads, velocity):
        if p.shape != np.shape(g) or p.shape != np.shape(v):
            raise TrainingError(f"{name}: gradient {np.shape(g)} / velocity {np.shape(v)} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} ({int(np.sum(~np.isfinite(g)))} entries)")
        v = momentum * v + (g + weight_decay * p)
        new_v.append(v)
        new_p.append(p - lr * v)
    return ModelParams.from_arrays(params.spec, new_p), new_v


# -- state and records -------------------------------------------------------

@dataclass
class TrainState:
    params: ModelParams
    velocity: list[np.ndarray]
    ema: EmaState | None
    prior: PriorState | None
    epoch: int = 0
    robust_history: list[float] = field(default_factory=list)

    @property
    def deployed(self) -> ModelParams:
        """The weights that get evaluated: averaged if averaging is on."""
        return self.ema.theta_avg if self.ema is not None else self.params


RECORD_COLUMNS = ("epoch", "lr", "train_clean_acc", "train_robust_acc", "delta_ratio_mean",
                  "eval_clean_acc", "eval_robust_acc", "live_clean_acc", "live_robust_acc",
                  "ce", "regularizer", "wa_updates_applied", "wa_updates_skipped")


@dataclass
class RunRecord:
    epoch: int
    lr: float
    train_clean_acc: float
    train_robust_acc: float
    delta_ratio_mean: float
    ce: float
    regularizer: float
    wa_updates_applied: int
    wa_updates_skipped: int
    eval_clean_acc: float | None = None
    eval_robust_acc: float | None = None
    live_clean_acc: float | None = None
    live_robust_acc: float | None = None
    wall_seconds: float = 0.0

    def row(self) -> dict:
        """Persisted fields; timing lives in a separate file so records are reproducible."""
        return {k: getattr(self, k) for k in RECORD_COLUMNS}


def init_state(spec: ModelSpec, config: TrainConfig, n_samples: int) -> TrainState:
    dtype = np.dtype(config.dtype)
    params = init_params(spec, config.seed, dtype)
    ema = None
    if config.wa.kind != "none":
        ema = init_ema(params, config.wa.tau, config.wa.threshold, config.wa.gate)
    prior = None
    if config.attack.init_scheme in PRIOR_SCHEMES:
        prior = PriorState(n_samples, spec.input_dim, config.attack.epsilon, dtype=dtype)
    return TrainState(params, [np.zeros_like(p) for p in params], ema, prior)


# -- the loop ----------------------------------------------------------------

def _clean_logits(params: ModelParams, x: np.ndarray, result, reg: RegularizerSpec) -> np.ndarray:
    # reuse the reference forward when the regulariser already ran one at x
    if result.logits_ref is not None and reg.reference == "clean":
        return result.logits_ref
    return model_forward(params, x)[0].data


def train_epoch(state: TrainState, dataset: Dataset, config: TrainConfig,
                held_out: Dataset | None = None) -> tuple[TrainState, RunRecord]:
    """One pass over ``dataset``; per batch: augment, initialise, attack,
    loss and update, then weight averaging and prior-state bookkeeping."""
    if len(dataset) == 0:
        raise TrainingError("empty training set")
    started = time.perf_counter()
    epoch = state.epoch
    seed = config.seed
    atk, reg = config.attack, config.regularizer
    dtype = np.dtype(config.dtype)
    n = len(dataset)
    steps = -(-n // config.batch_size)
    order = keyed_rng(seed, "shuffle", epoch).permutation(n)
    params, velocity, ema, prior = state.params, state.velocity, state.ema, state.prior
    clean_hits = robust_hits = 0
    ratios, ce_sum, reg_sum = [], 0.0, 0.0
    first_lr = None
    for b in range(steps):
        ids = order[b * config.batch_size:(b + 1) * config.batch_size]
        x = dataset.x[ids]
        y = dataset.y[ids]
        x, labels = augment_batch(config.augment, x, y, dataset.image_shape, keyed_rng(seed, "augment", epoch, b))
        x = x.astype(dtype, copy=False)
        eta = sample_init(atk.init_scheme, atk.epsilon, x.shape, prior, ids,
                          keyed_rng(seed, "init", epoch, b), dtype)
        eta = project(x, eta, atk.epsilon)
        try:
            grad_fn = attack_gradient_fn(params, x, labels, eta, reg)
            delta, signed = fgsm_step(params, x, labels, eta, atk.alpha, atk.epsilon, atk.loss, grad_fn,
                                      return_signed_grad=True)
            result = composite_loss(params, x, labels, delta, eta, reg)
        except (AttackError, NonFiniteError) as exc:
            raise TrainingError(f"non-finite values at epoch {epoch + 1}, batch {b}: {exc}") from None
        if not np.isfinite(result.total):
            raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
        truth = dominant_label(labels)
        clean_ok = int(np.sum(np.argmax(_clean_logits(params, x, result, reg), axis=1) == truth))
        robust_ok = int(np.sum(np.argmax(result.logits_adv, axis=1) == truth))

        lr = lr_at(config.lr_schedule, epoch, b, steps, config.epochs)
        first_lr = lr if first_lr is None else first_lr
        try:
            params, velocity = sgd_step(params, result.grads, velocity, lr, config.momentum, config.weight_decay)
        except TrainingError as exc:
            raise TrainingError(f"epoch {epoch + 1}, batch {b}: {exc}") from None

        ratio = quality_ratio(clean_ok, robust_ok, len(ids))
        if config.wa.kind == "ema":
            ema = ema_update(ema, params)
        elif config.wa.kind == "auto_ema":
            ema = auto_ema_update(ema, params, ratio)
        if prior is not None:
            update_prior_state(prior, ids, delta, signed, atk.init_scheme, atk.alpha)

        clean_hits += clean_ok
        robust_hits += robust_ok
        ratios.append(ratio)
        ce_sum += result.ce * len(ids)
        reg_sum += result.reg * len(ids)

    state = replace(state, params=params, velocity=velocity, ema=ema, prior=prior, epoch=epoch + 1)
    record = RunRecord(
        epoch=epoch + 1, lr=first_lr, train_clean_acc=clean_hits / n, train_robust_acc=robust_hits / n,
        delta_ratio_mean=float(np.mean(ratios)), ce=ce_sum / n, regularizer=reg_sum / n,
        wa_updates_applied=ema.updates_applied if ema else 0, wa_updates_skipped=ema.updates_skipped if ema else 0)
    if held_out is not None:
        _evaluate_epoch(state, held_out, config, record)
        state.robust_history.append(record.eval_robust_acc)
    record.wall_seconds = time.perf_counter() - started
    return state, record


def _evaluate_epoch(state: TrainState, held_out: Dataset, config: TrainConfig, record: RunRecord) -> None:
    mon = config.co_monitor
    subset = held_out.subset(slice(0, mon.eval_samples))
    attacks = {"monitor": mon.eval_attack}
    rep = evaluate(state.deployed, subset, attacks, seed=config.seed)
    record.eval_clean_acc = rep.clean_acc
    record.eval_robust_acc = rep.robust_acc["monitor"]
    if state.ema is None:
        record.live_clean_acc, record.live_robust_acc = rep.clean_acc, rep.robust_acc["monitor"]
    elif mon.eval_live:
        live = evaluate(state.params, subset, attacks, seed=config.seed)
        record.live_clean_acc, record.live_robust_acc = live.clean_acc, live.robust_acc["monitor"]


# -- catastrophic-overfitting monitor ----------------------------------------

@dataclass(frozen=True)
class CoStatus:
    collapsed: bool
    epoch: int | None = None  # first collapsed epoch, 1-based
    peak: float = 0.0
    peak_epoch: int | None = None

    @property
    def label(self) -> str:
        return f"collapsed({self.epoch})" if self.collapsed else "healthy"


def co_monitor(history, collapse_fraction: float) -> CoStatus:
    """Collapsed once robust accuracy drops below ``collapse_fraction`` times
    the best value seen so far."""
    history = [float(h) for h in history]
    if not history:
        raise ValueError("co_monitor needs at least one evaluation")
    peak, peak_epoch = -np.inf, None
    for i, acc in enumerate(history, start=1):
        if acc < collapse_fraction * peak:
            return CoStatus(True, i, peak, peak_epoch)
        if acc > peak:
            peak, peak_epoch = acc, i
    return CoStatus(False, None, peak, peak_epoch)


# -- full run ------------------------------------------------------------------

@dataclass
class RunResult:
    state: TrainState
    records: list[RunRecord]
    co: CoStatus | None
    best_epoch: int | None


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, float) else str(value)


class RunWriter:
    """Append-only record files, checkpoints and reports under one directory."""

    def __init__(self, out_dir: str | Path):
        self.root = Path(out_dir)
        (self.root / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.root / "reports").mkdir(parents=True, exist_ok=True)
        self.csv = self.root / "records.csv"
        self.jsonl = self.root / "records.jsonl"
        self.timing = self.root / "reports" / "timing.csv"
        self.csv.write_text(",".join(RECORD_COLUMNS) + "\n")
        self.jsonl.write_text("")
        self.timing.write_text("epoch,wall_seconds\n")

    def record(self, rec: RunRecord) -> None:
        row = rec.row()
        with self.csv.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[k]) for k in RECORD_COLUMNS])
        with self.jsonl.open("a") as fh:
            fh.write(json.dumps(row) + "\n")
        with self.timing.open("a") as fh:
            fh.write(f"{rec.epoch},{rec.wall_seconds:.3f}\n")

    def checkpoint(self, name: str, state: TrainState, epoch: int) -> None:
        manifest = {"epoch": epoch}
        save_checkpoint(self.root / "checkpoints" / f"{name}.ckpt", state.deployed, manifest,
                        averaged=state.ema is not None)
        if state.ema is not None:
            save_checkpoint(self.root / "checkpoints" / f"{name}_live.ckpt", state.params, manifest)

    def co_report(self, status: CoStatus | None, records: list[RunRecord], fraction: float) -> None:
        report = {
            "status": status.label if status else "not evaluated",
            "collapsed": bool(status and status.collapsed),
            "collapse_epoch": status.epoch if status else None,
            "peak_robust_acc": status.peak if status else None,
            "peak_epoch": status.peak_epoch if status else None,
            "collapse_fraction": fraction,
            "eval_robust_acc": [r.eval_robust_acc for r in records],
            "live_robust_acc": [r.live_robust_acc for r in records],
        }
        (self.root / "reports" / "co_report.json").write_text(json.dumps(report, indent=2) + "\n")


def run_training(config: TrainConfig, spec: ModelSpec, train: Dataset, held_out: Dataset | None = None,
                 out_dir: str | Path | None = None) -> RunResult:
    """Train for ``config.epochs``; evaluates on ``held_out`` every epoch when
    given and, with ``out_dir``, persists records, checkpoints and the
    collapse report."""
    if train.dim != spec.input_dim:
        raise TrainingError(f"dataset has {train.dim} features but the model expects {spec.input_dim}")
    train = train.astype(config.dtype)
    if held_out is not None:
        held_out = held_out.astype(config.dtype)
    state = init_state(spec, config, len(train))
    writer = RunWriter(out_dir) if out_dir is not None else None
    milestones = set(config.lr_schedule.milestones) if isinstance(config.lr_schedule, MultiStep) else set()
    records: list[RunRecord] = []
    best, best_epoch = -1.0, None
    for _ in range(config.epochs):
        state, rec = train_epoch(state, train, config, held_out)
        records.append(rec)
        log.info("epoch %d lr %.4g clean %.3f robust %.3f eval %s/%s", rec.epoch, rec.lr, rec.train_clean_acc,
                 rec.train_robust_acc, rec.eval_clean_acc, rec.eval_robust_acc)
        if writer:
            writer.record(rec)
            if rec.epoch in milestones:
                writer.checkpoint(f"milestone_{rec.epoch:03d}", state, rec.epoch)
        if rec.eval_robust_acc is not None and rec.eval_robust_acc > best:
            best, best_epoch = rec.eval_robust_acc, rec.epoch
            if writer:
                writer.checkpoint("best", state, rec.epoch)
    status = co_monitor(state.robust_history, config.co_monitor.collapse_fraction) if state.robust_history else None
    if writer:
        writer.checkpoint("final", state, state.epoch)
        writer.co_report(status, records, config.co_monitor.collapse_fraction)
    return RunResult(state, records, status, best_epoch)
