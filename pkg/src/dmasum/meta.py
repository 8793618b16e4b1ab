"""Single-video meta learning and the ablation trainers.

Each task is one video. The learner takes ``m`` plain gradient steps on a
copy of the meta parameters; the meta step treats ``theta - theta_m`` as a
gradient and hands it to Adam (or applies the plain interpolation in
``sgd`` mode).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import ParameterVector
from .errors import InputError, NumericError
from .model import DmaSumModel
from .tensor import SeededRng

LOG_HEADER = ["epoch", "task_id", "inner_final_loss", "meta_param_delta_l2"]
TRAINERS = ("meta", "plain", "batch-meta", "fomaml")

# (params, step_key) -> (loss, grads)
Objective = Callable[[ParameterVector, int], tuple[float, dict]]


@dataclass
class MetaConfig:
    learner_rate: float = 3e-5
    meta_rate: float = 6e-5
    inner_steps: int = 3
    epochs: int = 1
    optimizer: str = "adam"
    seed: int = 0
    inner_adam: bool = False

    def __post_init__(self):
        if not (self.learner_rate > 0 and self.meta_rate > 0):
            raise InputError("learner_rate and meta_rate must be positive")
        if self.inner_steps < 0:
            raise InputError("inner_steps must be >= 0")
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise InputError("optimizer must be 'adam' or 'sgd'")

    @classmethod
    def summe(cls, **kw) -> "MetaConfig":
        return cls(**{"inner_steps": 3, **kw})

    @classmethod
    def tvsum(cls, **kw) -> "MetaConfig":
        return cls(**{"inner_steps": 5, **kw})


@dataclass
class VideoTask:
    video_id: str
    features: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64).ravel()
        if self.features.shape[0] != self.target.shape[0]:
            raise InputError(f"{self.video_id}: {self.features.shape[0]} frames "
                             f"but {self.target.shape[0]} targets")


class AdamState:
    def __init__(self, params: ParameterVector, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = params.map(np.zeros_like)
        self.v = params.map(np.zeros_like)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


def adam_step(state: AdamState, params: ParameterVector, grads, lr: float) -> ParameterVector:
    """Bias-corrected Adam; mutates ``state`` and returns new parameters."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for name, theta in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        out.append((name, theta - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)))
    return ParameterVector(out)


def sgd_step(params: ParameterVector, grads, lr: float) -> ParameterVector:
    return ParameterVector((k, v - lr * grads[k]) for k, v in params.items())


def learner_inner_loop(objective: Objective, theta: ParameterVector, cfg: MetaConfig,
                       task_id=None, step_key: int = 0) -> tuple[ParameterVector, float]:
    """Run ``cfg.inner_steps`` descent steps from a copy of ``theta``.

    Returns the adapted parameters and the loss seen at the last evaluated
    iterate (the starting point when ``inner_steps == 0``).
    """
    theta_j = theta.copy()
    adam = AdamState(theta) if cfg.inner_adam else None
    if cfg.inner_steps == 0:
        loss, _ = objective(theta_j, step_key)
        _check_loss(loss, task_id)
        return theta_j, loss
    loss = float("nan")
    for j in range(cfg.inner_steps):
        loss, grads = objective(theta_j, step_key * 1_000 + j)
        _check_loss(loss, task_id)
        if adam is not None:
            theta_j = adam_step(adam, theta_j, grads, cfg.learner_rate)
        else:
            theta_j = sgd_step(theta_j, grads, cfg.learner_rate)
    return theta_j, loss


def _check_loss(loss, task_id):
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss on task {task_id}")


def meta_update(theta: ParameterVector, theta_m: ParameterVector, cfg: MetaConfig,
                adam: AdamState | None = None) -> ParameterVector:
    if cfg.optimizer == "sgd":
        if cfg.meta_rate == 1.0:
            return theta_m.copy()
        beta = cfg.meta_rate
        return theta.combine(theta_m, lambda a, b: a + beta * (b - a))
    if adam is None:
        raise InputError("adam mode needs an AdamState")
    pseudo = theta.combine(theta_m, lambda a, b: a - b)
    return adam_step(adam, theta, pseudo, cfg.meta_rate)


def delta_l2(a: ParameterVector, b: ParameterVector) -> float:
    return float(np.sqrt(sum(float(np.sum((a[k] - b[k]) ** 2)) for k in a)))


# -- objectives ------------------------------------------------------------


def task_objective(model: DmaSumModel, task: VideoTask, seed: int = 0) -> Objective:
    needs_rng = model.config.dropout > 0

    def objective(params, step_key):
        rng = SeededRng(seed).spawn(step_key) if needs_rng else None
        try:
            return model.loss_and_grad(task.features, task.target, params, rng)
        except NumericError as exc:
            raise NumericError(f"task {task.video_id}: {exc}") from exc

    return objective


def summed_objective(objectives: Sequence[Objective]) -> Objective:
    def objective(params, step_key):
        total, acc = 0.0, None
        for i, obj in enumerate(objectives):
            loss, grads = obj(params, step_key * 64 + i)
            total += loss
            if acc is None:
                acc = {k: g.copy() for k, g in grads.items()}
            else:
                for k, g in grads.items():
                    acc[k] += g
        return total, acc

    return objective


# -- trainers --------------------------------------------------------------


@dataclass
class LogEntry:
    epoch: int
    task_id: str
    inner_final_loss: float
    meta_param_delta_l2: float


@dataclass
class Trainer:
    """Holds the meta parameters, optimiser state and counters across
    epochs for one run."""

    model: DmaSumModel
    cfg: MetaConfig
    kind: str = "meta"
    batch: int = 1
    log: list[LogEntry] = field(default_factory=list)
    meta_updates: int = 0

    def __post_init__(self):
        if self.kind not in TRAINERS:
            raise InputError(f"trainer must be one of {TRAINERS}")
        if self.batch < 1:
            raise InputError("batch must be >= 1")
        self.adam = AdamState(self.model.params)
        self._step = 0

    def epoch_order(self, n: int, epoch: int) -> np.ndarray:
        return SeededRng(self.cfg.seed).spawn(epoch).permutation(n)

    def _objective(self, task: VideoTask) -> Objective:
        return task_objective(self.model, task, self.cfg.seed)

    def _next_key(self) -> int:
        self._step += 1
        return self._step

    def run_epoch(self, tasks: Sequence[VideoTask], epoch: int) -> None:
        if not tasks:
            raise InputError("no training tasks")
        order = [tasks[i] for i in self.epoch_order(len(tasks), epoch)]
        if self.kind == "plain":
            for task in order:
                self._plain_step(task, epoch)
            return
        size = self.batch if self.kind == "batch-meta" else 1
        for lo in range(0, len(order), size):
            group = order[lo:lo + size]
            if self.kind == "fomaml":
                self._fomaml_step(group[0], epoch)
            else:
                self._meta_step(group, epoch)

    def fit(self, tasks: Sequence[VideoTask], epochs: int | None = None) -> ParameterVector:
        for epoch in range(self.cfg.epochs if epochs is None else epochs):
            self.run_epoch(tasks, epoch)
        return self.model.params

    def _record(self, epoch, task_id, loss, before, after):
        self.log.append(LogEntry(epoch, task_id, loss, delta_l2(before, after)))

    def _meta_step(self, group, epoch):
        theta = self.model.params
        if len(group) == 1:
            objective = self._objective(group[0])
        else:
            objective = summed_objective([self._objective(t) for t in group])
        task_id = "+".join(t.video_id for t in group)
        theta_m, loss = learner_inner_loop(objective, theta, self.cfg, task_id,
                                           self._next_key())
        new = meta_update(theta, theta_m, self.cfg, self.adam)
        self.meta_updates += 1
        self._record(epoch, task_id, loss, theta, new)
        self.model.params = new

    def _plain_step(self, task, epoch):
        theta = self.model.params
        loss, grads = self._objective(task)(theta, self._next_key())
        _check_loss(loss, task.video_id)
        new = adam_step(self.adam, theta, grads, self.cfg.learner_rate)
        self.meta_updates += 1
        self._record(epoch, task.video_id, loss, theta, new)
        self.model.params = new

    def _fomaml_step(self, task, epoch):
        # first-order MAML: gradient at theta_m applied to theta
        theta = self.model.params
        objective = self._objective(task)
        key = self._next_key()
        theta_m, _ = learner_inner_loop(objective, theta, self.cfg, task.video_id, key)
        loss, grads = objective(theta_m, key * 1_000 + 999)
        _check_loss(loss, task.video_id)
        new = adam_step(self.adam, theta, grads, self.cfg.meta_rate)
        self.meta_updates += 1
        self._record(epoch, task.video_id, loss, theta, new)
        self.model.params = new


def train_epoch(model, tasks, cfg: MetaConfig, epoch: int = 0, trainer: Trainer | None = None):
    """One pass of single-video meta learning; returns ``(params, log)``."""
    trainer = trainer or Trainer(model, cfg, "meta")
    start = len(trainer.log)
    trainer.run_epoch(tasks, epoch)
    return trainer.model.params, trainer.log[start:]


def plain_train(model, tasks, cfg: MetaConfig, epochs: int | None = None) -> Trainer:
    trainer = Trainer(model, cfg, "plain")
    trainer.fit(tasks, epochs)
    return trainer


def batch_meta_train(model, tasks, cfg: MetaConfig, batch: int,
                     epochs: int | None = None) -> Trainer:
    trainer = Trainer(model, cfg, "batch-meta", batch=batch)
    trainer.fit(tasks, epochs)
    return trainer


def meta_train(model, tasks, cfg: MetaConfig, epochs: int | None = None) -> Trainer:
    trainer = Trainer(model, cfg, "meta")
    trainer.fit(tasks, epochs)
    return trainer


def write_log(path, trainer: Trainer, echo: dict | None = None) -> None:
    meta = {"trainer": trainer.kind, "batch": trainer.batch,
            "meta_config": asdict(trainer.cfg), "config": echo or {}}
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for e in trainer.log:
            w.writerow([e.epoch, e.task_id, repr(float(e.inner_final_loss)),
                        repr(float(e.meta_param_delta_l2))])


def read_log(path) -> tuple[dict, list[dict]]:
    with open(path, newline="") as fh:
        first = fh.readline()
        meta = json.loads(first[2:]) if first.startswith("# ") else {}
        rest = fh.read().splitlines() if meta else [first] + fh.read().splitlines()
    reader = csv.DictReader(rest)
    if reader.fieldnames != LOG_HEADER:
        raise InputError(f"unexpected log header {reader.fieldnames}")
    return meta, list(reader)
