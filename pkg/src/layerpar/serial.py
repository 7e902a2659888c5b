"""Layer-serial baseline: forward pass, full backward sweep, SGD update."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentPolicy, Dataset, batches, epoch_pool
from .model import ResidualModel, loss_phi, net_backward, net_forward
from .tensor import DimensionError


@dataclass
class SgdConfig:
    eta0: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    schedule: str = "cosine"
    momentum: float = 0.0
    milestones: tuple[int, ...] = ()
    factor: float = 0.1

    def __post_init__(self):
        if self.eta0 < 0:
            raise ValueError("eta0 must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.schedule not in ("cosine", "constant", "step"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def cosine_lr(eta0: float, step: int, total_steps: int) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return eta0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def learning_rate(cfg: SgdConfig, step: int, total_steps: int, epoch: int = 0) -> float:
    if cfg.schedule == "constant":
        return cfg.eta0
    if cfg.schedule == "cosine":
        return cosine_lr(cfg.eta0, min(step, total_steps), total_steps)
    drops = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.eta0 * cfg.factor ** drops


def sgd_update(params: list[np.ndarray], grads: list[np.ndarray], eta: float,
               momentum_state: list[np.ndarray] | None = None, momentum: float = 0.0) -> list[np.ndarray]:
    """In-place SGD step ``v <- m v + g; W <- W - eta v``.

    With ``momentum == 0`` (or no state) this is ``W <- W - eta g``.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameter tensors but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise DimensionError(f"parameter {i} has shape {p.shape}, gradient {g.shape}")
        if momentum_state is not None and momentum != 0.0:
            v = momentum_state[i]
            v *= momentum
            v += g
            p -= eta * v
        else:
            p -= eta * g
    return params


class Sgd:
    """Momentum buffers bound to a fixed list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], momentum: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.state = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray], eta: float) -> None:
        sgd_update(self.params, grads, eta, self.state, self.momentum)


@dataclass
class EpochResult:
    loss: float
    accuracy: float
    timings: dict = field(default_factory=dict)
    steps: int = 0


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return -(-n_samples // batch_size)


class SerialTrainer:
    """Owns a model, its optimizer state and the global step counter."""

    def __init__(self, model: ResidualModel, cfg: SgdConfig, seed: int = 0,
                 augment: AugmentPolicy | None = None, n_train: int | None = None):
        self.model = model
        self.cfg = cfg
        self.seed = seed
        self.augment = augment or AugmentPolicy()
        self.opt = Sgd(model.arrays(), cfg.momentum)
        self.step_count = 0
        self.epoch = 0
        self.total_steps = None
        if n_train is not None:
            pool = n_train * (2 if self.augment.enabled else 1)
            self.total_steps = cfg.epochs * steps_per_epoch(pool, cfg.batch_size)

    def lr(self) -> float:
        total = self.total_steps or max(self.step_count, 1)
        return learning_rate(self.cfg, self.step_count, total, self.epoch)

    def train_step(self, features: np.ndarray, labels: np.ndarray, eta: float | None = None):
        eta = self.lr() if eta is None else eta
        t0 = time.perf_counter()
        logits, traj = net_forward(self.model, features)
        loss, dlogits = loss_phi(logits, labels)
        t1 = time.perf_counter()
        grads, _ = net_backward(self.model, traj, dlogits)
        self.opt.step(grads.arrays(), eta)
        t2 = time.perf_counter()
        self.step_count += 1
        correct = int((logits.argmax(axis=1) == labels).sum())
        return loss, correct, t1 - t0, t2 - t1

    def train_epoch(self, dataset: Dataset) -> EpochResult:
        return train_epoch_serial(self, dataset)


def train_epoch_serial(trainer: SerialTrainer, dataset: Dataset) -> EpochResult:
    """One pass over ``dataset``; loss/accuracy are sample-weighted means."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    timings = {"T_d": 0.0, "T_f": 0.0, "T_b": 0.0, "t_psi": 0.0, "t_aux_f": 0.0, "t_aux_b": 0.0}
    t = time.perf_counter()
    pool, keys = epoch_pool(dataset, trainer.augment, trainer.epoch)
    it = batches(pool, trainer.cfg.batch_size, _epoch_seed(trainer.seed, trainer.epoch), keys)
    timings["T_d"] += time.perf_counter() - t
    total_loss, total_correct, n, steps = 0.0, 0, 0, 0
    while True:
        t = time.perf_counter()
        batch = next(it, None)
        timings["T_d"] += time.perf_counter() - t
        if batch is None:
            break
        loss, correct, tf, tb = trainer.train_step(batch.features, batch.labels)
        timings["T_f"] += tf
        timings["T_b"] += tb
        total_loss += loss * len(batch.labels)
        total_correct += correct
        n += len(batch.labels)
        steps += 1
    trainer.epoch += 1
    return EpochResult(total_loss / n, total_correct / n, timings, steps)


def _epoch_seed(seed: int, epoch: int) -> int:
    return (int(seed) * 1_000_003 + epoch) & 0xFFFFFFFFFFFFFFFF


def evaluate(model: ResidualModel, dataset: Dataset) -> tuple[float, float]:
    """Full layer-serial forward pass: ``(mean loss, accuracy)``."""
    logits, _ = net_forward(model, dataset.features)
    loss, _ = loss_phi(logits, dataset.labels)
    return loss, float((logits.argmax(axis=1) == dataset.labels).mean())
