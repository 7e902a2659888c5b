"""Layer-parallel training with penalty / augmented-Lagrangian decoupling.

The trunk is split into ``K`` contiguous stages. Stage ``k`` starts from the
auxiliary variable ``lambda_k`` instead of the previous stage's output and
minimises a local loss: the penalty ``beta * psi(lambda_{k+1}, X_out)`` plus the
multiplier term ``<kappa_{k+1}, X_out>`` for inner stages, the classification
loss for the last one. All stages run forward, backward and update in
parallel (phase A); afterwards boundary activations and input adjoints are
exchanged and ``lambda``/``kappa`` are corrected (phase B).
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import auxnet as ax
from .data import AugmentPolicy, Dataset, batches, epoch_pool
from .model import (
    AffineParams,
    BlockParams,
    ResidualModel,
    blocks_backward,
    blocks_forward,
    embed,
    embed_backward,
    head,
    head_backward,
    loss_phi,
)
from .serial import EpochResult, Sgd, SgdConfig, _epoch_seed, learning_rate, sgd_update, steps_per_epoch
from .tensor import DimensionError, SeededRng

PENALTY = "penalty"
AUGMENTED_LAGRANGIAN = "augmented_lagrangian"
MODES = (PENALTY, AUGMENTED_LAGRANGIAN)
PSI_KINDS = ("l2_squared", "l1")
LAMBDA_SOURCES = ("persistent", "auxnet", "reauxnet", "external")


class NumericalDivergence(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, stage: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.stage = stage


class StageError(RuntimeError):
    def __init__(self, stage: int, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause!r}")
        self.stage = stage


# partitioning -----------------------------------------------------------------

@dataclass(frozen=True)
class StagePlan:
    K: int
    block_ranges: tuple[range, ...]

    @property
    def n(self) -> int:
        """Blocks per stage (the largest stage when L is not divisible by K)."""
        return max(len(r) for r in self.block_ranges)

    @property
    def L(self) -> int:
        return self.block_ranges[-1].stop


def partition(L: int, K: int) -> StagePlan:
    """Contiguous near-uniform split of ``L`` blocks; earlier stages take the remainder."""
    if K < 1 or L < 1:
        raise ValueError("L and K must be positive")
    if K > L:
        raise ValueError(f"cannot split {L} blocks into {K} stages")
    base, extra = divmod(L, K)
    ranges, start = [], 0
    for k in range(K):
        size = base + (1 if k < extra else 0)
        ranges.append(range(start, start + size))
        start += size
    return StagePlan(K, tuple(ranges))


# penalty function ---------------------------------------------------------------

def psi_value_and_grads(lam: np.ndarray, x: np.ndarray, kind: str = "l2_squared"):
    """``psi(lam, x)`` with its partial derivatives in ``lam`` and ``x``.

    ``l2_squared`` is ``sum((lam - x)**2)``; ``l1`` is ``sum(|lam - x|)`` with
    the subgradient ``sign(lam - x)`` (``sign(0) = 0``).
    """
    if lam.shape != x.shape:
        raise DimensionError(f"psi arguments have shapes {lam.shape} and {x.shape}")
    diff = lam - x
    if kind == "l2_squared":
        d_lam = 2.0 * diff
        return float(np.sum(diff * diff)), d_lam, -d_lam
    if kind == "l1":
        s = np.sign(diff)
        return float(np.sum(np.abs(diff))), s, -s
    raise ValueError(f"unknown penalty kind {kind!r}")


# auxiliary state ------------------------------------------------------------------

@dataclass
class AuxState:
    """Per-batch auxiliary variables and multipliers.

    ``lambdas[0]`` is the stage-0 input embedding; ``kappas[0]`` is zero.
    """

    lambdas: list[np.ndarray]
    kappas: list[np.ndarray]
    beta: float
    psi_kind: str = "l2_squared"
    mode: str = PENALTY

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.psi_kind not in PSI_KINDS:
            raise ValueError(f"unknown penalty kind {self.psi_kind!r}")
        if len(self.kappas) != len(self.lambdas):
            raise ValueError("need one multiplier per auxiliary variable")

    @classmethod
    def fresh(cls, lambdas, beta, psi_kind="l2_squared", mode=PENALTY) -> "AuxState":
        return cls(list(lambdas), [np.zeros_like(l) for l in lambdas], beta, psi_kind, mode)

    @property
    def K(self) -> int:
        return len(self.lambdas)


# stage-local operations ----------------------------------------------------------

def stage_forward(k: int, lambda_k: np.ndarray, blocks: list[BlockParams], residual_scale: float = 1.0):
    """Run stage ``k``'s blocks starting from ``lambda_k``."""
    if blocks and (lambda_k.ndim != 2 or lambda_k.shape[1] != blocks[0].width):
        raise DimensionError(f"stage {k}: auxiliary input {lambda_k.shape} does not match width {blocks[0].width}")
    return blocks_forward(lambda_k, blocks, residual_scale)


class LocalLoss(NamedTuple):
    value: float
    adjoint: np.ndarray  # d value / d X_out
    head_grads: AffineParams | None = None
    correct: int | None = None  # last stage only: rows whose argmax matches the label


def stage_local_loss(k: int, X_out: np.ndarray, aux: AuxState, lambda_next: np.ndarray | None = None,
                     labels=None, model: ResidualModel | None = None) -> LocalLoss:
    """Local objective of stage ``k`` and its terminal adjoint.

    Inner stages: ``beta * psi(lambda_{k+1}, X_out) + <kappa_{k+1}, X_out>``.
    Last stage: cross-entropy of ``T(X_out)``.
    """
    K = aux.K
    if k < K - 1:
        if lambda_next is None:
            raise ValueError(f"stage {k} needs lambda_{k + 1}")
        value, _, d_x = psi_value_and_grads(lambda_next, X_out, aux.psi_kind)
        value *= aux.beta
        adjoint = aux.beta * d_x
        if aux.mode == AUGMENTED_LAGRANGIAN:
            kappa = aux.kappas[k + 1]
            value += float(np.sum(kappa * X_out))
            adjoint = adjoint + kappa
        return LocalLoss(value, adjoint)
    if labels is None or model is None:
        raise ValueError("the last stage needs labels and the output map")
    logits = head(model, X_out)
    value, dlogits = loss_phi(logits, labels)
    adjoint, gT = head_backward(model, X_out, dlogits)
    correct = int((logits.argmax(axis=1) == np.asarray(labels)).sum())
    return LocalLoss(value, adjoint, gT, correct)


def stage_backward(caches, blocks: list[BlockParams], terminal_adjoint: np.ndarray, residual_scale: float = 1.0):
    """Returns ``(block grads, P_in)`` where ``P_in`` is the adjoint at the stage input."""
    if len(caches) != len(blocks):
        raise ValueError("stage caches do not match stage blocks")
    P_in, grads = blocks_backward(caches, blocks, terminal_adjoint, residual_scale)
    return grads, P_in


def update_lambda(k: int, aux: AuxState, P_in_k: np.ndarray, X_prev_out: np.ndarray, eta: float) -> np.ndarray:
    """Corrected ``lambda_k = lambda_k - eta (beta dpsi/dlambda + P_in_k - kappa_k)``."""
    if k < 1 or k >= aux.K:
        raise ValueError(f"lambda_{k} cannot be corrected (lambda_0 is pinned to the embedding)")
    _, d_lam, _ = psi_value_and_grads(aux.lambdas[k], X_prev_out, aux.psi_kind)
    direction = aux.beta * d_lam + P_in_k
    if aux.mode == AUGMENTED_LAGRANGIAN:
        direction = direction - aux.kappas[k]
    return aux.lambdas[k] - eta * direction


def update_kappa(k: int, aux: AuxState, X_prev_out: np.ndarray, eta: float) -> np.ndarray:
    """``kappa_k - eta / (2 beta) * (lambda_k - X_prev_out)``."""
    if aux.mode != AUGMENTED_LAGRANGIAN:
        raise ValueError("multipliers stay at zero in penalty mode")
    if k < 1 or k >= aux.K:
        raise ValueError(f"kappa_{k} is fixed at zero")
    return aux.kappas[k] - (eta / (2.0 * aux.beta)) * (aux.lambdas[k] - X_prev_out)


def constraint_violation(aux: AuxState, boundary_outputs: list[np.ndarray]) -> tuple[list[float], float]:
    """``||lambda_k - X^{k-1}_out||`` for each interface, and their mean."""
    v = [float(np.linalg.norm(aux.lambdas[k] - boundary_outputs[k - 1])) for k in range(1, aux.K)]
    return v, (float(np.mean(v)) if v else 0.0)


def stationary_violation(P_in: np.ndarray, beta: float, kappa: np.ndarray | None = None) -> np.ndarray:
    """Closed-form ``lambda_k - X_prev_out`` at which the quadratic-penalty correction vanishes."""
    if kappa is None:
        return -P_in / (2.0 * beta)
    return (kappa - P_in) / (2.0 * beta)


# workers ------------------------------------------------------------------------

@dataclass
class StageReport:
    k: int
    X_out: np.ndarray
    P_in: np.ndarray
    loss: float
    lambda_in: np.ndarray
    timings: dict = field(default_factory=dict)
    reaux_cache: list | None = None
    correct: int | None = None


class Stage:
    """One worker's slice of the model. Stage 0 also owns ``S``; the last owns ``T``."""

    def __init__(self, k: int, K: int, model: ResidualModel, block_range: range, momentum: float = 0.0):
        self.k = k
        self.K = K
        self.model = model
        self.blocks = [model.blocks[i] for i in block_range]
        self.opt = Sgd(self.arrays(), momentum)

    @property
    def first(self) -> bool:
        return self.k == 0

    @property
    def last(self) -> bool:
        return self.k == self.K - 1

    def arrays(self) -> list[np.ndarray]:
        out = self.model.S.arrays() if self.first else []
        for b in self.blocks:
            out.extend(b.arrays())
        if self.last:
            out.extend(self.model.T.arrays())
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def run(self, aux: AuxState, features, labels, eta: float, reaux_chain=None, X0=None) -> StageReport:
        """Phase A for this stage: forward, local loss, backward, SGD update."""
        k, scale = self.k, self.model.residual_scale
        t0 = time.perf_counter()
        reaux_cache = None
        if self.first:
            lam, ecache = embed(self.model, features)
        elif reaux_chain is not None:
            lam, reaux_cache = ax.reauxnet_forward(X0, reaux_chain, return_cache=True)
        else:
            lam = aux.lambdas[k]
        X_out, caches = stage_forward(k, lam, self.blocks, scale)
        t1 = time.perf_counter()
        lam_next = None if self.last else aux.lambdas[k + 1]
        local = stage_local_loss(k, X_out, aux, lam_next, labels, self.model)
        t2 = time.perf_counter()
        block_grads, P_in = stage_backward(caches, self.blocks, local.adjoint, scale)
        grads = embed_backward(self.model, ecache, P_in).arrays() if self.first else []
        for g in block_grads:
            grads.extend(g.arrays())
        if self.last:
            grads.extend(local.head_grads.arrays())
        self.opt.step(grads, eta)
        t3 = time.perf_counter()
        timings = {"forward": t1 - t0, "loss": t2 - t1, "backward": t3 - t2}
        return StageReport(k, X_out, P_in, local.value, lam, timings, reaux_cache, local.correct)


# trainer ------------------------------------------------------------------------

@dataclass
class ParallelConfig:
    K: int = 3
    mode: str = PENALTY
    beta: float = 1.0
    beta_gamma: float = 1.0
    beta_every: int = 0
    psi_kind: str = "l2_squared"
    lambda_lr: float | None = None
    lambda_contraction: float | None = None
    kappa_lr: float | None = None
    noise_sigma: float = 1e-3
    lambda_source: str = "persistent"
    workers: int | None = None
    aux_hidden: int | None = None
    aux_blocks: int = 1
    aux_lr_scale: float = 1.0
    distill_steps: int = 1
    reaux_shared_prefix: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.psi_kind not in PSI_KINDS:
            raise ValueError(f"unknown penalty kind {self.psi_kind!r}")
        if self.lambda_source not in LAMBDA_SOURCES:
            raise ValueError(f"unknown lambda source {self.lambda_source!r}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.mode == AUGMENTED_LAGRANGIAN and self.lambda_source in ("auxnet", "reauxnet"):
            raise ValueError("augmented Lagrangian mode keeps multipliers in memory; use persistent lambdas")
        if self.distill_steps < 1:
            raise ValueError("distill_steps must be >= 1")

    def lambda_step(self, eta: float, beta: float) -> float:
        """Step size for the auxiliary-variable correction.

        ``lambda_contraction = c`` sets it to ``c / (2 beta)`` so that the quadratic
        penalty part of the correction contracts the gap by the factor ``1 - c``.
        """
        if self.lambda_contraction is not None:
            return self.lambda_contraction / (2.0 * beta)
        return eta if self.lambda_lr is None else self.lambda_lr

    def beta_at(self, epoch: int) -> float:
        if self.beta_every > 0:
            return self.beta * self.beta_gamma ** (epoch // self.beta_every)
        return self.beta


@dataclass
class StepMetrics:
    epoch: int
    step: int
    stage_losses: list[float]
    violations: list[float]
    lr: float
    beta: float
    timings: dict
    distill_losses: list[float] = field(default_factory=list)
    correct: int = 0


class LambdaStore:
    """Per-sample auxiliary variables (and multipliers) kept in memory."""

    def __init__(self, n_interfaces: int, width: int, with_kappa: bool):
        self.n_interfaces = n_interfaces
        self.width = width
        self.with_kappa = with_kappa
        self.lam: dict = {}
        self.kap: dict = {}

    def __contains__(self, key) -> bool:
        return key in self.lam

    def __len__(self) -> int:
        return len(self.lam)

    def nbytes(self) -> int:
        row = self.n_interfaces * self.width * 8
        return len(self.lam) * row * (2 if self.with_kappa else 1)

    def gather(self, keys, k: int, kappa: bool = False) -> np.ndarray:
        src = self.kap if kappa else self.lam
        return np.stack([src[key][k - 1] for key in keys])

    def insert(self, key, lambdas: np.ndarray) -> None:
        self.lam[key] = lambdas
        if self.with_kappa:
            self.kap[key] = np.zeros_like(lambdas)

    def scatter(self, keys, k: int, values: np.ndarray, kappa: bool = False) -> None:
        dst = self.kap if kappa else self.lam
        for key, row in zip(keys, values):
            dst[key][k - 1] = row


class ParallelTrainer:
    """Synchronous K-stage trainer with one worker thread per stage."""

    def __init__(self, model: ResidualModel, pcfg: ParallelConfig, sgd: SgdConfig, seed: int = 0,
                 augment: AugmentPolicy | None = None, n_train: int | None = None, d_hidden: int | None = None):
        self.model = model
        self.pcfg = pcfg
        self.sgd = sgd
        self.seed = seed
        self.augment = augment or AugmentPolicy()
        self.plan = partition(model.n_blocks, pcfg.K)
        K = pcfg.K
        self.stages = [Stage(k, K, model, self.plan.block_ranges[k], sgd.momentum) for k in range(K)]
        self.step_count = 0
        self.epoch = 0
        self.total_steps = None
        if n_train is not None:
            pool = n_train * (2 if self.augment.enabled else 1)
            self.total_steps = sgd.epochs * steps_per_epoch(pool, sgd.batch_size)
        workers = K if pcfg.workers is None else pcfg.workers
        self.workers = max(1, workers)
        self._pool = ThreadPoolExecutor(self.workers, thread_name_prefix="stage") if self.workers > 1 else None

        d = model.width
        d_h = d_hidden or model.blocks[0].hidden
        aux_h = pcfg.aux_hidden or max(1, d_h // 2)
        rng = SeededRng(seed, 0xA0C)
        self.store = None
        self.auxnets: list[ax.AuxNet] = []
        self.reauxnet: ax.ReAuxNet | None = None
        if K > 1 and pcfg.lambda_source == "persistent":
            self.store = LambdaStore(K - 1, d, pcfg.mode == AUGMENTED_LAGRANGIAN)
        elif K > 1 and pcfg.lambda_source == "auxnet":
            self.auxnets = [ax.AuxNet.init(rng.child(k), d, aux_h, pcfg.aux_blocks, model.residual_scale)
                            for k in range(K - 1)]
            for k, net in enumerate(self.auxnets):
                self._check_capacity(net.n_params(), self.stages[k + 1])
        elif K > 1 and pcfg.lambda_source == "reauxnet":
            self.reauxnet = ax.ReAuxNet.init(rng, K, d, aux_h, pcfg.aux_blocks, pcfg.reaux_shared_prefix,
                                             model.residual_scale)
            for seg in self.reauxnet.segments():
                self._check_capacity(seg.n_params(), min(self.stages[1:], key=Stage.n_params))

    @staticmethod
    def _check_capacity(n_aux: int, stage: Stage) -> None:
        if n_aux >= stage.n_params():
            raise ValueError(f"auxiliary network ({n_aux} params) must be smaller than stage {stage.k} "
                             f"({stage.n_params()} params)")

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ------------------------------------------------------------------
    def lr(self) -> float:
        total = self.total_steps or max(self.step_count, 1)
        return learning_rate(self.sgd, self.step_count, total, self.epoch)

    def persistent_aux_bytes(self) -> int:
        """Bytes of auxiliary state that outlive a mini-batch."""
        if self.store is not None:
            return self.store.nbytes()
        if self.auxnets:
            return sum(n.nbytes() for n in self.auxnets)
        if self.reauxnet is not None:
            return self.reauxnet.nbytes()
        return 0

    def _warm_start(self, features: np.ndarray, keys) -> None:
        missing = [i for i, key in enumerate(keys) if key not in self.store]
        if not missing:
            return
        X, _ = embed(self.model, features[missing])
        bounds = []
        for stage in self.stages[:-1]:
            X, _ = blocks_forward(X, stage.blocks, self.model.residual_scale)
            bounds.append(X)
        for j, i in enumerate(missing):
            self.store.insert(keys[i], np.stack([b[j] for b in bounds]))

    def _run_stages(self, aux, features, labels, eta, X0) -> list[StageReport]:
        chains = self.reauxnet.chains if self.reauxnet is not None else None

        def task(k):
            chain = chains[k - 1] if (chains is not None and k > 0) else None
            try:
                return self.stages[k].run(aux, features, labels, eta, chain, X0)
            except Exception as exc:  # surfaced with the failing stage index
                raise StageError(k, exc) from exc

        ks = range(self.pcfg.K)
        if self._pool is None:
            return [task(k) for k in ks]
        return list(self._pool.map(task, ks))

    def step(self, features: np.ndarray, labels: np.ndarray, keys=None, lambdas=None,
             kappas=None, eta: float | None = None) -> StepMetrics:
        """One synchronous training step on a mini-batch.

        ``lambdas`` (and ``kappas``) are only consulted for the ``external``
        lambda source; entry 0 is ignored because stage 0 embeds the batch.
        """
        pcfg, K = self.pcfg, self.pcfg.K
        eta = self.lr() if eta is None else eta
        beta = pcfg.beta_at(self.epoch)
        eta_lam = pcfg.lambda_step(eta, beta)
        eta_kap = eta if pcfg.kappa_lr is None else pcfg.kappa_lr
        eta_aux = eta * pcfg.aux_lr_scale
        timings = {"t_aux_f": 0.0, "t_aux_b": 0.0, "t_psi": 0.0}
        t_start = time.perf_counter()
        X0 = None
        d = self.model.width

        # auxiliary variables for this batch
        placeholder = np.zeros((len(labels), d))
        lam = [placeholder] * K
        kap = [placeholder] * K
        if K > 1:
            src = pcfg.lambda_source
            if src == "persistent":
                if keys is None:
                    raise ValueError("persistent auxiliary variables need sample keys")
                self._warm_start(features, keys)
                lam = [placeholder] + [self.store.gather(keys, k) for k in range(1, K)]
                if pcfg.mode == AUGMENTED_LAGRANGIAN:
                    kap = [placeholder] + [self.store.gather(keys, k, kappa=True) for k in range(1, K)]
            elif src == "auxnet":
                t = time.perf_counter()
                X0, _ = embed(self.model, features)
                lam = ax.generate_lambdas(X0, self.auxnets)
                timings["t_aux_f"] += time.perf_counter() - t
            elif src == "reauxnet":
                X0, _ = embed(self.model, features)
            else:
                if lambdas is None:
                    raise ValueError("external lambda source needs lambdas")
                lam = [placeholder] + [np.asarray(l, dtype=np.float64) for l in lambdas[1:]]
                if kappas is not None:
                    kap = [placeholder] + [np.asarray(c, dtype=np.float64) for c in kappas[1:]]
        aux = AuxState(lam, kap, beta, pcfg.psi_kind, pcfg.mode)

        # phase A: decoupled forward / backward / update, then barrier
        t_a = time.perf_counter()
        reports = self._run_stages(aux, features, labels, eta, X0)
        t_b = time.perf_counter()
        for r in reports:
            if not (math.isfinite(r.loss) and np.all(np.isfinite(r.X_out))):
                raise NumericalDivergence(f"non-finite values in stage {r.k} at epoch {self.epoch}",
                                          self.epoch, r.k)
        for r in reports:
            aux.lambdas[r.k] = r.lambda_in

        violations, _ = constraint_violation(aux, [r.X_out for r in reports])

        # phase B: exchange boundary values and adjoints, correct lambda / kappa
        distill = []
        if K > 1:
            rng = SeededRng(self.seed, 0x401E, self.step_count)
            if pcfg.lambda_source == "reauxnet":
                per_chain = {}
                for k in range(1, K):
                    _, d_lam, _ = psi_value_and_grads(aux.lambdas[k], reports[k - 1].X_out, aux.psi_kind)
                    signal = beta * d_lam + reports[k].P_in
                    per_chain[k] = ax.reauxnet_backward(self.reauxnet.chains[k - 1], reports[k].reaux_cache, signal)
                for seg, g in ax.accumulate_segment_grads(self.reauxnet, per_chain):
                    sgd_update(seg.arrays(), g, eta_aux)
                timings["t_aux_b"] += time.perf_counter() - t_b
            else:
                new_lam, new_kap = {}, {}
                for k in range(1, K):
                    X_prev = reports[k - 1].X_out
                    new_lam[k] = update_lambda(k, aux, reports[k].P_in, X_prev, eta_lam)
                    if pcfg.noise_sigma > 0:
                        new_lam[k] = new_lam[k] + rng.child(k).normal(new_lam[k].shape, pcfg.noise_sigma)
                    if pcfg.mode == AUGMENTED_LAGRANGIAN:
                        new_kap[k] = update_kappa(k, aux, X_prev, eta_kap)
                t_c = time.perf_counter()
                timings["t_psi"] += t_c - t_b
                if self.store is not None:
                    for k in range(1, K):
                        self.store.scatter(keys, k, new_lam[k])
                        if k in new_kap:
                            self.store.scatter(keys, k, new_kap[k], kappa=True)
                elif pcfg.lambda_source == "auxnet":
                    distill = self._distill(aux, new_lam, eta_aux)
                    timings["t_aux_b"] += time.perf_counter() - t_c
        t_end = time.perf_counter()

        fwd = [r.timings["forward"] for r in reports]
        bwd = [r.timings["backward"] for r in reports]
        timings["t_psi"] += max((r.timings["loss"] for r in reports[:-1]), default=0.0)
        timings.update({
            "stage_forward": fwd,
            "stage_backward": bwd,
            "T_f": K * float(np.mean(fwd)),
            "T_b": K * float(np.mean(bwd)),
            "phase_a": t_b - t_a,
            "wall": t_end - t_start,
        })
        metrics = StepMetrics(self.epoch, self.step_count, [r.loss for r in reports], violations,
                              eta, beta, timings, distill, reports[-1].correct)
        self.step_count += 1
        return metrics

    def _distill(self, aux: AuxState, targets: dict, eta_aux: float) -> list[float]:
        """Fit each AuxNet to its corrected target; interfaces run in parallel."""
        K = self.pcfg.K

        def task(k):
            _, loss = ax.distill_step(self.auxnets[k - 1], aux.lambdas[k - 1], targets[k], eta_aux,
                                      self.pcfg.distill_steps)
            return loss

        ks = range(1, K)
        if self._pool is None:
            return [task(k) for k in ks]
        return list(self._pool.map(task, ks))

    def train_epoch(self, dataset: Dataset) -> "ParallelEpochResult":
        return train_epoch_parallel(self, dataset)


@dataclass
class ParallelEpochResult(EpochResult):
    violation_mean: float = 0.0
    violation_max: float = 0.0
    distill_loss: float = float("nan")
    stage_losses: list = field(default_factory=list)


def train_step_parallel(trainer: ParallelTrainer, batch, eta: float | None = None, lambdas=None) -> StepMetrics:
    return trainer.step(batch.features, batch.labels, batch.keys, lambdas=lambdas, eta=eta)


def train_epoch_parallel(trainer: ParallelTrainer, dataset: Dataset) -> ParallelEpochResult:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    K = trainer.pcfg.K
    timings = {"T_d": 0.0, "T_f": 0.0, "T_b": 0.0, "t_psi": 0.0, "t_aux_f": 0.0, "t_aux_b": 0.0,
               "phase_a": 0.0}
    t = time.perf_counter()
    pool, keys = epoch_pool(dataset, trainer.augment, trainer.epoch)
    it = batches(pool, trainer.sgd.batch_size, _epoch_seed(trainer.seed, trainer.epoch), keys)
    timings["T_d"] += time.perf_counter() - t
    n, steps = 0, 0
    loss_sum, correct = 0.0, 0
    stage_sum = np.zeros(K)
    viol_means, viol_max, distill = [], 0.0, []
    while True:
        t = time.perf_counter()
        batch = next(it, None)
        timings["T_d"] += time.perf_counter() - t
        if batch is None:
            break
        m = train_step_parallel(trainer, batch)
        for key in ("T_f", "T_b", "t_psi", "t_aux_f", "t_aux_b", "phase_a"):
            timings[key] += m.timings[key]
        b = len(batch.labels)
        loss_sum += m.stage_losses[-1] * b
        correct += m.correct
        stage_sum += np.asarray(m.stage_losses) * b
        if m.violations:
            viol_means.append(float(np.mean(m.violations)))
            viol_max = max(viol_max, max(m.violations))
        distill.extend(m.distill_losses)
        n += b
        steps += 1
    trainer.epoch += 1
    return ParallelEpochResult(
        loss=loss_sum / n, accuracy=correct / n, timings=timings, steps=steps,
        violation_mean=float(np.mean(viol_means)) if viol_means else 0.0,
        violation_max=viol_max,
        distill_loss=float(np.mean(distill)) if distill else float("nan"),
        stage_losses=list(stage_sum / n),
    )
