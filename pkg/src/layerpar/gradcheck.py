"""Finite-difference verification of every analytic gradient in the package.

Each check perturbs every entry of the relevant parameter (or input) tensor,
evaluates the scalar objective by a plain forward computation and compares the
central-difference estimate with the hand-written backward map.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import auxnet as ax
from .model import ResidualModel, loss_and_grads, loss_phi, net_forward
from .parallel import (AUGMENTED_LAGRANGIAN, PENALTY, AuxState, psi_value_and_grads, stage_backward,
                       stage_forward, stage_local_loss)
from .tensor import SeededRng, finite_diff_grad, rel_error

TOLERANCE = 1e-6
STEP = 1e-5
DEPTHS = (2, 4, 6)
WIDTHS = (4, 8)
BATCHES = (1, 3)


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.rel_err <= self.tol)


def _check_tensors(objective, tensors, analytic, h=STEP) -> float:
    """Worst relative error over ``tensors``; ``objective()`` reads them in place."""
    worst = 0.0
    for x, g in zip(tensors, analytic):
        saved = x.copy()

        def probe(value, x=x):
            x[...] = value
            return objective()

        fd = finite_diff_grad(probe, saved, h)
        x[...] = saved
        worst = max(worst, rel_error(g, fd))
    return worst


def _randomize_biases(arrays, rng: SeededRng) -> None:
    # zero biases put pre-activations exactly on the ReLU kink for rows whose input is dead
    for i, a in enumerate(arrays):
        if a.ndim == 1:
            a[...] = rng.child(i).normal(a.shape, 0.3)


def check_serial(L: int, d: int, batch: int, seed: int = 0) -> CheckResult:
    rng = SeededRng(seed, 0x6C, L, d, batch)
    model = ResidualModel.init(rng.child(0), 3, d, d + 2, 3, L, 0.7)
    _randomize_biases(model.arrays(), rng.child(9))
    y = rng.child(1).normal((batch, 3))
    labels = np.arange(batch) % 3
    _, grads, _ = loss_and_grads(model, y, labels)

    def objective():
        return loss_phi(net_forward(model, y)[0], labels)[0]

    return CheckResult(f"serial L={L} d={d} b={batch}",
                       _check_tensors(objective, model.arrays(), grads.arrays()))


def _stage_setup(L: int, d: int, batch: int, seed: int, mode: str):
    rng = SeededRng(seed, 0x57, L, d, batch, mode == AUGMENTED_LAGRANGIAN)
    model = ResidualModel.init(rng.child(0), 3, d, d + 2, 3, L, 0.7)
    _randomize_biases(model.arrays(), rng.child(9))
    K = 3
    lams = [rng.child(1, k).normal((batch, d)) for k in range(K)]
    aux = AuxState.fresh(lams, beta=0.37, mode=mode)
    if mode == AUGMENTED_LAGRANGIAN:
        aux.kappas = [np.zeros((batch, d))] + [rng.child(2, k).normal((batch, d)) for k in range(1, K)]
    labels = np.arange(batch) % 3
    return model, aux, labels


def check_stage(L: int, d: int, batch: int, mode: str, last: bool, seed: int = 0) -> CheckResult:
    """Inner (``last=False``) or terminal stage: block params and input adjoint."""
    model, aux, labels = _stage_setup(L, d, batch, seed, mode)
    k = aux.K - 1 if last else 1
    blocks = model.blocks[: L // 2]
    lam = aux.lambdas[k]
    lam_next = None if last else aux.lambdas[k + 1]

    def objective():
        X_out, _ = stage_forward(k, lam, blocks, model.residual_scale)
        return stage_local_loss(k, X_out, aux, lam_next, labels, model).value

    X_out, caches = stage_forward(k, lam, blocks, model.residual_scale)
    local = stage_local_loss(k, X_out, aux, lam_next, labels, model)
    grads, P_in = stage_backward(caches, blocks, local.adjoint, model.residual_scale)
    tensors = [a for b in blocks for a in b.arrays()] + [lam]
    analytic = [a for g in grads for a in g.arrays()] + [P_in]
    if last:
        tensors += model.T.arrays()
        analytic += local.head_grads.arrays()
    where = "last" if last else "inner"
    return CheckResult(f"stage {where} {mode} L={L} d={d} b={batch}", _check_tensors(objective, tensors, analytic))


def check_distill(L: int, d: int, batch: int, seed: int = 0) -> CheckResult:
    rng = SeededRng(seed, 0xD1, L, d, batch)
    net = ax.AuxNet.init(rng.child(0), d, max(1, d // 2), n_blocks=max(1, L // 2), residual_scale=0.7)
    for i, b in enumerate(net.blocks):  # move off the identity start so W1 receives gradient
        b.W2[...] = rng.child(1, i).normal(b.W2.shape, 0.5)
    _randomize_biases(net.arrays(), rng.child(9))
    lam_in = rng.child(2).normal((batch, d))
    target = rng.child(3).normal((batch, d))
    _, grads = ax.distill_loss_and_grads(net, lam_in, target)
    return CheckResult(f"distill L={L} d={d} b={batch}",
                       _check_tensors(lambda: ax.distill_loss(net, lam_in, target), net.arrays(), grads))


def check_reauxnet(L: int, d: int, batch: int, seed: int = 0) -> CheckResult:
    """Composite objective ``beta psi(lambda_k(xi), X_prev) + stage-k loss(lambda_k(xi))``."""
    rng = SeededRng(seed, 0xAE, L, d, batch)
    K = 3
    model, aux, labels = _stage_setup(L, d, batch, seed, PENALTY)
    rn = ax.ReAuxNet.init(rng.child(0), K, d, max(1, d // 2), residual_scale=0.7)
    for j, seg in enumerate(rn.segments()):
        for b in seg.blocks:
            b.W2[...] = rng.child(1, j).normal(b.W2.shape, 0.5)
        _randomize_biases(seg.arrays(), rng.child(9, j))
    X0 = rng.child(2).normal((batch, d))
    X_prev = rng.child(3).normal((batch, d))
    k = K - 1
    chain = rn.chains[k - 1]
    blocks = model.blocks[: max(1, L // 2)]

    def objective():
        lam = ax.reauxnet_forward(X0, chain)
        X_out, _ = stage_forward(k, lam, blocks, model.residual_scale)
        psi, _, _ = psi_value_and_grads(lam, X_prev)
        return aux.beta * psi + stage_local_loss(k, X_out, aux, None, labels, model).value

    lam, rcache = ax.reauxnet_forward(X0, chain, return_cache=True)
    X_out, caches = stage_forward(k, lam, blocks, model.residual_scale)
    local = stage_local_loss(k, X_out, aux, None, labels, model)
    _, P_in = stage_backward(caches, blocks, local.adjoint, model.residual_scale)
    _, d_lam, _ = psi_value_and_grads(lam, X_prev)
    seg_grads = ax.reauxnet_backward(chain, rcache, aux.beta * d_lam + P_in)
    tensors = [a for seg in chain for a in seg.arrays()]
    analytic = [g for gs in seg_grads for g in gs]
    return CheckResult(f"reauxnet L={L} d={d} b={batch}", _check_tensors(objective, tensors, analytic))


def run_suite(seed: int = 0, depths=DEPTHS, widths=WIDTHS, batch_sizes=BATCHES) -> list[CheckResult]:
    results = []
    for L, d, b in itertools.product(depths, widths, batch_sizes):
        results.append(check_serial(L, d, b, seed))
        for mode in (PENALTY, AUGMENTED_LAGRANGIAN):
            results.append(check_stage(L, d, b, mode, last=False, seed=seed))
        results.append(check_stage(L, d, b, PENALTY, last=True, seed=seed))
        results.append(check_distill(L, d, b, seed))
        results.append(check_reauxnet(L, d, b, seed))
    return results
