"""Small residual networks that regenerate stage-boundary auxiliary variables.

``AuxNet_k`` maps the boundary variable of interface ``k`` to that of
interface ``k+1`` and is fitted by distillation against the corrected values.
A ReAuxNet for interface ``k`` is a depth-``k`` chain of such segments that
maps the input embedding directly to ``lambda_k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BlockParams, blocks_backward, blocks_forward
from .serial import sgd_update
from .tensor import DimensionError, SeededRng


@dataclass
class AuxNet:
    blocks: list[BlockParams]
    residual_scale: float = 1.0

    @classmethod
    def init(cls, rng: SeededRng, d: int, d_h: int, n_blocks: int = 1,
             residual_scale: float = 1.0) -> "AuxNet":
        # output weights start at zero so a fresh AuxNet is the identity map
        blocks = []
        for i in range(n_blocks):
            b = BlockParams.init(rng.child(i), d, d_h)
            b.W2[...] = 0.0
            blocks.append(b)
        return cls(blocks, residual_scale)

    @classmethod
    def zeros(cls, d: int, d_h: int, n_blocks: int = 1) -> "AuxNet":
        return cls([BlockParams.zeros(d, d_h) for _ in range(n_blocks)])

    @property
    def width(self) -> int:
        return self.blocks[0].width

    def arrays(self) -> list[np.ndarray]:
        return [a for b in self.blocks for a in b.arrays()]

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.arrays())

    def copy(self) -> "AuxNet":
        return AuxNet([b.copy() for b in self.blocks], self.residual_scale)


def _check_width(x: np.ndarray, net: AuxNet) -> None:
    if x.ndim != 2 or x.shape[1] != net.width:
        raise DimensionError(f"auxiliary input {x.shape} does not match AuxNet width {net.width}")


def auxnet_forward(lambda_prev: np.ndarray, net: AuxNet, return_cache: bool = False):
    _check_width(lambda_prev, net)
    out, caches = blocks_forward(lambda_prev, net.blocks, net.residual_scale)
    return (out, caches) if return_cache else out


def distill_loss_and_grads(net: AuxNet, lambda_in: np.ndarray, lambda_target: np.ndarray):
    """Batch-mean of ``||target - AuxNet(in)||^2`` and its parameter gradients."""
    if lambda_target.shape != lambda_in.shape:
        raise DimensionError(f"target {lambda_target.shape} does not match input {lambda_in.shape}")
    out, caches = auxnet_forward(lambda_in, net, return_cache=True)
    diff = out - lambda_target
    batch = lambda_in.shape[0]
    loss = float(np.sum(diff * diff) / batch)
    _, grads = blocks_backward(caches, net.blocks, 2.0 * diff / batch, net.residual_scale)
    return loss, [a for g in grads for a in g.arrays()]


def distill_loss(net: AuxNet, lambda_in: np.ndarray, lambda_target: np.ndarray) -> float:
    diff = auxnet_forward(lambda_in, net) - lambda_target
    return float(np.sum(diff * diff) / lambda_in.shape[0])


def distill_step(net: AuxNet, lambda_in: np.ndarray, lambda_target: np.ndarray, eta_aux: float,
                 steps: int = 1, momentum_state=None, momentum: float = 0.0):
    """Run ``steps`` SGD steps on the distillation loss (in place).

    Returns ``(net, loss)`` where ``loss`` is evaluated at the updated parameters.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    for _ in range(steps):
        _, grads = distill_loss_and_grads(net, lambda_in, lambda_target)
        sgd_update(net.arrays(), grads, eta_aux, momentum_state, momentum)
    return net, distill_loss(net, lambda_in, lambda_target)


def generate_lambdas(X0_embedded: np.ndarray, nets: list[AuxNet]):
    """``lambda_0 = X0``, ``lambda_{k+1} = AuxNet_k(lambda_k)`` for all interfaces."""
    lambdas = [X0_embedded]
    for net in nets:
        lambdas.append(auxnet_forward(lambdas[-1], net))
    return lambdas


# recursive variant -------------------------------------------------------------

class ReAuxNet:
    """One segment chain per interface ``k = 1..K-1``.

    ``chains[k-1]`` holds ``k`` segments applied in order to ``X_0``. With
    ``shared_prefix`` the first ``k-1`` segments of chain ``k`` are the very
    objects of chain ``k-1``, which collapses the structure to a plain
    AuxNet chain.
    """

    def __init__(self, chains: list[list[AuxNet]], shared_prefix: bool = False):
        self.chains = chains
        self.shared_prefix = shared_prefix

    @classmethod
    def init(cls, rng: SeededRng, K: int, d: int, d_h: int, n_blocks: int = 1,
             shared_prefix: bool = False, residual_scale: float = 1.0) -> "ReAuxNet":
        chains: list[list[AuxNet]] = []
        for k in range(1, K):
            if shared_prefix and chains:
                prefix = chains[-1]
            else:
                prefix = [AuxNet.init(rng.child(k, j), d, d_h, n_blocks, residual_scale) for j in range(k - 1)]
            chains.append(prefix + [AuxNet.init(rng.child(k, k - 1), d, d_h, n_blocks, residual_scale)])
        return cls(chains, shared_prefix)

    @classmethod
    def from_auxnets(cls, nets: list[AuxNet]) -> "ReAuxNet":
        """Shared-prefix ReAuxNet aliasing the given AuxNet chain."""
        return cls([nets[:k] for k in range(1, len(nets) + 1)], shared_prefix=True)

    @property
    def K(self) -> int:
        return len(self.chains) + 1

    def segments(self) -> list[AuxNet]:
        """Distinct segment objects, in first-appearance order."""
        seen, out = set(), []
        for chain in self.chains:
            for seg in chain:
                if id(seg) not in seen:
                    seen.add(id(seg))
                    out.append(seg)
        return out

    def n_params(self) -> int:
        return sum(s.n_params() for s in self.segments())

    def nbytes(self) -> int:
        return sum(s.nbytes() for s in self.segments())


def reauxnet_forward(X0_embedded: np.ndarray, chain: list[AuxNet], return_cache: bool = False):
    """Evaluate one interface's chain from the input embedding."""
    x = X0_embedded
    caches = []
    for seg in chain:
        x, c = auxnet_forward(x, seg, return_cache=True)
        caches.append(c)
    return (x, caches) if return_cache else x


def reauxnet_backward(chain: list[AuxNet], caches, grad_signal: np.ndarray):
    """Pull ``grad_signal`` (d objective / d lambda_k) back to every segment."""
    grads: list[list[np.ndarray]] = [None] * len(chain)  # type: ignore[list-item]
    P = grad_signal
    for j in range(len(chain) - 1, -1, -1):
        P, g = blocks_backward(caches[j], chain[j].blocks, P, chain[j].residual_scale)
        grads[j] = [a for b in g for a in b.arrays()]
    return grads


def reauxnet_update(chain: list[AuxNet], caches, grad_signal: np.ndarray, eta_aux: float) -> list[AuxNet]:
    """One SGD step on a single chain given d objective / d lambda_k."""
    for seg, g in zip(chain, reauxnet_backward(chain, caches, grad_signal)):
        sgd_update(seg.arrays(), g, eta_aux)
    return chain


def accumulate_segment_grads(rn: ReAuxNet, per_chain: dict[int, list[list[np.ndarray]]]):
    """Sum per-chain segment gradients onto distinct (possibly shared) segments.

    ``per_chain[k]`` are the gradients for ``rn.chains[k-1]``. Summation runs in
    increasing ``k`` so results do not depend on thread completion order.
    """
    totals: dict[int, list[np.ndarray]] = {}
    for k in sorted(per_chain):
        for seg, g in zip(rn.chains[k - 1], per_chain[k]):
            if id(seg) in totals:
                for acc, gi in zip(totals[id(seg)], g):
                    acc += gi
            else:
                totals[id(seg)] = [gi.copy() for gi in g]
    return [(seg, totals[id(seg)]) for seg in rn.segments() if id(seg) in totals]
