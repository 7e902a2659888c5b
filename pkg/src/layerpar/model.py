"""Pre-activation residual network with hand-written backward maps.

The trunk is ``X_{l+1} = X_l + s * F(X_l, W_l)`` with
``F(X) = relu(relu(X) @ W1 + b1) @ W2 + b2``. The input map is
``S(y) = relu(y @ Ws + bs)`` and the output map ``T(X) = X @ Wt + bt``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DimensionError, SeededRng, affine, relu, softmax_cross_entropy

CHECKPOINT_VERSION = 1


@dataclass
class AffineParams:
    W: np.ndarray
    b: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.W, self.b]

    def copy(self) -> "AffineParams":
        return AffineParams(self.W.copy(), self.b.copy())

    def zeros_like(self) -> "AffineParams":
        return AffineParams(np.zeros_like(self.W), np.zeros_like(self.b))

    @classmethod
    def init(cls, rng: SeededRng, d_in: int, d_out: int) -> "AffineParams":
        return cls(rng.normal((d_in, d_out), np.sqrt(2.0 / d_in)), np.zeros(d_out))


@dataclass
class BlockParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        d, d_h = self.W1.shape
        if d_h < 1 or self.W2.shape != (d_h, d) or self.b1.shape != (d_h,) or self.b2.shape != (d,):
            raise DimensionError(
                f"inconsistent block shapes W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}"
            )

    @property
    def width(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "BlockParams":
        return BlockParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "BlockParams":
        return BlockParams(*(np.zeros_like(a) for a in self.arrays()))

    @classmethod
    def init(cls, rng: SeededRng, d: int, d_h: int) -> "BlockParams":
        return cls(
            rng.normal((d, d_h), np.sqrt(2.0 / d)),
            np.zeros(d_h),
            rng.normal((d_h, d), np.sqrt(2.0 / d_h)),
            np.zeros(d),
        )

    @classmethod
    def zeros(cls, d: int, d_h: int) -> "BlockParams":
        return cls(np.zeros((d, d_h)), np.zeros(d_h), np.zeros((d_h, d)), np.zeros(d))


@dataclass
class BlockCache:
    X: np.ndarray
    a0: np.ndarray
    z1: np.ndarray
    a1: np.ndarray


def block_forward(X: np.ndarray, W: BlockParams, residual_scale: float = 1.0):
    """Apply one residual block; return the next activation and its cache."""
    if X.ndim != 2 or X.shape[1] != W.width:
        raise DimensionError(f"block input {X.shape} does not match block width {W.width}")
    a0 = relu(X)
    z1 = affine(a0, W.W1, W.b1)
    a1 = relu(z1)
    F = affine(a1, W.W2, W.b2)
    return X + residual_scale * F, BlockCache(X, a0, z1, a1)


def block_backward(cache: BlockCache, W: BlockParams, P_next: np.ndarray, residual_scale: float = 1.0):
    """Propagate the adjoint ``P_next`` through one block.

    Returns ``(P, grads)`` with ``P = P_next + P_next dF/dX`` and
    ``grads = P_next dF/dW`` as a :class:`BlockParams`.
    """
    if cache.a1.shape[1] != W.hidden or cache.X.shape[1] != W.width:
        raise ValueError("cache was not produced by a block with these parameters")
    if P_next.shape != cache.X.shape:
        raise DimensionError(f"adjoint {P_next.shape} does not match activation {cache.X.shape}")
    dF = residual_scale * P_next
    gW2 = cache.a1.T @ dF
    gb2 = dF.sum(axis=0)
    dz1 = (dF @ W.W2.T) * (cache.z1 > 0)
    gW1 = cache.a0.T @ dz1
    gb1 = dz1.sum(axis=0)
    dX = (dz1 @ W.W1.T) * (cache.X > 0)
    return P_next + dX, BlockParams(gW1, gb1, gW2, gb2)


def blocks_forward(X: np.ndarray, blocks: list[BlockParams], residual_scale: float = 1.0):
    caches = []
    for W in blocks:
        X, c = block_forward(X, W, residual_scale)
        caches.append(c)
    return X, caches


def blocks_backward(caches: list[BlockCache], blocks: list[BlockParams], P: np.ndarray,
                    residual_scale: float = 1.0):
    """Reverse sweep over a stack of blocks; returns input adjoint and per-block grads."""
    grads: list[BlockParams] = [None] * len(blocks)  # type: ignore[list-item]
    for i in range(len(blocks) - 1, -1, -1):
        P, grads[i] = block_backward(caches[i], blocks[i], P, residual_scale)
    return P, grads


@dataclass
class ModelGrads:
    S: AffineParams
    blocks: list[BlockParams]
    T: AffineParams

    def arrays(self) -> list[np.ndarray]:
        out = self.S.arrays()
        for b in self.blocks:
            out.extend(b.arrays())
        return out + self.T.arrays()


@dataclass
class ResidualModel:
    S: AffineParams
    blocks: list[BlockParams]
    T: AffineParams
    residual_scale: float = 1.0

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("a residual model needs at least one block")
        d = self.S.W.shape[1]
        for i, b in enumerate(self.blocks):
            if b.width != d:
                raise DimensionError(f"block {i} has width {b.width}, expected {d}")
        if self.T.W.shape[0] != d:
            raise DimensionError(f"output map expects width {self.T.W.shape[0]}, trunk width is {d}")

    @classmethod
    def init(cls, rng: SeededRng, raw_dim: int, d: int, d_h: int, n_classes: int, n_blocks: int,
             residual_scale: float = 1.0) -> "ResidualModel":
        return cls(
            AffineParams.init(rng.child(0), raw_dim, d),
            [BlockParams.init(rng.child(1, i), d, d_h) for i in range(n_blocks)],
            AffineParams.init(rng.child(2), d, n_classes),
            residual_scale,
        )

    @property
    def width(self) -> int:
        return self.S.W.shape[1]

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def arrays(self) -> list[np.ndarray]:
        return ModelGrads(self.S, self.blocks, self.T).arrays()

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "ResidualModel":
        return ResidualModel(self.S.copy(), [b.copy() for b in self.blocks], self.T.copy(), self.residual_scale)

    # state dict / checkpoint -------------------------------------------------
    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}S.W": self.S.W, f"{prefix}S.b": self.S.b,
               f"{prefix}T.W": self.T.W, f"{prefix}T.b": self.T.b}
        for i, b in enumerate(self.blocks):
            for name, a in zip(("W1", "b1", "W2", "b2"), b.arrays()):
                out[f"{prefix}blocks.{i}.{name}"] = a
        return out

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray], residual_scale: float = 1.0,
                        prefix: str = "") -> "ResidualModel":
        n = 0
        while f"{prefix}blocks.{n}.W1" in state:
            n += 1
        blocks = [BlockParams(*(np.array(state[f"{prefix}blocks.{i}.{k}"]) for k in ("W1", "b1", "W2", "b2")))
                  for i in range(n)]
        return cls(AffineParams(np.array(state[f"{prefix}S.W"]), np.array(state[f"{prefix}S.b"])), blocks,
                   AffineParams(np.array(state[f"{prefix}T.W"]), np.array(state[f"{prefix}T.b"])),
                   residual_scale)


# input / output maps ---------------------------------------------------------

def embed(model: ResidualModel, y: np.ndarray):
    """``X_0 = S(y)``; returns the embedding and the pre-activation cache."""
    if y.ndim != 2 or y.shape[1] != model.S.W.shape[0]:
        raise DimensionError(f"raw batch {y.shape} does not match input width {model.S.W.shape[0]}")
    pre = affine(y, model.S.W, model.S.b)
    return relu(pre), (y, pre)


def embed_backward(model: ResidualModel, cache, P0: np.ndarray) -> AffineParams:
    y, pre = cache
    dpre = P0 * (pre > 0)
    return AffineParams(y.T @ dpre, dpre.sum(axis=0))


def head(model: ResidualModel, X: np.ndarray) -> np.ndarray:
    return affine(X, model.T.W, model.T.b)


def head_backward(model: ResidualModel, X: np.ndarray, dlogits: np.ndarray):
    """Returns ``(dX, grads_T)``."""
    return dlogits @ model.T.W.T, AffineParams(X.T @ dlogits, dlogits.sum(axis=0))


def loss_phi(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    return softmax_cross_entropy(logits, labels)


@dataclass
class Trajectory:
    embed_cache: tuple
    blocks: list[BlockCache] = field(default_factory=list)
    X_out: np.ndarray | None = None


def net_forward(model: ResidualModel, raw_batch: np.ndarray):
    X, ecache = embed(model, raw_batch)
    X, caches = blocks_forward(X, model.blocks, model.residual_scale)
    return head(model, X), Trajectory(ecache, caches, X)


def net_backward(model: ResidualModel, traj: Trajectory, dlogits: np.ndarray):
    """Full serial backward sweep; returns ``(grads, adjoints)``.

    ``adjoints[l]`` is the adjoint at block input ``l`` (``adjoints[L]`` at the
    trunk output).
    """
    P, gT = head_backward(model, traj.X_out, dlogits)
    adjoints = [P]
    block_grads: list[BlockParams] = [None] * model.n_blocks  # type: ignore[list-item]
    for i in range(model.n_blocks - 1, -1, -1):
        P, block_grads[i] = block_backward(traj.blocks[i], model.blocks[i], P, model.residual_scale)
        adjoints.append(P)
    adjoints.reverse()
    gS = embed_backward(model, traj.embed_cache, P)
    return ModelGrads(gS, block_grads, gT), adjoints


def loss_and_grads(model: ResidualModel, raw_batch: np.ndarray, labels):
    logits, traj = net_forward(model, raw_batch)
    loss, dlogits = loss_phi(logits, labels)
    grads, _ = net_backward(model, traj, dlogits)
    return loss, grads, logits


def predict(model: ResidualModel, raw_batch: np.ndarray) -> np.ndarray:
    logits, _ = net_forward(model, raw_batch)
    return logits.argmax(axis=1)


# checkpoint container ----------------------------------------------------------

def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write tensors plus JSON metadata to a versioned ``.npz`` container."""
    header = json.dumps({"version": CHECKPOINT_VERSION, "meta": meta or {}})
    payload = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(header.encode(), dtype=np.uint8), **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as npz:
        header = json.loads(npz["__header__"].tobytes().decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r} in {path}")
        tensors = {k: npz[k] for k in npz.files if k != "__header__"}
    return tensors, header["meta"]
