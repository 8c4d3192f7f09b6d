"""Conditional affine-coupling normalizing flow in plain numpy.

Each coupling block maps ``u -> y`` as::

    a, b   = u[:, :h1], u[:, h1:]
    s, t   = subnet([a, c])              # c is the positional condition
    s_c    = soft_clamp(s, clamp_c)
    v      = [a, b * exp(s_c) + t]
    y      = (v @ perm.T) * fixed_scale

so ``log|det J| = sum(s_c) + sum(log fixed_scale)``; the orthogonal
permutation contributes nothing.  All functions work on row batches
(``x`` has shape ``(B, d)``, ``c`` has shape ``(B, d_c)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class FlowError(RuntimeError):
    """Raised when a block produces non-finite values."""

    def __init__(self, message: str, block_index: int | None = None):
        super().__init__(message)
        self.block_index = block_index


def position_embedding(position, grid, d_c: int) -> np.ndarray:
    """Sinusoidal 2D position code: first half encodes the row, second the column."""
    row, col = position
    H, W = grid
    if d_c <= 0 or d_c % 4:
        raise ValueError(f"d_c must be a positive multiple of 4, got {d_c}")
    if not (0 <= row < H and 0 <= col < W):
        raise ValueError(f"position {position} outside grid {grid}")
    return position_embedding_grid(H, W, d_c)[row * W + col]


def position_embedding_grid(H: int, W: int, d_c: int) -> np.ndarray:
    """Embeddings for every position of an ``H x W`` grid, row-major, shape ``(H*W, d_c)``."""
    if d_c <= 0 or d_c % 4:
        raise ValueError(f"d_c must be a positive multiple of 4, got {d_c}")
    half = d_c // 2
    freqs = 1.0 / 10000.0 ** (np.arange(0, half, 2, dtype=np.float64) / half)

    def encode(coord):
        phase = coord[:, None] * freqs[None, :]
        out = np.empty((coord.size, half))
        out[:, 0::2] = np.sin(phase)
        out[:, 1::2] = np.cos(phase)
        return out

    rows = encode(np.arange(H, dtype=np.float64))
    cols = encode(np.arange(W, dtype=np.float64))
    emb = np.empty((H, W, d_c))
    emb[:, :, :half] = rows[:, None, :]
    emb[:, :, half:] = cols[None, :, :]
    return emb.reshape(H * W, d_c)


def soft_clamp(s, clamp_c: float):
    if clamp_c <= 0:
        raise ValueError("clamp_c must be positive")
    return (2.0 * clamp_c / math.pi) * np.arctan(np.asarray(s, dtype=np.float64) / clamp_c)


def soft_clamp_grad(s, clamp_c: float):
    """Derivative of :func:`soft_clamp` with respect to ``s``."""
    r = np.asarray(s, dtype=np.float64) / clamp_c
    return (2.0 / math.pi) / (1.0 + r * r)


@dataclass
class CouplingBlock:
    W1: np.ndarray  # (h1 + d_c, hidden)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (hidden, 2 * h2)
    b2: np.ndarray  # (2 * h2,)
    perm: np.ndarray  # (d, d), orthogonal
    fixed_scale: np.ndarray  # (d,), strictly positive
    clamp_c: float = 1.9
    perm_seed: int | None = None  # lets checkpoints rebuild perm exactly

    def __post_init__(self):
        d = self.perm.shape[0]
        if self.perm.shape != (d, d):
            raise ValueError("permutation must be square")
        if not np.allclose(self.perm.T @ self.perm, np.eye(d), atol=1e-10, rtol=0):
            raise ValueError("permutation is not orthogonal")
        if self.fixed_scale.shape != (d,) or not np.all(self.fixed_scale > 0):
            raise ValueError("fixed_scale must be strictly positive with length d")
        if self.clamp_c <= 0:
            raise ValueError("clamp_c must be positive")
        if self.W2.shape[1] != 2 * (d - d // 2):
            raise ValueError("subnet output must split into equal (s, t) halves")

    @property
    def d(self) -> int:
        return self.perm.shape[0]

    @property
    def h1(self) -> int:
        return self.d // 2

    @property
    def h2(self) -> int:
        return self.d - self.d // 2

    @property
    def d_c(self) -> int:
        return self.W1.shape[0] - self.h1

    def trainable(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self) -> "CouplingBlock":
        return CouplingBlock(
            self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(),
            self.perm.copy(), self.fixed_scale.copy(), self.clamp_c, self.perm_seed,
        )


@dataclass
class FlowModel:
    blocks: list[CouplingBlock]
    level: str = "l0"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("a flow needs at least one block")
        d, d_c = self.blocks[0].d, self.blocks[0].d_c
        for blk in self.blocks:
            if blk.d != d or blk.d_c != d_c:
                raise ValueError("all blocks must share d and d_c")

    @property
    def d(self) -> int:
        return self.blocks[0].d

    @property
    def d_c(self) -> int:
        return self.blocks[0].d_c

    @property
    def L(self) -> int:
        return len(self.blocks)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in a fixed order, e.g. ``("3.W1", array)``."""
        out = []
        for k, blk in enumerate(self.blocks):
            for name, arr in blk.trainable().items():
                out.append((f"{k}.{name}", arr))
        return out

    def copy(self) -> "FlowModel":
        return FlowModel([b.copy() for b in self.blocks], self.level, dict(self.meta))


def f32_snap(a) -> np.ndarray:
    """Round to the nearest float32 value, kept in float64."""
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))[None, :]
    # re-orthogonalize once more so P^T P = I holds to ~1e-15
    q, r = np.linalg.qr(q)
    return q * np.sign(np.diag(r))[None, :]


def init_block(d: int, d_c: int, rng: np.random.Generator, *, clamp_c: float = 1.9,
               hidden: int | None = None, fixed_scale=None) -> CouplingBlock:
    """Near-identity block: zero output layer, fan-in uniform hidden layer.

    Hidden-layer weights are rounded to float32-representable values so a
    checkpoint written in f32 reloads to the identical model.
    """
    h1, h2 = d // 2, d - d // 2
    fan_in = h1 + d_c
    if fan_in == 0:
        raise ValueError("subnet needs at least one input")
    hidden = hidden or 2 * fan_in
    bound = 1.0 / math.sqrt(fan_in)
    W1 = f32_snap(rng.uniform(-bound, bound, size=(fan_in, hidden)))
    b1 = f32_snap(rng.uniform(-bound, bound, size=hidden))
    W2 = np.zeros((hidden, 2 * h2))
    b2 = np.zeros(2 * h2)
    perm_seed = int(rng.integers(0, 2**31 - 1))
    perm = random_orthogonal(d, np.random.default_rng(perm_seed))
    scale = np.ones(d) if fixed_scale is None else f32_snap(fixed_scale)
    return CouplingBlock(W1, b1, W2, b2, perm, scale, clamp_c, perm_seed)


def init_flow(d: int, d_c: int, L: int, rng: np.random.Generator, *, clamp_c: float = 1.9,
              level: str = "l0") -> FlowModel:
    return FlowModel([init_block(d, d_c, rng, clamp_c=clamp_c) for _ in range(L)], level)


def _as_batch(x, width: int, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"{what} has shape {np.shape(x)}, expected (..., {width})")
    return arr, single


def block_forward(block: CouplingBlock, u, c, *, index: int = 0, cache: list | None = None):
    """Forward pass of one block; returns ``(y, logdet)`` per row."""
    u, single = _as_batch(u, block.d, "block input")
    c, _ = _as_batch(c, block.d_c, "condition")
    if c.shape[0] != u.shape[0]:
        c = np.broadcast_to(c, (u.shape[0], block.d_c))
    h1, h2 = block.h1, block.h2
    a, b = u[:, :h1], u[:, h1:]
    inp = np.concatenate([a, c], axis=1)
    hpre = inp @ block.W1 + block.b1
    hid = np.maximum(hpre, 0.0)
    out = hid @ block.W2 + block.b2
    if not np.all(np.isfinite(out)):
        raise FlowError(f"non-finite subnet output in block {index}", index)
    s, t = out[:, :h2], out[:, h2:]
    sc = soft_clamp(s, block.clamp_c)
    es = np.exp(sc)
    v = np.concatenate([a, b * es + t], axis=1)
    y = (v @ block.perm.T) * block.fixed_scale
    logdet = sc.sum(axis=1) + np.log(block.fixed_scale).sum()
    if cache is not None:
        cache.append({"u": u, "inp": inp, "hpre": hpre, "hid": hid, "s": s, "es": es})
    if single:
        return y[0], float(logdet[0])
    return y, logdet


def block_inverse(block: CouplingBlock, y, c, *, index: int = 0):
    y, single = _as_batch(y, block.d, "block output")
    c, _ = _as_batch(c, block.d_c, "condition")
    if c.shape[0] != y.shape[0]:
        c = np.broadcast_to(c, (y.shape[0], block.d_c))
    h1, h2 = block.h1, block.h2
    v = (y / block.fixed_scale) @ block.perm
    a, y2 = v[:, :h1], v[:, h1:]
    inp = np.concatenate([a, c], axis=1)
    out = np.maximum(inp @ block.W1 + block.b1, 0.0) @ block.W2 + block.b2
    if not np.all(np.isfinite(out)):
        raise FlowError(f"non-finite subnet output in block {index}", index)
    s, t = out[:, :h2], out[:, h2:]
    b = (y2 - t) * np.exp(-soft_clamp(s, block.clamp_c))
    u = np.concatenate([a, b], axis=1)
    return u[0] if single else u


def flow_forward(model: FlowModel, x, c, *, cache: list | None = None):
    """``z = phi(x)`` and the summed log-determinant."""
    y, single = _as_batch(x, model.d, "feature")
    if not np.all(np.isfinite(y)):
        raise ValueError("features must be finite")
    total = np.zeros(y.shape[0])
    for k, blk in enumerate(model.blocks):
        y, ld = block_forward(blk, y, c, index=k, cache=cache)
        total = total + ld
    if single:
        return y[0], float(total[0])
    return y, total


def flow_inverse(model: FlowModel, z, c):
    y = z
    for k in range(model.L - 1, -1, -1):
        y = block_inverse(model.blocks[k], y, c, index=k)
    return y


def log_likelihood(model: FlowModel, x, c):
    """Exact log-density under a standard-normal base."""
    z, logdet = flow_forward(model, x, c)
    return -0.5 * np.sum(np.square(z), axis=-1) + logdet - 0.5 * model.d * LOG_2PI


def calibrate_scales(model: FlowModel, x, c, eps: float = 1e-6) -> None:
    """Set each block's fixed scale to ``1/(std + eps)`` of its pre-scale output on ``x``.

    Done once from the first training batch, block by block, then frozen.
    """
    y, _ = _as_batch(x, model.d, "feature")
    for k, blk in enumerate(model.blocks):
        blk.fixed_scale = np.ones(model.d)
        y, _ = block_forward(blk, y, c, index=k)
        std = y.std(axis=0) if y.shape[0] > 1 else np.ones(model.d)
        blk.fixed_scale = f32_snap(1.0 / (std + eps))
        y = y * blk.fixed_scale
