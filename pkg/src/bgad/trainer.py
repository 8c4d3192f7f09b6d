"""Two-phase training: density fitting, then boundary-guided refinement.

Phase 1 fits each level's flow to normal positions with the ML loss.
Phase 2 takes the ``beta``-percentile of the normal log-likelihoods as
the normal boundary (refreshed every ``meta_epoch`` epochs by default),
then trains on normal and abnormal positions with ML + lambda * BG-SPP.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as fbt
from .data import FeatureDataset
from .flow import (
    CouplingBlock, FlowModel, calibrate_scales, f32_snap, init_flow, position_embedding_grid,
    random_orthogonal,
)
from .gradients import NonFiniteLossError, loss_and_gradients
from .objective import BoundaryState, FocalConfig, ObjectiveConfig, build_boundary, find_normal_boundary

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "bgad-checkpoint-1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    L: int = 8
    lr: float = 2e-4
    epochs: int = 200
    batch_size: int = 32
    warmup_epochs: int = 2
    phase1_epochs: int = 16
    meta_epoch: int = 8
    beta: float = 5.0
    tau: float = 0.1
    alpha: float = 10.0
    lam: float = 1.0
    focal: FocalConfig | None = None
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    d_c: int = 64
    clamp_c: float = 1.9
    grad_clip: float = 10.0
    boundary_refresh: str = "meta-epoch"  # or "once"
    levels: list[str] | None = None  # None: every level in the dataset

    def validate(self) -> None:
        problems = []
        if self.L < 1:
            problems.append("L must be >= 1")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if not 0 <= self.phase1_epochs < self.epochs:
            problems.append(f"phase1_epochs ({self.phase1_epochs}) must be < epochs ({self.epochs})")
        if self.meta_epoch < 1:
            problems.append("meta_epoch must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            problems.append("warmup_epochs must be in [0, epochs)")
        if not 0 < self.beta < 100:
            problems.append("beta must be in (0, 100)")
        if self.tau <= 0 or self.alpha < 1 or self.lam < 0 or self.lr < 0:
            problems.append("need tau > 0, alpha >= 1, lam >= 0, lr >= 0")
        if -1.0 / self.alpha - self.tau < -1.0:
            problems.append("tau too large for alpha: abnormal boundary would fall below -1")
        if self.d_c % 4 or self.d_c <= 0:
            problems.append("d_c must be a positive multiple of 4")
        if self.boundary_refresh not in ("meta-epoch", "once"):
            problems.append("boundary_refresh must be 'meta-epoch' or 'once'")
        if problems:
            raise ValueError("; ".join(problems))

    def to_items(self) -> list[tuple[str, str]]:
        items = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "focal":
                items.append(("focal", "on" if v else "off"))
                if v:
                    items += [(f"focal_{k}", repr(x)) for k, x in dataclasses.asdict(v).items()]
            elif f.name == "levels":
                items.append(("levels", ",".join(v) if v else ""))
            else:
                items.append((f.name, repr(v) if isinstance(v, float) else str(v)))
        return items

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in items.items():
            if key.startswith("focal") or key not in types:
                continue
            if key == "levels":
                kwargs[key] = [s for s in raw.split(",") if s] or None
            elif key == "boundary_refresh":
                kwargs[key] = raw
            elif types[key] in ("int", int):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        if items.get("focal", "off") in ("on", "true", "1", "yes"):
            fk = {k[len("focal_"):]: float(v) for k, v in items.items() if k.startswith("focal_")}
            kwargs["focal"] = FocalConfig(**fk)
        return cls(**kwargs)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place bias-corrected Adam update; returns ``(params, state)``."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: param {p.shape}, grad {g.shape}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for k, p in params.items():
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        p -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
    return params, state


def lr_schedule(epoch_fraction: float, warmup_fraction: float, base_lr: float) -> float:
    """Linear warm-up to ``base_lr`` followed by cosine annealing to 0."""
    if not 0 <= warmup_fraction < 1:
        raise ValueError("warmup_fraction must be in [0, 1)")
    if warmup_fraction > 0 and epoch_fraction < warmup_fraction:
        return base_lr * epoch_fraction / warmup_fraction
    progress = (epoch_fraction - warmup_fraction) / (1.0 - warmup_fraction)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(max(progress, 0.0), 1.0)))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


# -- position pools ----------------------------------------------------------

@dataclass
class LevelPool:
    """All spatial positions of one feature level, flattened."""

    x: np.ndarray  # (P, d)
    cond_index: np.ndarray  # (P,) row into the embedding table of the sample's grid
    grid_id: np.ndarray  # (P,) which grid shape the position came from
    labels: np.ndarray  # (P,) 0 normal, 1 abnormal
    sample: np.ndarray  # (P,) owning sample index
    tables: list[np.ndarray]  # embedding table per grid shape

    def cond(self, idx: np.ndarray) -> np.ndarray:
        if len(self.tables) == 1:
            return self.tables[0][self.cond_index[idx]]
        out = np.empty((idx.size, self.tables[0].shape[1]))
        for g, table in enumerate(self.tables):
            sel = self.grid_id[idx] == g
            out[sel] = table[self.cond_index[idx][sel]]
        return out


def position_labels(sample, H: int, W: int) -> np.ndarray:
    """Per-position labels; a cell is abnormal when at least half its mask area is."""
    if sample.label == 0:
        return np.zeros(H * W, dtype=np.int64)
    if sample.mask is None:
        return np.ones(H * W, dtype=np.int64)
    m = sample.mask.astype(np.float64)
    Hi, Wi = m.shape
    rows = np.minimum((np.arange(H + 1) * Hi) // H, Hi)
    cols = np.minimum((np.arange(W + 1) * Wi) // W, Wi)
    out = np.zeros((H, W), dtype=np.int64)
    for r in range(H):
        for c in range(W):
            cell = m[rows[r]:max(rows[r + 1], rows[r] + 1), cols[c]:max(cols[c + 1], cols[c] + 1)]
            out[r, c] = int(cell.mean() >= 0.5)
    return out.ravel()


def build_pool(dataset: FeatureDataset, level: str, d_c: int) -> LevelPool:
    xs, cidx, gid, labels, owner = [], [], [], [], []
    grids: dict[tuple[int, int], int] = {}
    tables: list[np.ndarray] = []
    for i, s in enumerate(dataset.samples):
        fmap = s.features[level]
        C, H, W = fmap.shape
        if (H, W) not in grids:
            grids[(H, W)] = len(tables)
            tables.append(position_embedding_grid(H, W, d_c))
        xs.append(fmap.reshape(C, H * W).T)
        cidx.append(np.arange(H * W))
        gid.append(np.full(H * W, grids[(H, W)]))
        labels.append(position_labels(s, H, W))
        owner.append(np.full(H * W, i))
    return LevelPool(np.concatenate(xs).astype(np.float64), np.concatenate(cidx),
                     np.concatenate(gid), np.concatenate(labels), np.concatenate(owner), tables)


def pool_logps(model: FlowModel, pool: LevelPool, idx: np.ndarray | None = None,
               chunk: int = 4096) -> np.ndarray:
    from .flow import log_likelihood

    idx = np.arange(pool.x.shape[0]) if idx is None else idx
    out = np.empty(idx.size)
    for start in range(0, idx.size, chunk):
        sl = idx[start:start + chunk]
        out[start:start + sl.size] = log_likelihood(model, pool.x[sl], pool.cond(sl))
    return out


# -- checkpoint --------------------------------------------------------------

@dataclass
class Checkpoint:
    models: dict[str, FlowModel]
    boundaries: dict[str, BoundaryState | None]
    config: TrainConfig
    epoch: int
    rng_digest: str
    history: list[dict] = field(default_factory=list)


def _rng_digest(rng: np.random.Generator) -> str:
    return hashlib.sha256(repr(rng.bit_generator.state).encode()).hexdigest()[:16]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write metadata plus one FBT file per parameter array; atomic at the directory level."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        lines = [f"format = {CHECKPOINT_FORMAT}", f"epoch = {ckpt.epoch}",
                 f"rng_digest = {ckpt.rng_digest}"]
        lines += [f"config.{k} = {v}" for k, v in ckpt.config.to_items()]
        lines.append(f"levels = {','.join(ckpt.models)}")
        for lvl, model in ckpt.models.items():
            blk0 = model.blocks[0]
            lines += [f"level.{lvl}.d = {model.d}", f"level.{lvl}.d_c = {model.d_c}",
                      f"level.{lvl}.L = {model.L}", f"level.{lvl}.hidden = {blk0.W1.shape[1]}",
                      f"level.{lvl}.clamp_c = {blk0.clamp_c!r}"]
            for k, blk in enumerate(model.blocks):
                lines.append(f"level.{lvl}.block{k}.perm_seed = {blk.perm_seed}")
                for name in ("W1", "b1", "W2", "b2", "perm", "fixed_scale"):
                    fbt.write_fbt(tmp / lvl / f"block{k}.{name}.fbt", getattr(blk, name))
            bd = ckpt.boundaries.get(lvl)
            if bd is not None:
                lines += [f"level.{lvl}.boundary.raw_b_n = {bd.raw_b_n!r}",
                          f"level.{lvl}.boundary.alpha = {bd.alpha!r}",
                          f"level.{lvl}.boundary.tau = {bd.tau!r}",
                          f"level.{lvl}.boundary.beta = {bd.beta!r}"]
        fbt.atomic_write_bytes(tmp / "metadata.txt", ("\n".join(lines) + "\n").encode())
        if path.exists():
            trash = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}.old."))
            os.replace(path, trash / "ckpt")
            os.replace(tmp, path)
            shutil.rmtree(trash)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def read_keyvalue(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        meta = read_keyvalue((path / "metadata.txt").read_text(encoding="utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a checkpoint (format {meta.get('format')!r})")
        config = TrainConfig.from_items({k[len("config."):]: v for k, v in meta.items()
                                         if k.startswith("config.")})
        models, boundaries = {}, {}
        for lvl in [s for s in meta["levels"].split(",") if s]:
            pre = f"level.{lvl}"
            d, L = int(meta[f"{pre}.d"]), int(meta[f"{pre}.L"])
            clamp_c = float(meta[f"{pre}.clamp_c"])
            blocks = []
            for k in range(L):
                arrs = {name: fbt.read_fbt(path / lvl / f"block{k}.{name}.fbt").astype(np.float64)
                        for name in ("W1", "b1", "W2", "b2", "perm", "fixed_scale")}
                seed = int(meta[f"{pre}.block{k}.perm_seed"])
                perm = random_orthogonal(d, np.random.default_rng(seed))
                if arrs["perm"].shape != (d, d) or not np.allclose(perm, arrs["perm"], atol=1e-6):
                    raise CheckpointError(f"{path}: level {lvl} block {k} permutation does not match its seed")
                blocks.append(CouplingBlock(arrs["W1"], arrs["b1"], arrs["W2"], arrs["b2"], perm,
                                            arrs["fixed_scale"], clamp_c, seed))
            models[lvl] = FlowModel(blocks, lvl)
            if f"{pre}.boundary.raw_b_n" in meta:
                boundaries[lvl] = build_boundary(float(meta[f"{pre}.boundary.raw_b_n"]),
                                                 float(meta[f"{pre}.boundary.alpha"]),
                                                 float(meta[f"{pre}.boundary.tau"]),
                                                 float(meta[f"{pre}.boundary.beta"]))
            else:
                boundaries[lvl] = None
        return Checkpoint(models, boundaries, config, int(meta["epoch"]), meta["rng_digest"])
    except CheckpointError:
        raise
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc


# -- training loop -----------------------------------------------------------

BatchHook = Callable[[int, str, np.ndarray, np.ndarray], None]


def compute_boundaries(models: dict[str, FlowModel], pools: dict[str, LevelPool],
                       config: TrainConfig) -> dict[str, BoundaryState]:
    out = {}
    for lvl, model in models.items():
        normal = np.flatnonzero(pools[lvl].labels == 0)
        raw = find_normal_boundary(pool_logps(model, pools[lvl], normal), config.beta)
        if raw >= 0:
            raise TrainingError(
                f"level {lvl}: normal boundary log-likelihood {raw:.4g} is not negative; "
                "the normalizer is undefined (rescale the features)")
        out[lvl] = build_boundary(raw, config.alpha, config.tau, config.beta)
    return out


def train(dataset: FeatureDataset, config: TrainConfig, *,
          on_batch: BatchHook | None = None) -> Checkpoint:
    """Train one flow per feature level; deterministic for a given seed."""
    config.validate()
    if not any(s.label == 0 for s in dataset.samples):
        raise TrainingError("training set has no normal samples")
    levels = config.levels or dataset.levels
    rng = np.random.default_rng(config.seed)
    pools = {lvl: build_pool(dataset, lvl, config.d_c) for lvl in levels}
    models = {lvl: init_flow(pools[lvl].x.shape[1], config.d_c, config.L, rng,
                             clamp_c=config.clamp_c, level=lvl) for lvl in levels}
    states = {lvl: OptimizerState.zeros_like(dict(m.parameters())) for lvl, m in models.items()}
    boundaries: dict[str, BoundaryState | None] = {lvl: None for lvl in levels}
    calibrated = set()
    history = []
    warm = config.warmup_epochs / config.epochs

    for epoch in range(config.epochs):
        phase = 1 if epoch < config.phase1_epochs else 2
        since = epoch - config.phase1_epochs
        if phase == 2 and (since == 0 or (config.boundary_refresh == "meta-epoch"
                                          and since % config.meta_epoch == 0)):
            boundaries = compute_boundaries(models, pools, config)
        row = {"epoch": epoch, "phase": phase}
        ml_sum = bg_sum = 0.0
        n_batches = 0
        lr = 0.0
        for lvl in levels:
            pool, model = pools[lvl], models[lvl]
            candidates = np.flatnonzero(pool.labels == 0) if phase == 1 else np.arange(pool.labels.size)
            order = candidates[rng.permutation(candidates.size)]
            nb = math.ceil(order.size / config.batch_size)
            objective = ObjectiveConfig(config.lam, boundaries[lvl], config.focal, phase)
            params = dict(model.parameters())
            for b in range(nb):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                x, c, y = pool.x[idx], pool.cond(idx), pool.labels[idx]
                if on_batch is not None:
                    on_batch(epoch, lvl, idx, y)
                if lvl not in calibrated:
                    calibrate_scales(model, x[y == 0], c[y == 0])
                    calibrated.add(lvl)
                try:
                    gs = loss_and_gradients(model, x, c, y, objective,
                                            sample_ids=[int(pool.sample[i]) for i in idx])
                except (NonFiniteLossError, FloatingPointError) as exc:
                    raise TrainingError(f"diverged at epoch {epoch}, batch {b}, level {lvl}: {exc}") from exc
                clip_global_norm(gs.grads, config.grad_clip)
                lr = lr_schedule((epoch + b / nb) / config.epochs, warm, config.lr)
                adam_step(params, gs.grads, states[lvl], lr,
                          config.adam_beta1, config.adam_beta2, config.adam_eps)
                for p in params.values():
                    p[...] = f32_snap(p)
                ml_sum += gs.terms.ml
                bg_sum += gs.terms.bgspp
                n_batches += 1
            bd = boundaries[lvl]
            row[f"raw_b_n_{lvl}"] = bd.raw_b_n if bd is not None else float("nan")
        row["ml_loss"] = ml_sum / max(n_batches, 1)
        row["bgspp_loss"] = bg_sum / max(n_batches, 1)
        row["lr"] = lr
        if not math.isfinite(row["ml_loss"]):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        history.append(row)
        log.info("epoch %d phase %d ml %.4f bgspp %.4f lr %.2e", epoch, phase,
                 row["ml_loss"], row["bgspp_loss"], lr)

    return Checkpoint(models, boundaries, config, config.epochs, _rng_digest(rng), history)
