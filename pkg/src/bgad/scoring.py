"""Apply a trained checkpoint to a dataset: log-likelihood grids, maps, image scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureDataset
from .flow import log_likelihood, position_embedding_grid
from .metrics import AnomalyMap, assemble_map, image_score
from .objective import normalize_logp
from .trainer import Checkpoint


class ScoringError(ValueError):
    pass


@dataclass
class ScoreResult:
    ids: list[str]
    labels: np.ndarray
    logp_grids: list[dict[str, np.ndarray]]  # per sample, per level (H_l, W_l)
    logp_max: dict[str, float]
    maps: list[AnomalyMap]
    image_scores: np.ndarray


def level_logps(ckpt: Checkpoint, dataset: FeatureDataset) -> list[dict[str, np.ndarray]]:
    out = []
    tables: dict[tuple[int, int, int], np.ndarray] = {}
    for s in dataset.samples:
        grids = {}
        for lvl, model in ckpt.models.items():
            if lvl not in s.features:
                raise ScoringError(f"sample {s.id}: no features for level {lvl}")
            fmap = s.features[lvl]
            C, H, W = fmap.shape
            if C != model.d:
                raise ScoringError(f"level {lvl}: checkpoint expects {model.d} channels, "
                                   f"sample {s.id} has {C}")
            key = (H, W, model.d_c)
            if key not in tables:
                tables[key] = position_embedding_grid(H, W, model.d_c)
            x = fmap.reshape(C, H * W).T.astype(np.float64)
            grids[lvl] = log_likelihood(model, x, tables[key]).reshape(H, W)
        out.append(grids)
    return out


def score_dataset(ckpt: Checkpoint, dataset: FeatureDataset,
                  smoothing_sigma: float = 4.0) -> ScoreResult:
    grids = level_logps(ckpt, dataset)
    logp_max = {lvl: float(max(g[lvl].max() for g in grids)) for lvl in ckpt.models}
    maps = [assemble_map(g, s.image_shape(), smoothing_sigma, logp_max, s.id)
            for g, s in zip(grids, dataset.samples)]
    scores = np.array([image_score(m) for m in maps])
    return ScoreResult([s.id for s in dataset.samples],
                       np.array([s.label for s in dataset.samples]), grids, logp_max, maps, scores)


def normalized_logps_by_label(ckpt: Checkpoint, dataset: FeatureDataset, level: str):
    """Normalized position log-likelihoods of one level, split into (normal, abnormal)."""
    from .trainer import build_pool, pool_logps

    bd = ckpt.boundaries.get(level)
    if bd is None:
        raise ScoringError(f"level {level} has no boundary; train past phase 1 first")
    model = ckpt.models[level]
    pool = build_pool(dataset, level, model.d_c)
    lp = normalize_logp(pool_logps(model, pool), bd.alpha_n)
    return lp[pool.labels == 0], lp[pool.labels == 1]
