"""Loss terms and explicit-boundary machinery.

Log-likelihoods come in two units here.  *Raw* values are what the flow
reports.  *Normalized* values are raw values divided by the normalizer
``alpha_n = -alpha * raw_b_n``, which places the normal boundary at
``-1/alpha`` and most of the mass inside ``[-1, 0]``.  The semi-push-pull
hinge works in normalized units; focal weights read raw values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flow import LOG_2PI

NORMAL, ABNORMAL = 0, 1


@dataclass(frozen=True)
class BoundaryState:
    b_n: float
    b_a: float
    alpha_n: float
    beta: float
    tau: float
    alpha: float
    raw_b_n: float

    def __post_init__(self):
        if not self.alpha_n > 0:
            raise ValueError("alpha_n must be positive")
        if not (-1.0 <= self.b_a < self.b_n <= 0.0):
            raise ValueError(
                f"boundaries out of range: b_a={self.b_a}, b_n={self.b_n} "
                "(need -1 <= b_a < b_n <= 0; lower tau or raise alpha)"
            )


@dataclass(frozen=True)
class FocalConfig:
    # alpha_norm is the normal focusing factor, unrelated to BoundaryState.alpha_n
    alpha_norm: float = 15.0
    gamma_norm: float = 1.0
    logp_norm_threshold: float = -2.0
    alpha_abn: float = 0.53
    gamma_abn: float = 2.0
    logp_abn_threshold: float = -20.0

    def __post_init__(self):
        if min(self.alpha_norm, self.gamma_norm, self.alpha_abn, self.gamma_abn) <= 0:
            raise ValueError("focusing parameters must be positive")
        if self.logp_norm_threshold >= 0 or self.logp_abn_threshold >= 0:
            raise ValueError("focal thresholds must be negative")


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 1.0
    boundary: BoundaryState | None = None
    focal: FocalConfig | None = None
    phase: int = 1

    def __post_init__(self):
        if self.phase not in (1, 2):
            raise ValueError("phase must be 1 or 2")
        if self.phase == 2 and self.boundary is None:
            raise ValueError("phase 2 needs a BoundaryState")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def ml_loss(loglikelihoods) -> float:
    lp = np.asarray(loglikelihoods, dtype=np.float64)
    if lp.size == 0:
        raise ValueError("ml_loss of an empty batch")
    if not np.all(np.isfinite(lp)):
        raise ValueError("ml_loss needs finite log-likelihoods")
    return float(-lp.mean())


def anomaly_score(logp, logp_max):
    """``1 - exp(logp - logp_max)``: 0 for the most normal sample, towards 1 otherwise.

    Same ordering as ``exp(logp_max) - exp(logp)`` without underflowing.
    """
    lp = np.asarray(logp, dtype=np.float64)
    if np.any(lp > logp_max):
        raise ValueError("logp exceeds logp_max; pass the maximum over the scored set")
    out = -np.expm1(lp - logp_max)
    return float(out) if out.ndim == 0 else out


def find_normal_boundary(normal_logps, beta: float) -> float:
    """Nearest-rank ``beta``-th percentile of the normal log-likelihoods."""
    lp = np.asarray(normal_logps, dtype=np.float64).ravel()
    if lp.size == 0:
        raise ValueError("no normal log-likelihoods to take a percentile of")
    if not 0 < beta < 100:
        raise ValueError("beta must lie in (0, 100)")
    rank = math.ceil(beta * lp.size / 100.0)
    rank = min(max(rank, 1), lp.size)
    return float(np.partition(lp, rank - 1)[rank - 1])


def build_boundary(raw_b_n: float, alpha: float = 10.0, tau: float = 0.1,
                   beta: float = 5.0) -> BoundaryState:
    if not raw_b_n < 0:
        raise ValueError(f"raw normal boundary must be negative, got {raw_b_n}")
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    if tau <= 0:
        raise ValueError("tau must be positive")
    alpha_n = -alpha * raw_b_n
    b_n = raw_b_n / alpha_n
    return BoundaryState(b_n=b_n, b_a=b_n - tau, alpha_n=alpha_n, beta=beta, tau=tau,
                         alpha=alpha, raw_b_n=float(raw_b_n))


def normalize_logp(logp, alpha_n: float):
    if alpha_n <= 0:
        raise ValueError("alpha_n must be positive")
    out = np.asarray(logp, dtype=np.float64) / alpha_n
    return float(out) if out.ndim == 0 else out


def is_extreme(logp_norm):
    """Normalized values below -1 sit outside the push term."""
    return np.asarray(logp_norm) < -1.0


def _pull_push(normal_norm, abnormal_norm, boundary: BoundaryState):
    n = np.asarray(normal_norm, dtype=np.float64).ravel()
    a = np.asarray(abnormal_norm, dtype=np.float64).ravel()
    a = a[~is_extreme(a)]
    pull = np.abs(np.minimum(n - boundary.b_n, 0.0))
    push = np.abs(np.maximum(a - boundary.b_n + boundary.tau, 0.0))
    return pull, push


def bgspp_loss_l1(normal_logps_norm, abnormal_logps_norm, boundary: BoundaryState) -> float:
    pull, push = _pull_push(normal_logps_norm, abnormal_logps_norm, boundary)
    return float(pull.sum() + push.sum())


def bgspp_loss_l0(normal_logps_norm, abnormal_logps_norm, boundary: BoundaryState) -> int:
    """Number of samples violating the margin; diagnostic only."""
    pull, push = _pull_push(normal_logps_norm, abnormal_logps_norm, boundary)
    return int(np.count_nonzero(pull) + np.count_nonzero(push))


def focal_weight_normal(logp, cfg: FocalConfig):
    """Truncated focal weight for normal samples (raw log-likelihood units)."""
    lp = np.asarray(logp, dtype=np.float64)
    hard = -cfg.alpha_norm * (-np.expm1(lp)) ** cfg.gamma_norm * lp
    out = np.where(lp > cfg.logp_norm_threshold, 1.0, hard)
    return float(out) if out.ndim == 0 else out


def focal_weight_abnormal(logp, cfg: FocalConfig):
    """Reversed focal weight for abnormal samples (raw log-likelihood units)."""
    lp = np.asarray(logp, dtype=np.float64)
    active = lp > cfg.logp_abn_threshold
    if np.any(active & (lp >= 0)):
        raise ValueError("abnormal focal weight undefined for logp >= 0")
    safe = np.where(active, lp, -1.0)
    hard = -cfg.alpha_abn * (1.0 + np.exp(safe)) ** cfg.gamma_abn / safe
    out = np.where(active, hard, 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class LossTerms:
    total: float
    ml: float
    bgspp: float
    dlogp: np.ndarray  # d total / d raw logp, per sample


def loss_terms(logps, labels, config: ObjectiveConfig, *, weights=None) -> LossTerms:
    """Value of the configured objective and its derivative w.r.t. each raw logp.

    Phase 1 is the mean negative log-likelihood of the normal samples.
    Phase 2 adds ``lam * (pull + push) / B`` with ``B`` the batch size, so the
    weight of the hinge does not depend on how large the batch is.  With focal
    weighting on, the per-sample weights multiply the ML and pull terms of
    normals and the push terms of anomalies.  ``weights`` overrides the focal
    weights (they are treated as constants either way).
    """
    lp = np.asarray(logps, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if lp.size == 0:
        raise ValueError("empty batch")
    if lp.shape != y.shape:
        raise ValueError("logps and labels differ in length")
    if not np.all(np.isin(y, (NORMAL, ABNORMAL))):
        raise ValueError("labels must be 0 (normal) or 1 (abnormal)")
    is_n = y == NORMAL
    B = lp.size
    dlogp = np.zeros(B)

    if config.phase == 1:
        if not is_n.any():
            return LossTerms(0.0, 0.0, 0.0, dlogp)
        n = is_n.sum()
        ml = float(-lp[is_n].sum() / n)
        dlogp[is_n] = -1.0 / n
        return LossTerms(ml, ml, 0.0, dlogp)

    if weights is None:
        weights = focal_weights(lp, y, config.focal)
    w = np.asarray(weights, dtype=np.float64)

    ml = 0.0
    n = is_n.sum()
    if n:
        ml = float(np.sum(w[is_n] * -lp[is_n]) / n)
        dlogp[is_n] = -w[is_n] / n

    bd = config.boundary
    u = lp / bd.alpha_n
    scale = config.lam / B
    pull_active = is_n & (u < bd.b_n)
    push_active = ~is_n & (u >= -1.0) & (u > bd.b_a)
    pull = np.sum(w[pull_active] * (bd.b_n - u[pull_active]))
    push = np.sum(w[push_active] * (u[push_active] - bd.b_a))
    bgspp = float((pull + push) / B)
    dlogp[pull_active] -= scale * w[pull_active] / bd.alpha_n
    dlogp[push_active] += scale * w[push_active] / bd.alpha_n
    return LossTerms(ml + config.lam * bgspp, ml, bgspp, dlogp)


def focal_weights(logps, labels, focal: FocalConfig | None) -> np.ndarray:
    lp = np.asarray(logps, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if focal is None:
        return np.ones(lp.size)
    w = np.ones(lp.size)
    is_n = y == NORMAL
    if is_n.any():
        w[is_n] = focal_weight_normal(lp[is_n], focal)
    if (~is_n).any():
        w[~is_n] = focal_weight_abnormal(lp[~is_n], focal)
    return w


def combined_loss(logps, labels, config: ObjectiveConfig, *, weights=None) -> float:
    return loss_terms(logps, labels, config, weights=weights).total


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    rhs: float
    slack: float


def bound_report(normal_logps_norm, abnormal_logps_norm, boundary: BoundaryState,
                 epsilon: float, lam: float, d: int) -> BoundReport:
    """Both sides of the margin error bound for a trained model.

    ``lhs`` is the mean normal shortfall below ``b_n - eps`` plus the mean
    abnormal excess above ``b_a + eps``; ``rhs`` is
    ``((d/2) log 2pi - 1/2)(b_n - b_a)/lam + N/(N+M)``.
    """
    gap = boundary.b_n - boundary.b_a
    if not 0 < epsilon < gap:
        raise ValueError(f"epsilon must lie in (0, {gap})")
    if lam <= 0:
        raise ValueError("lambda must be positive for the bound")
    n = np.asarray(normal_logps_norm, dtype=np.float64).ravel()
    a = np.asarray(abnormal_logps_norm, dtype=np.float64).ravel()
    N, M = n.size, a.size
    if N + M == 0:
        raise ValueError("no samples")
    lhs = 0.0
    if N:
        lhs += float(np.mean(np.maximum(boundary.b_n - epsilon - n, 0.0)))
    if M:
        lhs += float(np.mean(np.maximum(a - (boundary.b_a + epsilon), 0.0)))
    rhs = (0.5 * d * LOG_2PI - 0.5) * gap / lam + N / (N + M)
    return BoundReport(lhs, rhs, rhs - lhs)
