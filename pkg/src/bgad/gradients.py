"""Hand-written reverse-mode derivatives for the coupling flow.

The loss only sees the flow through per-sample log-likelihoods, so the
backward pass starts from ``dL/dlogp`` (supplied by
:func:`bgad.objective.loss_terms`) and uses

    dlogp/dz = -z,    dlogp/dlogdet_k = 1  for every block k.

Permutations and fixed scales are frozen and get no gradient.  ReLU and
hinge kinks take the zero-side subgradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import LOG_2PI, CouplingBlock, FlowModel, flow_forward, soft_clamp_grad
from .objective import LossTerms, ObjectiveConfig, loss_terms


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, sample_ids=None):
        super().__init__(message)
        self.sample_ids = sample_ids


@dataclass
class GradientSet:
    grads: dict[str, np.ndarray]  # keyed like FlowModel.parameters()
    loss_value: float
    terms: LossTerms | None = None
    logps: np.ndarray | None = None

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet({k: factor * g for k, g in self.grads.items()},
                           factor * self.loss_value, self.terms, self.logps)


def block_backward(block: CouplingBlock, cache: dict, gy: np.ndarray, glogdet: np.ndarray):
    """Backprop ``gy = dL/dy`` and ``glogdet = dL/dlogdet`` through one block.

    Returns ``(dL/du, {"W1": ..., "b1": ..., "W2": ..., "b2": ...})``.
    """
    h1, h2 = block.h1, block.h2
    u, inp, hpre, hid, s, es = (cache[k] for k in ("u", "inp", "hpre", "hid", "s", "es"))
    b = u[:, h1:]

    gv = (gy * block.fixed_scale) @ block.perm
    ga = gv[:, :h1].copy()
    gy2 = gv[:, h1:]

    gb = gy2 * es
    gsc = gy2 * b * es + glogdet[:, None]
    gs = gsc * soft_clamp_grad(s, block.clamp_c)
    gout = np.concatenate([gs, gy2], axis=1)

    gW2 = hid.T @ gout
    gb2 = gout.sum(axis=0)
    ghpre = (gout @ block.W2.T) * (hpre > 0)
    gW1 = inp.T @ ghpre
    gb1 = ghpre.sum(axis=0)
    ga += (ghpre @ block.W1.T)[:, :h1]

    gu = np.concatenate([ga, gb], axis=1)
    return gu, {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}


def logp_backward(model: FlowModel, caches: list[dict], z: np.ndarray, dlogp: np.ndarray):
    """Parameter gradients of ``sum_i dlogp[i] * logp_i``."""
    grads: dict[str, np.ndarray] = {}
    gy = -z * dlogp[:, None]
    for k in range(model.L - 1, -1, -1):
        gy, g = block_backward(model.blocks[k], caches[k], gy, dlogp)
        for name, arr in g.items():
            grads[f"{k}.{name}"] = arr
    return {name: grads[name] for name, _ in model.parameters()}


def forward_logp(model: FlowModel, x, c):
    caches: list[dict] = []
    z, logdet = flow_forward(model, np.atleast_2d(x), c, cache=caches)
    logp = -0.5 * np.sum(z * z, axis=1) + logdet - 0.5 * model.d * LOG_2PI
    return logp, z, caches


def loss_and_gradients(model: FlowModel, x, c, labels, objective: ObjectiveConfig, *,
                       weights=None, sample_ids=None) -> GradientSet:
    """Objective value and its exact gradient for one mini-batch.

    ``x`` is ``(B, d)``, ``c`` is ``(B, d_c)`` (or one row broadcast to all),
    ``labels`` holds 0 for normal and 1 for abnormal rows.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    logp, z, caches = forward_logp(model, x, c)
    if not np.all(np.isfinite(logp)):
        bad = np.flatnonzero(~np.isfinite(logp))
        ids = [sample_ids[i] for i in bad] if sample_ids is not None else bad.tolist()
        raise NonFiniteLossError(f"non-finite log-likelihood for samples {ids}", ids)
    terms = loss_terms(logp, labels, objective, weights=weights)
    if not np.isfinite(terms.total):
        raise NonFiniteLossError("non-finite loss value")
    grads = logp_backward(model, caches, z, terms.dlogp)
    return GradientSet(grads, terms.total, terms, logp)


def batch_loss(model: FlowModel, x, c, labels, objective: ObjectiveConfig, *, weights=None) -> float:
    """Forward-only loss; the value :func:`loss_and_gradients` differentiates."""
    logp, _, _ = forward_logp(model, x, c)
    return loss_terms(logp, labels, objective, weights=weights).total
