"""Training objective: masked cross-entropy, load balance, sparsity hinge.

Each loss comes with a function returning its gradient with respect to the
quantities the model exposes (logits, routing weights, sparsity factors).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .routers import RoutingRecord


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # load balance
    beta: float = 0.0  # sparsity
    k_target: int = 2

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError("loss weights must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.k_target < 1:
            raise ValueError("k_target must be >= 1")


@dataclass(frozen=True)
class BatchRoutingStats:
    dispatch_fraction: np.ndarray
    prob_fraction: np.ndarray
    token_count: int

    @property
    def num_experts(self) -> int:
        return self.dispatch_fraction.size


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def masked_cross_entropy_grad(logits, targets, mask):
    """Mean negative log-likelihood over masked positions and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ValueError("logits, targets and mask shapes disagree")
    n = mask.sum()
    if n <= 0:
        raise ValueError("mask selects no positions")
    logp = _log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -float((picked * mask).sum() / n)
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None],
                      np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
    grad *= (mask / n)[..., None]
    return loss, grad


def masked_cross_entropy(logits, targets, mask) -> float:
    return masked_cross_entropy_grad(logits, targets, mask)[0]


def _as_prob_matrix(routing) -> np.ndarray:
    if isinstance(routing, np.ndarray):
        probs = routing
    else:
        routing = list(routing)
        if routing and isinstance(routing[0], RoutingRecord):
            probs = np.stack([r.p for r in routing])
        else:
            probs = np.asarray(routing, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("need a non-empty (T, E) set of routing weights")
    return probs


def accumulate_stats(routing) -> BatchRoutingStats:
    """Dispatch and probability fractions over a batch.

    ``routing`` is a ``(T, E)`` array of routing weights or an iterable of
    :class:`RoutingRecord`. An expert counts as selected when its weight is
    strictly positive.
    """
    probs = _as_prob_matrix(routing)
    T = probs.shape[0]
    return BatchRoutingStats(dispatch_fraction=(probs > 0).sum(axis=0) / T,
                             prob_fraction=probs.sum(axis=0) / T, token_count=T)


def load_balance_loss(stats: BatchRoutingStats) -> float:
    return float(stats.num_experts * np.dot(stats.dispatch_fraction, stats.prob_fraction))


def load_balance_grad(probs: np.ndarray):
    """Loss and ``dL/dp`` for one module; the dispatch fractions are held constant."""
    stats = accumulate_stats(probs)
    T, E = probs.shape
    grad = np.broadcast_to(E * stats.dispatch_fraction / T, probs.shape).copy()
    return load_balance_loss(stats), grad


def lambda_lower_batch(u: np.ndarray, k_target: int) -> np.ndarray:
    """Row-wise lower end of the exact-k interval; ``-inf`` where ``k_target >= E``."""
    u = np.asarray(u, dtype=np.float64)
    N, E = u.shape
    if k_target >= E:
        return np.full(N, -np.inf)
    us = -np.sort(-u, axis=1)
    U_k = us[:, :k_target].sum(axis=1)
    return 1.0 - (U_k - k_target * us[:, k_target])


def sparsity_grad(u, lam, k_target: int):
    """Mean hinge ``relu(lam_lower - lam)`` and its gradient in ``lam``.

    Gate scores enter as constants: no gradient flows into ``u``.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if lam.size == 0:
        raise ValueError("no sparsity factors to regularise")
    lower = lambda_lower_batch(np.atleast_2d(u), k_target)
    gap = lower - lam
    active = gap > 0
    loss = float(np.where(active, gap, 0.0).mean())
    return loss, np.where(active, -1.0 / lam.size, 0.0)


def sparsity_loss(records, k_target: int) -> float:
    """Mean sparsity hinge over LD routing records (or ``(u, lam)`` arrays)."""
    if isinstance(records, tuple) and len(records) == 2:
        u, lam = records
    else:
        records = list(records)
        if any(r.lam is None for r in records):
            raise ValueError("sparsity loss needs routers that predict lambda")
        u = np.stack([r.u for r in records])
        lam = np.array([r.lam for r in records])
    return sparsity_grad(u, lam, k_target)[0]


def total_loss(lm: float, lb: float, sparse: float, weights: LossWeights) -> float:
    return lm + weights.alpha * lb + weights.beta * sparse


@dataclass
class LossBreakdown:
    lm: float
    lb: float
    sparse: float
    total: float


def objective(logits, targets, mask, traces, weights: LossWeights):
    """Total loss over a forward pass plus the gradients the model backward needs.

    The load-balance and sparsity terms are averaged over wrapped modules; the
    sparsity term is only defined (and only applied) for routers with a lambda.

    Returns ``(LossBreakdown, dlogits, grad_p_per_trace, grad_lam_per_trace)``.
    """
    lm, dlogits = masked_cross_entropy_grad(logits, targets, mask)
    n_mod = len(traces)
    lb = 0.0
    sp = 0.0
    grad_p, grad_lam = [], []
    for tr in traces:
        loss, g = load_balance_grad(tr.p)
        lb += loss / n_mod
        grad_p.append(g * (weights.alpha / n_mod) if weights.alpha else None)
        if tr.lam is not None:
            loss, g = sparsity_grad(tr.u, tr.lam, weights.k_target)
            sp += loss / n_mod
            grad_lam.append(g * (weights.beta / n_mod) if weights.beta else None)
        else:
            grad_lam.append(None)
    parts = LossBreakdown(lm=lm, lb=lb, sparse=sp, total=total_loss(lm, lb, sp, weights))
    return parts, dlogits, grad_p, grad_lam
