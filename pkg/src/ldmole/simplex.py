"""Sparsegen projection onto the probability simplex.

The projection solves

    argmin_p ||p - u||^2 - lam * ||p||^2   s.t.  p >= 0, sum(p) = 1

for a sparsity factor ``lam < 1``. The solution is a thresholding
``p_i = max(0, (u_i - tau) / (1 - lam))`` where ``tau`` and the support size
``k`` come from the sorted prefix sums of ``u``. ``lam = 0`` recovers sparsemax,
``lam -> 1`` pushes toward a one-hot vector and ``lam -> -inf`` toward uniform.

Besides the single-vector functions there is a row-wise batched variant,
:func:`sparsegen_batch`, used by the model layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# lower clamp on (1 - lam) in divisions
MIN_GAP = 1e-12


@dataclass(frozen=True)
class SupportThreshold:
    k: int
    tau: float
    sorted_prefix_sums: np.ndarray
    order: np.ndarray  # argsort of u, descending, ties by ascending index


@dataclass(frozen=True)
class RoutingWeights:
    probs: np.ndarray
    support: np.ndarray  # indices of strictly positive entries

    @property
    def k_active(self) -> int:
        return int(self.support.size)


@dataclass(frozen=True)
class RoutingJacobian:
    d_p_d_u: np.ndarray
    d_p_d_lambda: np.ndarray


@dataclass(frozen=True)
class LambdaInterval:
    """Interval of ``lam`` giving exactly ``k_target`` active entries.

    ``lower`` is inclusive, ``upper`` exclusive. For ``k_target == E`` the lower
    end is ``-inf``. Ties ``u_(k) == u_(k+1)`` make the interval empty.
    """

    k_target: int
    lower: float
    upper: float

    @property
    def empty(self) -> bool:
        return not self.lower < self.upper

    def contains(self, lam: float) -> bool:
        return self.lower <= lam < self.upper

    def midpoint(self, width_if_unbounded: float = 1.0) -> float:
        if np.isinf(self.lower):
            return self.upper - width_if_unbounded
        return 0.5 * (self.lower + self.upper)


def _as_scores(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.size == 0:
        raise ValueError(f"gate scores must be a non-empty vector, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("gate scores contain non-finite values")
    return u


def _check_lambda(lam) -> float:
    lam = float(lam)
    if not np.isfinite(lam):
        raise ValueError("sparsity factor must be finite")
    if not lam < 1.0:
        raise ValueError(f"sparsity factor must be < 1, got {lam}")
    return lam


def _sort_desc(u: np.ndarray) -> np.ndarray:
    # stable sort on -u keeps ascending index order among ties
    return np.argsort(-u, kind="stable")


def support_and_threshold(u, lam: float) -> SupportThreshold:
    """Support size ``k`` and threshold ``tau`` of the Sparsegen solution.

    ``k`` is the largest index with ``1 - lam + k * u_(k) > U_k`` and
    ``tau = (U_k - 1 + lam) / k``.
    """
    u = _as_scores(u)
    lam = _check_lambda(lam)
    order = _sort_desc(u)
    us = u[order]
    cums = np.cumsum(us)
    ks = np.arange(1, u.size + 1)
    feasible = 1.0 - lam + ks * us > cums
    # k = 1 is always feasible for lam < 1; guard against rounding anyway
    k = int(ks[feasible][-1]) if feasible.any() else 1
    tau = (cums[k - 1] - 1.0 + lam) / k
    return SupportThreshold(k=k, tau=float(tau), sorted_prefix_sums=cums, order=order)


def sparsegen_project(u, lam: float) -> RoutingWeights:
    """Project ``u`` onto the simplex with sparsity factor ``lam``.

    >>> sparsegen_project([2.0, 1.0, 0.0], -2.0).probs.round(4)
    array([0.6667, 0.3333, 0.    ])
    """
    st = support_and_threshold(u, lam)
    u = np.asarray(u, dtype=np.float64)
    gap = max(1.0 - float(lam), MIN_GAP)
    probs = np.maximum(0.0, (u - st.tau) / gap)
    return RoutingWeights(probs=probs, support=np.flatnonzero(probs > 0))


def sparsemax(u) -> RoutingWeights:
    """Euclidean projection onto the simplex (Sparsegen at ``lam = 0``)."""
    return sparsegen_project(u, 0.0)


def jacobian(u, lam: float) -> RoutingJacobian:
    """Exact derivatives of :func:`sparsegen_project` at fixed support.

    On the support ``S`` (``|S| = k``)::

        dp_i/du_j = (delta_ij - 1/k) / (1 - lam)
        dp_i/dlam = (p_i - 1/k) / (1 - lam)

    and zero elsewhere. At ties on the support boundary this is the one-sided
    derivative of the branch containing the lower-indexed coordinate.
    """
    st = support_and_threshold(u, lam)
    u = np.asarray(u, dtype=np.float64)
    E = u.size
    gap = max(1.0 - float(lam), MIN_GAP)
    S = st.order[: st.k]
    probs = np.maximum(0.0, (u - st.tau) / gap)

    d_u = np.zeros((E, E))
    block = (np.eye(st.k) - 1.0 / st.k) / gap
    d_u[np.ix_(S, S)] = block
    d_lam = np.zeros(E)
    d_lam[S] = (probs[S] - 1.0 / st.k) / gap
    return RoutingJacobian(d_p_d_u=d_u, d_p_d_lambda=d_lam)


def lambda_interval(u, k_target: int) -> LambdaInterval:
    """Range of ``lam`` for which exactly ``k_target`` entries are positive."""
    u = _as_scores(u)
    E = u.size
    k = int(k_target)
    if not 1 <= k <= E:
        raise ValueError(f"k_target must lie in [1, {E}], got {k_target}")
    us = u[_sort_desc(u)]
    U_k = float(np.sum(us[:k]))
    upper = 1.0 - (U_k - k * us[k - 1])
    lower = -np.inf if k == E else 1.0 - (U_k - k * us[k])
    return LambdaInterval(k_target=k, lower=float(lower), upper=float(upper))


def lambda_lower(u, k_target: int) -> float:
    """Inclusive lower end of :func:`lambda_interval`; ``-inf`` when ``k_target == E``."""
    return lambda_interval(u, k_target).lower


# ---------------------------------------------------------------------------
# row-wise batched versions used by the model


def sparsegen_batch(u: np.ndarray, lam: np.ndarray):
    """Row-wise Sparsegen projection.

    Parameters
    ----------
    u : (N, E) array of gate scores.
    lam : (N,) array of sparsity factors, each < 1.

    Returns
    -------
    probs : (N, E) projected weights.
    tau : (N,) thresholds.
    k : (N,) support sizes from the threshold rule.
    order : (N, E) descending sort order of each row.
    """
    u = np.asarray(u, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    N, E = u.shape
    order = np.argsort(-u, axis=1, kind="stable")
    us = np.take_along_axis(u, order, axis=1)
    cums = np.cumsum(us, axis=1)
    ks = np.arange(1, E + 1)
    gap_raw = (1.0 - lam)[:, None]
    feasible = gap_raw + ks * us > cums
    feasible[:, 0] = True
    # largest feasible index per row
    k = E - np.argmax(feasible[:, ::-1], axis=1)
    tau = (cums[np.arange(N), k - 1] - 1.0 + lam) / k
    gap = np.maximum(1.0 - lam, MIN_GAP)
    probs = np.maximum(0.0, (u - tau[:, None]) / gap[:, None])
    return probs, tau, k, order


def support_mask(order: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Boolean (N, E) mask of the first ``k`` sorted coordinates per row."""
    N, E = order.shape
    ranked = np.arange(E)[None, :] < k[:, None]
    mask = np.zeros((N, E), dtype=bool)
    np.put_along_axis(mask, order, ranked, axis=1)
    return mask


def sparsegen_batch_backward(probs, lam, k, mask, grad_p):
    """Vector-Jacobian product of :func:`sparsegen_batch`.

    Returns ``(grad_u, grad_lam)`` for upstream ``grad_p`` of shape (N, E).
    """
    gap = np.maximum(1.0 - np.asarray(lam, dtype=np.float64), MIN_GAP)
    g = np.where(mask, grad_p, 0.0)
    mean_g = g.sum(axis=1) / k
    grad_u = np.where(mask, (grad_p - mean_g[:, None]) / gap[:, None], 0.0)
    grad_lam = (np.sum(g * probs, axis=1) - mean_g) / gap
    return grad_u, grad_lam
