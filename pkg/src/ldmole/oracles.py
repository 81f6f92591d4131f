"""Brute-force oracles for the Sparsegen projection.

Nothing here sorts scores or uses the prefix-sum threshold rule: the QP oracle
enumerates every non-empty support, solves the equality-constrained problem on
it, and keeps the best feasible candidate. Finite differences check the
analytical Jacobian.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from . import simplex

MAX_ORACLE_E = 12


class TrialRejected(Exception):
    """Raised when a finite-difference probe would cross a support change."""


@lru_cache(maxsize=None)
def _subset_masks(E: int) -> np.ndarray:
    # rows are all 2^E - 1 non-empty subsets as 0/1 vectors
    codes = np.arange(1, 2**E)
    return ((codes[:, None] >> np.arange(E)[None, :]) & 1).astype(np.float64)


def qp_oracle(u, lam: float) -> np.ndarray:
    """Minimise ``||p - u||^2 - lam ||p||^2`` over the simplex by enumeration.

    For every support ``S`` the stationary point of the objective restricted to
    ``{p : p_i = 0 off S, sum p = 1}`` is ``p_S = (u_S - tau_S) / (1 - lam)`` with
    ``tau_S = (sum(u_S) - (1 - lam)) / |S|``. Candidates with a negative entry
    are discarded; the lowest objective among the rest is the optimum.
    """
    u = np.asarray(u, dtype=np.float64)
    E = u.size
    if E > MAX_ORACLE_E:
        raise ValueError(f"qp_oracle enumerates 2^E supports; E={E} exceeds {MAX_ORACLE_E}")
    lam = float(lam)
    if not lam < 1.0:
        raise ValueError("lam must be < 1")
    masks = _subset_masks(E)
    sizes = masks.sum(axis=1)
    gap = 1.0 - lam
    tau = (masks @ u - gap) / sizes
    cand = masks * (u[None, :] - tau[:, None]) / gap
    feasible = np.all(cand >= -1e-13, axis=1)
    cand = np.where(cand < 0.0, 0.0, cand)
    obj = np.sum((cand - u) ** 2, axis=1) - lam * np.sum(cand**2, axis=1)
    obj = np.where(feasible, obj, np.inf)
    best = cand[int(np.argmin(obj))]
    return best / best.sum()


def _support_margin(u: np.ndarray, lam: float) -> float:
    # distance from every score to the oracle's threshold; small means a
    # perturbation of u or lam could change the support
    p = qp_oracle(u, lam)
    S = p > 0
    tau = (u[S].sum() - (1.0 - lam)) / S.sum()
    return float(np.min(np.abs(u - tau)))


def fd_derivatives(u, lam: float, h: float = 1e-6, project: Callable | None = None,
                   margin: float | None = None) -> simplex.RoutingJacobian:
    """Central finite differences of the projection with respect to ``u`` and ``lam``.

    Raises :class:`TrialRejected` if any score lies within ``margin``
    (default ``10 * h``) of the threshold.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    project = project or (lambda v, l: simplex.sparsegen_project(v, l).probs)
    u = np.asarray(u, dtype=np.float64)
    lam = float(lam)
    margin = 10 * h if margin is None else margin
    if _support_margin(u, lam) < margin or lam + h >= 1.0:
        raise TrialRejected(f"within {margin:g} of a support boundary")
    E = u.size
    d_u = np.empty((E, E))
    for j in range(E):
        e = np.zeros(E)
        e[j] = h
        d_u[:, j] = (project(u + e, lam) - project(u - e, lam)) / (2 * h)
    d_lam = (project(u, lam + h) - project(u, lam - h)) / (2 * h)
    return simplex.RoutingJacobian(d_p_d_u=d_u, d_p_d_lambda=d_lam)


def rel_error(a, b, floor: float = 1e-3, atol: float = 1e-4) -> float:
    """Largest elementwise ``|a - b| / max(|a|, |b|, floor * scale, atol)``.

    ``scale`` is the largest magnitude in either array, so entries that are
    tiny compared to the rest (or exactly zero) are judged on an absolute basis.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not a.size:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), max(floor * scale, atol))
    return float(np.max(np.abs(a - b) / denom))


@dataclass
class Tolerances:
    p_abs: float = 1e-8
    grad_rel: float = 1e-4
    fd_step: float = 1e-6
    tie_margin: float = 1e-4
    interval_step: float = 1e-6


@dataclass
class OracleReport:
    trials: int
    max_abs_p_error: float
    max_rel_grad_error: float
    failures: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False)


def _draw_trial(rng: np.random.Generator, E_range: tuple[int, int]):
    E = int(rng.integers(E_range[0], E_range[1] + 1))
    u = rng.standard_normal(E)
    lam = float(rng.uniform(-10.0, 0.99))
    return u, lam


def _fail(failures: list, kind: str, u, lam, msg: str, limit: int = 50):
    if len(failures) < limit:
        failures.append({"check": kind, "u": [float(x) for x in u],
                         "lam": None if lam is None else float(lam), "diagnostic": msg})


def run_suite(trial_count: int = 10_000, E_range: tuple[int, int] = (2, 8), seed: int = 0,
              tolerances: Tolerances | None = None, grad_trials: int | None = 1000,
              interval_trials: int | None = 1000,
              project: Callable | None = None, jac: Callable | None = None,
              checks: tuple[str, ...] = ("projection", "support", "interval", "gradient"),
              ) -> OracleReport:
    """Run the projection, support, interval and gradient checks.

    ``project(u, lam) -> probs`` and ``jac(u, lam) -> RoutingJacobian`` default
    to the library implementation and exist so that faulty variants can be
    plugged in. Failures are collected in the report; nothing is raised.
    """
    if trial_count < 1:
        raise ValueError("trial_count must be >= 1")
    tol = tolerances or Tolerances()
    project = project or (lambda v, l: simplex.sparsegen_project(v, l).probs)
    jac = jac or simplex.jacobian
    lo, hi = E_range
    if not 1 <= lo <= hi <= MAX_ORACLE_E:
        raise ValueError(f"invalid E_range {E_range}")

    failures: list = []
    counts = {c: 0 for c in ("projection", "support", "interval", "gradient")}
    max_p = 0.0
    max_g = 0.0

    rng = np.random.default_rng([seed, 0])
    if "projection" in checks or "support" in checks:
        for _ in range(trial_count):
            u, lam = _draw_trial(rng, E_range)
            p = np.asarray(project(u, lam))
            if "projection" in checks:
                counts["projection"] += 1
                err = float(np.max(np.abs(p - qp_oracle(u, lam))))
                max_p = max(max_p, err)
                if not err <= tol.p_abs:
                    _fail(failures, "projection", u, lam, f"max |p - p_oracle| = {err:.3e}")
            if "support" in checks:
                counts["support"] += 1
                if np.count_nonzero(p > 0) < 1 or np.any(p < 0) or abs(p.sum() - 1) > 1e-10:
                    _fail(failures, "support", u, lam, f"not a simplex point with support: {p}")

    if "interval" in checks:
        rng = np.random.default_rng([seed, 1])
        n_int = interval_trials if interval_trials is not None else trial_count
        done = 0
        while done < n_int:
            E = int(rng.integers(lo, hi + 1))
            u = rng.standard_normal(E)
            if E > 1 and np.min(np.diff(np.sort(u))) < tol.interval_step:
                continue
            done += 1
            for k in range(1, E + 1):
                counts["interval"] += 1
                iv = simplex.lambda_interval(u, k)
                mid = iv.midpoint()
                got = int(np.count_nonzero(np.asarray(project(u, mid)) > 0))
                if got != k:
                    _fail(failures, "interval", u, mid, f"k={k}: midpoint gave {got} active")
                if k < E:
                    below = iv.lower - tol.interval_step
                    got = int(np.count_nonzero(np.asarray(project(u, below)) > 0))
                    if got < k + 1:
                        _fail(failures, "interval", u, below,
                              f"k={k}: below lower bound gave {got} active")

    if "gradient" in checks:
        rng = np.random.default_rng([seed, 2])
        n_grad = grad_trials if grad_trials is not None else trial_count
        done = 0
        while done < n_grad:
            u, lam = _draw_trial(rng, E_range)
            try:
                fd = fd_derivatives(u, lam, tol.fd_step, project=project,
                                    margin=max(tol.tie_margin, 10 * tol.fd_step))
            except TrialRejected:
                continue
            done += 1
            counts["gradient"] += 1
            an = jac(u, lam)
            err = max(rel_error(an.d_p_d_u, fd.d_p_d_u), rel_error(an.d_p_d_lambda, fd.d_p_d_lambda))
            max_g = max(max_g, err)
            if not err <= tol.grad_rel:
                _fail(failures, "gradient", u, lam, f"relative Jacobian error {err:.3e}")

    return OracleReport(trials=trial_count, max_abs_p_error=max_p, max_rel_grad_error=max_g,
                        failures=failures, counts=counts)
