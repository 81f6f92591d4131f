"""Token-to-expert routing: Sparsegen with a learned sparsity factor, TopK, ReLU.

Single-token functions (``gate_scores``, ``ld_route``, ``topk_route``, ...)
operate on 1-d vectors and return :class:`RoutingRecord` objects. The
``*_batch`` functions work on ``(N, E)`` score matrices and are what the model
layers call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import simplex

# smallest value of 1 - lam the squash can produce; keeps lam < 1 in floating point
LAMBDA_GAP_MIN = 1e-6


class RouterKind(str, Enum):
    LD_SHARED = "ld-shared"
    LD_LOCAL = "ld-local"
    TOPK = "topk"
    RELU = "relu"

    @property
    def has_lambda(self) -> bool:
        return self in (RouterKind.LD_SHARED, RouterKind.LD_LOCAL)


@dataclass
class GateParams:
    weight: np.ndarray  # (E, d)

    @property
    def num_experts(self) -> int:
        return self.weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class LambdaHead:
    """Two-layer tanh perceptron followed by ``lam = 1 - softplus(raw)``."""

    w1: np.ndarray  # (H, d)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H,)
    b2: np.ndarray  # scalar stored as shape (1,)

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def init(cls, d: int, hidden: int, rng: np.random.Generator) -> "LambdaHead":
        return cls(w1=rng.standard_normal((hidden, d)) / np.sqrt(d),
                   b1=np.zeros(hidden),
                   w2=0.02 * rng.standard_normal(hidden),
                   b2=np.zeros(1))

    @classmethod
    def zeros(cls, d: int, hidden: int) -> "LambdaHead":
        return cls(np.zeros((hidden, d)), np.zeros(hidden), np.zeros(hidden), np.zeros(1))

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, X: np.ndarray):
        hidden = np.tanh(X @ self.w1.T + self.b1)
        raw = hidden @ self.w2 + self.b2[0]
        return squash(raw), (X, hidden, raw)

    def backward(self, cache, grad_lam: np.ndarray):
        X, hidden, raw = cache
        g_raw = grad_lam * squash_grad(raw)
        g_hidden = np.outer(g_raw, self.w2) * (1.0 - hidden**2)
        grads = {"w1": g_hidden.T @ X, "b1": g_hidden.sum(axis=0),
                 "w2": hidden.T @ g_raw, "b2": np.array([g_raw.sum()])}
        return grads, g_hidden @ self.w1


@dataclass
class LocalLambdaHead:
    """Per-module variant: a single linear map to the raw value."""

    w: np.ndarray  # (d,)
    b: np.ndarray  # (1,)

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "LocalLambdaHead":
        return cls(w=0.02 * rng.standard_normal(d), b=np.zeros(1))

    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def forward(self, X: np.ndarray):
        raw = X @ self.w + self.b[0]
        return squash(raw), (X, raw)

    def backward(self, cache, grad_lam: np.ndarray):
        X, raw = cache
        g_raw = grad_lam * squash_grad(raw)
        return {"w": X.T @ g_raw, "b": np.array([g_raw.sum()])}, np.outer(g_raw, self.w)


def squash(raw):
    """Map a real value onto ``(-inf, 1)`` via ``1 - softplus(raw)``."""
    return 1.0 - np.maximum(np.logaddexp(0.0, raw), LAMBDA_GAP_MIN)


def squash_grad(raw):
    sp = np.logaddexp(0.0, raw)
    sig = np.exp(-np.logaddexp(0.0, -raw))
    return np.where(sp > LAMBDA_GAP_MIN, -sig, 0.0)


@dataclass
class RoutingRecord:
    u: np.ndarray
    p: np.ndarray
    lam: float | None = None
    tau: float | None = None
    kind: RouterKind = RouterKind.LD_SHARED
    layer_id: int = 0
    module_id: str = ""
    token_id: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def k_active(self) -> int:
        return int(np.count_nonzero(self.p > 0))


def _vector(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{name} must be a vector, got shape {x.shape}")
    return x


def gate_scores(gate: GateParams, x) -> np.ndarray:
    x = _vector(x, "x")
    if x.size != gate.feature_dim:
        raise ValueError(f"feature dim {x.size} does not match gate ({gate.feature_dim})")
    return gate.weight @ x


def predict_lambda(head, x) -> float:
    x = _vector(x, "x")
    expected = head.w1.shape[1] if isinstance(head, LambdaHead) else head.w.size
    if x.size != expected:
        raise ValueError(f"feature dim {x.size} does not match lambda head ({expected})")
    lam, _ = head.forward(x[None, :])
    return float(lam[0])


def ld_route(x, gate: GateParams, head, lam_override: float | None = None):
    """Sparsegen routing with a predicted sparsity factor.

    ``lam_override`` bypasses the head, which is handy for pinning ``lam``.
    """
    u = gate_scores(gate, x)
    lam = predict_lambda(head, x) if lam_override is None else float(lam_override)
    st = simplex.support_and_threshold(u, lam)
    w = simplex.sparsegen_project(u, lam)
    kind = RouterKind.LD_LOCAL if isinstance(head, LocalLambdaHead) else RouterKind.LD_SHARED
    rec = RoutingRecord(u=u, p=w.probs, lam=lam, tau=st.tau, kind=kind,
                        extra={"x": np.asarray(x, dtype=np.float64)})
    return w, rec


def _topk_indices(u: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-u, kind="stable")[:k]


def topk_route(u, k: int) -> simplex.RoutingWeights:
    """Softmax over the ``k`` largest scores, zero elsewhere (ties by lower index)."""
    u = _vector(u, "u")
    if not 1 <= k <= u.size:
        raise ValueError(f"k must lie in [1, {u.size}], got {k}")
    sel = _topk_indices(u, k)
    z = u[sel] - u[sel].max()
    e = np.exp(z)
    p = np.zeros_like(u)
    p[sel] = e / e.sum()
    return simplex.RoutingWeights(probs=p, support=np.flatnonzero(p > 0))


def relu_route(u) -> np.ndarray:
    """Unnormalised ReLU weights; may be all zero."""
    return np.maximum(_vector(u, "u"), 0.0)


def router_backward(record: RoutingRecord, grad_wrt_p):
    """Pull ``dL/dp`` back to ``(dL/du, dL/dlam)`` for the router that made ``record``.

    ``dL/dlam`` is ``None`` for routers without a sparsity factor.
    """
    g = _vector(grad_wrt_p, "grad_wrt_p")
    if g.size != record.u.size:
        raise ValueError("gradient length does not match the record")
    if record.kind.has_lambda:
        if record.lam is None:
            raise ValueError("LD record is missing lam")
        jac = simplex.jacobian(record.u, record.lam)
        return jac.d_p_d_u.T @ g, float(jac.d_p_d_lambda @ g)
    if record.kind is RouterKind.TOPK:
        p = record.p
        S = p > 0
        gu = np.zeros_like(g)
        gu[S] = p[S] * (g[S] - np.dot(p[S], g[S]))
        return gu, None
    if record.kind is RouterKind.RELU:
        return np.where(record.u > 0, g, 0.0), None
    raise ValueError(f"unknown router kind {record.kind}")


def ld_route_backward(record: RoutingRecord, gate: GateParams, head, grad_wrt_p):
    """Chain rule through :func:`ld_route` to gate, head and input gradients."""
    x = record.extra["x"]
    g_u, g_lam = router_backward(record, grad_wrt_p)
    grads = {"gate": np.outer(g_u, x)}
    _, cache = head.forward(x[None, :])
    head_grads, g_x = head.backward(cache, np.array([g_lam]))
    grads.update({f"head.{k}": v for k, v in head_grads.items()})
    grads["x"] = gate.weight.T @ g_u + g_x[0]
    return grads


# ---------------------------------------------------------------------------
# batched routing used inside model layers


@dataclass
class RouteCache:
    kind: RouterKind
    probs: np.ndarray
    lam: np.ndarray | None = None
    tau: np.ndarray | None = None
    k: np.ndarray | None = None
    mask: np.ndarray | None = None
    u: np.ndarray | None = None


def route_batch(kind: RouterKind, U: np.ndarray, lam: np.ndarray | None = None,
                topk: int = 2) -> RouteCache:
    if kind.has_lambda:
        probs, tau, k, order = simplex.sparsegen_batch(U, lam)
        return RouteCache(kind, probs, lam=lam, tau=tau, k=k,
                          mask=simplex.support_mask(order, k), u=U)
    if kind is RouterKind.TOPK:
        N, E = U.shape
        if not 1 <= topk <= E:
            raise ValueError(f"topk must lie in [1, {E}], got {topk}")
        sel = np.argsort(-U, axis=1, kind="stable")[:, :topk]
        mask = np.zeros(U.shape, dtype=bool)
        np.put_along_axis(mask, sel, True, axis=1)
        z = np.where(mask, U, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(z), 0.0)
        return RouteCache(kind, e / e.sum(axis=1, keepdims=True), mask=mask, u=U)
    if kind is RouterKind.RELU:
        return RouteCache(kind, np.maximum(U, 0.0), mask=U > 0, u=U)
    raise ValueError(f"unknown router kind {kind}")


def route_batch_backward(cache: RouteCache, grad_p: np.ndarray,
                         grad_lam_extra: np.ndarray | None = None):
    """Return ``(grad_u, grad_lam)``; ``grad_lam`` is ``None`` without a lambda head."""
    if cache.kind.has_lambda:
        g_u, g_lam = simplex.sparsegen_batch_backward(cache.probs, cache.lam, cache.k,
                                                      cache.mask, grad_p)
        if grad_lam_extra is not None:
            g_lam = g_lam + grad_lam_extra
        return g_u, g_lam
    if cache.kind is RouterKind.TOPK:
        p = cache.probs
        inner = np.sum(p * grad_p, axis=1, keepdims=True)
        return p * (grad_p - inner), None
    return np.where(cache.mask, grad_p, 0.0), None
