import numpy as np
import pytest

from ldmole import routers, simplex
from ldmole.oracles import rel_error
from ldmole.routers import GateParams, LambdaHead, LocalLambdaHead, RouterKind, RoutingRecord


def naive_matvec(W, x):
    out = [0.0] * len(W)
    for i in range(len(W)):
        for j in range(len(x)):
            out[i] += W[i][j] * x[j]
    return np.array(out)


def test_gate_scores():
    x = np.array([2.0, 1.0, 0.0])
    np.testing.assert_array_equal(routers.gate_scores(GateParams(np.eye(3)), x), x)
    np.testing.assert_array_equal(routers.gate_scores(GateParams(np.zeros((4, 3))), x), 0)
    rng = np.random.default_rng(1)
    W, x = rng.standard_normal((5, 7)), rng.standard_normal(7)
    np.testing.assert_allclose(routers.gate_scores(GateParams(W), x), naive_matvec(W, x),
                               rtol=1e-12)
    with pytest.raises(ValueError):
        routers.gate_scores(GateParams(W), x[:3])


def test_predict_lambda_zero_head():
    head = LambdaHead.zeros(4, 6)
    assert routers.predict_lambda(head, np.ones(4)) == pytest.approx(1 - np.log(2))


def test_squash_limits():
    assert routers.squash(-800.0) < 1.0
    assert routers.squash(-50.0) == pytest.approx(1.0, abs=2e-6)
    assert routers.squash(50.0) == pytest.approx(-49.0)
    # gradient vanishes once the gap is pinned at its floor
    assert routers.squash_grad(-50.0) == 0.0


def test_predict_lambda_below_one_on_random_heads():
    rng = np.random.default_rng(2)
    for _ in range(10_000):
        head = LambdaHead.init(5, 8, rng)
        head.w2 *= rng.uniform(0, 1e4)
        head.b2[0] = rng.normal(0, 50)
        assert routers.predict_lambda(head, rng.standard_normal(5) * 10) < 1.0


def test_ld_route_examples():
    gate = GateParams(np.eye(3))
    head = LambdaHead.zeros(3, 4)
    w, rec = routers.ld_route([2.0, 1.0, 0.0], gate, head, lam_override=0.0)
    np.testing.assert_allclose(w.probs, [1, 0, 0])
    assert rec.lam == 0.0 and rec.tau == pytest.approx(1.0)
    w, rec = routers.ld_route([0.3, -1.0, 2.0], GateParams(np.zeros((5, 3))), head)
    np.testing.assert_allclose(w.probs, 0.2)
    assert rec.k_active == 5


def test_ld_route_never_empty():
    rng = np.random.default_rng(3)
    for _ in range(500):
        d, E = rng.integers(1, 6), rng.integers(1, 9)
        gate = GateParams(rng.standard_normal((E, d)) * 10)
        head = LambdaHead.init(d, 4, rng)
        w, _ = routers.ld_route(rng.standard_normal(d), gate, head)
        assert w.k_active >= 1


def test_topk_examples():
    e2, e1 = np.exp(2), np.exp(1)
    np.testing.assert_allclose(routers.topk_route([2, 1, 0], 2).probs,
                               [e2 / (e2 + e1), e1 / (e2 + e1), 0])
    u = np.array([2.0, 1.0, 0.0])
    np.testing.assert_allclose(routers.topk_route(u, 3).probs, np.exp(u) / np.exp(u).sum())
    np.testing.assert_array_equal(routers.topk_route([5, 5, 0], 1).probs, [1, 0, 0])
    with pytest.raises(ValueError):
        routers.topk_route(u, 0)


@pytest.mark.parametrize("u,expected", [
    ([0.5, -0.2, 0.3], [0.5, 0, 0.3]), ([-1, -2], [0, 0]), ([0, 0, 1], [0, 0, 1])])
def test_relu_examples(u, expected):
    np.testing.assert_array_equal(routers.relu_route(u), expected)


def test_router_backward_examples():
    u = np.array([2.0, 1.0, 0.0])
    rec = RoutingRecord(u=u, p=simplex.sparsegen_project(u, -2.0).probs, lam=-2.0)
    gu, gl = routers.router_backward(rec, [1.0, 0, 0])
    np.testing.assert_allclose(gu, [1 / 6, -1 / 6, 0])
    assert gl == pytest.approx(1 / 18)
    rec = RoutingRecord(u=u, p=simplex.sparsegen_project(u, 0.5).probs, lam=0.5)
    gu, gl = routers.router_backward(rec, [0.3, -2.0, 1.0])
    np.testing.assert_array_equal(gu, 0)
    assert gl == 0
    rec = RoutingRecord(u=np.array([0.5, -0.2, 0.3]), p=np.array([0.5, 0, 0.3]),
                        kind=RouterKind.RELU)
    gu, gl = routers.router_backward(rec, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(gu, [1.0, 0.0, 3.0])
    assert gl is None


def _fd_scalar(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def test_topk_backward_matches_fd_inside_selection():
    rng = np.random.default_rng(4)
    u = rng.standard_normal(6)
    w = rng.standard_normal(6)
    p = routers.topk_route(u, 3).probs
    rec = RoutingRecord(u=u, p=p, kind=RouterKind.TOPK)
    gu, _ = routers.router_backward(rec, w)
    fd = _fd_scalar(lambda: w @ routers.topk_route(u, 3).probs, u)
    np.testing.assert_allclose(gu, fd, atol=1e-8)


@pytest.mark.parametrize("local", [False, True])
def test_ld_route_backward_matches_fd(local):
    rng = np.random.default_rng(5)
    d, E = 4, 5
    gate = GateParams(rng.standard_normal((E, d)))
    head = LocalLambdaHead(rng.standard_normal(d) * 0.5, np.array([2.0])) if local else \
        LambdaHead(rng.standard_normal((6, d)), rng.standard_normal(6) * 0.1,
                   rng.standard_normal(6), np.array([2.0]))
    x = rng.standard_normal(d)
    w = rng.standard_normal(E)
    _, rec = routers.ld_route(x, gate, head)
    assert 1 < rec.k_active < E  # keep the trial away from the plateau

    def loss():
        return w @ routers.ld_route(x, gate, head)[0].probs

    grads = routers.ld_route_backward(rec, gate, head, w)
    assert rel_error(grads["gate"], _fd_scalar(loss, gate.weight)) <= 1e-5
    assert rel_error(grads["x"], _fd_scalar(loss, x)) <= 1e-5
    for name, arr in head.params().items():
        assert rel_error(grads[f"head.{name}"], _fd_scalar(loss, arr)) <= 1e-5, name


@pytest.mark.parametrize("kind", list(RouterKind))
def test_batched_routes_match_single_token_routes(kind):
    rng = np.random.default_rng(6)
    U = rng.standard_normal((32, 5))
    lam = rng.uniform(-4, 0.9, 32) if kind.has_lambda else None
    cache = routers.route_batch(kind, U, lam, topk=2)
    G = rng.standard_normal((32, 5))
    gu, gl = routers.route_batch_backward(cache, G)
    for i in range(32):
        if kind.has_lambda:
            p = simplex.sparsegen_project(U[i], lam[i]).probs
        elif kind is RouterKind.TOPK:
            p = routers.topk_route(U[i], 2).probs
        else:
            p = routers.relu_route(U[i])
        np.testing.assert_allclose(cache.probs[i], p, atol=1e-14)
        rec = RoutingRecord(u=U[i], p=p, lam=None if lam is None else lam[i], kind=kind)
        g1, l1 = routers.router_backward(rec, G[i])
        np.testing.assert_allclose(gu[i], g1, atol=1e-12)
        if kind.has_lambda:
            assert gl[i] == pytest.approx(l1, abs=1e-12)
        else:
            assert gl is None
