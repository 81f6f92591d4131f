"""Mixture-of-LoRA-experts layers and a small frozen backbone built from them.

Everything is plain numpy with hand-written backward passes. Parameters live in
a flat ``{name: array}`` dict on :class:`ToyModel`; layers are thin views over
that dict, so the optimizer and the checkpoint code only ever see names and
arrays.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .routers import (
    LambdaHead,
    LocalLambdaHead,
    RouteCache,
    RouterKind,
    RoutingRecord,
    route_batch,
    route_batch_backward,
)

MAGIC = b"LDML"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    d_model: int = 32
    vocab_size: int = 256
    num_classes: int = 8
    num_experts: int = 8
    lora_rank: int = 4
    lora_alpha: float = 8.0
    router: str = "ld-shared"
    topk: int = 2
    lambda_hidden: int = 256
    dropout: float = 0.1
    ffn_mult: int = 4

    def __post_init__(self):
        problems = []
        for name in ("num_layers", "d_model", "vocab_size", "num_classes", "num_experts",
                     "lora_rank", "lambda_hidden", "ffn_mult"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.lora_rank > self.d_model:
            problems.append("lora_rank must not exceed d_model")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        try:
            kind = RouterKind(self.router)
        except ValueError:
            problems.append(f"router must be one of {[k.value for k in RouterKind]}")
        else:
            if kind is RouterKind.TOPK and not 1 <= self.topk <= self.num_experts:
                problems.append("topk must lie in [1, num_experts]")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def router_kind(self) -> RouterKind:
        return RouterKind(self.router)

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.lora_rank

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


# ---------------------------------------------------------------------------
# LoRA experts and the MoLE layer


@dataclass
class LoRAExpert:
    a: np.ndarray  # (d_out, r)
    b: np.ndarray  # (r, d_in)
    scaling: float = 1.0


def lora_delta(expert: LoRAExpert, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != expert.b.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} does not match expert ({expert.b.shape[1]})")
    return expert.scaling * (expert.a @ (expert.b @ x))


@dataclass
class LayerCache:
    X: np.ndarray
    route: RouteCache
    Z: np.ndarray  # (E, N, r)
    D: np.ndarray  # (E, N, d_out), dropout applied
    keep: np.ndarray | None
    head_cache: tuple | None


@dataclass
class MoLELayer:
    """Frozen projection plus ``E`` routed LoRA experts.

    ``A`` is ``(E, d_out, r)`` and ``B`` is ``(E, r, d_in)``; expert ``i``
    contributes ``scaling * A[i] @ B[i] @ x`` weighted by its routing weight.
    """

    base: np.ndarray
    A: np.ndarray
    B: np.ndarray
    gate: np.ndarray  # (E, d_in)
    kind: RouterKind = RouterKind.LD_SHARED
    head: LambdaHead | LocalLambdaHead | None = None
    scaling: float = 1.0
    topk: int = 2
    dropout: float = 0.0

    def __post_init__(self):
        E, d_out, r = self.A.shape
        if self.B.shape[0] != E or self.B.shape[1] != r:
            raise ValueError("A and B must agree on expert count and rank")
        if self.base.shape != (d_out, self.B.shape[2]):
            raise ValueError("base weight shape does not match the experts")
        if self.gate.shape != (E, self.B.shape[2]):
            raise ValueError("gate shape must be (num_experts, d_in)")
        if self.kind.has_lambda and self.head is None:
            raise ValueError("LD routing needs a lambda head")

    @property
    def experts(self) -> list[LoRAExpert]:
        return [LoRAExpert(self.A[i], self.B[i], self.scaling) for i in range(self.A.shape[0])]

    def forward(self, X: np.ndarray, train: bool = False, rng: np.random.Generator | None = None,
                lam_override: np.ndarray | None = None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.B.shape[2]:
            raise ValueError(f"expected input of shape (N, {self.B.shape[2]}), got {X.shape}")
        U = X @ self.gate.T
        lam = head_cache = None
        if self.kind.has_lambda:
            if lam_override is None:
                lam, head_cache = self.head.forward(X)
            else:
                lam = np.broadcast_to(np.asarray(lam_override, dtype=np.float64), (X.shape[0],))
        route = route_batch(self.kind, U, lam, self.topk)
        E, r, d_in = self.B.shape
        N = X.shape[0]
        Z = (X @ self.B.reshape(E * r, d_in).T).reshape(N, E, r).transpose(1, 0, 2)
        D = self.scaling * np.matmul(Z, self.A.transpose(0, 2, 1))
        keep = None
        if train and self.dropout > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            keep = _dropout_mask(rng, D.shape, self.dropout)
            D *= keep
        H = X @ self.base.T + np.einsum("ne,eno->no", route.probs, D)
        return H, LayerCache(X, route, Z, D, keep, head_cache)

    def backward(self, cache: LayerCache, G: np.ndarray, grad_p_extra: np.ndarray | None = None,
                 grad_lam_extra: np.ndarray | None = None):
        """Return ``(dX, grads)``; the frozen base weight gets no gradient."""
        P = cache.route.probs
        dP = np.einsum("no,eno->ne", G, cache.D)
        if grad_p_extra is not None:
            dP = dP + grad_p_extra
        dD = P.T[:, :, None] * G[None, :, :]
        if cache.keep is not None:
            dD = dD * cache.keep
        grads = {"A": self.scaling * np.matmul(dD.transpose(0, 2, 1), cache.Z)}
        E, r, d_in = self.B.shape
        dZ = self.scaling * np.matmul(dD, self.A)
        dZ_flat = dZ.transpose(1, 0, 2).reshape(-1, E * r)
        grads["B"] = (dZ_flat.T @ cache.X).reshape(E, r, d_in)
        dX = G @ self.base + dZ_flat @ self.B.reshape(E * r, d_in)

        dU, dlam = route_batch_backward(cache.route, dP, grad_lam_extra)
        grads["gate"] = dU.T @ cache.X
        dX += dU @ self.gate
        if self.kind.has_lambda and cache.head_cache is not None:
            head_grads, dX_head = self.head.backward(cache.head_cache, dlam)
            grads.update({f"head.{k}": v for k, v in head_grads.items()})
            dX += dX_head
        return dX, grads


def _dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    # keep probability is 1 - thresh / 65536; survivors are rescaled by its inverse
    thresh = int(round(rate * 65536))
    keep = rng.integers(0, 65536, shape, dtype=np.uint16) >= thresh
    return keep * (65536.0 / (65536 - thresh))


def mole_forward(layer: MoLELayer, x, train: bool = False, rng=None):
    """Single-token forward returning ``(h, RoutingRecord)``."""
    x = np.asarray(x, dtype=np.float64)
    H, cache = layer.forward(x[None, :], train=train, rng=rng)
    r = cache.route
    rec = RoutingRecord(u=r.u[0], p=r.probs[0],
                        lam=None if r.lam is None else float(r.lam[0]),
                        tau=None if r.tau is None else float(r.tau[0]), kind=layer.kind)
    return H[0], rec


def mole_backward(layer: MoLELayer, cache: LayerCache, grad_h):
    G = np.atleast_2d(np.asarray(grad_h, dtype=np.float64))
    return layer.backward(cache, G)


# ---------------------------------------------------------------------------
# routing traces


@dataclass
class RoutingTrace:
    """Routing of one wrapped module over all ``N = batch * T`` tokens of a pass."""

    layer: int
    module: str
    u: np.ndarray
    p: np.ndarray
    lam: np.ndarray | None
    tau: np.ndarray | None
    kind: RouterKind

    @property
    def k_active(self) -> np.ndarray:
        return np.count_nonzero(self.p > 0, axis=1)

    def records(self):
        for t in range(self.p.shape[0]):
            yield RoutingRecord(u=self.u[t], p=self.p[t],
                                lam=None if self.lam is None else float(self.lam[t]),
                                tau=None if self.tau is None else float(self.tau[t]),
                                kind=self.kind, layer_id=self.layer, module_id=self.module,
                                token_id=t)


def iter_records(traces):
    for tr in traces:
        yield from tr.records()


# ---------------------------------------------------------------------------
# toy backbone

MODULES = ("attn", "ffn")


@dataclass
class ForwardCache:
    tokens: np.ndarray
    hs: list = field(default_factory=list)  # residual stream entering each block
    mixes: list = field(default_factory=list)
    attn: list = field(default_factory=list)
    ffn_act: list = field(default_factory=list)
    ffn: list = field(default_factory=list)
    final: np.ndarray | None = None


class ToyModel:
    """Embedding -> L blocks -> linear classifier, all frozen except the MoLE parts.

    Each block mixes the previous position into the current one through a frozen
    map, applies a MoLE-wrapped ``d -> d`` projection (attention analogue), then a
    frozen ``d -> ffn_mult*d`` up-projection with tanh and a MoLE-wrapped
    ``ffn_mult*d -> d`` down-projection, both with residual connections. The
    classifier head is trainable.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.trainable = {n for n in params if is_trainable(n)}

    # layer views -----------------------------------------------------------

    def head_for(self, layer: int, module: str):
        cfg = self.config
        kind = cfg.router_kind
        if kind is RouterKind.LD_SHARED:
            d_in = self.module_dims(module)[1]
            pre = f"lambda.{d_in}."
            return LambdaHead(self.params[pre + "w1"], self.params[pre + "b1"],
                              self.params[pre + "w2"], self.params[pre + "b2"])
        if kind is RouterKind.LD_LOCAL:
            pre = f"blocks.{layer}.{module}.lambda."
            return LocalLambdaHead(self.params[pre + "w"], self.params[pre + "b"])
        return None

    def module_dims(self, module: str) -> tuple[int, int]:
        d = self.config.d_model
        return (d, d) if module == "attn" else (d, self.config.ffn_mult * d)

    def layer(self, layer: int, module: str) -> MoLELayer:
        pre = f"blocks.{layer}.{module}."
        cfg = self.config
        return MoLELayer(base=self.params[pre + "base"], A=self.params[pre + "A"],
                         B=self.params[pre + "B"], gate=self.params[pre + "gate"],
                         kind=cfg.router_kind, head=self.head_for(layer, module),
                         scaling=cfg.scaling, topk=cfg.topk, dropout=cfg.dropout)

    def head_prefix(self, layer: int, module: str) -> str:
        if self.config.router_kind is RouterKind.LD_SHARED:
            return f"lambda.{self.module_dims(module)[1]}."
        return f"blocks.{layer}.{module}.lambda."

    # forward / backward ----------------------------------------------------

    def forward(self, tokens: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None):
        """Return ``(logits, traces, cache)`` for integer ``tokens`` of shape ``(B, T)``."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError("tokens must be a (batch, T) array")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ValueError("token id outside the vocabulary")
        Bsz, T = tokens.shape
        P = self.params
        h = P["embedding"][tokens]  # (B, T, d)
        cache = ForwardCache(tokens=tokens)
        traces = []
        for li in range(self.config.num_layers):
            cache.hs.append(h)
            prev = np.zeros_like(h)
            prev[:, 1:] = h[:, :-1]
            mix = h + prev @ P[f"blocks.{li}.shift"].T
            cache.mixes.append(mix)
            layer = self.layer(li, "attn")
            a, lc = layer.forward(mix.reshape(Bsz * T, -1), train=train, rng=rng)
            cache.attn.append(lc)
            traces.append(_trace(li, "attn", lc))
            h = h + a.reshape(Bsz, T, -1)

            act = np.tanh(h @ P[f"blocks.{li}.up"].T)
            cache.ffn_act.append(act)
            layer = self.layer(li, "ffn")
            o, lc = layer.forward(act.reshape(Bsz * T, -1), train=train, rng=rng)
            cache.ffn.append(lc)
            traces.append(_trace(li, "ffn", lc))
            h = h + o.reshape(Bsz, T, -1)
        cache.final = h
        logits = h @ P["classifier.weight"].T + P["classifier.bias"]
        return logits, traces, cache

    def backward(self, cache: ForwardCache, dlogits: np.ndarray,
                 grad_p_extra: list | None = None, grad_lam_extra: list | None = None):
        """Gradients of trainable parameters.

        ``grad_p_extra`` / ``grad_lam_extra`` are per-trace additive gradients
        (ordered like the traces from :meth:`forward`) coming from auxiliary losses.
        """
        P = self.params
        Bsz, T = cache.tokens.shape
        grads = {n: np.zeros_like(P[n]) for n in sorted(self.trainable)}
        grads["classifier.weight"] += np.einsum("btc,btd->cd", dlogits, cache.final)
        grads["classifier.bias"] += dlogits.sum(axis=(0, 1))
        dh = dlogits @ P["classifier.weight"]

        def extra(lst, idx):
            return None if lst is None else lst[idx]

        for li in reversed(range(self.config.num_layers)):
            # ffn branch
            idx = 2 * li + 1
            layer = self.layer(li, "ffn")
            dact, g = layer.backward(cache.ffn[li], dh.reshape(Bsz * T, -1),
                                     extra(grad_p_extra, idx), extra(grad_lam_extra, idx))
            self._accumulate(grads, li, "ffn", g)
            act = cache.ffn_act[li]
            dz = dact.reshape(act.shape) * (1.0 - act**2)
            dh = dh + dz @ P[f"blocks.{li}.up"]
            # attention-analogue branch
            idx = 2 * li
            layer = self.layer(li, "attn")
            dmix, g = layer.backward(cache.attn[li], dh.reshape(Bsz * T, -1),
                                     extra(grad_p_extra, idx), extra(grad_lam_extra, idx))
            self._accumulate(grads, li, "attn", g)
            dmix = dmix.reshape(Bsz, T, -1)
            dprev = dmix @ P[f"blocks.{li}.shift"]
            dh = dh + dmix
            dh[:, :-1] += dprev[:, 1:]
        return grads

    def _accumulate(self, grads, li, module, g):
        pre = f"blocks.{li}.{module}."
        for key, val in g.items():
            if key.startswith("head."):
                grads[self.head_prefix(li, module) + key[5:]] += val
            else:
                grads[pre + key] += val

    @property
    def num_wrapped_modules(self) -> int:
        return len(MODULES) * self.config.num_layers


def _trace(li: int, module: str, lc: LayerCache) -> RoutingTrace:
    r = lc.route
    return RoutingTrace(layer=li, module=module, u=r.u, p=r.probs, lam=r.lam, tau=r.tau,
                        kind=r.kind)


def is_trainable(name: str) -> bool:
    return (name.startswith("lambda.") or name.startswith("classifier.")
            or name.endswith((".A", ".B", ".gate")) or ".lambda." in name)


def model_forward(model: ToyModel, tokens, train_mode: bool = False, rng=None):
    logits, traces, _ = model.forward(tokens, train=train_mode, rng=rng)
    return logits, traces


def _f32(x: np.ndarray) -> np.ndarray:
    # parameters start float32-representable so checkpoints round-trip exactly
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def init_params(config: ModelConfig, seed: int) -> ToyModel:
    """Draw a fresh model.

    Every parameter group has its own sub-seed, so models that differ only in
    router settings share the backbone, experts and gates bit for bit.
    """
    cfg = config
    d, L, E, r = cfg.d_model, cfg.num_layers, cfg.num_experts, cfg.lora_rank
    rngs = {tag: np.random.default_rng([seed, i]) for i, tag in
            enumerate(("backbone", "lora", "gate", "lambda", "classifier"))}
    P: dict[str, np.ndarray] = {}

    bb = rngs["backbone"]
    P["embedding"] = bb.standard_normal((cfg.vocab_size, d))
    for li in range(L):
        P[f"blocks.{li}.shift"] = bb.standard_normal((d, d)) / np.sqrt(d)
        P[f"blocks.{li}.attn.base"] = bb.standard_normal((d, d)) / np.sqrt(d)
        P[f"blocks.{li}.up"] = bb.standard_normal((cfg.ffn_mult * d, d)) / np.sqrt(d)
        P[f"blocks.{li}.ffn.base"] = (bb.standard_normal((d, cfg.ffn_mult * d))
                                      / np.sqrt(cfg.ffn_mult * d))

    for li in range(L):
        for m in MODULES:
            d_out, d_in = (d, d) if m == "attn" else (d, cfg.ffn_mult * d)
            P[f"blocks.{li}.{m}.A"] = 0.02 * rngs["lora"].standard_normal((E, d_out, r))
            P[f"blocks.{li}.{m}.B"] = np.zeros((E, r, d_in))
            P[f"blocks.{li}.{m}.gate"] = 0.02 * rngs["gate"].standard_normal((E, d_in))

    kind = cfg.router_kind
    lam_rng = rngs["lambda"]
    if kind is RouterKind.LD_SHARED:
        for d_in in sorted({d, cfg.ffn_mult * d}):
            head = LambdaHead.init(d_in, cfg.lambda_hidden, lam_rng)
            P.update({f"lambda.{d_in}.{k}": v for k, v in head.params().items()})
    elif kind is RouterKind.LD_LOCAL:
        for li in range(L):
            for m in MODULES:
                d_in = d if m == "attn" else cfg.ffn_mult * d
                head = LocalLambdaHead.init(d_in, lam_rng)
                P.update({f"blocks.{li}.{m}.lambda.{k}": v for k, v in head.params().items()})

    P["classifier.weight"] = 0.02 * rngs["classifier"].standard_normal((cfg.num_classes, d))
    P["classifier.bias"] = np.zeros(cfg.num_classes)
    return ToyModel(cfg, {k: _f32(v) for k, v in P.items()})


# ---------------------------------------------------------------------------
# checkpoints
#
# header: b"LDML", u32 version, 32-byte sha256 of the canonical config JSON,
#         u32 length + UTF-8 config JSON
# then per tensor, sorted by name: u32 name length, name bytes, u32 rank,
#         rank x u32 dims, row-major float32 data. All little-endian.


def checkpoint_bytes(model: ToyModel, extra_config: dict | None = None) -> bytes:
    cfg_json = json.dumps({"model": model.config.to_dict(), **(extra_config or {})},
                          sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(model.config.digest())
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def save_checkpoint(path, model: ToyModel, extra_config: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, extra_config))


class CheckpointError(ValueError):
    pass


def read_checkpoint(data: bytes):
    """Parse checkpoint bytes into ``(ModelConfig, params, extra_config, digest)``."""
    try:
        config, params, meta, digest = _parse_checkpoint(memoryview(data))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError,
            TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    expected = {n: v.shape for n, v in init_params(config, 0).params.items()}
    got = {n: v.shape for n, v in params.items()}
    if got != expected:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        bad = sorted(n for n in set(got) & set(expected) if got[n] != expected[n])
        raise CheckpointError(
            f"tensors do not match the config (missing {missing}, unexpected {extra}, "
            f"wrong shape {bad})")
    return config, params, meta, digest


def _parse_checkpoint(view: memoryview):
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not an LDML checkpoint")
    pos = 4
    (version,) = struct.unpack_from("<I", view, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = bytes(view[pos:pos + 32])
    pos += 32
    (n,) = struct.unpack_from("<I", view, pos)
    pos += 4
    if pos + n > len(view):
        raise CheckpointError("truncated config block")
    meta = json.loads(bytes(view[pos:pos + n]).decode("utf-8"))
    pos += n
    config = ModelConfig.from_dict(meta.pop("model"))
    if config.digest() != digest:
        raise CheckpointError("config digest mismatch")
    params = {}
    while pos < len(view):
        (n,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", view, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", view, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if pos + 4 * count > len(view):
            raise CheckpointError(f"truncated tensor {name!r}")
        arr = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        params[name] = arr.astype(np.float64)
    return config, params, meta, digest


def load_checkpoint(path) -> tuple[ToyModel, dict]:
    config, params, meta, _ = read_checkpoint(Path(path).read_bytes())
    return ToyModel(config, params), meta
