"""Synthetic task, AdamW, step schedule, and the train / evaluate loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .losses import LossWeights, objective
from .model import (
    CheckpointError,
    ModelConfig,
    ToyModel,
    checkpoint_bytes,
    init_params,
    read_checkpoint,
)
from .routers import RouterKind

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class DatasetSpec:
    vocab_size: int = 256
    num_classes: int = 8
    seq_len: int = 16
    prompt_len: int = 4
    n_train: int = 8192
    n_val: int = 1024
    zipf_s: float = 1.2
    buckets: int = 2

    def __post_init__(self):
        if self.vocab_size < 16:
            raise ValueError("vocab_size must be >= 16")
        if self.seq_len < 4:
            raise ValueError("seq_len must be >= 4")
        if not 0 <= self.prompt_len < self.seq_len:
            raise ValueError("prompt_len must lie in [0, seq_len)")
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("n_train and n_val must be >= 1")
        if self.num_classes < 2 or self.buckets < 1:
            raise ValueError("need num_classes >= 2 and buckets >= 1")
        if self.zipf_s < 0:
            raise ValueError("zipf_s must be >= 0")


@dataclass
class TokenBatch:
    token_ids: np.ndarray  # (B, T) int
    targets: np.ndarray  # (B, T) int
    mask: np.ndarray  # (B, T) 0/1

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def take(self, idx) -> "TokenBatch":
        return TokenBatch(self.token_ids[idx], self.targets[idx], self.mask[idx])


@dataclass
class SyntheticDataset:
    """Zipf-distributed token sequences with per-position class labels.

    The label of position ``t`` is a fixed random function of the token at ``t``
    and a bucket of the preceding token (``prev % buckets``). Only positions
    from ``prompt_len`` on carry loss.
    """

    spec: DatasetSpec
    seed: int
    label_table: np.ndarray  # (vocab, buckets)
    train: TokenBatch
    val: TokenBatch

    def labels_for(self, tokens: np.ndarray) -> np.ndarray:
        prev = np.zeros_like(tokens)
        prev[:, 1:] = tokens[:, :-1] % self.spec.buckets
        return self.label_table[tokens, prev]

    def split(self, name: str) -> TokenBatch:
        if name not in ("train", "val"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def zipf_probs(vocab: int, s: float) -> np.ndarray:
    w = np.arange(1, vocab + 1, dtype=np.float64) ** -s
    return w / w.sum()


def make_dataset(spec: DatasetSpec, seed: int) -> SyntheticDataset:
    table = np.random.default_rng([seed, 0]).integers(0, spec.num_classes,
                                                      (spec.vocab_size, spec.buckets))
    probs = zipf_probs(spec.vocab_size, spec.zipf_s)
    mask_row = (np.arange(spec.seq_len) >= spec.prompt_len).astype(np.float64)
    ds = SyntheticDataset(spec, seed, table, None, None)  # type: ignore[arg-type]

    def draw(n: int, stream: int) -> TokenBatch:
        rng = np.random.default_rng([seed, stream])
        tokens = rng.choice(spec.vocab_size, size=(n, spec.seq_len), p=probs)
        return TokenBatch(tokens, ds.labels_for(tokens), np.tile(mask_row, (n, 1)))

    ds.train = draw(spec.n_train, 1)
    ds.val = draw(spec.n_val, 2)
    return ds


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01, frozen: set | frozenset = frozenset()) -> AdamWState:
    """One AdamW update in place. Names in ``frozen`` or without a gradient are skipped."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        if name in frozen:
            continue
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    # fixed summation order keeps the norm independent of dict construction
    total = math.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    alpha: float = 1.0
    beta: float = 0.0
    k_target: int = 2
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    lr_milestones: tuple[int, ...] = (6, 8)
    lr_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    log_every: int = 20
    seed: int = 0
    data_seed: int | None = None  # defaults to seed

    def __post_init__(self):
        problems = []
        for name in ("epochs", "batch_size", "log_every", "k_target"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if not 0 < self.lr_decay <= 1:
            problems.append("lr_decay must lie in (0, 1]")
        if self.alpha < 0 or self.beta < 0:
            problems.append("alpha and beta must be >= 0")
        if self.data.vocab_size != self.model.vocab_size:
            problems.append("data.vocab_size must equal model.vocab_size")
        if self.data.num_classes != self.model.num_classes:
            problems.append("data.num_classes must equal model.num_classes")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, k_target=self.k_target)

    @property
    def dataset_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        data = DatasetSpec(**d.pop("data", {}))
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if "lr_milestones" in kw:
            kw["lr_milestones"] = tuple(kw["lr_milestones"])
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        return cls(model=model, data=data, **kw)


def reference_config() -> TrainConfig:
    """Full-scale reference hyperparameters (rank 8, alpha 16, lr 1e-4)."""
    return TrainConfig(model=ModelConfig(lora_rank=8, lora_alpha=16.0), lr=1e-4)


def toy_config(**overrides) -> TrainConfig:
    """Desk-scale default used by the tests and demos."""
    base = TrainConfig(model=ModelConfig(lambda_hidden=32), lr=3e-3)
    return replace(base, **overrides)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = sum(1 for m in config.lr_milestones if epoch >= m)
    return config.lr * config.lr_decay**passed


# ---------------------------------------------------------------------------
# metrics

METRIC_KEYS = ("step", "epoch", "split", "lm_loss", "lb_loss", "sparse_loss", "total_loss",
               "accuracy", "mean_active_experts", "mean_active_per_layer",
               "mean_lambda_per_layer", "zero_activation_rate")


@dataclass
class MetricsEvent:
    step: int
    epoch: int
    split: str
    lm_loss: float
    lb_loss: float
    sparse_loss: float
    total_loss: float
    accuracy: float
    mean_active_experts: float
    mean_active_per_layer: list
    mean_lambda_per_layer: list | None
    zero_activation_rate: float

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps({k: d[k] for k in METRIC_KEYS}, ensure_ascii=False)


class _Accumulator:
    """Token-weighted running sums of losses and routing statistics."""

    def __init__(self, num_layers: int, num_experts: int = 0):
        self.L = num_layers
        self.mass = np.zeros((num_layers, num_experts))
        self.n_batches = 0
        self.loss = np.zeros(4)
        self.correct = 0.0
        self.counted = 0.0
        self.active = np.zeros(num_layers)
        self.tokens = np.zeros(num_layers)
        self.lam = np.zeros(num_layers)
        self.has_lam = False
        self.zero = 0.0
        self.records = 0.0

    def add(self, parts, logits, batch: TokenBatch, traces):
        self.n_batches += 1
        self.loss += [parts.lm, parts.lb, parts.sparse, parts.total]
        pred = logits.argmax(axis=-1)
        self.correct += float(((pred == batch.targets) * batch.mask).sum())
        self.counted += float(batch.mask.sum())
        for tr in traces:
            k = tr.k_active
            self.active[tr.layer] += k.sum()
            self.tokens[tr.layer] += k.size
            self.zero += float(np.count_nonzero(k == 0))
            self.records += k.size
            if self.mass.shape[1] == tr.p.shape[1]:
                self.mass[tr.layer] += tr.p.sum(axis=0)
            if tr.lam is not None:
                self.has_lam = True
                self.lam[tr.layer] += tr.lam.sum()

    def event(self, step: int, epoch: int, split: str) -> MetricsEvent:
        lm, lb, sp, tot = (self.loss / max(self.n_batches, 1)).tolist()
        tok = np.maximum(self.tokens, 1)
        return MetricsEvent(
            step=step, epoch=epoch, split=split, lm_loss=lm, lb_loss=lb, sparse_loss=sp,
            total_loss=tot, accuracy=self.correct / max(self.counted, 1.0),
            mean_active_experts=float(self.active.sum() / max(self.tokens.sum(), 1)),
            mean_active_per_layer=(self.active / tok).tolist(),
            mean_lambda_per_layer=(self.lam / tok).tolist() if self.has_lam else None,
            zero_activation_rate=self.zero / max(self.records, 1.0))


# ---------------------------------------------------------------------------
# loops


def iter_batches(data: TokenBatch, batch_size: int,
                 rng: np.random.Generator | None = None) -> Iterator[TokenBatch]:
    order = np.arange(len(data)) if rng is None else rng.permutation(len(data))
    for start in range(0, len(data), batch_size):
        yield data.take(order[start:start + batch_size])


def evaluate(model: ToyModel, data: TokenBatch, weights: LossWeights | None = None,
             batch_size: int = 256, step: int = 0, epoch: int = 0,
             split: str = "eval") -> MetricsEvent:
    """Dropout-free pass over ``data``; returns token-weighted averages as an event."""
    return _evaluate(model, data, weights, batch_size).event(step, epoch, split)


def _evaluate(model, data, weights, batch_size=256) -> _Accumulator:
    weights = weights or LossWeights()
    if data.token_ids.size and data.token_ids.max() >= model.config.vocab_size:
        raise CheckpointError("dataset vocabulary does not match the model")
    if data.targets.size and data.targets.max() >= model.config.num_classes:
        raise CheckpointError("dataset classes do not match the model")
    acc = _Accumulator(model.config.num_layers, model.config.num_experts)
    for batch in iter_batches(data, batch_size):
        logits, traces, _ = model.forward(batch.token_ids, train=False)
        parts, *_ = objective(logits, batch.targets, batch.mask, traces, weights)
        acc.add(parts, logits, batch, traces)
    return acc


@dataclass
class TrainResult:
    model: ToyModel
    checkpoint: bytes
    events: list
    initial_train: MetricsEvent
    final_train: MetricsEvent
    routing_mass: list  # per epoch, (L, E) summed validation routing weights


def model_from_checkpoint(data: bytes) -> tuple[ToyModel, TrainConfig]:
    config, params, meta, _ = read_checkpoint(data)
    tcfg = TrainConfig.from_dict({**meta.get("train", {}), "model": config.to_dict()})
    return ToyModel(config, params), tcfg


def train(config: TrainConfig, metrics_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None, eval_train: bool = True,
          on_epoch=None) -> TrainResult:
    """Train the toy model; deterministic given ``config``.

    ``on_epoch(epoch, model)`` is called after every epoch. Summed validation
    routing weights per epoch are kept in the checkpoint for heatmaps. The returned model is the one stored in the checkpoint, i.e.
    float32-rounded.
    """
    dataset = make_dataset(config.data, config.dataset_seed)
    model = init_params(config.model, config.seed)
    weights = config.loss_weights
    shuffle_rng = np.random.default_rng([config.seed, 100])
    dropout_rng = np.random.default_rng([config.seed, 101])
    state = AdamWState()
    frozen = set(model.params) - model.trainable
    events: list[MetricsEvent] = []
    mass_history: list = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    def emit(ev: MetricsEvent):
        events.append(ev)
        if sink:
            sink.write(ev.to_json() + "\n")

    try:
        initial = evaluate(model, dataset.train, weights, split="train") if eval_train else None
        if initial is not None:
            emit(initial)
        step = 0
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            acc = _Accumulator(config.model.num_layers)
            for batch in iter_batches(dataset.train, config.batch_size, shuffle_rng):
                logits, traces, cache = model.forward(batch.token_ids, train=True,
                                                      rng=dropout_rng)
                parts, dlogits, gp, gl = objective(logits, batch.targets, batch.mask,
                                                   traces, weights)
                if not np.isfinite(parts.total):
                    raise FloatingPointError(
                        f"non-finite loss at step {step} (epoch {epoch}): {parts}")
                grads = model.backward(cache, dlogits, gp, gl)
                clip_grad_norm(grads, config.grad_clip)
                adamw_step(model.params, grads, state, lr, config.betas, config.eps,
                           config.weight_decay, frozen)
                step += 1
                acc.add(parts, logits, batch, traces)
                if step % config.log_every == 0:
                    emit(acc.event(step, epoch, "train"))
                    acc = _Accumulator(config.model.num_layers)
            vacc = _evaluate(model, dataset.val, weights)
            mass_history.append(vacc.mass.tolist())
            emit(vacc.event(step, epoch, "val"))
            log.info("epoch %d lr %.2e val %s", epoch, lr, events[-1].to_json())
            if on_epoch is not None:
                on_epoch(epoch, model)

        blob = checkpoint_bytes(model, {"train": _meta(config), "routing_mass": mass_history})
        if checkpoint_path:
            Path(checkpoint_path).write_bytes(blob)
        final_model, _ = model_from_checkpoint(blob)
        final = None
        if eval_train:
            final = evaluate(final_model, dataset.train, weights, step=step,
                             epoch=config.epochs - 1, split="train")
            emit(final)
    finally:
        if sink:
            sink.close()
    return TrainResult(final_model, blob, events, initial, final, mass_history)


def _meta(config: TrainConfig) -> dict:
    d = config.to_dict()
    d.pop("model")
    return d


def evaluate_checkpoint(checkpoint: bytes | str | Path, split: str = "val",
                        dataset: SyntheticDataset | None = None) -> MetricsEvent:
    """Rebuild model and (unless given) dataset from a checkpoint and evaluate one split."""
    blob = checkpoint if isinstance(checkpoint, bytes) else Path(checkpoint).read_bytes()
    model, tcfg = model_from_checkpoint(blob)
    if dataset is None:
        dataset = make_dataset(tcfg.data, tcfg.dataset_seed)
    elif (dataset.spec.vocab_size, dataset.spec.num_classes) != (
            model.config.vocab_size, model.config.num_classes):
        raise CheckpointError("dataset does not match the checkpoint configuration")
    return evaluate(model, dataset.split(split), tcfg.loss_weights, split=split)


COMPARED_ROUTERS = ("ld", "topk", "relu")


def compare_routers(config: TrainConfig, on_result=None) -> dict:
    """Train LD, TopK(2) and ReLU variants of ``config`` with the same seeds.

    The LD entry keeps the configured LD flavour (shared or local head). Returns a
    JSON-ready summary with one entry per method.
    """
    ld_router = config.model.router if RouterKind(config.model.router).has_lambda else "ld-shared"
    variants = {"ld": replace(config.model, router=ld_router),
                "topk": replace(config.model, router="topk", topk=2),
                "relu": replace(config.model, router="relu")}
    methods = {}
    for name in COMPARED_ROUTERS:
        result = train(replace(config, model=variants[name]))
        val = [e for e in result.events if e.split == "val"][-1]
        methods[name] = {
            "router": variants[name].router,
            "final_val_accuracy": val.accuracy,
            "final_val_lm_loss": val.lm_loss,
            "final_val_lb_loss": val.lb_loss,
            "final_val_sparse_loss": val.sparse_loss,
            "final_val_total_loss": val.total_loss,
            "initial_train_lm_loss": result.initial_train.lm_loss,
            "final_train_lm_loss": result.final_train.lm_loss,
            "mean_active_experts": val.mean_active_experts,
            "zero_activation_rate": val.zero_activation_rate,
        }
        if on_result is not None:
            on_result(name, result)
    return {"seed": config.seed, "epochs": config.epochs, "methods": methods}
