"""Routing-behaviour tables computed from a forward pass over a dataset.

Five tables, each written as a CSV with a fixed column order:

``per_layer_activation``  layer, module, mean_active_experts
``lambda_quantiles``      layer, module, q25, q50, q75          (LD routers only)
``freq_activation``       token_id, frequency_rank, count, mean_active_experts
``epoch_heatmap``         epoch, layer, expert, routing_mass_fraction
``zero_activation``       layer, fraction_of_tokens_with_empty_support
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .model import MODULES, ToyModel
from .training import TokenBatch, iter_batches

SCHEMAS = {
    "per_layer_activation": ("layer", "module", "mean_active_experts"),
    "lambda_quantiles": ("layer", "module", "q25", "q50", "q75"),
    "freq_activation": ("token_id", "frequency_rank", "count", "mean_active_experts"),
    "epoch_heatmap": ("epoch", "layer", "expert", "routing_mass_fraction"),
    "zero_activation": ("layer", "fraction_of_tokens_with_empty_support"),
}

TOP_TOKENS = 200


@dataclass
class RoutingCollection:
    """Per-module routing statistics gathered over a dataset."""

    num_layers: int
    num_experts: int
    tokens: np.ndarray  # (N,) token id of every position
    k_active: dict = field(default_factory=dict)  # (layer, module) -> (N,)
    lam: dict = field(default_factory=dict)  # (layer, module) -> (N,)
    mass: np.ndarray | None = None  # (L, E) summed routing weights

    @property
    def has_lambda(self) -> bool:
        return bool(self.lam)


def collect_routing(model: ToyModel, data: TokenBatch, batch_size: int = 256) -> RoutingCollection:
    cfg = model.config
    ks: dict = {}
    lams: dict = {}
    toks = []
    mass = np.zeros((cfg.num_layers, cfg.num_experts))
    for batch in iter_batches(data, batch_size):
        _, traces, _ = model.forward(batch.token_ids, train=False)
        toks.append(batch.token_ids.reshape(-1))
        for tr in traces:
            key = (tr.layer, tr.module)
            ks.setdefault(key, []).append(tr.k_active)
            if tr.lam is not None:
                lams.setdefault(key, []).append(np.asarray(tr.lam))
            mass[tr.layer] += tr.p.sum(axis=0)
    return RoutingCollection(
        num_layers=cfg.num_layers, num_experts=cfg.num_experts, tokens=np.concatenate(toks),
        k_active={k: np.concatenate(v) for k, v in ks.items()},
        lam={k: np.concatenate(v) for k, v in lams.items()}, mass=mass)


def mass_fractions(mass: np.ndarray) -> np.ndarray:
    """Row-normalise summed routing weights; rows with no mass stay zero."""
    tot = mass.sum(axis=1, keepdims=True)
    return np.divide(mass, tot, out=np.zeros_like(mass), where=tot > 0)


def per_layer_activation(col: RoutingCollection) -> list[tuple]:
    return [(li, m, float(col.k_active[(li, m)].mean()))
            for li in range(col.num_layers) for m in MODULES]


def lambda_quantiles(col: RoutingCollection) -> list[tuple]:
    rows = []
    for li in range(col.num_layers):
        for m in MODULES:
            q = np.quantile(col.lam[(li, m)], [0.25, 0.5, 0.75])
            rows.append((li, m, *map(float, q)))
    return rows


def freq_activation(col: RoutingCollection, top: int = TOP_TOKENS):
    """Token frequency against mean active experts (averaged over all modules).

    Returns ``(rows, spearman)`` where ``spearman`` correlates frequency rank with
    mean active experts over the ``top`` most frequent tokens (``nan`` if fewer
    than three distinct tokens occur).
    """
    k_all = np.mean(np.stack([col.k_active[key] for key in sorted(col.k_active)]), axis=0)
    ids, inverse, counts = np.unique(col.tokens, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=k_all)
    means = sums / counts
    # most frequent first; ties by token id
    order = np.lexsort((ids, -counts))[:top]
    rows = [(int(ids[i]), rank + 1, int(counts[i]), float(means[i]))
            for rank, i in enumerate(order)]
    if len(rows) >= 3 and np.ptp([r[3] for r in rows]) > 0:
        rho = float(stats.spearmanr([r[1] for r in rows], [r[3] for r in rows]).statistic)
    else:
        rho = float("nan")
    return rows, rho


def epoch_heatmap(mass_history) -> list[tuple]:
    rows = []
    for epoch, mass in enumerate(mass_history):
        frac = mass_fractions(np.asarray(mass, dtype=np.float64))
        for li in range(frac.shape[0]):
            for e in range(frac.shape[1]):
                rows.append((epoch, li, e, float(frac[li, e])))
    return rows


def zero_activation(col: RoutingCollection) -> list[tuple]:
    rows = []
    for li in range(col.num_layers):
        k = np.concatenate([col.k_active[(li, m)] for m in MODULES])
        rows.append((li, float(np.mean(k == 0))))
    return rows


@dataclass
class AnalysisTables:
    per_layer_activation: list
    lambda_quantiles: list | None
    freq_activation: list
    epoch_heatmap: list
    zero_activation: list
    spearman_freq_vs_active: float
    notices: list = field(default_factory=list)

    def layer_means(self) -> np.ndarray:
        L = max(r[0] for r in self.per_layer_activation) + 1
        out = np.zeros(L)
        for li, _, v in self.per_layer_activation:
            out[li] += v / len(MODULES)
        return out

    def summary(self) -> dict:
        means = self.layer_means()
        return {
            "mean_active_per_layer": means.tolist(),
            "first_layer_mean_active": float(means[0]),
            "last_layer_mean_active": float(means[-1]),
            "decreases_first_to_last": bool(means[-1] < means[0]),
            "spearman_freq_rank_vs_active": self.spearman_freq_vs_active,
            "max_zero_activation": max(r[1] for r in self.zero_activation),
            "notices": self.notices,
        }


def analyze(model: ToyModel, data: TokenBatch, mass_history=None) -> AnalysisTables:
    """Build all tables for ``model`` on ``data``.

    ``mass_history`` is the per-epoch ``(L, E)`` routing mass recorded during
    training; without it the heatmap has a single row block for the given model.
    """
    col = collect_routing(model, data)
    notices = []
    if col.has_lambda:
        lq = lambda_quantiles(col)
    else:
        lq = None
        notices.append("router has no sparsity factor; lambda_quantiles omitted")
    freq_rows, rho = freq_activation(col)
    history = mass_history if mass_history else [col.mass]
    return AnalysisTables(per_layer_activation=per_layer_activation(col), lambda_quantiles=lq,
                          freq_activation=freq_rows, epoch_heatmap=epoch_heatmap(history),
                          zero_activation=zero_activation(col), spearman_freq_vs_active=rho,
                          notices=notices)


def _fmt(v) -> str:
    # repr of a Python float is locale independent and round-trips
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_tables(tables: AnalysisTables, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, cols in SCHEMAS.items():
        rows = getattr(tables, name)
        if rows is None:
            continue
        path = out / f"{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        written.append(path)
    path = out / "summary.json"
    path.write_text(json.dumps(tables.summary(), indent=2), encoding="utf-8")
    written.append(path)
    return written


def read_table(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def zero_logit_batch(model: ToyModel, layer: int = 0, module: str = "attn",
                     limit: int = 64) -> TokenBatch:
    """Two-token sequences whose gate scores at ``(layer 0, module)`` are all negative.

    Searches every ``(previous, current)`` token pair; only the first block can
    be targeted this way because later inputs depend on the routing itself.
    """
    if layer != 0:
        raise ValueError("only the first layer's inputs are known in closed form")
    P = model.params
    V = model.config.vocab_size
    emb = P["embedding"]
    mix = emb[None, :, :] + (emb @ P["blocks.0.shift"].T)[:, None, :]  # [prev, cur]
    if module == "attn":
        feats = mix
    else:
        a = model.layer(0, "attn").forward(mix.reshape(V * V, -1))[0].reshape(V, V, -1)
        feats = np.tanh((emb[None, :, :] + a) @ P["blocks.0.up"].T)
    gate = P[f"blocks.0.{module}.gate"]
    u = feats @ gate.T
    prev, cur = np.nonzero(np.all(u < 0, axis=-1))
    if prev.size == 0:
        raise ValueError("no token pair yields all-negative gate scores")
    prev, cur = prev[:limit], cur[:limit]
    tokens = np.stack([prev, cur], axis=1)
    mask = np.zeros(tokens.shape)
    mask[:, 1] = 1.0
    return TokenBatch(tokens, np.zeros_like(tokens), mask)
