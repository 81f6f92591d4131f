"""``ldmole`` command line.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, oracles, routers, simplex
from .config import ConfigError, load_config
from .model import CheckpointError, read_checkpoint
from .training import (compare_routers, evaluate, make_dataset, model_from_checkpoint, train)

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{x:.6g}" if x != 0 else "0"


def _parse_vector(text: str) -> np.ndarray:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"cannot parse score vector {text!r}") from None
    if not vals:
        raise UsageError("score vector is empty")
    u = np.array(vals)
    if not np.all(np.isfinite(u)):
        raise UsageError("score vector must be finite")
    return u


def cmd_route(args) -> int:
    u = _parse_vector(args.u)
    if args.topk is not None:
        if not 1 <= args.topk <= u.size:
            raise UsageError(f"--topk must lie in [1, {u.size}]")
        p = routers.topk_route(u, args.topk).probs
        tau, k = None, args.topk
    else:
        lam = 0.0 if args.lam is None else args.lam
        try:
            st = simplex.support_and_threshold(u, lam)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        p = simplex.sparsegen_project(u, lam).probs
        tau, k = st.tau, st.k
    if args.json:
        print(json.dumps({"p": p.tolist(), "tau": tau, "k": int(k)}))
    else:
        print("p = [" + ", ".join(_fmt(x) for x in p) + "]")
        print("tau = " + ("n/a" if tau is None else _fmt(tau)))
        print(f"k = {k}")
    return EXIT_OK


def _suite_args(args):
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if not 2 <= args.e_max <= oracles.MAX_ORACLE_E:
        raise UsageError(f"--e-max must lie in [2, {oracles.MAX_ORACLE_E}]")


def _emit_report(report: oracles.OracleReport, out) -> int:
    text = report.to_json()
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK if report.ok else EXIT_CHECK


def cmd_oracle_check(args) -> int:
    _suite_args(args)
    report = oracles.run_suite(args.trials, (2, args.e_max), args.seed,
                               grad_trials=min(args.trials, 1000),
                               interval_trials=min(args.trials, 1000))
    return _emit_report(report, args.out)


def cmd_grad_check(args) -> int:
    _suite_args(args)
    report = oracles.run_suite(args.trials, (2, args.e_max), args.seed,
                               grad_trials=args.trials, checks=("gradient",))
    return _emit_report(report, args.out)


def _load_config(path):
    try:
        return load_config(path)
    except ConfigError as exc:
        raise UsageError("invalid config:\n  " + "\n  ".join(exc.problems)) from None


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, metrics_path=out / "metrics.jsonl", checkpoint_path=out / "model.ldml")
    print(json.dumps({"checkpoint": str(out / "model.ldml"),
                      "metrics": str(out / "metrics.jsonl"),
                      "initial_train_lm_loss": result.initial_train.lm_loss,
                      "final_train_lm_loss": result.final_train.lm_loss,
                      "final_train_accuracy": result.final_train.accuracy}))
    return EXIT_OK


def _open_checkpoint(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from None
    try:
        model, tcfg = model_from_checkpoint(blob)
        meta = read_checkpoint(blob)[2]
    except (CheckpointError, ValueError) as exc:
        raise UsageError(f"bad checkpoint: {exc}") from None
    return model, tcfg, meta


def cmd_eval(args) -> int:
    model, tcfg, _ = _open_checkpoint(args.checkpoint)
    data = make_dataset(tcfg.data, tcfg.dataset_seed).split(args.split)
    print(evaluate(model, data, tcfg.loss_weights, split=args.split).to_json())
    return EXIT_OK


def cmd_analyze(args) -> int:
    model, tcfg, meta = _open_checkpoint(args.checkpoint)
    if args.split == "adversarial":
        data = None
        for module in ("attn", "ffn"):
            try:
                data = analysis.zero_logit_batch(model, 0, module)
                break
            except ValueError:
                continue
        if data is None:
            print("error: no input drives every first-layer gate score negative",
                  file=sys.stderr)
            return EXIT_CHECK
        history = None
    else:
        data = make_dataset(tcfg.data, tcfg.dataset_seed).split(args.split)
        history = meta.get("routing_mass")
    tables = analysis.analyze(model, data, history)
    analysis.write_tables(tables, args.out)
    for note in tables.notices:
        print(f"notice: {note}", file=sys.stderr)
    print(json.dumps(tables.summary()))
    return EXIT_OK


def cmd_compare_routers(args) -> int:
    cfg = _load_config(args.config)
    summary = compare_routers(cfg)
    text = json.dumps(summary, indent=2)
    Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ldmole", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("route", help="project one score vector")
    p.add_argument("--u", required=True, help="comma-separated scores, e.g. --u=-1,2,0.5")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--lambda", dest="lam", type=float, help="sparsity factor (< 1), default 0")
    g.add_argument("--topk", type=int, help="route with softmax over the k largest scores")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_route)

    for name, func, default, helptext in (
            ("oracle-check", cmd_oracle_check, 10_000, "projection/interval/gradient suite"),
            ("grad-check", cmd_grad_check, 1000, "finite-difference gradient checks only")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--trials", type=int, default=default)
        p.add_argument("--e-max", type=int, default=8)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="also write the JSON report here")
        p.set_defaults(func=func)

    p = sub.add_parser("train", help="train the toy model from a config file")
    p.add_argument("config")
    p.add_argument("--out", default="run", help="directory for model.ldml and metrics.jsonl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its dataset")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="write routing-behaviour CSV tables")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "val", "adversarial"), default="val")
    p.add_argument("--out", default="analysis")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare-routers", help="train LD, TopK(2) and ReLU variants")
    p.add_argument("config")
    p.add_argument("--out", default="compare.json")
    p.set_defaults(func=cmd_compare_routers)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
