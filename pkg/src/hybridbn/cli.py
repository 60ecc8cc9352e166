"""Command-line entry point: ``python -m hybridbn <command> ...``.

Every failure exits with status 2 and one stderr line starting ``error:``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .belief_prop import Schedule, propagate, MessageState
from .dataset import DatasetFormatError, load_dataset, save_dataset
from .experiments import VARIANTS, variant_configs
from .metrics import compute_metrics, format_table, off_by_one_accuracy, stratified_folds, summarize
from .synth_data import GeneratorSpec, is_positive, make_benchmark
from .training import (
    ModelConfig, TrainConfig, alternate_train, attribute_importance, disease_probability, load_bundle,
)

ABLATION_FLAGS = {
    "no-bn1": "remove BN-1 (no BN marginals, attention or fusion input)",
    "no-bn2": "remove BN-2 (final output is the fused disease row)",
    "no-coupling-attention": "drop the BN-driven spatial attention",
    "no-channel-attention": "drop the channel attention",
    "no-grad-bn": "stop gradients at both BN stages",
    "no-alter-train": "never refit the BNs after initialization",
    "gcn-only": "remove both BNs",
}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None


def _write(path: str, text: str) -> None:
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _load_data(path: str):
    if not os.path.exists(path):
        raise CliError(f"file not found: {path}")
    return load_dataset(path)


def _configs(args, ds=None) -> tuple[ModelConfig, TrainConfig]:
    """Model/train configs from ``--config`` plus command-line overrides."""
    cfg = _read_json(args.config) if args.config else {}
    unknown = set(cfg) - {"model", "train", "generator"}
    if unknown:
        raise CliError(f"unknown config sections {sorted(unknown)}")
    model = dict(cfg.get("model", {}))
    if ds is not None:
        model.setdefault("nodes", ds.nodes)
        model.setdefault("grades", ds.grades)
        if ds.features is not None:
            model.setdefault("feature_dim", ds.features.shape[1])
    train = dict(cfg.get("train", {}))
    if args.seed is not None:
        train["seed"] = args.seed
    try:
        mc, tc = ModelConfig.from_dict(model), TrainConfig.from_dict(train)
    except TypeError as e:
        raise CliError(f"config: {e}") from None
    if ds is not None and (mc.nodes, mc.grades) != (ds.nodes, ds.grades):
        raise CliError("config nodes/grades do not match the dataset")
    for flag in ABLATION_FLAGS:
        if getattr(args, flag.replace("-", "_"), False):
            mc, tc = variant_configs(flag, mc, tc)
    return mc, tc


def _add_ablation_flags(p):
    for flag, help_ in ABLATION_FLAGS.items():
        p.add_argument(f"--{flag}", action="store_true", help=help_)


# ---- commands ------------------------------------------------------------


def cmd_gen_data(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    raw = raw.get("generator", raw)
    if args.seed is not None:
        raw = dict(raw, seed=args.seed)
    try:
        spec = GeneratorSpec.from_dict(raw)
    except TypeError as e:
        raise CliError(f"generator config: {e}") from None
    bench = make_benchmark(spec)
    os.makedirs(args.out, exist_ok=True)
    for name in ("train", "val", "test"):
        save_dataset(os.path.join(args.out, f"{name}.json"), getattr(bench, name))
    _write(os.path.join(args.out, "truth.json"), bench.truth.to_json() + "\n")
    _write(os.path.join(args.out, "generator.json"), _dump(spec.to_dict()))
    print(f"wrote {bench.train.size}/{bench.val.size}/{bench.test.size} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    train = _load_data(args.data)
    val = _load_data(args.val) if args.val else None
    mc, tc = _configs(args, train)
    result = alternate_train(train, val, mc, tc)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "model.json"), result.to_json())
    _write(os.path.join(args.out, "history.json"), _dump(result.history))
    last = result.history[-1] if result.history else {}
    print(f"trained {len(result.history)} epochs, {result.refits} BN refits, final loss {last.get('loss')}")
    return 1 if result.aborted else 0


def evaluate(model, ds) -> dict:
    out = model.predict(ds.features)
    C = ds.grades
    true = ds.hard_grades()
    scores = np.clip(disease_probability(out["final"]), 0.0, 1.0)
    report = compute_metrics(scores, is_positive(true[:, 0], C).astype(int))
    report.off_by_one = off_by_one_accuracy(out["final"].argmax(axis=1) + 1, true[:, 0])
    pred_attr = out["fused"][:, 1:].argmax(axis=2) + 1
    report.per_attribute = {
        str(a): 100.0 * float(np.mean(pred_attr[:, a - 1] == true[:, a])) for a in range(1, ds.nodes)
    }
    return report.to_dict()


def _load_model(path):
    try:
        model, bundle = load_bundle(open(path).read())
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    except (KeyError, json.JSONDecodeError) as e:
        raise CliError(f"{path}: malformed model bundle ({e})") from None
    return model, bundle


def cmd_eval(args) -> int:
    model, _ = _load_model(args.model)
    ds = _load_data(args.data)
    if ds.features is None:
        raise CliError("dataset has no features")
    report = evaluate(model, ds)
    cols = ["accuracy", "sensitivity", "specificity", "auc", "precision", "f_score", "off_by_one"]
    table = format_table([report], cols)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "metrics.json"), _dump(report))
        _write(os.path.join(args.out, "metrics.txt"), table + "\n")
    print(table)
    return 0


def cmd_importance(args) -> int:
    model, _ = _load_model(args.model)
    ds = _load_data(args.data)
    rows = []
    for a in range(1, model.cfg.nodes):
        imp = attribute_importance(model, ds.features, a)
        rows.append({"attribute": a, "mean": float(imp.mean()), "sd": float(imp.std()), "max": float(imp.max())})
    table = format_table(rows, ["attribute", "mean", "sd", "max"], digits=5)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "importance.json"), _dump(rows))
        _write(os.path.join(args.out, "importance.txt"), table + "\n")
    print(table)
    return 0


def cmd_inspect_bn(args) -> int:
    model, _ = _load_model(args.model)
    net = model.bn1 if args.which == "bn1" else model.bn2
    if net is None:
        raise CliError(f"{args.which} is disabled in this model")
    info = {"edges": [list(e) for e in net.edges], "network": net.to_dict()}
    if args.data:
        ds = _load_data(args.data)
        if not 0 <= args.sample < ds.size:
            raise CliError(f"sample index out of range [0, {ds.size})")
        out = model.predict(ds.features[args.sample : args.sample + 1])
        ev = out["p0_b" if args.which == "bn1" else "fused"]
        sched = Schedule(net)
        _, steps, conv, traj = propagate(sched, ev, record=True)
        info["steps"] = int(steps)
        info["converged"] = bool(conv)
        info["messages"] = [MessageState(sched, traj[t, 0], t).to_dict() for t in range(traj.shape[0])]
    text = _dump(info)
    if args.out:
        _write(os.path.join(args.out, f"{args.which}.json"), text)
    print("edges: " + (", ".join(f"{p}->{c}" for p, c in net.edges) or "(none)"))
    if "steps" in info:
        print(f"propagation: {info['steps']} steps, converged={info['converged']}")
    return 0


def cmd_ablate(args) -> int:
    """Stratified k-fold comparison of the full model and the requested variants."""
    ds = _load_data(args.data)
    base_m, base_t = _configs(argparse.Namespace(config=args.config, seed=args.seed), ds)
    chosen = [f for f in ABLATION_FLAGS if getattr(args, f.replace("-", "_"))] or list(ABLATION_FLAGS)
    labels = is_positive(ds.hard_grades()[:, 0], ds.grades)
    rows, results = [], {}
    for name in ["full"] + chosen:
        mc, tc = variant_configs(name, base_m, base_t)
        reports = []
        for rep in range(args.repeats):
            folds = stratified_folds(labels, args.folds, seed=base_t.seed + rep)
            for k, test_idx in enumerate(folds):
                train_idx = np.setdiff1d(np.arange(ds.size), test_idx)
                res = alternate_train(ds.subset(train_idx), None, mc, replace(tc, seed=base_t.seed + 1000 * rep + k))
                r = evaluate(res.model, ds.subset(test_idx))
                reports.append(r)
        summary = summarize([_AsObj(r) for r in reports])
        results[name] = {"summary": summary, "folds": reports}
        row = {"variant": name}
        for m in ("accuracy", "auc", "f_score"):
            s = summary[m]
            row[m] = "-" if s is None else f"{s['mean']:.2f}±{s['sd']:.2f}"
        rows.append(row)
    table = format_table(rows, ["variant", "accuracy", "auc", "f_score"])
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "ablation.json"), _dump(results))
        _write(os.path.join(args.out, "ablation.txt"), table + "\n")
    print(table)
    return 0


class _AsObj:
    def __init__(self, d):
        self.__dict__.update(d)


# ---- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybridbn", description="Hybrid Bayesian-network / graph-network reasoning engine")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="sample a synthetic benchmark")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model bundle")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    _add_ablation_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics of a model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("importance", help="attribute deactivation importance")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out")
    i.set_defaults(func=cmd_importance)

    b = sub.add_parser("inspect-bn", help="show a network of a model bundle")
    b.add_argument("--model", required=True)
    b.add_argument("--which", choices=("bn1", "bn2"), default="bn1")
    b.add_argument("--data", help="dump per-step messages for one sample")
    b.add_argument("--sample", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_inspect_bn)

    a = sub.add_parser("ablate", help="cross-validated ablation comparison")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--folds", type=int, default=10)
    a.add_argument("--repeats", type=int, default=5)
    a.add_argument("--out")
    _add_ablation_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except CliError as e:
        msg = str(e)
    except (DatasetFormatError, ValueError, KeyError, OSError, RuntimeError) as e:
        msg = f"{type(e).__name__}: {e}"
    print("error: " + " ".join(msg.split()), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
