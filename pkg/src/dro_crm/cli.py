"""Command-line front end: `bench run | sweep | convert | eval`.

Configuration comes from a flat `key = value` text file; every field of the
experiment configuration is addressable and CLI flags override file values.
Lists are comma separated; integer ranges accept "a..b" (inclusive).  Grid
keys are grid_poem, grid_klcrm, grid_aklcrm.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .bandit import (LoggerSpec, generate_bandit_log, load_multilabel_svmlight,
                     save_bandit_log, split_dataset, SplitSpec, train_logger,
                     evaluate_policy)
from .bench import (ExperimentConfig, default_grids, emit_results,
                    replay_sweep, run_experiment, write_sweep_csv)
from .errors import ContractViolation, DataFormatError
from .optim import OptimConfig
from .policy import PolicyParams


def _parse_int_list(text: str):
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _parse_float_list(text: str):
    return tuple(float(p) for p in text.split(",") if p.strip())


def read_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def build_experiment_config(values: dict) -> ExperimentConfig:
    if "dataset" not in values:
        raise ContractViolation("config needs a 'dataset' entry")
    grids = default_grids()
    for alg in ("poem", "klcrm", "aklcrm"):
        key = f"grid_{alg}"
        if key in values:
            grids[alg] = np.array(_parse_float_list(values[key]))
    logger = LoggerSpec(
        l2=float(values.get("logger_l2", 1e-4)),
        alpha=float(values.get("logger_alpha", 0.5)),
        max_iters=int(values.get("logger_max_iters", 200)))
    optim = OptimConfig(
        memory=int(values.get("optim_memory", 10)),
        max_iters=int(values.get("optim_max_iters", 500)),
        grad_tol=float(values.get("optim_grad_tol", 1e-6)),
        f_tol=float(values.get("optim_f_tol", 1e-9)))
    threads = values.get("threads")
    valid_delta = values.get("valid_delta")
    return ExperimentConfig(
        dataset=values["dataset"],
        test_dataset=values.get("test_dataset") or None,
        test_frac=float(values.get("test_frac", 0.25)),
        algorithms=tuple(a.strip() for a in values.get(
            "algorithms", "cips,poem,klcrm,aklcrm").split(",") if a.strip()),
        seeds=_parse_int_list(values.get("seeds", "0..19")),
        delta=int(values.get("delta", 4)),
        valid_delta=int(valid_delta) if valid_delta else None,
        train_frac=float(values.get("train_frac", 0.75)),
        logger_frac=float(values.get("logger_frac", 0.05)),
        logger=logger, grids=grids, optim=optim,
        add_bias=values.get("add_bias", "true").lower() not in ("false", "0", "no"),
        gamma_rule=values.get("gamma_rule", "sum_sq"),
        freeze_weights=values.get("freeze_weights", "true").lower()
        not in ("false", "0", "no"),
        warm_start=values.get("warm_start", "false").lower()
        in ("true", "1", "yes"),
        out_dir=values.get("out_dir", "bench_out"),
        threads=int(threads) if threads else None,
        save_params=values.get("save_params", "true").lower()
        not in ("false", "0", "no"))


def _config_from_args(args) -> ExperimentConfig:
    values = read_config_file(args.config) if args.config else {}
    for key in ("dataset", "test_dataset", "out_dir", "algorithms", "seeds",
                "delta", "threads"):
        v = getattr(args, key.replace("-", "_"), None)
        if v is not None:
            values[key] = str(v)
    return build_experiment_config(values)


def _save_params(rows, out_dir):
    for r in rows:
        if r.params is None:
            continue
        path = os.path.join(out_dir, f"params_{r.algorithm}_seed{r.seed}.npz")
        np.savez(path, weights=r.params.weights)


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    rows = run_experiment(cfg)
    paths = emit_results(rows, cfg.out_dir, config=cfg)
    if cfg.save_params:
        _save_params(rows, cfg.out_dir)
    failed = [r for r in rows if r.status == "failed"]
    for r in failed:
        print(f"[failed] {r.algorithm} seed={r.seed}: {r.message}", file=sys.stderr)
    print(paths["results"])
    return 1 if failed and len(failed) == len(rows) else 0


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    deltas = _parse_int_list(args.deltas)
    seeds = _parse_int_list(args.sweep_seeds) if args.sweep_seeds else None
    rows = replay_sweep(cfg, deltas, seeds)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "sweep.csv")
    write_sweep_csv(rows, path)
    print(path)
    return 0


def cmd_convert(args) -> int:
    ds = load_multilabel_svmlight(args.input, add_bias=not args.no_bias)
    spec = SplitSpec(seed=args.seed, logger_frac=args.logger_frac)
    train, _valid, logger_subset = split_dataset(ds, spec)
    logger = train_logger(logger_subset, LoggerSpec(alpha=args.logger_alpha))
    log = generate_bandit_log(logger, train, args.delta, args.seed)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "bandit_log.csv")
    meta_path = os.path.join(args.out, "bandit_log.meta")
    save_bandit_log(log, csv_path, meta_path)
    print(csv_path)
    return 0


def cmd_eval(args) -> int:
    with np.load(args.params) as data:
        params = PolicyParams(data["weights"])
    test = load_multilabel_svmlight(args.test, add_bias=not args.no_bias)
    if test.n_features != params.n_features:
        raise ContractViolation(
            f"test features ({test.n_features}) do not match params "
            f"({params.n_features}); check the bias flag")
    print(f"{evaluate_policy(params, test, args.mode):.6g}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bench",
        description="Train and evaluate counterfactual policies from logged "
                    "bandit feedback (robust and variance-penalized objectives).")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full benchmark: all algorithms x seeds")
    p_run.add_argument("--config", help="flat key=value config file")
    p_run.add_argument("--dataset")
    p_run.add_argument("--test-dataset", dest="test_dataset")
    p_run.add_argument("--out-dir", dest="out_dir")
    p_run.add_argument("--algorithms")
    p_run.add_argument("--seeds")
    p_run.add_argument("--delta", type=int)
    p_run.add_argument("--threads", type=int)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="replay-count sweep")
    p_sweep.add_argument("--config", help="flat key=value config file")
    p_sweep.add_argument("--deltas", required=True, help="e.g. 1,4,16,64")
    p_sweep.add_argument("--sweep-seeds", dest="sweep_seeds")
    p_sweep.add_argument("--dataset")
    p_sweep.add_argument("--test-dataset", dest="test_dataset")
    p_sweep.add_argument("--out-dir", dest="out_dir")
    p_sweep.add_argument("--algorithms")
    p_sweep.add_argument("--threads", type=int)
    p_sweep.set_defaults(func=cmd_sweep)

    p_conv = sub.add_parser("convert", help="write a bandit log from a dataset")
    p_conv.add_argument("--input", required=True)
    p_conv.add_argument("--out", required=True)
    p_conv.add_argument("--delta", type=int, default=4)
    p_conv.add_argument("--seed", type=int, default=0)
    p_conv.add_argument("--logger-frac", type=float, default=0.05)
    p_conv.add_argument("--logger-alpha", type=float, default=0.5)
    p_conv.add_argument("--no-bias", action="store_true")
    p_conv.set_defaults(func=cmd_convert)

    p_eval = sub.add_parser("eval", help="evaluate saved policy parameters")
    p_eval.add_argument("--params", required=True, help=".npz with 'weights'")
    p_eval.add_argument("--test", required=True)
    p_eval.add_argument("--mode", choices=("expected", "greedy"), default="expected")
    p_eval.add_argument("--no-bias", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractViolation, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
