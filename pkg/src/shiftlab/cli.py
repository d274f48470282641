"""Command-line surface: gen, train-source, adapt, estimate, bench, verify, defaults.

Exit codes: 0 success/pass, 1 bench acceptance failure, 2 usage/config error,
3 numeric failure. Thread count for bench suites comes from SHIFTLAB_THREADS
(default 1).
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import bench, mea
from .adapt import (
    AdaptationConfig,
    train_expanded_base,
    train_msfda,
    train_sfda,
    train_source,
    train_uda,
)
from .datagen import ShiftSpec, gen_gaussian_blobs, gen_two_moons, load_dataset, save_dataset
from .errors import FormatError, NumericError, ParameterError, ShiftLabError
from .nn import load_model, save_model
from .records import CSV_HEADER

EXIT_OK = 0
EXIT_ACCEPTANCE = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

CONFIG_SECTIONS = {"adapt"}


def read_config(path) -> dict:
    """Parse a flat `key = value` config document with [section] headers."""
    config: dict = {}
    section = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in CONFIG_SECTIONS:
                raise ParameterError(f"{path}:{lineno}: unknown section [{section}]")
            config.setdefault(section, {})
            continue
        if "=" not in line or section is None:
            raise ParameterError(f"{path}:{lineno}: expected 'key = value' inside a section")
        key, _, value = line.partition("=")
        config[section][key.strip()] = value.strip()
    return config


def _apply_config(cfg: AdaptationConfig, overrides: dict) -> AdaptationConfig:
    valid = {f.name: f.type for f in fields(AdaptationConfig)}
    kwargs = {}
    for key, raw in overrides.items():
        if key not in valid:
            raise ParameterError(f"unknown config key {key!r}; valid: {sorted(valid)}")
        current = getattr(cfg, key)
        kwargs[key] = type(current)(raw) if not isinstance(current, int) else int(raw)
    return replace(cfg, **kwargs)


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_trajectory(record, path) -> None:
    lines = [CSV_HEADER] + [row.csv() for row in record.rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def _cfg_from_args(args) -> AdaptationConfig:
    cfg = AdaptationConfig()
    if getattr(args, "config", None):
        file_cfg = read_config(args.config).get("adapt", {})
        cfg = _apply_config(cfg, file_cfg)
    overrides = {}
    for key in (
        "iterations", "batch_size", "learning_rate", "momentum", "lambda_uda",
        "lambda_mea", "beta_pseudo", "pseudo_refresh", "seed",
    ):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    return replace(cfg, **overrides)


def _add_cfg_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file with [adapt] section")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--lambda-uda", dest="lambda_uda", type=float)
    p.add_argument("--lambda-mea", dest="lambda_mea", type=float)
    p.add_argument("--beta-pseudo", dest="beta_pseudo", type=float)
    p.add_argument("--pseudo-refresh", dest="pseudo_refresh", type=int)
    p.add_argument("--seed", type=int)


def cmd_gen(args) -> int:
    if args.generator == "two-moons":
        shift = ShiftSpec("rotation", args.rotation) if args.rotation else None
        ds = gen_two_moons(args.n, args.noise, shift, seed=args.seed, domain_id=args.domain)
    else:
        priors = [float(v) for v in args.priors.split(",")]
        ds = gen_gaussian_blobs(
            args.n, args.classes, args.dim, args.separation, priors,
            seed=args.seed, domain_id=args.domain,
        )
    save_dataset(ds, args.out)
    print(f"{args.out} sha256={_digest(args.out)}")
    return EXIT_OK


def cmd_train_source(args) -> int:
    ds = load_dataset(args.data)
    if ds.labels is None:
        raise ParameterError(f"{args.data}: source training needs a labeled dataset")
    cfg = _cfg_from_args(args)
    out = train_source(ds, cfg, eval_set=ds)
    save_model(out.model, args.out)
    if args.trajectory:
        _write_trajectory(out.record, args.trajectory)
    print(f"{args.out} final_train_accuracy={out.record.final_accuracy():.4f}")
    return EXIT_OK


def _load_weights_arg(args, models, model_ids, target, cfg):
    if args.weights == "uniform":
        return np.full(len(models), 1.0 / len(models))
    if args.weights == "mea":
        visible = _parse_visible(args)
        visibility = {d: mea.DATA_VISIBLE for d in visible}
        for mid in model_ids:
            visibility.setdefault(mid, mea.MODEL_ONLY)
        est, _ = mea.estimate(
            models, mea.VisibilitySpec(visibility), visible, target, cfg.lambda_mea
        )
        return est.w_final
    est = mea.parse_weights(Path(args.weights).read_text())
    if len(est.w_final) != len(models):
        raise ParameterError("weight file length does not match the number of models")
    return est.w_final


def _parse_visible(args) -> dict:
    visible = {}
    for item in args.visible or []:
        if "=" not in item:
            raise ParameterError(f"--visible expects domain=path, got {item!r}")
        domain, _, path = item.partition("=")
        ds = load_dataset(path)
        if ds.labels is None:
            raise ParameterError(f"visible domain {domain!r} must be labeled")
        ds.domain_id = domain
        visible[domain] = ds
    return visible


def cmd_adapt(args) -> int:
    cfg = _cfg_from_args(args)
    target = load_dataset(args.target)
    eval_set = load_dataset(args.eval_data) if args.eval_data else None
    target_unlabeled = target.unlabeled()

    if args.paradigm == "source":
        if not args.source_data:
            raise ParameterError("paradigm 'source' requires --source-data")
        out = train_source(load_dataset(args.source_data[0]), cfg, eval_set=eval_set)
    elif args.paradigm == "uda":
        if not args.source_data:
            raise ParameterError("paradigm 'uda' requires --source-data")
        out = train_uda(load_dataset(args.source_data[0]), target_unlabeled, cfg, eval_set=eval_set)
    elif args.paradigm == "sfda":
        if args.source_data:
            raise ParameterError("source-free paradigm accepts no source data")
        if len(args.model or []) != 1:
            raise ParameterError("paradigm 'sfda' requires exactly one --model")
        out = train_sfda(load_model(args.model[0]), target_unlabeled, cfg, eval_set=eval_set)
    elif args.paradigm == "msfda":
        if args.source_data:
            raise ParameterError("source-free paradigm accepts no source data")
        models = [load_model(p) for p in args.model or []]
        if not models:
            raise ParameterError("paradigm 'msfda' requires at least one --model")
        ids = [m.meta.get("domain_id", str(i)) for i, m in enumerate(models)]
        weights = _load_weights_arg(args, models, ids, target_unlabeled, cfg)
        out = train_msfda(models, weights, target_unlabeled, cfg, eval_set=eval_set)
    elif args.paradigm == "expanded":
        models = [load_model(p) for p in args.model or []]
        if not models:
            raise ParameterError("paradigm 'expanded' requires at least one --model")
        if not args.source_data:
            raise ParameterError("paradigm 'expanded' requires --source-data")
        visible = [load_dataset(p) for p in args.source_data]
        weights = np.full(len(models), 1.0 / len(models))
        out = train_expanded_base(
            models, weights, target_unlabeled, visible, args.mode, cfg, eval_set=eval_set
        )
    else:
        raise ParameterError(f"unknown paradigm {args.paradigm!r}")

    if args.out:
        if len(out.models) == 1:
            save_model(out.models[0], args.out)
        else:
            stem = Path(args.out)
            for i, model in enumerate(out.models):
                save_model(model, stem.with_name(f"{stem.stem}-{i}{stem.suffix}"))
    if args.trajectory:
        _write_trajectory(out.record, args.trajectory)
    final = out.record.final_accuracy()
    print(f"paradigm={args.paradigm} iterations={cfg.iterations}"
          + (f" final_accuracy={final:.4f}" if final is not None else ""))
    return EXIT_OK


def cmd_estimate(args) -> int:
    models = [load_model(p) for p in args.model]
    ids = [m.meta.get("domain_id", str(i)) for i, m in enumerate(models)]
    visible = _parse_visible(args)
    visibility = {d: mea.DATA_VISIBLE for d in visible}
    for mid in ids:
        visibility.setdefault(mid, mea.MODEL_ONLY)
    target = load_dataset(args.target).unlabeled()
    est, prov = mea.estimate(
        models, mea.VisibilitySpec(visibility), visible, target, args.lam
    )
    Path(args.out).write_text(mea.format_weights(est, ids), encoding="ascii")
    if args.log:
        Path(args.log).write_text(mea.format_provenance(est, prov, ids), encoding="ascii")
    print(f"{args.out} fallback={est.fallback} w_final={est.w_final.tolist()}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.suite not in bench.SUITES:
        raise ParameterError(f"unknown suite {args.suite!r}; valid: {sorted(bench.SUITES)}")
    seeds = list(range(args.seeds)) if args.seed_list is None else [
        int(s) for s in args.seed_list.split(",")
    ]
    report = bench.SUITES[args.suite](seeds, out_dir=args.out)
    for entry in report["per_seed"]:
        print(" ".join(f"{k}={v}" for k, v in entry.items()))
    print(f"suite={args.suite} passed={report['passed']}")
    return EXIT_OK if report["passed"] else EXIT_ACCEPTANCE


def cmd_verify(args) -> int:
    if args.kind == "dataset":
        ds = load_dataset(args.path)
        print(f"ok dataset n={ds.n} d={ds.d} K={ds.num_classes} domain={ds.domain_id}")
    elif args.kind == "model":
        model = load_model(args.path)
        print(f"ok model arch={model.meta.get('architecture', '?')}")
    else:
        est = mea.parse_weights(Path(args.path).read_text())
        print(f"ok weights m={len(est.w_final)} fallback={est.fallback}")
    return EXIT_OK


def cmd_defaults(_args) -> int:
    cfg = AdaptationConfig()
    print("[adapt]")
    for f in fields(AdaptationConfig):
        print(f"{f.name} = {getattr(cfg, f.name)}")
    print()
    print("[model]")
    print("hidden = 64")
    print("depth = 2")
    print("activation = tanh")
    print("init = uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias")
    print()
    print("[bench]")
    print(f"convergence_window = {bench.DEFAULT_WINDOW}  # logged evaluations")
    print(f"convergence_tolerance = {bench.DEFAULT_TOLERANCE}")
    print("eval_interval = 10  # iterations between accuracy evaluations")
    print("env SHIFTLAB_THREADS = 1")
    return EXIT_OK


def _defaults_epilog() -> str:
    cfg = AdaptationConfig()
    adapt = "  ".join(f"{f.name}={getattr(cfg, f.name)}" for f in fields(AdaptationConfig))
    return (
        "defaults:\n"
        f"  [adapt]  {adapt}\n"
        "  [model]  hidden=64  depth=2  activation=tanh  "
        "init=uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with zero bias\n"
        f"  [bench]  convergence_window={bench.DEFAULT_WINDOW} (logged evaluations)  "
        f"convergence_tolerance={bench.DEFAULT_TOLERANCE}  eval_interval=10\n"
        "  [env]    SHIFTLAB_THREADS=1\n"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftlab",
        description=__doc__,
        epilog=_defaults_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset file")
    gsub = p.add_subparsers(dest="generator", required=True)
    moons = gsub.add_parser("two-moons")
    moons.add_argument("--n", type=int, default=400)
    moons.add_argument("--noise", type=float, default=0.1)
    moons.add_argument("--rotation", type=float, default=0.0, help="degrees in [0, 360)")
    moons.add_argument("--seed", type=int, default=0)
    moons.add_argument("--domain", default="moons")
    moons.add_argument("--out", required=True)
    moons.set_defaults(func=cmd_gen)
    blobs = gsub.add_parser("blobs")
    blobs.add_argument("--n", type=int, default=400)
    blobs.add_argument("--classes", type=int, default=2)
    blobs.add_argument("--dim", type=int, default=2)
    blobs.add_argument("--separation", type=float, default=6.0)
    blobs.add_argument("--priors", default="0.5,0.5")
    blobs.add_argument("--seed", type=int, default=0)
    blobs.add_argument("--domain", default="blobs")
    blobs.add_argument("--out", required=True)
    blobs.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-source", help="supervised training on a labeled dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trajectory")
    _add_cfg_flags(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="run an adaptation paradigm")
    p.add_argument("--paradigm", required=True,
                   choices=["source", "uda", "sfda", "msfda", "expanded"])
    p.add_argument("--target", required=True)
    p.add_argument("--model", action="append", help="source model file (repeatable)")
    p.add_argument("--source-data", dest="source_data", action="append",
                   help="labeled source dataset (uda/expanded only)")
    p.add_argument("--weights", default="uniform",
                   help="msfda weights: uniform | mea | <weights file>")
    p.add_argument("--visible", action="append",
                   help="domain=path of data-visible source (for --weights mea)")
    p.add_argument("--mode", default="ce-only", choices=["ce-only", "ce+mmd"])
    p.add_argument("--eval-data", dest="eval_data", help="labeled copy for accuracy logging")
    p.add_argument("--out", help="adapted model output path")
    p.add_argument("--trajectory")
    _add_cfg_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("estimate", help="proxy/confidence weight estimation")
    p.add_argument("--model", action="append", required=True)
    p.add_argument("--visible", action="append", help="domain=path (repeatable)")
    p.add_argument("--target", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="provenance log output path")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", help="run a benchmark suite")
    p.add_argument("suite")
    p.add_argument("--seeds", type=int, default=5, help="use seeds 0..N-1")
    p.add_argument("--seed-list", dest="seed_list", help="comma-separated explicit seeds")
    p.add_argument("--out", help="report output directory")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="validate a shiftlab file")
    p.add_argument("kind", choices=["dataset", "model", "weights"])
    p.add_argument("path")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("defaults", help="print all built-in defaults")
    p.set_defaults(func=cmd_defaults)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParameterError, FormatError, ShiftLabError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
