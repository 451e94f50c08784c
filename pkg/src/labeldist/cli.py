"""Command line entry point: ``labeldist <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .errors import ConfigError, DataError, NumericError
from .meta import VARIANTS, attack, load_meta, save_meta, train_meta
from .nn import load_params, save_params, train_classifier
from .report import format_table, read_summary
from .shadow import load_records, save_records, split_records
from .simplex import SamplingScheme

logger = logging.getLogger("labeldist")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _config(args) -> harness.ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "out", None) is not None and args.command in ("sweep", "multiclass", "oversample-study"):
        overrides.append(f"output_dir={args.out}")
    if getattr(args, "records", None) is not None and args.command in ("sweep", "multiclass"):
        overrides.append(f"records={args.records}")
    return harness.ExperimentConfig.load(args.config, overrides)


def cmd_sample_simplex(args) -> None:
    scheme = SamplingScheme(args.scheme, args.step, args.tau)
    pts = scheme.points(args.classes)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write(",".join(f"p{i}" for i in range(args.classes)) + "\n")
        for p in pts:
            out.write(",".join(repr(float(v)) for v in p) + "\n")
    finally:
        if args.out:
            out.close()


def cmd_gen_shadows(args) -> None:
    cfg = _config(args)
    aux, pool, arch = harness.prepare_data(cfg)
    plan = replace(cfg.plan, oversample=args.oversample)
    recs = harness.build_records(replace(cfg, records=None), pool, aux, arch, plan)
    records = sorted(recs.train + recs.test, key=lambda r: r.key)
    save_records(records, args.out, plan)
    print(f"wrote {len(records)} records ({len(recs.skipped)} skipped) to {args.out}")


def cmd_train_meta(args) -> None:
    cfg = _config(args)
    records, plan = load_records(args.records)
    train_replicas = plan.train_replicas if plan else cfg.plan.train_replicas
    train, _ = split_records(records, train_replicas)
    if args.step is not None:
        train = harness.subsample(train, args.step)
    mcfg = cfg.meta_config(args.variant, args.step or cfg.plan.scheme.step)
    meta = replace(train_meta(train, args.variant, mcfg), eps=cfg.eps)
    save_meta(meta, args.out)
    print(f"trained {args.variant} meta on {len(train)} records ({meta.n_params} parameters) -> {args.out}")


def cmd_train_target(args) -> None:
    cfg = _config(args)
    from .data import resample_to_distribution

    aux, pool, arch = harness.prepare_data(cfg)
    p = np.asarray([float(v) for v in args.p.split(",")])
    data = resample_to_distribution(pool, p, cfg.plan.n_samples, args.data_seed)
    params = train_classifier(data.features, data.labels, arch, replace(cfg.train, seed=args.data_seed))
    save_params(params, arch, args.out)
    print(f"trained target on p={p.tolist()} -> {args.out}")


def cmd_attack(args) -> None:
    cfg = _config(args)
    target, arch = load_params(args.target)
    meta = load_meta(args.meta, expected_arch=arch)
    aux, _, data_arch = harness.prepare_data(cfg)
    if data_arch.input_dim != arch.input_dim:
        raise DataError(f"aux data has dimension {data_arch.input_dim}, target expects {arch.input_dim}")
    p_hat = attack(meta, target, arch, aux, args.eps)
    print(",".join(repr(float(v)) for v in p_hat))


def cmd_sweep(args) -> None:
    cfg = _config(args)
    res = harness.run_sweep(cfg)
    print(format_table(read_summary(res.files[0])))


def cmd_multiclass(args) -> None:
    cfg = _config(args)
    res = harness.run_multiclass(cfg)
    print(format_table(read_summary(res.files[0])))


def cmd_oversample_study(args) -> None:
    cfg = _config(args)
    res = harness.run_oversampling_study(cfg)
    for name, value in res.medians().items():
        print(f"median KL {name:>8}: {value:.5f}")


def cmd_report(args) -> None:
    print(format_table(read_summary(Path(args.dir) / "summary.csv")))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="labeldist", description="Infer the label distribution a classifier was trained on.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("-c", "--config", help="YAML/JSON experiment configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (dotted key)")
        return p

    p = sub.add_parser("sample-simplex", help="print grid points of a sampling scheme")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--step", type=float, required=True)
    p.add_argument("--scheme", choices=["uniform_grid", "edges", "region"], default="uniform_grid")
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample_simplex)

    p = with_config(sub.add_parser("gen-shadows", help="train shadow classifiers and write a record file"))
    p.add_argument("--out", required=True)
    p.add_argument("--oversample", action="store_true", help="balance each shadow set before training")
    p.set_defaults(func=cmd_gen_shadows)

    p = with_config(sub.add_parser("train-meta", help="train a meta-classifier on a record file"))
    p.add_argument("--records", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="proposed")
    p.add_argument("--step", type=float, help="sub-sample the training records to this grid step")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_meta)

    p = with_config(sub.add_parser("train-target", help="train a classifier on a resampled pool (for attack demos)"))
    p.add_argument("--p", required=True, help="comma-separated label distribution")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_target)

    p = with_config(sub.add_parser("attack", help="estimate a target's training label distribution"))
    p.add_argument("--meta", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--eps", type=float)
    p.set_defaults(func=cmd_attack)

    for name, func, text in (
        ("sweep", cmd_sweep, "step-size sweep, proposed vs baseline"),
        ("multiclass", cmd_multiclass, "multi-class sweep with per-point KL tables"),
        ("oversample-study", cmd_oversample_study, "random-oversampling countermeasure study"),
    ):
        p = with_config(sub.add_parser(name, help=text))
        p.add_argument("--out", help="output directory")
        if name != "oversample-study":
            p.add_argument("--records", help="reuse a record file instead of generating shadows")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="print the average-MSE table of a finished run")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
