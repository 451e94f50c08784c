"""End-to-end experiments: step-size sweeps, multi-class sampling studies and
the random-oversampling countermeasure study.

Every random choice is derived from the configuration's master seed, so a
rerun with the same configuration reproduces every CSV byte for byte.
"""

from __future__ import annotations

import copy
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .data import LabeledDataset, TabularSchema, load_idx, load_tabular, split_aux, synth_gaussians
from .errors import ConfigError, DataError
from .meta import MetaParams, MetaTrainConfig, predict_records, train_meta
from .nn import ArchSpec, TrainConfig
from .report import ReportRow, Scatter, add_relative_improvement, emit_report, json_default, step_label, write_csv
from .shadow import ShadowPlan, ShadowRecord, derive_seed, generate_shadow_records, load_records, split_records
from .simplex import SamplingScheme, grid_resolution, kl_divergence, mse, on_grid

logger = logging.getLogger(__name__)

# sub-seed tags
_DATA, _AUX, _SHADOW, _META, _AWARE, _TARGETS = 1, 2, 3, 4, 5, 6

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": None,
    "data": {
        "kind": "synthetic",
        "means": [[2.0, 2.0], [-2.0, -2.0]],
        "covariances": None,
        "pool_counts": [2000, 2000],
    },
    "n_aux": 100,
    "eps": 0.5,
    "target": {"layers": [8, 4, 2], "hidden_activation": "relu", "output_activation": "sigmoid"},
    "train": {"epochs": 8, "batch_size": 50, "learning_rate": 0.01, "optimizer": "adam", "init_scale": 0.3},
    "shadows": {
        "scheme": {"kind": "uniform_grid", "step": 0.05, "tau": 0.2},
        "replicas": 10,
        "train_replicas": 8,
        "n_samples": 500,
    },
    "meta": {
        "proposed": {"epochs": 300, "batch_size": 16, "learning_rate": 0.01, "optimizer": "adam",
                     "validation_fraction": 0.1, "init_scale": 1.0, "standardize": "layer"},
        "baseline": {"epochs": 300, "batch_size": 16, "learning_rate": 0.01, "optimizer": "adam",
                     "validation_fraction": 0.1, "init_scale": 1.0, "standardize": "layer"},
    },
    "sweep": [0.05, 0.1, 0.2, 0.25],
    # The study runs on its own task: with two well-separated 2-D clusters a
    # handful of distinct minority rows already pin down the class, so
    # oversampling leaves nothing for any meta-classifier to find.
    "oversampling": {
        "imbalance": 0.2,
        "target_replicas": 10,
        "overrides": {
            "data": {"means": [[0.6] * 10, [-0.6] * 10]},
            "train": {"epochs": 30},
        },
    },
    "records": None,
    "workers": 1,
    "output_dir": "results",
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply ``dotted.key=value``; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override below non-mapping key in {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)
    return doc


@dataclass
class ExperimentConfig:
    seed: int
    data: dict
    arch_layers: tuple[int, ...]
    hidden_activation: str
    output_activation: str
    train: TrainConfig
    plan: ShadowPlan
    meta: dict[str, MetaTrainConfig]
    sweep: tuple[float, ...]
    eps: float
    n_aux: int
    imbalance: float
    target_replicas: int
    records: str | None
    workers: int
    output_dir: str
    raw: dict = field(repr=False, default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        d = _merge(DEFAULT_CONFIG, doc or {})
        if d.get("seed") is None:
            raise ConfigError("a master seed is required")
        try:
            seed = int(d["seed"])
            if seed < 0:
                raise ConfigError("the master seed must be nonnegative")
            shadows = dict(d["shadows"])
            scheme = SamplingScheme(**shadows.pop("scheme"))
            plan = ShadowPlan(scheme=scheme, base_seed=derive_seed(seed, _SHADOW), **shadows)
            meta = {v: MetaTrainConfig(**d["meta"][v]) for v in ("proposed", "baseline")}
            cfg = cls(
                seed=seed,
                data=d["data"],
                arch_layers=tuple(int(m) for m in d["target"]["layers"]),
                hidden_activation=d["target"].get("hidden_activation", "relu"),
                output_activation=d["target"].get("output_activation", "softmax"),
                train=TrainConfig(**d["train"]),
                plan=plan,
                meta=meta,
                sweep=tuple(float(s) for s in d["sweep"]),
                eps=float(d["eps"]),
                n_aux=int(d["n_aux"]),
                imbalance=float(d["oversampling"]["imbalance"]),
                target_replicas=int(d["oversampling"]["target_replicas"]),
                records=d.get("records"),
                workers=int(d.get("workers", 1)),
                output_dir=str(d["output_dir"]),
                raw=d,
            )
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        doc: dict = {}
        if path is not None:
            try:
                doc = yaml.safe_load(Path(path).read_text()) or {}
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for o in overrides:
            apply_override(doc, o)
        return cls.from_dict(doc)

    def validate(self) -> None:
        if not 0 < self.eps <= 1:
            raise ConfigError("eps must lie in (0, 1]")
        if self.target_replicas < 1:
            raise ConfigError("oversampling.target_replicas must be positive")
        if self.n_aux < 1:
            raise ConfigError("n_aux must be positive")
        fine = grid_resolution(self.plan.scheme.step)
        for s in self.sweep:
            coarse = grid_resolution(s)
            if fine % coarse:
                raise ConfigError(f"sweep step {s} is not a multiple of the generation step {self.plan.scheme.step}")
        if self.data.get("kind") not in ("synthetic", "tabular", "idx"):
            raise ConfigError(f"unknown data kind {self.data.get('kind')!r}")

    def for_oversampling(self) -> "ExperimentConfig":
        """The configuration with the oversampling study's overrides applied."""
        extra = self.raw["oversampling"].get("overrides") or {}
        doc = _merge(self.raw, extra)
        doc["oversampling"] = {**doc["oversampling"], "overrides": {}}
        return type(self).from_dict(doc)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def arch(self, input_dim: int) -> ArchSpec:
        return ArchSpec(input_dim, self.arch_layers, self.hidden_activation, self.output_activation)

    def meta_config(self, variant: str, *keys: float) -> MetaTrainConfig:
        tag = [int(round(k * 1e6)) for k in keys]
        return replace(self.meta[variant], seed=derive_seed(self.seed, _META, ("proposed", "baseline").index(variant), *tag))


# -- pipeline pieces ------------------------------------------------------------


def load_pool(cfg: ExperimentConfig) -> LabeledDataset:
    d = cfg.data
    if d["kind"] == "synthetic":
        return synth_gaussians(d["means"], d.get("covariances"), d["pool_counts"], derive_seed(cfg.seed, _DATA))
    if d["kind"] == "tabular":
        return load_tabular(d["path"], TabularSchema.from_dict(d["schema"]))
    return load_idx(d["images"], d["labels"], d["keep_classes"])


def prepare_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset, ArchSpec]:
    """``(aux, shadow_pool, arch)`` for a configuration."""
    pool = load_pool(cfg)
    aux, rest = split_aux(pool, cfg.n_aux, derive_seed(cfg.seed, _AUX))
    arch = cfg.arch(pool.n_features)
    if arch.n_classes != pool.n_classes:
        raise ConfigError(f"target has {arch.n_classes} outputs but the data has {pool.n_classes} classes")
    return aux, rest, arch


@dataclass
class RecordSet:
    train: list[ShadowRecord]
    test: list[ShadowRecord]
    skipped: list[dict]


def build_records(cfg: ExperimentConfig, pool, aux, arch, plan: ShadowPlan | None = None) -> RecordSet:
    """Train-split records on the plan's scheme and test-split records on the full uniform grid."""
    plan = plan or cfg.plan
    if cfg.records and not plan.oversample:
        records, _ = load_records(cfg.records, arch)
        train, test = split_records(records, plan.train_replicas)
        if plan.scheme.kind != "uniform_grid":
            keep = {tuple(np.round(p * grid_resolution(plan.scheme.step)).astype(int)) for p in plan.scheme.points(arch.n_classes)}
            train = [r for r in train if tuple(np.round(r.p * grid_resolution(plan.scheme.step)).astype(int)) in keep]
        return RecordSet(train, test, [])
    train_ids = range(plan.train_replicas)
    test_ids = range(plan.train_replicas, plan.replicas)
    train_run = generate_shadow_records(pool, aux, arch, cfg.train, plan, cfg.eps, train_ids, cfg.workers)
    uniform = replace(plan, scheme=replace(plan.scheme, kind="uniform_grid"))
    test_run = generate_shadow_records(pool, aux, arch, cfg.train, uniform, cfg.eps, test_ids, cfg.workers)
    return RecordSet(train_run.records, test_run.records, train_run.skipped + test_run.skipped)


def subsample(records: Sequence[ShadowRecord], step: float) -> list[ShadowRecord]:
    return [r for r in records if on_grid(r.p, step)[0]]


def _evaluate(meta: MetaParams, test: Sequence[ShadowRecord]):
    p_true = np.stack([r.p for r in test])
    p_hat = predict_records(meta, test)
    return p_true, p_hat, kl_divergence(p_true, p_hat), mse(p_true, p_hat)


def sweep_rows(cfg: ExperimentConfig, records: RecordSet, variants=("proposed", "baseline")):
    """Train every variant at every sweep step; evaluate all on the fixed test split."""
    if not records.test:
        raise DataError("no test records")
    rows, scatter, metas = [], [], {}
    for step in cfg.sweep:
        train = subsample(records.train, step)
        if not train:
            raise DataError(f"no training records on the grid of step {step}")
        for variant in variants:
            t0 = time.perf_counter()
            meta = train_meta(train, variant, cfg.meta_config(variant, step))
            meta = replace(meta, eps=cfg.eps)
            p_true, p_hat, kl, err = _evaluate(meta, records.test)
            rows.append(ReportRow(step, variant, kl, float(err.mean()), len(train), len(records.test),
                                  time.perf_counter() - t0))
            scatter.append(Scatter(step, variant, p_true, p_hat))
            metas[(step, variant)] = meta
            logger.info("step %g %s: avg MSE %.5f, median KL %.5f", step, variant, err.mean(), np.median(kl))
    add_relative_improvement(rows)
    return rows, scatter, metas


def run_info(cfg: ExperimentConfig, arch: ArchSpec, records: RecordSet, extra: dict | None = None) -> dict:
    info = {
        "config": cfg.to_dict(),
        "master_seed": cfg.seed,
        "shadow_base_seed": cfg.plan.base_seed,
        "arch": arch.fingerprint(),
        "n_params_target": arch.n_params,
        "n_train_records": len(records.train),
        "n_test_records": len(records.test),
        "skipped_trainings": records.skipped,
        "versions": {"labeldist": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    info.update(extra or {})
    return info


@dataclass
class SweepResult:
    rows: list[ReportRow]
    scatter: list[Scatter]
    metas: dict
    records: RecordSet
    arch: ArchSpec
    aux: LabeledDataset
    files: list[Path]


def run_sweep(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> SweepResult:
    """Step-size sweep comparing the proposed and baseline meta-classifiers."""
    aux, pool, arch = prepare_data(cfg)
    records = build_records(cfg, pool, aux, arch)
    rows, scatter, metas = sweep_rows(cfg, records)
    files = emit_report(rows, scatter, out_dir or cfg.output_dir, run_info(cfg, arch, records))
    return SweepResult(rows, scatter, metas, records, arch, aux, files)


def kl_by_point(records: Sequence[ShadowRecord], p_hat: np.ndarray) -> list[list[float]]:
    """Mean KL per test grid point keyed by its first two coordinates."""
    groups: dict[tuple[float, float], list[float]] = {}
    for rec, est in zip(records, p_hat):
        groups.setdefault((float(rec.p[0]), float(rec.p[1])), []).append(float(kl_divergence(rec.p, est)))
    return [[p1, p2, float(np.mean(v))] for (p1, p2), v in sorted(groups.items())]


def run_multiclass(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> SweepResult:
    """Sweep for C >= 3 on the configured scheme, plus per-point KL tables."""
    aux, pool, arch = prepare_data(cfg)
    if arch.n_classes < 3:
        raise ConfigError("the multi-class study needs at least three classes")
    records = build_records(cfg, pool, aux, arch)
    rows, scatter, metas = sweep_rows(cfg, records)
    out = Path(out_dir or cfg.output_dir)
    extra = {"scheme": cfg.plan.scheme.to_dict()}
    files = emit_report(rows, scatter, out, run_info(cfg, arch, records, extra))
    for (step, variant), meta in metas.items():
        path = out / f"kl_by_point_{variant}_{step_label(step)}.csv"
        write_csv(path, ["p1", "p2", "kl_mean"], kl_by_point(records.test, predict_records(meta, records.test)))
        files.append(path)
    return SweepResult(rows, scatter, metas, records, arch, aux, files)


def is_imbalanced(p0: float, bound: float = 0.2) -> bool:
    """``p0`` in ``(0, bound] U [1 - bound, 1)``."""
    tol = 1e-9
    return (tol < p0 <= bound + tol) or (1 - bound - tol <= p0 < 1 - tol)


@dataclass
class OversamplingResult:
    p: np.ndarray
    kl_unaware: np.ndarray
    kl_aware: np.ndarray
    kl_uniform: np.ndarray
    p_hat_unaware: np.ndarray
    p_hat_aware: np.ndarray
    files: list[Path]

    def medians(self) -> dict[str, float]:
        return {
            "unaware": float(np.median(self.kl_unaware)),
            "aware": float(np.median(self.kl_aware)),
            "uniform": float(np.median(self.kl_uniform)),
        }


def run_oversampling_study(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> OversamplingResult:
    """Attack targets trained on randomly oversampled imbalanced data.

    The configuration's ``oversampling.overrides`` are applied first.  Both
    meta-classifiers see every replica at every grid point: the unaware one
    ordinary shadows, the aware one shadows that were oversampled before
    training but keep their original label distribution.  The targets are
    separately seeded oversampled trainings at the imbalanced grid points.
    """
    cfg = cfg.for_oversampling()
    aux, pool, arch = prepare_data(cfg)
    if arch.n_classes != 2:
        raise ConfigError("the oversampling study is defined for binary tasks")
    step = cfg.plan.scheme.step
    replicas = range(cfg.plan.replicas)
    plain = generate_shadow_records(pool, aux, arch, cfg.train, cfg.plan, cfg.eps, replicas, cfg.workers)
    aware_plan = replace(cfg.plan, oversample=True, base_seed=derive_seed(cfg.seed, _AWARE))
    aware_run = generate_shadow_records(pool, aux, arch, cfg.train, aware_plan, cfg.eps, replicas, cfg.workers)
    target_plan = replace(
        aware_plan,
        scheme=replace(cfg.plan.scheme, kind="uniform_grid"),
        base_seed=derive_seed(cfg.seed, _TARGETS),
    )
    target_run = generate_shadow_records(
        pool, aux, arch, cfg.train, target_plan, cfg.eps, range(cfg.target_replicas), cfg.workers,
        keep=lambda p: is_imbalanced(p[0], cfg.imbalance),
    )
    targets = target_run.records
    if not targets:
        raise DataError("no imbalanced points on the grid")
    if not plain.records or not aware_run.records:
        raise DataError("no shadow records to train on")

    unaware = replace(train_meta(plain.records, "proposed", cfg.meta_config("proposed", step)), eps=cfg.eps)
    aware = replace(train_meta(aware_run.records, "proposed", cfg.meta_config("proposed", step, 1.0)), eps=cfg.eps)
    p_true = np.stack([r.p for r in targets])
    hat_u = predict_records(unaware, targets)
    hat_a = predict_records(aware, targets)
    result = OversamplingResult(
        p=p_true,
        kl_unaware=kl_divergence(p_true, hat_u),
        kl_aware=kl_divergence(p_true, hat_a),
        kl_uniform=kl_divergence(p_true, np.full_like(p_true, 0.5)),
        p_hat_unaware=hat_u,
        p_hat_aware=hat_a,
        files=[],
    )

    out = Path(out_dir or cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create report directory {out}: {exc}") from exc
    per_case = out / "oversampling.csv"
    write_csv(per_case, ["true_p0", "est_p0_unaware", "est_p0_aware", "kl_unaware", "kl_aware", "kl_uniform"],
              zip(p_true[:, 0], hat_u[:, 0], hat_a[:, 0], result.kl_unaware, result.kl_aware, result.kl_uniform))
    summary = out / "oversampling_summary.csv"
    stats = []
    for name, kl in (("unaware", result.kl_unaware), ("aware", result.kl_aware), ("uniform", result.kl_uniform)):
        q = np.quantile(kl, [0, 0.25, 0.5, 0.75, 1])
        stats.append([name, *q, len(kl)])
    write_csv(summary, ["meta", "kl_min", "kl_q1", "kl_median", "kl_q3", "kl_max", "n_test"], stats)
    info = run_info(cfg, arch, RecordSet(plain.records, targets, plain.skipped), {
        "n_unaware_train_records": len(plain.records),
        "n_aware_train_records": len(aware_run.records),
        "n_targets": len(targets),
        "skipped_trainings_aware": aware_run.skipped,
        "skipped_trainings_targets": target_run.skipped,
        "medians": result.medians(),
    })
    emit_info = out / "run.json"
    emit_info.write_text(json.dumps(info, indent=2, sort_keys=True, default=json_default))
    result.files = [per_case, summary, emit_info]
    return result
