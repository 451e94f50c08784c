"""Shadow classifiers: generation over a simplex grid, accuracy vectors, persistence."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import LabeledDataset, largest_remainder_counts, random_oversample, resample_to_distribution
from .errors import ArchMismatchError, ConfigError, DataError, NumericError
from .nn import ArchSpec, MlpParams, TrainConfig, flatten_params, forward, train_classifier
from .simplex import SamplingScheme, grid_counts, grid_resolution

logger = logging.getLogger(__name__)

RECORD_FORMAT = "labeldist-shadow-records"
RECORD_VERSION = 1


@dataclass(frozen=True)
class ShadowRecord:
    theta: np.ndarray
    accuracy: np.ndarray
    p: np.ndarray
    grid_index: int
    replica: int
    seed: int
    arch: ArchSpec

    def __eq__(self, other):
        if not isinstance(other, ShadowRecord):
            return NotImplemented
        return (
            (self.grid_index, self.replica, self.seed, self.arch)
            == (other.grid_index, other.replica, other.seed, other.arch)
            and np.array_equal(self.theta, other.theta)
            and np.array_equal(self.accuracy, other.accuracy)
            and np.array_equal(self.p, other.p)
        )

    @property
    def key(self) -> tuple[int, int]:
        return self.grid_index, self.replica

    def to_json(self) -> dict:
        return {
            "p": self.p.tolist(),
            "a": self.accuracy.tolist(),
            "theta": self.theta.tolist(),
            "seed": self.seed,
            "grid_index": self.grid_index,
            "replica": self.replica,
            "arch": self.arch.fingerprint(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ShadowRecord":
        return cls(
            theta=np.asarray(d["theta"], dtype=float),
            accuracy=np.asarray(d["a"], dtype=float),
            p=np.asarray(d["p"], dtype=float),
            grid_index=int(d["grid_index"]),
            replica=int(d["replica"]),
            seed=int(d["seed"]),
            arch=ArchSpec.from_fingerprint(d["arch"]),
        )


@dataclass(frozen=True)
class ShadowPlan:
    """Which shadow datasets to build.

    Replicas ``0 .. train_replicas-1`` of each grid point form the meta
    training split, the rest the test split.  With ``oversample`` each shadow
    set is balanced by random oversampling before training while the record
    keeps the original distribution as its label.
    """

    scheme: SamplingScheme = field(default_factory=SamplingScheme)
    replicas: int = 10
    n_samples: int = 500
    train_replicas: int = 8
    base_seed: int = 0
    oversample: bool = False

    def __post_init__(self):
        if self.replicas < 1 or not 0 <= self.train_replicas <= self.replicas or self.n_samples < 1:
            raise ConfigError(f"invalid shadow plan: {self}")

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.to_dict(),
            "replicas": self.replicas,
            "n_samples": self.n_samples,
            "train_replicas": self.train_replicas,
            "base_seed": self.base_seed,
            "oversample": self.oversample,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShadowPlan":
        d = dict(d)
        d["scheme"] = SamplingScheme(**d.get("scheme", {}))
        return cls(**d)


def derive_seed(base_seed: int, *keys: int) -> int:
    """A 64-bit seed determined by ``(base_seed, *keys)`` alone."""
    return int(np.random.SeedSequence([int(base_seed), *map(int, keys)]).generate_state(1, np.uint64)[0])


def grid_index_map(n_classes: int, step: float) -> dict[tuple[int, ...], int]:
    return {tuple(k): i for i, k in enumerate(grid_counts(n_classes, step).tolist())}


def compute_accuracy_vector(params: MlpParams, arch: ArchSpec, aux: LabeledDataset, eps: float = 0.5) -> np.ndarray:
    """Per class, the fraction of aux rows of that class whose probability for it exceeds ``1 - eps``."""
    if not 0 < eps <= 1:
        raise ConfigError(f"eps must lie in (0, 1], got {eps}")
    counts = aux.class_counts
    if counts.size != arch.n_classes or np.any(counts == 0):
        raise DataError(f"aux set needs samples of all {arch.n_classes} classes, has {counts.tolist()}")
    probs = forward(params, arch, aux.features)
    hit = np.abs(aux.labels - probs) < eps
    return (hit * aux.labels).sum(axis=0) / counts


def shadow_dataset(pool: LabeledDataset, plan: ShadowPlan, p, seed: int) -> tuple[LabeledDataset, int]:
    """The training set of the shadow with record seed ``seed``, and its training seed."""
    data_seed, train_seed, over_seed = np.random.SeedSequence(seed).generate_state(3, np.uint64)
    shadow = resample_to_distribution(pool, p, plan.n_samples, int(data_seed))
    if plan.oversample:
        shadow = random_oversample(shadow, int(over_seed))
    return shadow, int(train_seed)


def train_shadow(pool, aux, arch, train_config, plan, p, grid_index, replica, eps) -> ShadowRecord:
    seed = derive_seed(plan.base_seed, grid_index, replica)
    shadow, train_seed = shadow_dataset(pool, plan, p, seed)
    cfg = replace(train_config, seed=train_seed)
    params = train_classifier(shadow.features, shadow.labels, arch, cfg)
    return ShadowRecord(
        theta=flatten_params(params),
        accuracy=compute_accuracy_vector(params, arch, aux, eps),
        p=np.asarray(p, dtype=float),
        grid_index=grid_index,
        replica=replica,
        seed=seed,
        arch=arch,
    )


_WORKER_STATE: dict = {}


def _init_worker(state):
    _WORKER_STATE.update(state)


def _run_job(job):
    s = _WORKER_STATE
    p, k, r = job
    try:
        return train_shadow(s["pool"], s["aux"], s["arch"], s["train_config"], s["plan"], p, k, r, s["eps"])
    except NumericError as exc:
        return (k, r, str(exc))


@dataclass
class ShadowRun:
    records: list[ShadowRecord]
    skipped: list[dict]


def generate_shadow_records(
    pool: LabeledDataset,
    aux: LabeledDataset,
    arch: ArchSpec,
    train_config: TrainConfig,
    plan: ShadowPlan,
    eps: float = 0.5,
    replica_ids: Iterable[int] | None = None,
    workers: int = 1,
    keep: Callable[[np.ndarray], bool] | None = None,
) -> ShadowRun:
    """Train one shadow classifier per (grid point, replica).

    Grid indices refer to the full uniform grid at ``plan.scheme.step`` so keys
    agree across schemes.  Records come back sorted by ``(grid_index, replica)``;
    trainings that fail numerically are skipped and listed in ``skipped``.
    ``keep`` restricts training to the grid points it accepts.
    """
    if arch.n_classes != pool.n_classes:
        raise ArchMismatchError(f"arch has {arch.n_classes} classes, pool has {pool.n_classes}")
    if np.intersect1d(aux.index, pool.index).size:
        raise DataError("aux rows overlap the shadow pool")
    n_classes = pool.n_classes
    n = grid_resolution(plan.scheme.step)
    index = grid_index_map(n_classes, plan.scheme.step)
    points = plan.scheme.points(n_classes)
    if keep is not None:
        points = [p for p in points if keep(p)]
    if len(points) == 0:
        return ShadowRun([], [])
    replica_ids = range(plan.replicas) if replica_ids is None else list(replica_ids)

    needed = np.max([np.asarray(largest_remainder_counts(p, plan.n_samples)) for p in points], axis=0)
    have = pool.class_counts
    if np.any(have < needed):
        c = int(np.argmax(needed - have))
        worst = next(p for p in points if largest_remainder_counts(p, plan.n_samples)[c] > have[c])
        raise DataError(f"pool exhausted at p={worst.tolist()}: class {c} has {have[c]}, needs {needed[c]}")

    jobs = []
    for p in points:
        k = index[tuple(int(v) for v in np.round(p * n))]
        if plan.oversample and np.any(p == 0):
            continue
        jobs.extend((p, k, r) for r in replica_ids)

    state = dict(pool=pool, aux=aux, arch=arch, train_config=train_config, plan=plan, eps=eps)
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(state,)) as ex:
            results = list(ex.map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        _init_worker(state)
        results = [_run_job(j) for j in jobs]

    records, skipped = [], []
    for res in results:
        if isinstance(res, ShadowRecord):
            records.append(res)
        else:
            k, r, msg = res
            logger.warning("shadow (k=%d, r=%d) skipped: %s", k, r, msg)
            skipped.append({"grid_index": k, "replica": r, "error": msg})
    records.sort(key=lambda rec: rec.key)
    return ShadowRun(records, skipped)


def split_records(records: Sequence[ShadowRecord], train_replicas: int) -> tuple[list, list]:
    train = [r for r in records if r.replica < train_replicas]
    test = [r for r in records if r.replica >= train_replicas]
    return train, test


def check_arch(records: Sequence[ShadowRecord], expected: ArchSpec | None = None) -> ArchSpec:
    """The single architecture shared by ``records``."""
    archs = {r.arch for r in records}
    if len(archs) > 1:
        raise ArchMismatchError(f"records mix {len(archs)} architectures")
    if not archs:
        raise DataError("no records")
    arch = archs.pop()
    if expected is not None and arch != expected:
        raise ArchMismatchError(f"records were made for {arch.fingerprint()}, expected {expected.fingerprint()}")
    return arch


def stack_records(records: Sequence[ShadowRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(thetas, accuracies, ps)`` as 2-D arrays."""
    return (
        np.stack([r.theta for r in records]),
        np.stack([r.accuracy for r in records]),
        np.stack([r.p for r in records]),
    )


def save_records(records: Sequence[ShadowRecord], path: str | Path, plan: ShadowPlan | None = None) -> None:
    """One JSON object per line, preceded by a header line with the format version and plan."""
    header = {"format": RECORD_FORMAT, "version": RECORD_VERSION, "plan": plan.to_dict() if plan else None}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def load_records(path: str | Path, expected_arch: ArchSpec | None = None) -> tuple[list[ShadowRecord], ShadowPlan | None]:
    records = []
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError(f"{path}: empty record file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise DataError(f"{path}:1: corrupt header") from None
    if header.get("format") != RECORD_FORMAT or header.get("version") != RECORD_VERSION:
        raise DataError(f"{path}:1: unsupported record format {header.get('format')!r} v{header.get('version')}")
    plan = ShadowPlan.from_dict(header["plan"]) if header.get("plan") else None
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = ShadowRecord.from_json(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: corrupt record ({exc.__class__.__name__})") from None
        if rec.theta.shape != (rec.arch.n_params,):
            raise DataError(f"{path}:{lineno}: theta length {rec.theta.size} != {rec.arch.n_params}")
        records.append(rec)
    if records:
        check_arch(records, expected_arch)
    return records, plan
