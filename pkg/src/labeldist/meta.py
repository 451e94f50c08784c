"""Meta-classifiers that map a classifier's parameters to its training label distribution.

Two variants share one layer-wise set encoder.  For a target with layers
``W_l`` (``m_{l-1} x m_l``) and ``b_l``, each neuron ``j`` of layer ``l`` is
encoded by a single-layer network with weights ``omega_l``:

* ``proposed``: ``z_lj = (W_l[:, j] + q_{l-1}) . omega_l[:m] + b_lj omega_l[m]``
  so the previous layer's encoding ``q_{l-1}`` shares weights with the
  incoming connections.  The head reads the per-layer sums and the accuracy
  vector: ``softmax([sum q_1, ..., sum q_L, a] @ head)``.
* ``baseline``: ``z_lj = W_l[:, j] . omega_l[:m] + q_{l-1} . omega_l[m:2m] +
  b_lj omega_l[2m]`` and the head reads only the per-layer sums.

The first layer has no ``q_0`` and uses ``omega_1`` of length ``D + 1`` in both
variants.  ``q_l = elu(z_l)``.  No extra bias terms are used anywhere.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .data import LabeledDataset
from .errors import ArchMismatchError, ConfigError, DataError, NumericError
from .nn import ArchSpec, MlpParams, elu, elu_grad, softmax, split_flat
from .shadow import ShadowRecord, check_arch, compute_accuracy_vector, stack_records

logger = logging.getLogger(__name__)

VARIANTS = ("proposed", "baseline")
STANDARDIZE = ("none", "layer", "coordinate")
META_FORMAT = "labeldist-meta"
META_VERSION = 1


def omega_lengths(variant: str, input_dim: int, layer_sizes: Sequence[int]) -> list[int]:
    widths = (input_dim, *layer_sizes)
    factor = 1 if variant == "proposed" else 2
    return [input_dim + 1] + [factor * widths[i] + 1 for i in range(1, len(layer_sizes))]


def head_shape(variant: str, n_layers: int, n_classes: int) -> tuple[int, int]:
    rows = n_layers + n_classes if variant == "proposed" else n_layers
    return rows, n_classes


def count_meta_params(variant: str, input_dim: int, layer_sizes: Sequence[int], n_classes: int) -> int:
    """Trainable parameter count of a meta-classifier over the given target layers."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown meta variant {variant!r}")
    rows, cols = head_shape(variant, len(layer_sizes), n_classes)
    return sum(omega_lengths(variant, input_dim, layer_sizes)) + rows * cols


@dataclass(frozen=True)
class MetaParams:
    variant: str
    omegas: tuple[np.ndarray, ...]
    head: np.ndarray
    arch: ArchSpec
    theta_shift: np.ndarray | None = None
    theta_scale: np.ndarray | None = None
    acc_shift: np.ndarray | None = None
    acc_scale: np.ndarray | None = None
    eps: float = 0.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown meta variant {self.variant!r}")
        expected = omega_lengths(self.variant, self.arch.input_dim, self.arch.layer_sizes)
        if [w.shape for w in self.omegas] != [(n,) for n in expected]:
            raise ArchMismatchError(f"omega lengths {[w.size for w in self.omegas]} != {expected}")
        if self.head.shape != head_shape(self.variant, self.arch.n_layers, self.arch.n_classes):
            raise ArchMismatchError(f"head shape {self.head.shape} does not fit the architecture")

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.omegas) + self.head.size

    def arrays(self) -> list[np.ndarray]:
        return [*self.omegas, self.head]

    def copy(self) -> "MetaParams":
        return replace(self, omegas=tuple(w.copy() for w in self.omegas), head=self.head.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([*self.omegas, self.head.ravel()])

    def with_flat(self, vec: np.ndarray) -> "MetaParams":
        out, off = [], 0
        for w in self.arrays():
            out.append(np.asarray(vec[off : off + w.size], dtype=float).reshape(w.shape).copy())
            off += w.size
        return replace(self, omegas=tuple(out[:-1]), head=out[-1])


def init_meta(arch: ArchSpec, variant: str = "proposed", seed: int = 0, init_scale: float = 1.0) -> MetaParams:
    """Uniform ``[-s, s]`` with ``s = init_scale / sqrt(fan_in)`` for every weight vector and the head."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown meta variant {variant!r}")
    rng = np.random.default_rng(seed)
    omegas = []
    for n in omega_lengths(variant, arch.input_dim, arch.layer_sizes):
        omegas.append(rng.uniform(-1, 1, size=n) * init_scale / math.sqrt(n))
    rows, cols = head_shape(variant, arch.n_layers, arch.n_classes)
    head = rng.uniform(-1, 1, size=(rows, cols)) * init_scale / math.sqrt(rows)
    return MetaParams(variant, tuple(omegas), head, arch)


# -- forward / backward -------------------------------------------------------


def _prepare(meta: MetaParams, thetas: np.ndarray) -> np.ndarray:
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != meta.arch.n_params:
        raise ArchMismatchError(f"theta length {thetas.shape[1]} != {meta.arch.n_params} for this architecture")
    if meta.theta_shift is not None:
        thetas = (thetas - meta.theta_shift) / meta.theta_scale
    return thetas


def _encode(meta: MetaParams, thetas: np.ndarray):
    """Per-layer pre-activations and encodings for a batch of parameter vectors."""
    weights, biases = split_flat(thetas, meta.arch)
    zs, qs = [], []
    for i, (w_mat, b_vec, omega) in enumerate(zip(weights, biases, meta.omegas)):
        m = w_mat.shape[1]
        z = np.einsum("kij,i->kj", w_mat, omega[:m]) + b_vec * omega[-1]
        if i > 0:
            prev = qs[-1]
            mix = omega[:m] if meta.variant == "proposed" else omega[m : 2 * m]
            z = z + (prev @ mix)[:, None]
        zs.append(z)
        qs.append(elu(z))
    return weights, biases, zs, qs


def _head_input(meta: MetaParams, qs, accuracies):
    sums = np.stack([q.sum(axis=1) for q in qs], axis=1)
    if meta.variant == "baseline":
        return sums
    acc = np.atleast_2d(np.asarray(accuracies, dtype=float))
    if acc.shape != (sums.shape[0], meta.arch.n_classes):
        raise DataError(f"accuracy vectors must have shape {(sums.shape[0], meta.arch.n_classes)}, got {acc.shape}")
    if meta.acc_shift is not None:
        acc = (acc - meta.acc_shift) / meta.acc_scale
    return np.hstack([sums, acc])


def layer_sums(meta: MetaParams, thetas: np.ndarray) -> np.ndarray:
    """``(K, L)`` array of ``sum_i [q_l]_i`` per record and layer."""
    _, _, _, qs = _encode(meta, _prepare(meta, thetas))
    return np.stack([q.sum(axis=1) for q in qs], axis=1)


def meta_forward(meta: MetaParams, thetas: np.ndarray, accuracies: np.ndarray | None = None) -> np.ndarray:
    """Estimated label distributions, ``(C,)`` for one record or ``(K, C)`` for a batch.

    ``accuracies`` is required by the proposed variant and ignored by the baseline.
    """
    single = np.ndim(thetas) == 1
    thetas = _prepare(meta, thetas)
    _, _, _, qs = _encode(meta, thetas)
    if meta.variant == "proposed" and accuracies is None:
        raise DataError("the proposed meta-classifier needs accuracy vectors")
    out = softmax(_head_input(meta, qs, accuracies) @ meta.head)
    return out[0] if single else out


def meta_forward_proposed(meta: MetaParams, theta, accuracy) -> np.ndarray:
    if meta.variant != "proposed":
        raise ConfigError("expected a proposed-variant meta-classifier")
    return meta_forward(meta, theta, accuracy)


def meta_forward_baseline(meta: MetaParams, theta) -> np.ndarray:
    if meta.variant != "baseline":
        raise ConfigError("expected a baseline-variant meta-classifier")
    return meta_forward(meta, theta)


def _soft_ce(p_hat: np.ndarray, p: np.ndarray) -> float:
    return float(-np.mean(np.sum(p * np.log(np.clip(p_hat, nn.PROB_FLOOR, 1.0)), axis=1)))


def meta_loss(meta: MetaParams, thetas, accuracies, ps) -> float:
    """Mean soft-label cross-entropy ``-sum_c p_c log p_hat_c`` over the batch."""
    ps = np.atleast_2d(np.asarray(ps, dtype=float))
    if ps.shape[0] == 0:
        raise DataError("empty batch")
    return _soft_ce(meta_forward(meta, np.atleast_2d(thetas), accuracies), ps)


def meta_backward(meta: MetaParams, thetas, accuracies, ps) -> tuple[float, list[np.ndarray]]:
    """Loss and gradients w.r.t. ``[omega_1, ..., omega_L, head]``."""
    thetas = _prepare(meta, thetas)
    ps = np.atleast_2d(np.asarray(ps, dtype=float))
    k = thetas.shape[0]
    weights, biases, zs, qs = _encode(meta, thetas)
    h = _head_input(meta, qs, accuracies)
    p_hat = softmax(h @ meta.head)
    loss = _soft_ce(p_hat, ps)

    d_logits = (p_hat * ps.sum(axis=1, keepdims=True) - ps) / k
    g_head = h.T @ d_logits
    d_sums = (d_logits @ meta.head.T)[:, : meta.arch.n_layers]

    grads = [None] * meta.arch.n_layers
    carry = None
    for i in range(meta.arch.n_layers - 1, -1, -1):
        d_q = d_sums[:, i : i + 1] + (0.0 if carry is None else carry)
        d_z = d_q * elu_grad(zs[i])
        w_mat, b_vec, omega = weights[i], biases[i], meta.omegas[i]
        m = w_mat.shape[1]
        g = np.zeros_like(omega)
        g[:m] = np.einsum("kij,kj->i", w_mat, d_z)
        g[-1] = np.sum(d_z * b_vec)
        if i > 0:
            row = d_z.sum(axis=1)
            if meta.variant == "proposed":
                g[:m] += row @ qs[i - 1]
                carry = row[:, None] * omega[:m]
            else:
                g[m : 2 * m] += row @ qs[i - 1]
                carry = row[:, None] * omega[m : 2 * m]
        grads[i] = g
    grads.append(g_head)
    if not (math.isfinite(loss) and all(np.isfinite(g).all() for g in grads)):
        raise NumericError("non-finite meta loss or gradient")
    return loss, grads


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class MetaTrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "adam"
    seed: int = 0
    validation_fraction: float = 0.1
    init_scale: float = 1.0
    standardize: str = "none"
    restarts: int = 1
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.restarts < 1 or self.weight_decay < 0:
            raise ConfigError(f"invalid meta training config: {self}")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        if self.standardize not in STANDARDIZE:
            raise ConfigError(f"standardize must be one of {STANDARDIZE}")


def fit_standardization(thetas: np.ndarray, arch: ArchSpec, mode: str) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Shift/scale vectors for ``mode``.

    ``layer`` uses one scale per weight matrix and per bias vector and no
    shift, which keeps the encoder's permutation properties; ``coordinate``
    standardizes every entry separately.
    """
    if mode == "none":
        return None, None
    if mode == "coordinate":
        std = thetas.std(axis=0)
        return thetas.mean(axis=0), np.where(std > 0, std, 1.0)
    scale = np.ones(arch.n_params)
    off = 0
    blocks = [m_in * m_out for m_in, m_out in arch.shapes] + [m_out for _, m_out in arch.shapes]
    for size in blocks:
        rms = math.sqrt(float(np.mean(thetas[:, off : off + size] ** 2)))
        scale[off : off + size] = rms if rms > 0 else 1.0
        off += size
    return np.zeros(arch.n_params), scale


def fit_accuracy_standardization(accs: np.ndarray, mode: str) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Per-class mean and spread of the accuracy features.

    Accuracies of decent classifiers cluster near 1 and differ by a few
    hundredths, which is too faint for the head to pick up next to the
    parameter encodings unless it is rescaled.
    """
    if mode == "none":
        return None, None
    std = accs.std(axis=0)
    return accs.mean(axis=0), np.where(std > 1e-6, std, 1.0)


def train_meta(records: Sequence[ShadowRecord], variant: str, config: MetaTrainConfig) -> MetaParams:
    """Minibatch training on shadow records; returns the best-validation checkpoint.

    A seeded fraction of the records is held out for validation.  Without a
    holdout the training loss picks the checkpoint.  With several restarts
    the run whose checkpoint has the lowest loss over all records wins.
    """
    arch = check_arch(records)
    thetas, accs, ps = stack_records(records)
    rng = np.random.default_rng([config.seed, 2])
    order = rng.permutation(len(records))
    n_val = int(round(config.validation_fraction * len(records)))
    if config.validation_fraction > 0 and len(records) >= 2:
        n_val = max(n_val, 1)
    n_val = min(n_val, len(records) - 1)
    val, train = order[:n_val], order[n_val:]

    shift, scale = fit_standardization(thetas[train], arch, config.standardize)
    a_shift, a_scale = fit_accuracy_standardization(accs[train], config.standardize)
    # standardize once up front; the stored shift/scale are applied again at inference
    x = thetas if shift is None else (thetas - shift) / scale
    watch = val if n_val else train

    best, best_loss = None, math.inf
    for restart in range(config.restarts):
        seed = config.seed if restart == 0 else int(np.random.SeedSequence([config.seed, restart]).generate_state(1)[0])
        meta = init_meta(arch, variant, seed, config.init_scale)
        meta = replace(meta, acc_shift=a_shift, acc_scale=a_scale)
        if config.epochs:
            meta = _fit(meta, x, accs, ps, train, watch, config, np.random.default_rng([seed, 3]) if restart else rng)
        loss = meta_loss(meta, x, accs, ps) if config.restarts > 1 else 0.0
        if best is None or loss < best_loss:
            best, best_loss = meta, loss
    logger.debug("%s meta: %d restart(s), loss %.6f", variant, config.restarts, best_loss)
    return replace(best, theta_shift=shift, theta_scale=scale)


def _fit(meta, x, accs, ps, train, watch, config, rng) -> MetaParams:
    def score(m):
        return meta_loss(m, x[watch], accs[watch], ps[watch])

    best, best_loss = meta.copy(), score(meta)
    arrays = meta.arrays()
    opt = nn.make_optimizer(config.optimizer, config.learning_rate)
    for _ in range(config.epochs):
        perm = train[rng.permutation(train.size)]
        for start in range(0, perm.size, config.batch_size):
            idx = perm[start : start + config.batch_size]
            _, grads = meta_backward(meta, x[idx], accs[idx], ps[idx])
            if config.weight_decay:
                grads = [g + config.weight_decay * w for g, w in zip(grads, arrays)]
            opt.step(arrays, grads)
        current = score(meta)
        if current < best_loss:
            best, best_loss = meta.copy(), current
    return best


def predict_records(meta: MetaParams, records: Sequence[ShadowRecord]) -> np.ndarray:
    check_arch(records, meta.arch)
    thetas, accs, _ = stack_records(records)
    return meta_forward(meta, thetas, accs)


def attack(meta: MetaParams, target: MlpParams, arch: ArchSpec, aux: LabeledDataset, eps: float | None = None) -> np.ndarray:
    """Estimate the label distribution a target classifier was trained on."""
    if arch != meta.arch:
        raise ArchMismatchError(f"meta was trained for {meta.arch.fingerprint()}, target is {arch.fingerprint()}")
    target.check(arch)
    eps = meta.eps if eps is None else eps
    acc = compute_accuracy_vector(target, arch, aux, eps) if meta.variant == "proposed" else None
    return meta_forward(meta, nn.flatten_params(target), acc)


# -- persistence --------------------------------------------------------------


def save_meta(meta: MetaParams, path: str | Path) -> None:
    doc = {
        "format": META_FORMAT,
        "version": META_VERSION,
        "variant": meta.variant,
        "arch": meta.arch.fingerprint(),
        "eps": meta.eps,
        "omegas": [w.tolist() for w in meta.omegas],
        "head": meta.head.tolist(),
        "theta_shift": None if meta.theta_shift is None else meta.theta_shift.tolist(),
        "theta_scale": None if meta.theta_scale is None else meta.theta_scale.tolist(),
        "acc_shift": None if meta.acc_shift is None else meta.acc_shift.tolist(),
        "acc_scale": None if meta.acc_scale is None else meta.acc_scale.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_meta(path: str | Path, expected_arch: ArchSpec | None = None) -> MetaParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a meta-classifier file ({exc})") from None
    if doc.get("format") != META_FORMAT or doc.get("version") != META_VERSION:
        raise DataError(f"{path}: unsupported meta format {doc.get('format')!r} v{doc.get('version')}")
    arch = ArchSpec.from_fingerprint(doc["arch"])
    if expected_arch is not None and arch != expected_arch:
        raise ArchMismatchError(f"{path}: fingerprint {arch.fingerprint()} != {expected_arch.fingerprint()}")

    def opt(key):
        return None if doc.get(key) is None else np.asarray(doc[key], dtype=float)

    return MetaParams(
        variant=doc["variant"],
        omegas=tuple(np.asarray(w, dtype=float) for w in doc["omegas"]),
        head=np.asarray(doc["head"], dtype=float),
        arch=arch,
        theta_shift=opt("theta_shift"),
        theta_scale=opt("theta_scale"),
        acc_shift=opt("acc_shift"),
        acc_scale=opt("acc_scale"),
        eps=float(doc["eps"]),
    )
