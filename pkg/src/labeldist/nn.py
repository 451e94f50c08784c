"""Fully connected classifiers in plain numpy.

Parameters are stored as ``W_l`` of shape ``(m_{l-1}, m_l)`` and ``b_l`` of
length ``m_l`` so that a layer computes ``h @ W_l + b_l``.

``layer_sizes`` always ends with the class count C.  A sigmoid head (C = 2)
is realized as a single output unit whose value ``s`` is the probability of
class 0, exposed as the pair ``(s, 1 - s)``; its last weight matrix therefore
has one column.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArchMismatchError, ConfigError, DataError, NumericError

HIDDEN_ACTIVATIONS = ("relu", "elu")
OUTPUT_ACTIVATIONS = ("sigmoid", "softmax")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "softmax"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(m) for m in self.layer_sizes))
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if not self.layer_sizes or min(self.layer_sizes) < 1:
            raise ConfigError(f"layer sizes must be a nonempty list of positive ints: {self.layer_sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output_activation!r}")
        last = self.layer_sizes[-1]
        if last < 2:
            raise ConfigError("the last layer size is the class count and must be at least 2")
        if self.output_activation == "sigmoid" and last != 2:
            raise ConfigError("a sigmoid head is only defined for two classes")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes)

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def unit_counts(self) -> tuple[int, ...]:
        """Neurons actually present per layer."""
        if self.output_activation == "sigmoid":
            return (*self.layer_sizes[:-1], 1)
        return self.layer_sizes

    @property
    def shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.unit_counts)
        return [(dims[i], dims[i + 1]) for i in range(self.n_layers)]

    @property
    def n_params(self) -> int:
        return sum(m_in * m_out + m_out for m_in, m_out in self.shapes)

    def fingerprint(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layers": list(self.layer_sizes),
            "activations": [self.hidden_activation, self.output_activation],
        }

    @classmethod
    def from_fingerprint(cls, fp: dict) -> "ArchSpec":
        hidden, output = fp["activations"]
        return cls(int(fp["input_dim"]), tuple(fp["layers"]), hidden, output)


@dataclass(frozen=True)
class MlpParams:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def copy(self) -> "MlpParams":
        return MlpParams(tuple(w.copy() for w in self.weights), tuple(b.copy() for b in self.biases))

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def check(self, arch: ArchSpec) -> None:
        if len(self.weights) != arch.n_layers or len(self.biases) != arch.n_layers:
            raise ArchMismatchError("layer count does not match the architecture")
        for (m_in, m_out), w, b in zip(arch.shapes, self.weights, self.biases):
            if w.shape != (m_in, m_out) or b.shape != (m_out,):
                raise ArchMismatchError(f"expected W {(m_in, m_out)} / b {(m_out,)}, got {w.shape} / {b.shape}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "adam"
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.init_scale <= 0:
            raise ConfigError(f"invalid training config: {self}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def init_params(arch: ArchSpec, seed: int, init_scale: float = 1.0) -> MlpParams:
    """Uniform ``[-s, s]`` weights with ``s = init_scale / sqrt(fan_in)``; zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for m_in, m_out in arch.shapes:
        s = init_scale / math.sqrt(m_in)
        weights.append(rng.uniform(-s, s, size=(m_in, m_out)))
        biases.append(np.zeros(m_out))
    return MlpParams(tuple(weights), tuple(biases))


# -- activations -----------------------------------------------------------


def elu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def elu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _hidden(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else elu(z)


def _hidden_grad(z, kind):
    return (z > 0).astype(float) if kind == "relu" else elu_grad(z)


# -- forward / loss / backward ---------------------------------------------


def _as_batch(x: np.ndarray, arch: ArchSpec) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise DataError(f"expected inputs of dimension {arch.input_dim}, got shape {x.shape}")
    return x


def _forward_cache(params: MlpParams, arch: ArchSpec, x: np.ndarray):
    pre, post = [], [x]
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        if i < arch.n_layers - 1:
            h = _hidden(z, arch.hidden_activation)
            post.append(h)
    z = pre[-1]
    if arch.output_activation == "sigmoid":
        s = sigmoid(z[:, 0])
        probs = np.stack([s, 1.0 - s], axis=1)
    else:
        probs = softmax(z)
    return pre, post, probs


def forward(params: MlpParams, arch: ArchSpec, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one sample (shape ``(C,)``) or a batch (``(N, C)``)."""
    single = np.ndim(x) == 1
    _, _, probs = _forward_cache(params, arch, _as_batch(x, arch))
    return probs[0] if single else probs


def _check_labels(y: np.ndarray, n: int, arch: ArchSpec) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (n, arch.n_classes):
        raise DataError(f"labels must have shape {(n, arch.n_classes)}, got {y.shape}")
    if n == 0:
        raise DataError("empty dataset")
    return y


def cross_entropy_loss(params: MlpParams, arch: ArchSpec, x: np.ndarray, y: np.ndarray) -> float:
    """Mean over samples of ``-sum_c y_c log f(x)_c`` with probabilities floored at 1e-12."""
    x = _as_batch(x, arch)
    y = _check_labels(y, x.shape[0], arch)
    probs = forward(params, arch, x)
    return float(-np.mean(np.sum(y * np.log(np.clip(probs, PROB_FLOOR, 1.0)), axis=1)))


def backward(params: MlpParams, arch: ArchSpec, x: np.ndarray, y: np.ndarray) -> tuple[float, MlpParams]:
    """Loss and its analytic gradient over a batch."""
    x = _as_batch(x, arch)
    y = _check_labels(y, x.shape[0], arch)
    n = x.shape[0]
    pre, post, probs = _forward_cache(params, arch, x)
    loss = float(-np.mean(np.sum(y * np.log(np.clip(probs, PROB_FLOOR, 1.0)), axis=1)))
    if arch.output_activation == "sigmoid":
        delta = (probs[:, :1] - y[:, :1]) / n
    else:
        delta = (probs - y) / n
    gw, gb = [None] * arch.n_layers, [None] * arch.n_layers
    for i in range(arch.n_layers - 1, -1, -1):
        gw[i] = post[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * _hidden_grad(pre[i - 1], arch.hidden_activation)
    if not (math.isfinite(loss) and all(np.isfinite(g).all() for g in gw)):
        raise NumericError("non-finite loss or gradient")
    return loss, MlpParams(tuple(gw), tuple(gb))


# -- optimisers ------------------------------------------------------------


@dataclass
class Adam:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: list = field(default_factory=list)
    _v: list = field(default_factory=list)
    _t: int = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self._m:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self._t += 1
        c1 = 1.0 - self.beta1**self._t
        c2 = 1.0 - self.beta2**self._t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class SGD:
    learning_rate: float

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.learning_rate * g


def make_optimizer(name: str, learning_rate: float):
    if name == "adam":
        return Adam(learning_rate)
    if name == "sgd":
        return SGD(learning_rate)
    raise ConfigError(f"unknown optimizer {name!r}")


def train_classifier(x: np.ndarray, y: np.ndarray, arch: ArchSpec, config: TrainConfig) -> MlpParams:
    """Minibatch training from ``init_params(arch, config.seed)``.

    Shuffling uses a generator seeded from ``config.seed`` so the result is a
    pure function of the inputs.
    """
    x = _as_batch(x, arch)
    y = _check_labels(y, x.shape[0], arch)
    params = init_params(arch, config.seed, config.init_scale).copy()
    arrays = params.arrays()
    opt = make_optimizer(config.optimizer, config.learning_rate)
    rng = np.random.default_rng([config.seed, 1])
    n = x.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            _, grads = backward(params, arch, x[idx], y[idx])
            opt.step(arrays, grads.arrays())
    return params


def accuracy(params: MlpParams, arch: ArchSpec, x: np.ndarray, y: np.ndarray) -> float:
    probs = forward(params, arch, _as_batch(x, arch))
    return float(np.mean(probs.argmax(axis=1) == np.asarray(y).argmax(axis=1)))


# -- flattening ------------------------------------------------------------


def flatten_params(params: MlpParams) -> np.ndarray:
    """``vec(W_1) ... vec(W_L)`` followed by ``b_1 ... b_L``; each W is read row by row."""
    return np.concatenate([w.ravel() for w in params.weights] + [b.ravel() for b in params.biases])


def unflatten_params(theta: np.ndarray, arch: ArchSpec) -> MlpParams:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (arch.n_params,):
        raise ArchMismatchError(f"expected a vector of length {arch.n_params}, got shape {theta.shape}")
    weights, biases, off = [], [], 0
    for m_in, m_out in arch.shapes:
        weights.append(theta[off : off + m_in * m_out].reshape(m_in, m_out).copy())
        off += m_in * m_out
    for _, m_out in arch.shapes:
        biases.append(theta[off : off + m_out].copy())
        off += m_out
    return MlpParams(tuple(weights), tuple(biases))


def split_flat(thetas: np.ndarray, arch: ArchSpec) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Batched unflatten: ``(K, M)`` into per-layer ``(K, m_in, m_out)`` and ``(K, m_out)`` views."""
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim != 2 or thetas.shape[1] != arch.n_params:
        raise ArchMismatchError(f"expected (K, {arch.n_params}) parameter vectors, got {thetas.shape}")
    k = thetas.shape[0]
    weights, biases, off = [], [], 0
    for m_in, m_out in arch.shapes:
        weights.append(thetas[:, off : off + m_in * m_out].reshape(k, m_in, m_out))
        off += m_in * m_out
    for _, m_out in arch.shapes:
        biases.append(thetas[:, off : off + m_out])
        off += m_out
    return weights, biases


def save_params(params: MlpParams, arch: ArchSpec, path: str | Path) -> None:
    doc = {"format": "labeldist-mlp", "version": 1, "arch": arch.fingerprint(),
           "theta": flatten_params(params).tolist()}
    Path(path).write_text(json.dumps(doc))


def load_params(path: str | Path) -> tuple[MlpParams, ArchSpec]:
    try:
        doc = json.loads(Path(path).read_text())
        arch = ArchSpec.from_fingerprint(doc["arch"])
        return unflatten_params(np.asarray(doc["theta"], dtype=float), arch), arch
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: not a parameter file ({exc})") from exc
