"""Models, per-example gradients, clipping and the DP-SGD step (plaintext)."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..sampler import UniformSource

MODEL_KINDS = ("logistic_regression", "mlp_3layer")
_MAGIC = b"CPM1"


@dataclass
class Model:
    kind: str
    dims: tuple[int, ...]
    params: np.ndarray

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        want = param_count(self.kind, self.dims)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (want,):
            raise ValueError(f"{self.kind}{self.dims} needs {want} parameters, got {self.params.shape}")

    def copy(self, params: np.ndarray | None = None) -> "Model":
        return Model(self.kind, self.dims, self.params.copy() if params is None else params)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unpack(self.dims, self.params)


def layer_dims(kind: str, dims: tuple[int, ...]) -> tuple[int, ...]:
    if kind == "logistic_regression":
        if len(dims) != 2:
            raise ValueError("logistic regression dims are (inputs, classes)")
    elif len(dims) != 3:
        raise ValueError("mlp_3layer dims are (inputs, hidden, classes)")
    return tuple(dims)


def param_count(kind: str, dims: tuple[int, ...]) -> int:
    d = layer_dims(kind, dims)
    return sum(a * b + b for a, b in zip(d[:-1], d[1:]))


def unpack(dims: tuple[int, ...], params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    out, pos = [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        w = params[pos:pos + a * b].reshape(a, b)
        pos += a * b
        out.append((w, params[pos:pos + b]))
        pos += b
    return out


def init_model(kind: str, dims: tuple[int, ...], src: UniformSource | None = None) -> Model:
    """Zero weights for logistic regression, scaled uniform for the MLP."""
    dims = layer_dims(kind, tuple(int(d) for d in dims))
    params = np.zeros(param_count(kind, dims))
    if kind == "mlp_3layer":
        if src is None:
            raise ValueError("MLP initialisation needs a uniform source")
        pos = 0
        for a, b in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (a + b))
            params[pos:pos + a * b] = (2.0 * src.uniform(a * b) - 1.0) * bound
            pos += a * b + b
    return Model(kind, dims, params)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(model: Model, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    acts, pre = [x], []
    layers = model.layers()
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if i < len(layers) - 1 else z)
    return acts, pre


def predict_logits(model: Model, x: np.ndarray) -> np.ndarray:
    return _forward(model, np.asarray(x, dtype=np.float64))[0][-1]


def per_example_loss(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = predict_logits(model, x)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), np.asarray(y, dtype=np.int64)]


def loss(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(per_example_loss(model, x, y)))


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(predict_logits(model, x), axis=1) == y))


def _output_errors(model: Model, x: np.ndarray, y: np.ndarray):
    """Per-layer (input activation, output error) pairs of one backward pass."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    losses = per_example_loss(model, x, y)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise FloatingPointError(f"non-finite loss at example {int(bad[0])}")
    acts, pre = _forward(model, x)
    layers = model.layers()
    delta = softmax(acts[-1])
    delta[np.arange(len(y)), y] -= 1.0
    pairs = []
    for i in range(len(layers) - 1, -1, -1):
        pairs.append((acts[i], delta))
        if i:
            delta = (delta @ layers[i][0].T) * (pre[i - 1] > 0)
    return pairs[::-1]


def per_example_gradients(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row i is the cross-entropy gradient for example i, in parameter order."""
    rows = len(x)
    parts = []
    for a, delta in _output_errors(model, x, y):
        parts += [(a[:, :, None] * delta[:, None, :]).reshape(rows, -1), delta]
    return np.concatenate(parts, axis=1)


def mean_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Unclipped batch-mean gradient without forming per-example rows."""
    parts = []
    for a, delta in _output_errors(model, x, y):
        parts += [(a.T @ delta).ravel(), delta.sum(axis=0)]
    return np.concatenate(parts) / len(x)


def clip_rows(g: np.ndarray, clip: float) -> np.ndarray:
    if clip <= 0:
        raise ValueError("clip norm must be > 0")
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        factor = np.where(norms > 0, np.minimum(1.0, clip / np.where(norms > 0, norms, 1.0)), 1.0)
    return g * factor


def clip(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """Mean of the rows after scaling each by min(1, K / ||g_i||)."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    return clip_rows(g, clip_norm).mean(axis=0)


def dp_sgd_step(theta, g_mean, psi, lr: float) -> np.ndarray:
    theta, g_mean, psi = (np.asarray(v, dtype=np.float64) for v in (theta, g_mean, psi))
    if theta.shape != g_mean.shape or np.broadcast_shapes(theta.shape, psi.shape) != theta.shape:
        raise ValueError("theta, gradient and noise shapes do not match")
    return theta - lr * (g_mean + psi)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    indices: np.ndarray
    q: float
    population: int

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def expected_size(self) -> float:
        return self.q * self.population


def poisson_subsample(x: np.ndarray, y: np.ndarray, q: float, src: UniformSource) -> Batch:
    """Include every example independently with probability q."""
    if not 0 < q <= 1:
        raise ValueError(f"sampling rate must be in (0, 1], got {q}")
    n = len(y)
    idx = np.arange(n) if q == 1 else np.flatnonzero(src.uniform(n) < q)
    return Batch(x[idx], y[idx], idx, q, n)


# ---------------------------------------------------------------------------
# parameter files


def save_params(model: Model, path) -> None:
    kind = MODEL_KINDS.index(model.kind)
    d = model.dims
    hidden = d[1] if len(d) == 3 else 0
    header = struct.pack("<4sHHII", _MAGIC, kind, hidden, d[0], d[-1])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(model.params.astype("<f8").tobytes())


def load_params(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise ValueError("parameter file shorter than its 16-byte header")
    magic, kind, hidden, d_in, d_out = struct.unpack("<4sHHII", blob[:16])
    if magic != _MAGIC:
        raise ValueError(f"bad parameter file magic {magic!r}")
    if kind >= len(MODEL_KINDS):
        raise ValueError(f"unknown model kind code {kind}")
    name = MODEL_KINDS[kind]
    dims = (d_in, hidden, d_out) if name == "mlp_3layer" else (d_in, d_out)
    params = np.frombuffer(blob[16:], dtype="<f8").astype(np.float64)
    return Model(name, dims, params)
