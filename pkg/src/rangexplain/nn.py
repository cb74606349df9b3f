"""Small dense feed-forward regression networks in numpy.

Networks are stacks of affine layers with ``relu`` or ``identity``
activations ending in a single linear output unit.  Everything here is
deterministic given explicit seeds; there is no global RNG state.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DivergenceError, InputShapeError, ModelFormatError, ValidationError

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2:
            raise ValidationError(f"layer weights must be 2-D, got shape {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise ValidationError(f"bias length {b.shape[0]} does not match {w.shape[0]} output units")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("layer parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def shape(self):
        return self.weights.shape


@dataclass(frozen=True)
class MlpModel:
    """Immutable regression MLP.

    ``loss_history`` holds the per-epoch training MSE of the last
    :func:`train` call that produced this model (index 0 is the loss
    before the first update).
    """

    layers: tuple[Layer, ...]
    feature_names: tuple[str, ...] = ()
    loss_history: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValidationError("a model needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].shape[1] != layers[k - 1].shape[0]:
                raise ValidationError(
                    f"layer {k} expects {layers[k].shape[1]} inputs but layer {k - 1} "
                    f"produces {layers[k - 1].shape[0]}"
                )
        if layers[-1].shape[0] != 1 or layers[-1].activation != "identity":
            raise ValidationError("final layer must have width 1 and identity activation")
        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(layers[0].shape[1]))
        if len(names) != layers[0].shape[1]:
            raise ValidationError(f"{len(names)} feature names for {layers[0].shape[1]} inputs")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "loss_history", tuple(self.loss_history))

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def widths(self) -> list[int]:
        return [layer.shape[0] for layer in self.layers]


@dataclass(frozen=True)
class ForwardTrace:
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    output: float


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    l2_penalty: float = 0.0
    lr_schedule: str = "constant"  # or "linear": decays to zero over the run

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "linear"):
            raise ValidationError("lr_schedule must be 'constant' or 'linear'")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")
        if self.l2_penalty < 0:
            raise ValidationError("l2_penalty must be non-negative")


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _check_batch(model, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InputShapeError(f"expected inputs with {model.input_dim} features, got shape {np.shape(X)}")
    return X, single


def init_mlp(input_dim: int, hidden: Sequence[int] = (32, 32), seed: int = 0,
             feature_names: Sequence[str] = ()) -> MlpModel:
    """Glorot-uniform initialised relu network with zero biases."""
    rng = np.random.default_rng(seed)
    dims = [int(input_dim), *map(int, hidden), 1]
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = "identity" if k == len(dims) - 2 else "relu"
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpModel(tuple(layers), tuple(feature_names))


def forward_batch(model: MlpModel, X) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Pre-activations and activations of every layer for a batch ``(n, d)``."""
    X, _ = _check_batch(model, X)
    pre, post = [], []
    a = X
    for layer in model.layers:
        z = a @ layer.weights.T + layer.bias
        a = _activate(layer.activation, z)
        pre.append(z)
        post.append(a)
    return pre, post


def forward(model: MlpModel, x) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputShapeError(f"forward expects a single feature vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputShapeError("input contains non-finite values")
    pre, post = forward_batch(model, x[None, :])
    return ForwardTrace([p[0] for p in pre], [a[0] for a in post], float(post[-1][0, 0]))


def predict(model: MlpModel, X) -> np.ndarray:
    """Model outputs for a batch; returns shape ``(n,)`` (or a float for one vector)."""
    X, single = _check_batch(model, X)
    a = X
    for layer in model.layers:
        a = _activate(layer.activation, a @ layer.weights.T + layer.bias)
    out = a[:, 0]
    return float(out[0]) if single else out


def forward_from(model: MlpModel, layer_index: int, A) -> np.ndarray:
    """Continue a forward pass from the activations of ``layer_index``.

    ``A`` has shape ``(n, width of layer_index)``; returns outputs ``(n,)``.
    """
    a = np.atleast_2d(np.asarray(A, dtype=np.float64))
    for layer in model.layers[layer_index + 1:]:
        a = _activate(layer.activation, a @ layer.weights.T + layer.bias)
    return a[:, 0]


def _backward(model, pre, seed_grad):
    """Gradient wrt the input given dL/dy for each row (shape (n,))."""
    g = seed_grad[:, None]
    for layer, z in zip(reversed(model.layers), reversed(pre)):
        if layer.activation == "relu":
            g = g * (z > 0)
        g = g @ layer.weights
    return g


def input_gradients(model: MlpModel, X) -> np.ndarray:
    """dy/dx for every row of ``X``; shape ``(n, d)``."""
    X, _ = _check_batch(model, X)
    pre, _ = forward_batch(model, X)
    return _backward(model, pre, np.ones(X.shape[0]))


def input_gradient(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputShapeError(f"input_gradient expects a single feature vector, got shape {x.shape}")
    return input_gradients(model, x[None, :])[0]


def mse(model: MlpModel, X, y) -> float:
    r = predict(model, X) - np.asarray(y, dtype=np.float64)
    return float(np.mean(r * r))


def r2_score(model: MlpModel, X, y) -> float:
    y = np.asarray(y, dtype=np.float64)
    ss_res = np.sum((predict(model, X) - y) ** 2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return float(1.0 - ss_res / ss_tot)


def train(model: MlpModel, dataset, cfg: TrainConfig) -> MlpModel:
    """Mini-batch gradient descent on mean squared error.

    ``dataset`` is anything with ``features`` ``(n, d)`` and ``targets``
    ``(n,)``.  Returns a new model; the input model is not touched.
    """
    X, _ = _check_batch(model, dataset.features)
    y = np.asarray(dataset.targets, dtype=np.float64).reshape(-1)
    if X.shape[0] == 0:
        raise ValidationError("cannot train on an empty dataset")
    if y.shape[0] != X.shape[0]:
        raise InputShapeError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")

    initial = mse(model, X, y)
    if cfg.epochs == 0:
        return dataclasses.replace(model, loss_history=(initial,))

    weights = [layer.weights.copy() for layer in model.layers]
    biases = [layer.bias.copy() for layer in model.layers]
    acts = [layer.activation for layer in model.layers]
    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    history = [initial]
    total_steps, step = cfg.epochs * -(-n // cfg.batch_size), 0

    def current():
        return MlpModel(tuple(Layer(w, b, a) for w, b, a in zip(weights, biases, acts)),
                        model.feature_names)

    # overflow is caught below as divergence; keep numpy quiet meanwhile
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                lr = cfg.learning_rate * (1.0 - step / total_steps if cfg.lr_schedule == "linear" else 1.0)
                step += 1
                xb = X[idx]
                # inline forward/backward; rebuilding immutable models per batch is too slow
                inputs, pre = [xb], []
                a = xb
                for w, b, act in zip(weights, biases, acts):
                    z = a @ w.T + b
                    a = _activate(act, z)
                    pre.append(z)
                    inputs.append(a)
                g = (a[:, 0] - y[idx])[:, None] / len(idx)
                for k in range(len(weights) - 1, -1, -1):
                    if acts[k] == "relu":
                        g = g * (pre[k] > 0)
                    gw = g.T @ inputs[k]
                    gb = g.sum(axis=0)
                    g = g @ weights[k]
                    if cfg.l2_penalty:
                        gw = gw + cfg.l2_penalty * weights[k]
                    weights[k] -= lr * gw
                    biases[k] -= lr * gb
            if not all(np.all(np.isfinite(w)) for w in weights):
                raise DivergenceError(epoch)
            loss = mse(current(), X, y)
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            history.append(loss)
    if history[-1] > history[0]:
        log.warning("final training loss %.6g exceeds initial loss %.6g", history[-1], history[0])
    return dataclasses.replace(current(), loss_history=tuple(history))


# ---------------------------------------------------------------- text format

def dumps_model(model: MlpModel) -> str:
    lines = [f"mlp v1 {model.input_dim}"]
    for layer in model.layers:
        rows, cols = layer.shape
        lines.append(f"layer {rows} {cols} {layer.activation}")
        for row in layer.weights:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(" ".join(repr(float(v)) for v in layer.bias))
    lines.append("features " + ",".join(model.feature_names))
    return "\n".join(lines) + "\n"


def _floats(text, lineno, field, expected):
    parts = text.split()
    if len(parts) != expected:
        raise ModelFormatError(f"expected {expected} values, found {len(parts)}", lineno, field)
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ModelFormatError(str(exc), lineno, field) from None


def loads_model(text: str) -> MlpModel:
    lines = text.splitlines()
    pos = 0

    def take(field):
        nonlocal pos
        if pos >= len(lines):
            raise ModelFormatError("unexpected end of file", pos + 1, field)
        pos += 1
        return pos, lines[pos - 1]

    lineno, header = take("header")
    parts = header.split()
    if len(parts) != 3 or parts[:2] != ["mlp", "v1"]:
        raise ModelFormatError(f"bad header {header!r}", lineno, "header")
    try:
        input_dim = int(parts[2])
    except ValueError:
        raise ModelFormatError("input_dim is not an integer", lineno, "input_dim") from None

    layers, names = [], None
    while pos < len(lines):
        lineno, line = take("layer")
        if not line.strip():
            continue
        if line.startswith("features"):
            names = [s for s in line[len("features"):].strip().split(",") if s]
            break
        head = line.split()
        if len(head) != 4 or head[0] != "layer":
            raise ModelFormatError(f"expected 'layer <rows> <cols> <activation>', got {line!r}", lineno, "layer")
        try:
            rows, cols = int(head[1]), int(head[2])
        except ValueError:
            raise ModelFormatError("layer dims must be integers", lineno, "layer") from None
        if head[3] not in ACTIVATIONS:
            raise ModelFormatError(f"unknown activation {head[3]!r}", lineno, "activation")
        w = []
        for r in range(rows):
            ln, row = take(f"weights[{r}]")
            w.append(_floats(row, ln, f"weights[{r}]", cols))
        ln, brow = take("bias")
        b = _floats(brow, ln, "bias", rows)
        try:
            layers.append(Layer(np.array(w).reshape(rows, cols), np.array(b), head[3]))
        except ValidationError as exc:
            raise ModelFormatError(str(exc), lineno, "layer") from None
    if names is None:
        raise ModelFormatError("missing trailing 'features' line", pos, "features")
    if not layers:
        raise ModelFormatError("no layers", pos, "layer")
    if layers[0].shape[1] != input_dim:
        raise ValidationError(f"header declares input_dim {input_dim} but first layer has {layers[0].shape[1]} inputs")
    return MlpModel(tuple(layers), tuple(names))


def save_model(model: MlpModel, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> MlpModel:
    return loads_model(Path(path).read_text())
