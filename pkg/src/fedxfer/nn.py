"""Dense multi-layer perceptron with hand-written backprop and plain SGD.

Matrices are 2-D ``float64`` numpy arrays in C (row-major) order. A model maps
``n x d_in`` inputs to ``n x k`` outputs; hidden layers share one activation
and the last layer is always linear.

Gradients are accumulated as sums over the batch rows, never means, so a loss
written as a sum over samples is differentiated literally.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError, ProtocolOrderError

ACTIVATIONS = ("tanh", "relu", "identity")

DEFAULT_HIDDEN = (64,)
DEFAULT_LATENT_DIM = 32


def as_matrix(a, name="matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    return np.ascontiguousarray(m)


def matmul(a, b) -> np.ndarray:
    """Row-major matrix product ``a @ b`` with an explicit shape check."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def _activate(kind, pre):
    if kind == "tanh":
        return np.tanh(pre)
    if kind == "relu":
        return np.maximum(pre, 0.0)
    return pre


def _activation_grad(kind, pre, post):
    if kind == "tanh":
        return 1.0 - post * post
    if kind == "relu":
        return (pre > 0.0).astype(np.float64)
    return np.ones_like(pre)


@dataclass
class MlpModel:
    layer_dims: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    hidden_activation: str = "tanh"

    def __post_init__(self):
        if self.hidden_activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.hidden_activation!r}")
        gaps = len(self.layer_dims) - 1
        if len(self.weights) != gaps or len(self.biases) != gaps:
            raise ConfigurationError(
                f"{len(self.layer_dims)} layer dims need {gaps} weight/bias pairs, "
                f"got {len(self.weights)}/{len(self.biases)}"
            )
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_dims[l], self.layer_dims[l + 1])
            if w.shape != want or b.shape != (want[1],):
                raise DimensionError(
                    f"layer {l}: weight {w.shape} / bias {b.shape}, expected {want} / ({want[1]},)"
                )

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
        )

    def parameters(self) -> List[np.ndarray]:
        """Weights and biases interleaved per layer; the arrays are live views."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "hidden_activation": self.hidden_activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        dims = [int(v) for v in d["layer_dims"]]
        weights = [
            np.array(w, dtype=np.float64).reshape(dims[l], dims[l + 1])
            for l, w in enumerate(d["weights"])
        ]
        biases = [np.array(b, dtype=np.float64).reshape(-1) for b in d["biases"]]
        return cls(dims, weights, biases, d.get("hidden_activation", "tanh"))

    def to_json(self) -> str:
        # json writes floats with repr(), the shortest exact round-trip form
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MlpModel":
        return cls.from_dict(json.loads(text))


@dataclass
class ForwardCache:
    """Per-layer inputs, pre-activations and outputs from one forward pass."""

    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    post: List[np.ndarray]

    @property
    def n_rows(self) -> int:
        return self.inputs[0].shape[0]


@dataclass
class ParamGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    input: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def zeros_like(cls, model: MlpModel) -> "ParamGrads":
        return cls(
            [np.zeros_like(w) for w in model.weights],
            [np.zeros_like(b) for b in model.biases],
        )

    def parameters(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def add_(self, other: "ParamGrads", scale: float = 1.0) -> "ParamGrads":
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine += scale * theirs
        return self

    def all_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self.parameters())


def init_model(layer_dims, hidden_activation="tanh", seed=0) -> MlpModel:
    """Build a model with Glorot-uniform weights and zero biases.

    Weights of layer ``l`` are drawn from U(-r, r) with
    ``r = sqrt(6 / (fan_in + fan_out))`` using numpy's PCG64 generator
    (``np.random.default_rng(seed)``), layer by layer in order, so the same
    ``(layer_dims, seed)`` always yields bit-identical parameters.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigurationError(f"layer_dims must list at least two sizes >= 1, got {dims}")
    if hidden_activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {hidden_activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        r = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-r, r, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(dims, weights, biases, hidden_activation)


def default_dims(d_in, latent_dim=DEFAULT_LATENT_DIM, hidden=DEFAULT_HIDDEN) -> List[int]:
    return [int(d_in), *[int(h) for h in hidden], int(latent_dim)]


def forward(model: MlpModel, x):
    """Run the network on the rows of ``x``.

    Returns:
        ``(z, cache)`` where ``z`` is ``n x k`` and ``cache`` is what
        :func:`backward` needs.
    """
    x = as_matrix(x, "input")
    if x.shape[1] != model.input_dim:
        raise DimensionError(
            f"input has {x.shape[1]} features, model expects {model.input_dim}"
        )
    inputs, pre, post = [], [], []
    h = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        a = h @ w + b
        out = a if l == last else _activate(model.hidden_activation, a)
        pre.append(a)
        post.append(out)
        h = out
    if not np.isfinite(h).all():
        raise NumericError("forward pass produced non-finite output")
    return h, ForwardCache(inputs, pre, post)


def backward(model: MlpModel, cache: ForwardCache, upstream) -> ParamGrads:
    """Gradients of ``sum(upstream * z)`` with respect to every parameter.

    ``upstream`` holds dJ/dz for the batch cached by :func:`forward`. The
    returned grads also carry dJ/dx in ``.input``.
    """
    if cache is None:
        raise ProtocolOrderError("backward called without a forward cache")
    g = as_matrix(upstream, "upstream")
    n_layers = len(model.weights)
    if len(cache.inputs) != n_layers:
        raise ProtocolOrderError("forward cache belongs to a different model")
    expected = (cache.n_rows, model.output_dim)
    if g.shape != expected:
        raise ProtocolOrderError(
            f"upstream shape {g.shape} does not match cached output {expected}"
        )
    gw = [None] * n_layers
    gb = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        if l != n_layers - 1:
            g = g * _activation_grad(model.hidden_activation, cache.pre[l], cache.post[l])
        gw[l] = cache.inputs[l].T @ g
        gb[l] = g.sum(axis=0)
        g = g @ model.weights[l].T
    return ParamGrads(gw, gb, input=g)


def sgd_step(model: MlpModel, grads: ParamGrads, lr: float) -> MlpModel:
    """In-place ``p <- p - lr * g`` for every parameter; returns ``model``."""
    if lr < 0 or not math.isfinite(lr):
        raise ConfigurationError(f"learning rate must be finite and >= 0, got {lr}")
    if len(grads.weights) != len(model.weights):
        raise DimensionError("gradient list does not match model depth")
    if not grads.all_finite():
        raise NumericError("non-finite gradient entry")
    for p, g in zip(model.parameters(), grads.parameters()):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        p -= lr * g
    return model
