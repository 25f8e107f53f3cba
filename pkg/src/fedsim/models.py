"""Small differentiable models with explicit loss, gradient, HVP and Fisher diagonal.

Three families share one fully connected implementation:

* ``linear``   -- one affine layer, squared error ``0.5 * ||yhat - y||^2``
* ``logistic`` -- one affine layer, cross-entropy (sigmoid for one output,
  softmax otherwise)
* ``mlp``      -- tanh hidden layers, linear output, either loss

Losses are means over the batch. Layers are named ``layer0 .. layerL`` and
each layer's slice stores its weight matrix (row-major, ``in x out``) followed
by its bias.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DivergenceError, StructuralError
from .params import LayerLayout, ParamVector

FAMILIES = ("linear", "logistic", "mlp")
LOSSES = ("squared_error", "cross_entropy")


@dataclass(frozen=True)
class ModelSpec:
    family: str
    input_dim: int
    output_dim: int = 1
    hidden_dims: tuple[int, ...] = ()
    activation: str = "tanh"
    loss_kind: str | None = None
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.family not in FAMILIES:
            raise StructuralError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.loss_kind is None:
            default = "cross_entropy" if self.family == "logistic" else "squared_error"
            object.__setattr__(self, "loss_kind", default)
        if self.loss_kind not in LOSSES:
            raise StructuralError(f"unknown loss {self.loss_kind!r}")
        if self.family == "linear" and self.loss_kind != "squared_error":
            raise StructuralError("linear models use squared_error")
        if self.family == "logistic" and self.loss_kind != "cross_entropy":
            raise StructuralError("logistic models use cross_entropy")
        if self.family != "mlp" and self.hidden_dims:
            raise StructuralError("hidden_dims only apply to mlp models")
        if self.family == "mlp" and not self.bias:
            raise StructuralError("mlp layers always carry a bias")
        if self.activation != "tanh":
            raise StructuralError("only tanh activation is supported")
        if min((self.input_dim, self.output_dim) + self.hidden_dims) < 1:
            raise StructuralError("model dimensions must be >= 1")

    @property
    def classifier(self) -> bool:
        return self.loss_kind == "cross_entropy"

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "loss_kind": self.loss_kind,
            "bias": self.bias,
        }


@dataclass(frozen=True, eq=False)
class Batch:
    """Inputs ``(n, input_dim)`` plus targets.

    Regression targets are stored as ``(n, output_dim)`` floats, classification
    targets as ``(n,)`` integer class indices.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = np.asarray(self.targets)
        if y.dtype.kind in "iub":
            y = y.astype(np.int64).reshape(-1)
        else:
            y = np.array(y, dtype=np.float64)
            if y.ndim == 1:
                y = y.reshape(-1, 1)
        if x.shape[0] < 1:
            raise StructuralError("a batch needs at least one example")
        if y.shape[0] != x.shape[0]:
            raise StructuralError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise StructuralError("batch contains non-finite entries")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.targets[idx])

    @staticmethod
    def concat(batches) -> "Batch":
        return Batch(
            np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.targets for b in batches]),
        )


def _softplus(z):
    return np.logaddexp(0.0, z)


class Model:
    """Array-level implementation of a :class:`ModelSpec`.

    Methods take raw float64 arrays; the module-level functions wrap them with
    :class:`ParamVector` bookkeeping.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        dims = (spec.input_dim,) + spec.hidden_dims + (spec.output_dim,)
        self.shapes = list(zip(dims[:-1], dims[1:]))
        sizes = []
        for k, (i, o) in enumerate(self.shapes):
            sizes.append((f"layer{k}", i * o + (o if spec.bias else 0)))
        self.layout = LayerLayout.from_sizes(sizes)
        self.dim = self.layout.dim

    # -- parameters -------------------------------------------------------
    def unpack(self, w: np.ndarray):
        out = []
        pos = 0
        for i, o in self.shapes:
            W = w[pos:pos + i * o].reshape(i, o)
            pos += i * o
            if self.spec.bias:
                b = w[pos:pos + o]
                pos += o
            else:
                b = None
            out.append((W, b))
        return out

    def init(self, rng: np.random.Generator) -> np.ndarray:
        parts = []
        for i, o in self.shapes:
            limit = np.sqrt(6.0 / (i + o))
            parts.append(rng.uniform(-limit, limit, size=i * o))
            if self.spec.bias:
                parts.append(np.zeros(o))
        return np.concatenate(parts)

    # -- forward / backward -----------------------------------------------
    def _forward(self, w, X):
        layers = self.unpack(w)
        acts = [X]
        a = X
        for k, (W, b) in enumerate(layers):
            z = a @ W
            if b is not None:
                z = z + b
            if k < len(layers) - 1:
                a = np.tanh(z)
                acts.append(a)
            else:
                a = z
        return layers, acts, a

    def output(self, w, X) -> np.ndarray:
        return self._forward(w, X)[2]

    def predict(self, w, X) -> np.ndarray:
        """Regression outputs, or class probabilities for classifiers."""
        z = self.output(w, X)
        if not self.spec.classifier:
            return z
        if z.shape[1] == 1:
            p1 = 1.0 / (1.0 + np.exp(-z[:, 0]))
            return np.column_stack([1.0 - p1, p1])
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def _per_example_loss(self, z, Y):
        if not self.spec.classifier:
            return 0.5 * np.sum((z - Y) ** 2, axis=1)
        if z.shape[1] == 1:
            zz = z[:, 0]
            return _softplus(zz) - Y * zz
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=1))
        return lse - z[np.arange(z.shape[0]), Y]

    def _output_delta(self, z, Y):
        """d loss_j / d z_j for each example j (not divided by n)."""
        if not self.spec.classifier:
            return z - Y
        if z.shape[1] == 1:
            return (1.0 / (1.0 + np.exp(-z[:, 0])) - Y).reshape(-1, 1)
        zs = z - z.max(axis=1, keepdims=True)
        p = np.exp(zs)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(z.shape[0]), Y] -= 1.0
        return p

    def loss(self, w, X, Y) -> float:
        z = self.output(w, X)
        val = float(np.mean(self._per_example_loss(z, Y)))
        if not np.isfinite(val):
            raise DivergenceError("loss is not finite")
        return val

    def loss_from_predictions(self, pred, Y) -> float:
        """Loss of already-computed :meth:`predict` outputs (used by ensembles)."""
        if not self.spec.classifier:
            return float(np.mean(0.5 * np.sum((pred - Y) ** 2, axis=1)))
        p = np.clip(pred[np.arange(pred.shape[0]), Y], 1e-300, None)
        return float(np.mean(-np.log(p)))

    def accuracy(self, w, X, Y) -> float | None:
        if not self.spec.classifier:
            return None
        return self.accuracy_from_predictions(self.predict(w, X), Y)

    @staticmethod
    def accuracy_from_predictions(pred, Y) -> float:
        return float(np.mean(np.argmax(pred, axis=1) == Y))

    def _backward(self, w, X, Y, per_example: bool):
        layers, acts, z = self._forward(w, X)
        n = X.shape[0]
        delta = self._output_delta(z, Y)
        if not per_example:
            delta = delta / n
        grads = [None] * len(layers)
        for k in range(len(layers) - 1, -1, -1):
            W, b = layers[k]
            a_prev = acts[k]
            if per_example:
                gW = np.einsum("ni,no->nio", a_prev, delta).reshape(n, -1)
                parts = [gW, delta] if b is not None else [gW]
                grads[k] = np.concatenate(parts, axis=1)
            else:
                gW = (a_prev.T @ delta).reshape(-1)
                parts = [gW, delta.sum(axis=0)] if b is not None else [gW]
                grads[k] = np.concatenate(parts)
            if k > 0:
                delta = (delta @ W.T) * (1.0 - a_prev ** 2)
        g = np.concatenate(grads, axis=-1)
        if not np.all(np.isfinite(g)):
            raise DivergenceError("gradient is not finite")
        return g

    def grad(self, w, X, Y) -> np.ndarray:
        return self._backward(w, X, Y, per_example=False)

    def per_example_grads(self, w, X, Y) -> np.ndarray:
        return self._backward(w, X, Y, per_example=True)

    def loss_and_grad(self, w, X, Y):
        return self.loss(w, X, Y), self.grad(w, X, Y)

    def hvp(self, w, X, Y, v) -> np.ndarray:
        """Hessian-vector product by central differences of the analytic gradient."""
        vnorm = np.linalg.norm(v)
        if vnorm == 0:
            return np.zeros_like(w)
        eps = np.sqrt(np.finfo(float).eps) * (1.0 + np.linalg.norm(w)) / max(vnorm, 1.0)
        return (self.grad(w + eps * v, X, Y) - self.grad(w - eps * v, X, Y)) / (2.0 * eps)

    def fisher_diag(self, w, X, Y) -> np.ndarray:
        return np.mean(self.per_example_grads(w, X, Y) ** 2, axis=0)


@lru_cache(maxsize=None)
def build_model(spec: ModelSpec) -> Model:
    return Model(spec)


def _arr(params, spec: ModelSpec) -> np.ndarray:
    w = np.asarray(params, dtype=np.float64)
    dim = build_model(spec).dim
    if w.shape != (dim,):
        raise StructuralError(f"parameter length {w.size} does not match model dim {dim}")
    return w


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    model = build_model(spec)
    return ParamVector(model.init(rng), model.layout)


def loss(spec: ModelSpec, params, batch: Batch) -> float:
    return build_model(spec).loss(_arr(params, spec), batch.inputs, batch.targets)


def gradient(spec: ModelSpec, params, batch: Batch) -> ParamVector:
    model = build_model(spec)
    return ParamVector(model.grad(_arr(params, spec), batch.inputs, batch.targets), model.layout)


def hvp(spec: ModelSpec, params, batch: Batch, v) -> ParamVector:
    model = build_model(spec)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.dim,):
        raise StructuralError("hvp direction has the wrong length")
    return ParamVector(model.hvp(_arr(params, spec), batch.inputs, batch.targets, v), model.layout)


def fisher_diag(spec: ModelSpec, params, batch: Batch) -> ParamVector:
    model = build_model(spec)
    return ParamVector(model.fisher_diag(_arr(params, spec), batch.inputs, batch.targets), model.layout)
