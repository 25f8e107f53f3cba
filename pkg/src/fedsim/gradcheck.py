"""Finite-difference checks for every derivative the strategies rely on.

Four operations are checked against oracles that only evaluate scalar losses:

* ``gradient``     -- analytic gradient vs central differences of the loss
* ``hvp``          -- Hessian-vector product vs mixed second differences of the loss
* ``meta_gradient``-- one-step adapted-loss gradient vs central differences of
  ``F(w - eta grad F(w))``
* ``metasgd``      -- joint (w, alpha) gradient vs central differences of
  ``F_val(w - alpha * grad F_train(w))`` over the concatenated vector
"""

from __future__ import annotations

import copy
import types
from dataclasses import dataclass, field

import numpy as np

from .models import Batch, ModelSpec, build_model
from .rng import rng_substream
from .strategies.personal import metasgd_meta_gradient, perfedavg_meta_gradient

FAMILY_SPECS = {
    "linear": ModelSpec("linear", 3, 2),
    "logistic": ModelSpec("logistic", 3, 1),
    "softmax": ModelSpec("logistic", 3, 3),
    "mlp": ModelSpec("mlp", 2, 1, (4, 3)),
}

THRESHOLDS = {"gradient": 1e-5, "hvp": 1e-4, "meta_gradient": 1e-4, "metasgd": 1e-4}
OPS = tuple(THRESHOLDS)


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def fd_gradient(f, w, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function, step ``rel_step (1 + ||w||)``."""
    w = np.asarray(w, dtype=np.float64)
    h = rel_step * (1.0 + np.linalg.norm(w))
    g = np.empty_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        g[k] = (f(w + e) - f(w - e)) / (2.0 * h)
    return g


def fd_hvp(f, w, v, step: float = 1e-4) -> np.ndarray:
    """``H v`` from loss values only: mixed second differences along ``e_k`` and ``v``."""
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0:
        return np.zeros_like(w)
    u = v / nv
    h = step * (1.0 + np.linalg.norm(w))
    out = np.empty_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        d = h * u
        out[k] = (f(w + e + d) - f(w + e - d) - f(w - e + d) + f(w - e - d)) / (4.0 * h * h)
    return out * nv


def _random_batch(spec: ModelSpec, rng, n: int = 6) -> Batch:
    X = rng.standard_normal(size=(n, spec.input_dim))
    if spec.classifier:
        classes = 2 if spec.output_dim == 1 else spec.output_dim
        Y = rng.integers(0, classes, size=n)
    else:
        Y = rng.standard_normal(size=(n, spec.output_dim))
    return Batch(X, Y)


def _with_gradient(model, gradient_fn):
    """Copy of ``model`` whose ``grad`` is replaced (used to test the checker itself)."""
    if gradient_fn is None:
        return model
    clone = copy.copy(model)
    clone.grad = types.MethodType(lambda self, w, X, Y: gradient_fn(w, X, Y), clone)
    return clone


@dataclass
class GradcheckReport:
    trials: int
    max_error: dict = field(default_factory=dict)  # (family, op) -> worst relative error
    thresholds: dict = field(default_factory=lambda: dict(THRESHOLDS))

    @property
    def failures(self) -> list[tuple[str, str, float]]:
        return [(fam, op, err) for (fam, op), err in sorted(self.max_error.items()) if err >= self.thresholds[op]]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = []
        for (fam, op), err in sorted(self.max_error.items()):
            status = "ok" if err < self.thresholds[op] else "FAIL"
            out.append(f"{fam:10s} {op:14s} max_rel_err={err:.3e} threshold={self.thresholds[op]:.0e} {status}")
        return out


def check_family(spec: ModelSpec, trials: int, seed: int = 0, gradient_fn=None, ops=OPS) -> dict:
    """Worst relative error per op over ``trials`` random (w, batch) draws."""
    model = _with_gradient(build_model(spec), gradient_fn)
    worst = {op: 0.0 for op in ops}
    for k in range(trials):
        rng = rng_substream(seed, "gradcheck." + repr(spec), client_id=k)
        w = 0.5 * rng.standard_normal(model.dim)
        b = _random_batch(spec, rng)
        X, Y = b.inputs, b.targets
        loss = lambda p: model.loss(p, X, Y)
        if "gradient" in ops:
            worst["gradient"] = max(worst["gradient"], relative_error(model.grad(w, X, Y), fd_gradient(loss, w)))
        if "hvp" in ops:
            v = rng.standard_normal(model.dim)
            worst["hvp"] = max(worst["hvp"], relative_error(model.hvp(w, X, Y, v), fd_hvp(loss, w, v)))
        if "meta_gradient" in ops:
            eta = rng.uniform(0.01, 0.1)
            meta_loss = lambda p: model.loss(p - eta * model.grad(p, X, Y), X, Y)
            g = perfedavg_meta_gradient(model, w, b, eta, "second")
            worst["meta_gradient"] = max(worst["meta_gradient"], relative_error(g, fd_gradient(meta_loss, w)))
        if "metasgd" in ops:
            val = _random_batch(spec, rng)
            alpha = rng.uniform(0.01, 0.1, size=model.dim)
            d = model.dim

            def val_loss(z):
                p, a = z[:d], z[d:]
                return model.loss(p - a * model.grad(p, X, Y), val.inputs, val.targets)

            g_w, g_a = metasgd_meta_gradient(model, w, alpha, b, val)
            fd = fd_gradient(val_loss, np.concatenate([w, alpha]))
            worst["metasgd"] = max(worst["metasgd"], relative_error(np.concatenate([g_w, g_a]), fd))
    return worst


def run_gradcheck(families=None, trials: int = 100, seed: int = 0, gradient_fn=None) -> GradcheckReport:
    """Check every op on every family. ``trials=0`` checks nothing and passes.

    ``gradient_fn(w, X, Y)`` replaces the analytic gradient (checker self-test).
    """
    families = list(FAMILY_SPECS) if families is None else list(families)
    report = GradcheckReport(trials)
    if trials <= 0:
        return report
    for fam in families:
        if fam not in FAMILY_SPECS:
            raise KeyError(f"unknown model family {fam!r}; choose from {sorted(FAMILY_SPECS)}")
        for op, err in check_family(FAMILY_SPECS[fam], trials, seed, gradient_fn).items():
            report.max_error[(fam, op)] = err
    return report
