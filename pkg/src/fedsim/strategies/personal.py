"""Personalized and meta-learning strategies.

Each produces a per-client model for evaluation; some also keep a global one.
"""

from __future__ import annotations

import warnings

import numpy as np

from ..engine import ClientState, StrategyState
from ..errors import ConfigError, DomainError
from ..models import Batch
from ..params import ParamVector, weighted_average
from .base import FedAvgLike, Strategy


class LocalOnly(Strategy):
    """Every client trains its own model and never communicates."""

    name = "local"
    family = "personal"
    summary = "local training only (no federation baseline)"

    def init_client(self, ctx, cid, state):
        return ClientState(cid, {"beta": state.w.values})

    def round_payload(self, state, t, selected, ctx, rng):
        return {c: {} for c in selected}

    def client_update(self, payload, cstate, data, rng, ctx):
        beta = ctx.local_train(cstate.get("beta"), data.train, rng, client_id=cstate.client_id)
        return {}, cstate.evolve(beta=beta)

    def aggregate(self, state, uplinks, t, ctx, rng):
        return state

    def eval_params(self, state, cstate, data, ctx):
        return cstate.get("beta")


def ttp_finetune(model, w_star, batch: Batch, steps: int, lr: float, variant: str = "plain",
                 mu: float = 0.0, fisher=None) -> np.ndarray:
    """Personalize a trained global model by a few full-batch gradient steps.

    ``variant`` is ``"plain"``, ``"prox"`` (adds ``mu/2 ||b - w*||^2``) or
    ``"ewc"`` (adds ``mu/2 sum_j F_j (b_j - w*_j)^2`` with ``F`` the Fisher
    diagonal at ``w*``, computed from ``batch`` when not given).
    """
    if steps < 0:
        raise DomainError("steps must be >= 0")
    w_star = np.asarray(w_star, dtype=np.float64)
    X, Y = batch.inputs, batch.targets
    if variant == "plain":
        pull = np.zeros_like(w_star)
    elif variant == "prox":
        pull = np.full_like(w_star, mu)
    elif variant == "ewc":
        fi = model.fisher_diag(w_star, X, Y) if fisher is None else np.asarray(fisher, dtype=np.float64)
        pull = mu * fi
    else:
        raise ConfigError(f"unknown fine-tuning variant {variant!r}")
    b = w_star.copy()
    for _ in range(steps):
        b = b - lr * (model.grad(b, X, Y) + pull * (b - w_star))
    return b


class TrainThenPersonalize(FedAvgLike):
    """FedAvg training; each client is scored after fine-tuning the global model."""

    name = "ttp"
    family = "personal"
    summary = "FedAvg, then per-client fine-tuning (plain, prox or ewc)"
    defaults = {"steps": 5, "variant": "plain", "mu": 1.0, "lr": None}

    def check_hyper(self):
        if self.hyper["variant"] not in ("plain", "prox", "ewc"):
            raise ConfigError("ttp: variant must be plain, prox or ewc")
        if int(self.hyper["steps"]) < 0:
            raise ConfigError("ttp: steps must be >= 0")

    def eval_params(self, state, cstate, data, ctx):
        h = self.hyper
        lr = ctx.config.lr_local if h["lr"] is None else h["lr"]
        return ttp_finetune(ctx.model, state.w.values, data.train, int(h["steps"]), lr, h["variant"], h["mu"])


class Ditto(Strategy):
    """Global model by FedAvg; personal model pulled toward the broadcast global.

    The personal update is ``b <- b - lr (grad F_i(b) + mu (b - w))``. It never
    leaves the client.
    """

    name = "ditto"
    family = "personal"
    summary = "FedAvg global model plus regularized personal models"
    defaults = {"mu": 1.0}

    def check_hyper(self):
        if self.hyper["mu"] < 0:
            raise ConfigError("ditto: mu must be >= 0")

    def init_client(self, ctx, cid, state):
        return ClientState(cid, {"beta": state.w.values})

    def client_update(self, payload, cstate, data, rng, ctx):
        mu, w, grad = self.hyper["mu"], payload["w"], ctx.model.grad
        # Personal model first so mu=0 consumes the random stream exactly like local training.
        fn = lambda b, X, Y: grad(b, X, Y) + mu * (b - w)
        beta = ctx.local_train(cstate.get("beta"), data.train, rng, fn, client_id=cstate.client_id)
        w_i = ctx.local_train(w, data.train, rng, client_id=cstate.client_id)
        return {"w": w_i}, cstate.evolve(beta=beta)

    def aggregate(self, state, uplinks, t, ctx, rng):
        return state.evolve(ctx.fedavg_step(state.w.values, {c: u["w"] for c, u in uplinks.items()}))

    def eval_params(self, state, cstate, data, ctx):
        return cstate.get("beta")


def moreau_prox_solve(grad_fn, w, mu: float, lr: float, tol: float, max_steps: int, start=None):
    """Approximate ``argmin_b F(b) + mu/2 ||b - w||^2``.

    Uses the semi-implicit step ``b <- (b - lr grad F(b) + lr mu w) / (1 + lr mu)``
    until the gradient of the envelope objective drops below ``tol``. Returns
    ``(b, gradient_norm, steps)``.
    """
    w = np.asarray(w, dtype=np.float64)
    b = w.copy() if start is None else np.array(start, dtype=np.float64)
    g = grad_fn(b)
    gnorm = float(np.linalg.norm(g + mu * (b - w)))
    steps = 0
    while gnorm >= tol and steps < max_steps:
        b = (b - lr * g + lr * mu * w) / (1.0 + lr * mu)
        g = grad_fn(b)
        gnorm = float(np.linalg.norm(g + mu * (b - w)))
        steps += 1
    return b, gnorm, steps


def moreau_residual(grad, b, w, mu: float) -> float:
    """``||b - (w - grad / mu)||`` where ``grad`` is the loss gradient at ``b``."""
    return float(np.linalg.norm(np.asarray(b) - (np.asarray(w) - np.asarray(grad) / mu)))


class PFedMe(Strategy):
    """Moreau-envelope personalization.

    Each selected client solves its envelope problem to gradient tolerance
    ``tol`` (full batch, warm-started from its previous personal model, at
    most ``max_inner_steps`` steps) and uplinks ``mu * eta_l * (b - w)``. The
    server moves ``w`` by ``lr_server`` times the weighted mean of those
    updates. The fixed-point residual of each solve is reported in the
    round's ``client_diag``.
    """

    name = "pfedme"
    family = "personal"
    summary = "Moreau-envelope personal models with a global anchor"
    defaults = {"mu": 15.0, "eta_l": 0.01, "inner_lr": None, "tol": 1e-6, "max_inner_steps": 1000}

    def check_hyper(self):
        h = self.hyper
        if not h["mu"] > 0:
            raise ConfigError("pfedme: mu must be > 0")
        if not h["eta_l"] > 0 or not h["tol"] > 0 or int(h["max_inner_steps"]) < 1:
            raise ConfigError("pfedme: eta_l, tol and max_inner_steps must be positive")

    def init_client(self, ctx, cid, state):
        return ClientState(cid, {"beta": state.w.values})

    def client_update(self, payload, cstate, data, rng, ctx):
        h = self.hyper
        w = payload["w"]
        lr = ctx.config.lr_local if h["inner_lr"] is None else h["inner_lr"]
        X, Y = data.train.inputs, data.train.targets
        gf = lambda b: ctx.model.grad(b, X, Y)
        b, gnorm, steps = moreau_prox_solve(gf, w, h["mu"], lr, h["tol"], int(h["max_inner_steps"]), cstate.get("beta"))
        residual = moreau_residual(gf(b), b, w, h["mu"])
        delta = h["mu"] * h["eta_l"] * (b - w)
        diag = {"residual": residual, "inner_steps": steps}
        return {"delta": delta, "diag": diag}, cstate.evolve(beta=b)

    def aggregate(self, state, uplinks, t, ctx, rng):
        ids = sorted(uplinks)
        step = weighted_average([uplinks[c]["delta"] for c in ids], ctx.agg_weights(ids))
        return state.evolve(state.w.values + ctx.config.lr_server * step)

    def eval_params(self, state, cstate, data, ctx):
        return cstate.get("beta")


class L2GD(Strategy):
    """Loopless local gradient descent with random mixing rounds.

    Each round the server flips one coin. With probability ``1 - p`` every
    client takes a local step ``b <- b - lr/(N(1-p)) grad F_i(b)``; with
    probability ``p`` clients upload ``b_i`` and each is mixed toward the
    average, ``b <- (1 - c) b + c mean(b)`` with ``c = alpha mu / (N p)``. The
    mixed models reach clients with the next broadcast; evaluation already
    uses them.
    """

    name = "l2gd"
    family = "personal"
    summary = "randomized local steps and mixing toward the average"
    defaults = {"p": 0.2, "alpha": 0.1, "mu": 1.0}
    full_participation = True

    def check_hyper(self):
        p = self.hyper["p"]
        if not 0 < p < 1:
            raise ConfigError("l2gd: p must be strictly between 0 and 1")
        if self.hyper["alpha"] < 0 or self.hyper["mu"] < 0:
            raise ConfigError("l2gd: alpha and mu must be >= 0")

    def mix_coef(self, N: int) -> float:
        h = self.hyper
        return h["alpha"] * h["mu"] / (N * h["p"])

    def init_server(self, ctx, rng):
        return StrategyState(ParamVector(ctx.init_params(), ctx.layout), {"mean": None, "mixes": 0})

    def init_client(self, ctx, cid, state):
        return ClientState(cid, {"beta": state.w.values})

    def round_payload(self, state, t, selected, ctx, rng):
        mix = int(rng.random() < self.hyper["p"])
        mean = state.server["mean"]
        if mean is None:
            return {c: {"mix": mix} for c in selected}
        return {c: {"mix": mix, "mean": mean} for c in selected}

    def _apply_pending(self, beta, mean, N):
        c = self.mix_coef(N)
        return (1.0 - c) * beta + c * mean

    def client_update(self, payload, cstate, data, rng, ctx):
        beta = cstate.get("beta")
        if "mean" in payload:
            beta = self._apply_pending(beta, payload["mean"], ctx.N)
        if payload["mix"]:
            return {"beta": beta}, cstate.evolve(beta=beta)
        step = ctx.config.lr_local / (ctx.N * (1.0 - self.hyper["p"]))
        beta = beta - step * ctx.model.grad(beta, data.train.inputs, data.train.targets)
        return {}, cstate.evolve(beta=beta)

    def aggregate(self, state, uplinks, t, ctx, rng):
        ids = sorted(c for c, u in uplinks.items() if "beta" in u)
        if not ids:
            return state.evolve(mean=None)
        mean = weighted_average([uplinks[c]["beta"] for c in ids], np.ones(len(ids)))
        return state.evolve(mean, mean=mean, mixes=state.server["mixes"] + 1)

    def eval_params(self, state, cstate, data, ctx):
        mean = state.server["mean"]
        beta = cstate.get("beta")
        return beta if mean is None else self._apply_pending(beta, mean, ctx.N)


class FedPer(Strategy):
    """Share part of the network, keep the rest on the client.

    ``boundary`` names the last layer of the base. In ``fedper`` mode the base
    (layers up to and including the boundary) is shared and the head is
    personal; ``lgfedavg`` shares the top and keeps the base personal.
    ``boundary=None`` makes the base empty; ``"auto"`` puts the boundary just
    below the output layer.
    """

    name = "fedper"
    family = "personal"
    summary = "shared base layers, personal head"
    defaults = {"boundary": "auto", "mode": "fedper"}

    def check_hyper(self):
        if self.hyper["mode"] not in ("fedper", "lgfedavg"):
            raise ConfigError(f"{self.name}: mode must be fedper or lgfedavg")

    def cut(self, ctx) -> int:
        b = self.hyper["boundary"]
        names = ctx.layout.names
        if b == "auto":
            b = names[-2] if len(names) > 1 else None
        try:
            return ctx.layout.boundary_index(b)
        except Exception as exc:
            raise ConfigError(f"{self.name}: {exc}") from exc

    def validate(self, ctx):
        self.cut(ctx)

    def shared_slice(self, ctx) -> slice:
        cut = self.cut(ctx)
        return slice(0, cut) if self.hyper["mode"] == "fedper" else slice(cut, ctx.dim)

    def init_client(self, ctx, cid, state):
        return ClientState(cid, {"beta": state.w.values})

    def round_payload(self, state, t, selected, ctx, rng):
        shared = state.w.values[self.shared_slice(ctx)]
        return {c: {"shared": shared} for c in selected}

    def _merged(self, beta, shared, sl):
        w = np.array(beta)
        w[sl] = shared
        return w

    def client_update(self, payload, cstate, data, rng, ctx):
        sl = self.shared_slice(ctx)
        start = self._merged(cstate.get("beta"), payload["shared"], sl)
        beta = ctx.local_train(start, data.train, rng, client_id=cstate.client_id)
        return {"shared": beta[sl]}, cstate.evolve(beta=beta)

    def aggregate(self, state, uplinks, t, ctx, rng):
        sl = self.shared_slice(ctx)
        if sl.stop - sl.start == 0:
            return state
        w = state.w.values
        new_shared = ctx.fedavg_step(w[sl], {c: u["shared"] for c, u in uplinks.items()})
        return state.evolve(self._merged(w, new_shared, sl))

    def eval_params(self, state, cstate, data, ctx):
        sl = self.shared_slice(ctx)
        return self._merged(cstate.get("beta"), state.w.values[sl], sl)


class LGFedAvg(FedPer):
    name = "lgfedavg"
    summary = "shared top layers, personal base"
    defaults = {"boundary": "auto", "mode": "lgfedavg"}


def apfl_local_gradient(grad_at, beta, w_star, zeta: float) -> np.ndarray:
    """Gradient in ``beta`` of ``F(zeta beta + (1 - zeta) w*)``.

    ``grad_at(x)`` evaluates the loss gradient at a point.
    """
    mixed = zeta * np.asarray(beta) + (1.0 - zeta) * np.asarray(w_star)
    return zeta * grad_at(mixed)


class APFL(Strategy):
    """Personal model used through a fixed mixture with the global model."""

    name = "apfl"
    family = "personal"
    summary = "personal model mixed with the global model at a fixed ratio"
    defaults = {"zeta": 0.5}

    def check_hyper(self):
        z = self.hyper["zeta"]
        if not 0 <= z <= 1:
            raise ConfigError("apfl: zeta must be in [0, 1]")
        if z == 0:
            warnings.warn("apfl: zeta=0 gives a zero personal gradient; personal models never move", stacklevel=3)

    def init_client(self, ctx, cid, state):
        return ClientState(cid, {"beta": state.w.values})

    def client_update(self, payload, cstate, data, rng, ctx):
        z, w, grad = self.hyper["zeta"], payload["w"], ctx.model.grad
        w_i = ctx.local_train(w, data.train, rng, client_id=cstate.client_id)
        fn = lambda b, X, Y: apfl_local_gradient(lambda x: grad(x, X, Y), b, w, z)
        beta = ctx.local_train(cstate.get("beta"), data.train, rng, fn, client_id=cstate.client_id)
        return {"w": w_i}, cstate.evolve(beta=beta)

    def aggregate(self, state, uplinks, t, ctx, rng):
        return state.evolve(ctx.fedavg_step(state.w.values, {c: u["w"] for c, u in uplinks.items()}))

    def eval_params(self, state, cstate, data, ctx):
        z = self.hyper["zeta"]
        return z * cstate.get("beta") + (1.0 - z) * state.w.values


def perfedavg_meta_gradient(model, w, batch: Batch, eta: float, order: str = "second",
                            inner_steps: int = 1) -> np.ndarray:
    """Gradient of ``F(u_K)`` in ``w`` where ``u_0 = w``, ``u_{j+1} = u_j - eta grad F(u_j)``.

    ``order="first"`` drops the Hessian terms and returns ``grad F(u_K)``.
    Hessian-vector products are taken by finite differences.
    """
    if order not in ("first", "second"):
        raise ConfigError("order must be 'first' or 'second'")
    X, Y = batch.inputs, batch.targets
    us = [np.asarray(w, dtype=np.float64)]
    for _ in range(inner_steps):
        us.append(us[-1] - eta * model.grad(us[-1], X, Y))
    g = model.grad(us[-1], X, Y)
    if order == "first" or eta == 0:
        return g
    for u in reversed(us[:-1]):
        g = g - eta * model.hvp(u, X, Y, g)
    return g


def adapt(model, w, batch: Batch, steps: int, lr) -> np.ndarray:
    """``steps`` full-batch gradient steps; ``lr`` may be a per-coordinate vector."""
    w = np.asarray(w, dtype=np.float64)
    for _ in range(steps):
        w = w - lr * model.grad(w, batch.inputs, batch.targets)
    return w


class PerFedAvg(Strategy):
    """Federated MAML: clients descend the one-step-adapted loss.

    ``alpha`` is the adaptation step (defaults to ``lr_local``), ``beta`` the
    meta step (defaults to ``lr_local``). With ``schedule="fedavg_then_meta"``
    the first ``switch_fraction`` of rounds run plain FedAvg. Clients are
    scored after ``eval_adapt_steps`` adaptation steps on their training data.
    """

    name = "perfedavg"
    family = "meta"
    summary = "meta-learned initialization adapted per client"
    defaults = {"alpha": None, "beta": None, "order": "second", "inner_steps": 1,
                "schedule": "meta_only", "switch_fraction": 0.5, "eval_adapt_steps": 1}

    def check_hyper(self):
        h = self.hyper
        if h["order"] not in ("first", "second"):
            raise ConfigError("perfedavg: order must be first or second")
        if h["schedule"] not in ("meta_only", "fedavg_then_meta"):
            raise ConfigError("perfedavg: schedule must be meta_only or fedavg_then_meta")
        if not 0 <= h["switch_fraction"] <= 1:
            raise ConfigError("perfedavg: switch_fraction must be in [0, 1]")
        if int(h["inner_steps"]) < 1 or int(h["eval_adapt_steps"]) < 0:
            raise ConfigError("perfedavg: inner_steps >= 1 and eval_adapt_steps >= 0 required")

    def _lr(self, key, ctx):
        v = self.hyper[key]
        return ctx.config.lr_local if v is None else v

    def meta_phase(self, t: int, ctx) -> bool:
        if self.hyper["schedule"] == "meta_only":
            return True
        return t >= int(round(self.hyper["switch_fraction"] * ctx.config.rounds))

    def round_payload(self, state, t, selected, ctx, rng):
        w = state.w.values
        meta = int(self.meta_phase(t, ctx))
        return {c: {"w": w, "meta": meta} for c in selected}

    def client_update(self, payload, cstate, data, rng, ctx):
        w = payload["w"]
        if not payload["meta"]:
            return {"w": ctx.local_train(w, data.train, rng, client_id=cstate.client_id)}, cstate
        h = self.hyper
        alpha = self._lr("alpha", ctx)
        fn = lambda x, X, Y: perfedavg_meta_gradient(ctx.model, x, Batch(X, Y), alpha, h["order"], int(h["inner_steps"]))
        w_i = ctx.local_train(w, data.train, rng, fn, client_id=cstate.client_id, lr=self._lr("beta", ctx))
        return {"w": w_i}, cstate

    def aggregate(self, state, uplinks, t, ctx, rng):
        return state.evolve(ctx.fedavg_step(state.w.values, {c: u["w"] for c, u in uplinks.items()}))

    def eval_params(self, state, cstate, data, ctx):
        return adapt(ctx.model, state.w.values, data.train, int(self.hyper["eval_adapt_steps"]), self._lr("alpha", ctx))


def split_train_val(batch: Batch, val_fraction: float) -> tuple[Batch, Batch]:
    """Leading rows train, trailing rows validate; both halves non-empty when n >= 2."""
    n = batch.n
    if n < 2:
        raise DomainError("a train/validation split needs at least two examples")
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    return batch.take(slice(0, n - n_val)), batch.take(slice(n - n_val, n))


def metasgd_meta_gradient(model, w, alpha, train: Batch, val: Batch):
    """Gradients of ``F_val(w - alpha * grad F_train(w))`` in ``w`` and in ``alpha``."""
    w = np.asarray(w, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    g_tr = model.grad(w, train.inputs, train.targets)
    u = model.grad(w - alpha * g_tr, val.inputs, val.targets)
    g_w = u - model.hvp(w, train.inputs, train.targets, alpha * u)
    g_alpha = -g_tr * u
    return g_w, g_alpha


class MetaSGD(Strategy):
    """Per-FedAvg with a learned per-coordinate adaptation rate.

    Each client splits its training data into an adaptation part and a
    validation part. ``alpha`` starts at ``alpha_init`` (default ``lr_local``)
    in every coordinate; ``learn_alpha=False`` freezes it.
    """

    name = "metasgd"
    family = "meta"
    summary = "meta-learned initialization and per-coordinate step sizes"
    defaults = {"meta_lr": None, "alpha_init": None, "val_fraction": 0.5, "learn_alpha": True, "eval_adapt_steps": 1}

    def check_hyper(self):
        if not 0 < self.hyper["val_fraction"] < 1:
            raise ConfigError("metasgd: val_fraction must be in (0, 1)")

    def validate(self, ctx):
        if int(ctx.sizes.min()) < 2:
            raise ConfigError("metasgd: every client needs at least two training examples")

    def init_server(self, ctx, rng):
        a0 = ctx.config.lr_local if self.hyper["alpha_init"] is None else self.hyper["alpha_init"]
        return StrategyState(ParamVector(ctx.init_params(), ctx.layout), {"alpha": np.full(ctx.dim, float(a0))})

    def round_payload(self, state, t, selected, ctx, rng):
        w, a = state.w.values, state.server["alpha"]
        return {c: {"w": w, "alpha": a} for c in selected}

    def client_update(self, payload, cstate, data, rng, ctx):
        h = self.hyper
        lr = ctx.config.lr_local if h["meta_lr"] is None else h["meta_lr"]
        train, val = split_train_val(data.train, h["val_fraction"])
        w, alpha = np.array(payload["w"]), np.array(payload["alpha"])
        steps = ctx.local_steps(data.n_i, cstate.client_id)
        for _ in range(steps):
            g_w, g_a = metasgd_meta_gradient(ctx.model, w, alpha, train, val)
            w = w - lr * g_w
            if h["learn_alpha"]:
                alpha = alpha - lr * g_a
        return {"w": w, "alpha": alpha}, cstate

    def aggregate(self, state, uplinks, t, ctx, rng):
        ids = sorted(uplinks)
        w = ctx.fedavg_step(state.w.values, {c: uplinks[c]["w"] for c in ids})
        alpha = weighted_average([uplinks[c]["alpha"] for c in ids], ctx.agg_weights(ids))
        return state.evolve(w, alpha=alpha)

    def eval_params(self, state, cstate, data, ctx):
        return adapt(ctx.model, state.w.values, data.train, int(self.hyper["eval_adapt_steps"]), state.server["alpha"])

    def record_extra(self, state, ctx):
        a = state.server["alpha"]
        return {"alpha_mean": float(a.mean()), "alpha_min": float(a.min()), "alpha_max": float(a.max())}
