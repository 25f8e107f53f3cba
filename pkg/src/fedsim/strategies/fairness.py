"""Fairness-aware aggregation: q-FFL, GIFAIR-FL and agnostic (minimax) FL."""

from __future__ import annotations

import warnings

import numpy as np

from ..engine import StrategyState
from ..errors import ConfigError, DomainError
from ..params import ParamVector, weighted_average
from ..sampling import adaptive_sampling_probs  # noqa: F401  (re-exported)
from .base import FedAvgLike

LOSS_FLOOR = 1e-12


def qffl_weights(losses, q: float, p) -> np.ndarray:
    """Per-client weights ``p_i F_i^q`` with losses floored at 1e-12."""
    if q < 0:
        raise DomainError("q must be >= 0")
    F = np.maximum(np.asarray(losses, dtype=np.float64), LOSS_FLOOR)
    return np.asarray(p, dtype=np.float64) * F ** q


def qffl_aggregate(losses, deltas, q: float, p) -> np.ndarray:
    """Server step ``sum p_i F_i^q D_i / sum p_i F_i^q``."""
    return weighted_average(list(deltas), qffl_weights(losses, q, p))


class QFFL(FedAvgLike):
    """Clients report their loss at the broadcast model; updates from worse-off
    clients get more weight (``q = 0`` is FedAvg)."""

    name = "qffl"
    family = "fairness"
    summary = "loss-powered reweighting of client updates"
    defaults = {"q": 1.0}

    def check_hyper(self):
        if self.hyper["q"] < 0:
            raise ConfigError("qffl: q must be >= 0")

    def client_update(self, payload, cstate, data, rng, ctx):
        f = ctx.model.loss(payload["w"], data.train.inputs, data.train.targets)
        up, cstate = super().client_update(payload, cstate, data, rng, ctx)
        return {"w": up["w"], "loss": f}, cstate

    def aggregate(self, state, uplinks, t, ctx, rng):
        ids = sorted(uplinks)
        w = state.w.values
        step = qffl_aggregate([uplinks[c]["loss"] for c in ids], [uplinks[c]["w"] - w for c in ids],
                              self.hyper["q"], ctx.agg_weights(ids))
        return state.evolve(w + ctx.config.lr_server * step)


def gifair_r(client_losses, groups, d: int) -> np.ndarray:
    """``r_i = sum_j sign(L_{s_i} - L_j)`` over non-empty groups ``j``."""
    F = np.asarray(client_losses, dtype=np.float64)
    s = np.asarray(groups, dtype=np.int64)
    present = [j for j in range(d) if np.any(s == j)]
    L = np.full(d, np.nan)
    for j in present:
        L[j] = F[s == j].mean()
    Lp = L[present]
    return np.array([np.sum(np.sign(L[si] - Lp)) for si in s])


def gifair_weights(client_losses, groups, d: int, lam: float, p) -> np.ndarray:
    """Per-client loss scales ``1 + lam r_i / (p_i |A_{s_i}|)``, clamped to >= 1e-6."""
    if lam < 0:
        raise DomainError("lambda must be >= 0")
    s = np.asarray(groups, dtype=np.int64)
    p = np.asarray(p, dtype=np.float64)
    r = gifair_r(client_losses, s, d)
    counts = np.bincount(s, minlength=d)[s]
    scale = 1.0 + lam * r / (p * counts)
    if np.any(scale <= 1e-6):
        warnings.warn("gifair: lambda makes some loss scales nonpositive; clamping to 1e-6", stacklevel=2)
        scale = np.maximum(scale, 1e-6)
    return scale


class GIFAIR(FedAvgLike):
    """Group-fair FedAvg.

    Clients report their loss at the broadcast model; the server keeps the
    latest loss of every client and, from the next round on, sends each client
    the scale on its local loss. ``group_mode="dataset"`` uses the dataset's
    groups, ``"individual"`` makes every client its own group. ``p_i`` is
    ``n_i / n``.
    """

    name = "gifair"
    family = "fairness"
    summary = "penalizes loss gaps between groups through per-client loss scales"
    defaults = {"lam": 0.1, "group_mode": "dataset"}

    def check_hyper(self):
        if self.hyper["lam"] < 0:
            raise ConfigError("gifair: lam must be >= 0")
        if self.hyper["group_mode"] not in ("dataset", "individual"):
            raise ConfigError("gifair: group_mode must be dataset or individual")

    def groups(self, ctx):
        if self.hyper["group_mode"] == "individual":
            return np.arange(ctx.N), ctx.N
        return ctx.dataset.groups, ctx.dataset.d

    def init_server(self, ctx, rng):
        w = ParamVector(ctx.init_params(), ctx.layout)
        return StrategyState(w, {"losses": np.zeros(ctx.N), "seen": np.zeros(ctx.N, dtype=bool),
                                 "scales": np.ones(ctx.N)})

    def round_payload(self, state, t, selected, ctx, rng):
        w, sc = state.w.values, state.server["scales"]
        return {c: {"w": w, "scale": float(sc[c])} for c in selected}

    def local_grad_fn(self, payload, cstate, ctx):
        s, grad = payload["scale"], ctx.model.grad
        return lambda w, X, Y: s * grad(w, X, Y)

    def client_update(self, payload, cstate, data, rng, ctx):
        f = ctx.model.loss(payload["w"], data.train.inputs, data.train.targets)
        up, cstate = super().client_update(payload, cstate, data, rng, ctx)
        return {"w": up["w"], "loss": f}, cstate

    def aggregate(self, state, uplinks, t, ctx, rng):
        losses = state.server["losses"].copy()
        seen = state.server["seen"].copy()
        for c, u in uplinks.items():
            losses[c] = u["loss"]
            seen[c] = True
        w = ctx.fedavg_step(state.w.values, {c: u["w"] for c, u in uplinks.items()})
        scales = state.server["scales"]
        if seen.all():
            groups, d = self.groups(ctx)
            p = ctx.sizes / ctx.sizes.sum()
            scales = gifair_weights(losses, groups, d, self.hyper["lam"], p)
        return state.evolve(w, losses=losses, seen=seen, scales=scales)

    def record_extra(self, state, ctx):
        return {"scales": state.server["scales"]}


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, n + 1)
    rho = np.nonzero(u * k > css - 1.0)[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


class AFL(FedAvgLike):
    """Agnostic FL: minimize the worst mixture of client losses.

    Descent on ``w`` uses the current mixture ``p`` as aggregation weights;
    then ``p`` takes a projected ascent step along the clients' losses at the
    broadcast model.
    """

    name = "afl"
    family = "fairness"
    summary = "minimax over client mixtures via projected ascent on the weights"
    defaults = {"lr_p": 0.1}
    full_participation = True

    def check_hyper(self):
        if self.hyper["lr_p"] < 0:
            raise ConfigError("afl: lr_p must be >= 0")

    def init_server(self, ctx, rng):
        return StrategyState(ParamVector(ctx.init_params(), ctx.layout), {"p": np.full(ctx.N, 1.0 / ctx.N)})

    def client_update(self, payload, cstate, data, rng, ctx):
        f = ctx.model.loss(payload["w"], data.train.inputs, data.train.targets)
        up, cstate = super().client_update(payload, cstate, data, rng, ctx)
        return {"w": up["w"], "loss": f}, cstate

    def aggregate(self, state, uplinks, t, ctx, rng):
        ids = sorted(uplinks)
        p = state.server["p"]
        w = state.w.values
        delta = weighted_average([uplinks[c]["w"] - w for c in ids], p[ids])
        losses = np.array([uplinks[c]["loss"] for c in ids])
        p_new = project_simplex(p + self.hyper["lr_p"] * losses)
        return state.evolve(w + ctx.config.lr_server * delta, p=p_new)

    def record_extra(self, state, ctx):
        return {"p": state.server["p"]}
