"""Strategies that learn a single global model."""

from __future__ import annotations

import numpy as np

from ..engine import ClientState, StrategyState
from ..errors import ConfigError
from ..params import ParamVector, weighted_average
from .base import FedAvgLike, Strategy, evaluate_predictions


def _check_nonneg(name, hyper, *keys):
    for k in keys:
        if hyper[k] is not None and hyper[k] < 0:
            raise ConfigError(f"{name}: {k} must be >= 0")


class FedAvg(FedAvgLike):
    name = "fedavg"
    family = "global"
    summary = "local SGD for E epochs, server averages the models"


class FedSGD(FedAvgLike):
    """One local SGD step per round, whatever ``local_epochs`` says."""

    name = "fedsgd"
    family = "global"
    summary = "one local gradient step per round"

    def client_update(self, payload, cstate, data, rng, ctx):
        return {"w": ctx.local_train(payload["w"], data.train, rng, steps=1)}, cstate


def fedprox_local_gradient(grad, w_i, w_global, mu: float) -> np.ndarray:
    """Gradient of ``F_i(w_i) + mu/2 ||w_i - w_global||^2`` given ``grad = grad F_i(w_i)``."""
    return np.asarray(grad) + mu * (np.asarray(w_i) - np.asarray(w_global))


class FedProx(FedAvgLike):
    name = "fedprox"
    family = "global"
    summary = "FedAvg with a proximal pull toward the broadcast model"
    defaults = {"mu": 0.01}

    def check_hyper(self):
        _check_nonneg(self.name, self.hyper, "mu")

    def local_grad_fn(self, payload, cstate, ctx):
        mu, w0, grad = self.hyper["mu"], payload["w"], ctx.model.grad
        return lambda w, X, Y: fedprox_local_gradient(grad(w, X, Y), w, w0, mu)


def dane_local_gradient(grad, w_i, w_prev, grad_i_prev, grad_global_prev, mu: float) -> np.ndarray:
    """Gradient-corrected proximal local objective's gradient."""
    return (np.asarray(grad) - (np.asarray(grad_i_prev) - np.asarray(grad_global_prev))
            + mu * (np.asarray(w_i) - np.asarray(w_prev)))


class DANE(Strategy):
    """Two-phase rounds.

    Even rounds collect the full local gradients at the current model; odd
    rounds broadcast their average and clients approximately minimize the
    gradient-corrected proximal objective with local SGD. The model only
    moves on odd rounds.
    """

    name = "dane"
    family = "global"
    summary = "gradient-aligned proximal local solve (alternating gradient / solve rounds)"
    defaults = {"mu": 1.0}
    full_participation = True

    def check_hyper(self):
        _check_nonneg(self.name, self.hyper, "mu")

    def round_payload(self, state, t, selected, ctx, rng):
        w = state.w.values
        if t % 2 == 0:
            return {c: {"w": w} for c in selected}
        G = state.server["grad"]
        return {c: {"w": w, "grad": G} for c in selected}

    def client_update(self, payload, cstate, data, rng, ctx):
        w = payload["w"]
        if "grad" not in payload:
            g = ctx.model.grad(w, data.train.inputs, data.train.targets)
            return {"grad": g}, cstate.evolve(grad_ref=g)
        mu, G, gi, grad = self.hyper["mu"], payload["grad"], cstate.get("grad_ref"), ctx.model.grad
        fn = lambda x, X, Y: dane_local_gradient(grad(x, X, Y), x, w, gi, G, mu)
        return {"w": ctx.local_train(w, data.train, rng, fn, client_id=cstate.client_id)}, cstate

    def aggregate(self, state, uplinks, t, ctx, rng):
        ids = sorted(uplinks)
        if t % 2 == 0:
            G = weighted_average([uplinks[c]["grad"] for c in ids], ctx.agg_weights(ids))
            return state.evolve(grad=G)
        return state.evolve(ctx.fedavg_step(state.w.values, {c: uplinks[c]["w"] for c in ids}))


def scaffold_local_step(w, grad, c_i, c, lr: float, scale=1.0) -> np.ndarray:
    """``w - lr * (S (grad - c_i) + c)``; ``S`` is the identity by default."""
    return np.asarray(w) - lr * (scale * (np.asarray(grad) - c_i) + c)


class SCAFFOLD(Strategy):
    """Control-variate corrected local SGD.

    ``control_variate="gradient"`` sets ``c_i`` to the full local gradient at
    the end of local training; ``"difference"`` uses the cheaper
    ``c_i - c + (w - w_i) / (K lr)``. ``scale`` is a diagonal rescaling of the
    variance-reduced gradient (scalar or per-coordinate); 1 gives SCAFFOLD and
    other values give the federated SVRG variant.

    Clients uplink ``dc_i = c_i_new - c_i``; the server keeps ``c`` equal to
    the mean of all clients' latest control variates, reusing stale values
    for clients that sat the round out.
    """

    name = "scaffold"
    family = "global"
    summary = "control variates correct client drift"
    defaults = {"control_variate": "gradient", "scale": 1.0}

    def check_hyper(self):
        if self.hyper["control_variate"] not in ("gradient", "difference"):
            raise ConfigError("scaffold: control_variate must be 'gradient' or 'difference'")

    def _scale(self, ctx):
        s = np.asarray(self.hyper["scale"], dtype=np.float64)
        if s.ndim and s.shape != (ctx.dim,):
            raise ConfigError(f"scaffold: scale must be a scalar or have {ctx.dim} entries")
        return s

    def validate(self, ctx):
        self._scale(ctx)

    def init_server(self, ctx, rng):
        return StrategyState(ParamVector(ctx.init_params(), ctx.layout), {"c": np.zeros(ctx.dim)})

    def init_client(self, ctx, cid, state):
        return ClientState(cid, {"c": np.zeros(ctx.dim)})

    def round_payload(self, state, t, selected, ctx, rng):
        w, c = state.w.values, state.server["c"]
        return {cid: {"w": w, "c": c} for cid in selected}

    def client_update(self, payload, cstate, data, rng, ctx):
        w0, c = payload["w"], payload["c"]
        c_i = cstate.get("c")
        lr = ctx.config.lr_local
        scale = self._scale(ctx)
        steps = ctx.local_steps(data.n_i, cstate.client_id)
        w = np.array(w0)
        for X, Y in ctx.iter_batches(data.train, rng, steps):
            w = scaffold_local_step(w, ctx.model.grad(w, X, Y), c_i, c, lr, scale)
        if self.hyper["control_variate"] == "gradient":
            c_new = ctx.model.grad(w, data.train.inputs, data.train.targets)
        else:
            c_new = c_i - c + (w0 - w) / (steps * lr)
        return {"w": w, "dc": c_new - c_i}, cstate.evolve(c=c_new)

    def aggregate(self, state, uplinks, t, ctx, rng):
        ids = sorted(uplinks)
        c = state.server["c"].copy()
        for cid in ids:
            c = c + uplinks[cid]["dc"] / ctx.N
        w = ctx.fedavg_step(state.w.values, {cid: uplinks[cid]["w"] for cid in ids})
        return state.evolve(w, c=c)


class FedDyn(Strategy):
    """Dynamic regularization, kept in its dual form.

    Each client carries ``g_i`` (its estimate of the local gradient at the
    previous local optimum, starting at 0) and minimizes
    ``F_i(b) - <g_i, b> + mu/2 ||b - w||^2`` with local SGD from ``w``, then
    sets ``g_i <- g_i - mu (b - w)``. The server keeps ``h``, the running
    average of all clients' ``g_i`` (absentees contribute their last value),
    and sets ``w = mean_S(b_i) - h / mu``. Averages over clients are
    unweighted.
    """

    name = "feddyn"
    family = "global"
    summary = "dynamic regularizer cancels client drift; tolerates partial participation"
    defaults = {"mu": 1.0}

    def check_hyper(self):
        if not self.hyper["mu"] > 0:
            raise ConfigError("feddyn: mu must be > 0")

    def init_server(self, ctx, rng):
        return StrategyState(ParamVector(ctx.init_params(), ctx.layout), {"h": np.zeros(ctx.dim)})

    def init_client(self, ctx, cid, state):
        return ClientState(cid, {"g": np.zeros(ctx.dim)})

    def client_update(self, payload, cstate, data, rng, ctx):
        mu, w0, g_i, grad = self.hyper["mu"], payload["w"], cstate.get("g"), ctx.model.grad
        fn = lambda b, X, Y: grad(b, X, Y) - g_i + mu * (b - w0)
        b = ctx.local_train(w0, data.train, rng, fn, client_id=cstate.client_id)
        return {"w": b}, cstate.evolve(g=g_i - mu * (b - w0))

    def aggregate(self, state, uplinks, t, ctx, rng):
        mu = self.hyper["mu"]
        ids = sorted(uplinks)
        w = state.w.values
        h = state.server["h"]
        for cid in ids:
            h = h - mu * (uplinks[cid]["w"] - w) / ctx.N
        mean_b = weighted_average([uplinks[c]["w"] for c in ids], np.ones(len(ids)))
        return state.evolve(mean_b - h / mu, h=h)


class FedPD(Strategy):
    """Primal-dual local solves on the augmented Lagrangian.

    Client ``i`` keeps a dual ``lam_i`` and anchor ``w0_i``. Each round it
    approximately minimizes ``F_i(x) + <lam_i, x - w0_i> + mu/2 ||x - w0_i||^2``
    from ``w0_i``, then ``lam_i += mu (x - w0_i)`` and ``w0_i = x + lam_i / mu``.
    With probability ``1 - p`` (drawn by the server at the start of the round)
    clients upload ``w0_i``; the average comes back as the new anchor next
    round. ``p = 0`` syncs every round.
    """

    name = "fedpd"
    family = "global"
    summary = "augmented-Lagrangian local solves with randomized communication"
    defaults = {"mu": 1.0, "p": 0.0}
    full_participation = True

    def check_hyper(self):
        if not self.hyper["mu"] > 0:
            raise ConfigError("fedpd: mu must be > 0")
        if not 0 <= self.hyper["p"] < 1:
            raise ConfigError("fedpd: p must be in [0, 1)")

    def init_server(self, ctx, rng):
        return StrategyState(ParamVector(ctx.init_params(), ctx.layout), {"fresh": True})

    def init_client(self, ctx, cid, state):
        return ClientState(cid, {"w0": state.w.values, "lam": np.zeros(ctx.dim)})

    def round_payload(self, state, t, selected, ctx, rng):
        sync = int(rng.random() >= self.hyper["p"])
        w = state.w.values
        if state.server["fresh"]:
            return {c: {"w": w, "sync": sync} for c in selected}
        return {c: {"sync": sync} for c in selected}

    def client_update(self, payload, cstate, data, rng, ctx):
        mu = self.hyper["mu"]
        w0 = payload["w"] if "w" in payload else cstate.get("w0")
        lam, grad = cstate.get("lam"), ctx.model.grad
        fn = lambda x, X, Y: grad(x, X, Y) + lam + mu * (x - w0)
        x = ctx.local_train(w0, data.train, rng, fn, client_id=cstate.client_id)
        lam = lam + mu * (x - w0)
        w0_new = x + lam / mu
        new = cstate.evolve(w0=w0_new, lam=lam)
        return ({"w": w0_new} if payload["sync"] else {}), new

    def aggregate(self, state, uplinks, t, ctx, rng):
        ids = sorted(c for c, u in uplinks.items() if "w" in u)
        if not ids:
            return state.evolve(fresh=False)
        w = weighted_average([uplinks[c]["w"] for c in ids], ctx.agg_weights(ids))
        return state.evolve(w, fresh=True)


class FedSplit(Strategy):
    """Peaceman-Rachford splitting.

    Client ``i`` keeps ``z_i`` (initially the starting model). Each round it
    evaluates the prox of ``F_i / mu`` at the reflected point ``2w - z_i`` with
    local SGD warm-started at ``w``, then reflects again:
    ``z_i <- z_i + 2 (prox - w)``. The server averages the ``z_i``.
    """

    name = "fedsplit"
    family = "global"
    summary = "operator splitting with a local proximal step"
    defaults = {"mu": 1.0}
    full_participation = True

    def check_hyper(self):
        if not self.hyper["mu"] > 0:
            raise ConfigError("fedsplit: mu must be > 0")

    def init_client(self, ctx, cid, state):
        return ClientState(cid, {"z": state.w.values})

    def client_update(self, payload, cstate, data, rng, ctx):
        mu, w, z_i, grad = self.hyper["mu"], payload["w"], cstate.get("z"), ctx.model.grad
        anchor = 2.0 * w - z_i
        fn = lambda x, X, Y: grad(x, X, Y) + mu * (x - anchor)
        prox = ctx.local_train(w, data.train, rng, fn, client_id=cstate.client_id)
        z_new = z_i + 2.0 * (prox - w)
        return {"w": z_new}, cstate.evolve(z=z_new)

    def aggregate(self, state, uplinks, t, ctx, rng):
        ids = sorted(uplinks)
        return state.evolve(weighted_average([uplinks[c]["w"] for c in ids], ctx.agg_weights(ids)))


def server_adaptive_update(w, delta, server: dict, mode: str, lr: float, zeta: float, eps: float):
    """One adaptive server step; returns ``(new_w, new_server_entries)``.

    ``delta`` is the averaged client update. ``server`` holds ``v`` (adam/yogi)
    or ``m`` (momentum).
    """
    w = np.asarray(w, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    if mode == "momentum":
        m = zeta * server["m"] + d
        return w + lr * m, {"m": m}
    v_prev = server["v"]
    d2 = d * d
    if mode == "adam":
        v = zeta * v_prev + (1.0 - zeta) * d2
    elif mode == "yogi":
        v = v_prev - (1.0 - zeta) * d2 * np.sign(v_prev - d2)
    else:
        raise ConfigError(f"unknown adaptive mode {mode!r}")
    return w + lr * d / (np.sqrt(v) + eps), {"v": v}


class FedOpt(FedAvgLike):
    """FedAvg clients with an adaptive server optimizer on the averaged update.

    The server step size is ``lr_server``; ``v0`` initializes the second
    moment.
    """

    name = "fedopt"
    family = "global"
    summary = "adaptive server optimizer (adam, yogi or momentum)"
    defaults = {"mode": "adam", "zeta": 0.9, "eps": 1e-3, "v0": 0.0}

    def check_hyper(self):
        if self.hyper["mode"] not in ("adam", "yogi", "momentum"):
            raise ConfigError(f"{self.name}: mode must be adam, yogi or momentum")
        if not 0 <= self.hyper["zeta"] < 1:
            raise ConfigError(f"{self.name}: zeta must be in [0, 1)")
        if self.hyper["eps"] <= 0 and self.hyper["mode"] != "momentum":
            raise ConfigError(f"{self.name}: eps must be > 0")

    def init_server(self, ctx, rng):
        key = "m" if self.hyper["mode"] == "momentum" else "v"
        fill = 0.0 if key == "m" else float(self.hyper["v0"])
        return StrategyState(ParamVector(ctx.init_params(), ctx.layout), {key: np.full(ctx.dim, fill)})

    def aggregate(self, state, uplinks, t, ctx, rng):
        ids = sorted(uplinks)
        w = state.w.values
        delta = weighted_average([uplinks[c]["w"] - w for c in ids], ctx.agg_weights(ids))
        h = self.hyper
        new_w, entries = server_adaptive_update(w, delta, state.server, h["mode"], ctx.config.lr_server, h["zeta"], h["eps"])
        return state.evolve(new_w, **entries)


class FedAdam(FedOpt):
    name = "fedadam"
    summary = "server-side Adam-style second moment"
    defaults = {"mode": "adam", "zeta": 0.9, "eps": 1e-3, "v0": 0.0}


class FedYogi(FedOpt):
    name = "fedyogi"
    summary = "server-side Yogi second moment"
    defaults = {"mode": "yogi", "zeta": 0.9, "eps": 1e-3, "v0": 0.0}


class FedAvgM(FedOpt):
    name = "fedavgm"
    summary = "server momentum"
    defaults = {"mode": "momentum", "zeta": 0.9, "eps": 1e-3, "v0": 0.0}


def fedac_local_step(w, w_ag, grad_fn, zeta1: float, zeta2: float, eta1: float, eta2: float):
    """One accelerated local step; ``grad_fn(x)`` is the stochastic gradient."""
    w_md = zeta1 * w + (1.0 - zeta1) * w_ag
    g = grad_fn(w_md)
    w_ag = w_md - eta1 * g
    w = (1.0 - zeta2) * w + zeta2 * w_md - eta2 * g
    return w, w_ag


class FedAc(Strategy):
    """Federated accelerated SGD: three coupled sequences, two of them averaged.

    ``eta1``/``eta2`` default to ``lr_local``.
    """

    name = "fedac"
    family = "global"
    summary = "accelerated local SGD with averaged (w, w_ag)"
    defaults = {"zeta1": 0.5, "zeta2": 0.5, "eta1": None, "eta2": None}

    def check_hyper(self):
        for k in ("zeta1", "zeta2"):
            if not 0 <= self.hyper[k] <= 1:
                raise ConfigError(f"fedac: {k} must be in [0, 1]")

    def init_server(self, ctx, rng):
        w = ctx.init_params()
        return StrategyState(ParamVector(w, ctx.layout), {"w_ag": w.copy()})

    def round_payload(self, state, t, selected, ctx, rng):
        w, w_ag = state.w.values, state.server["w_ag"]
        return {c: {"w": w, "w_ag": w_ag} for c in selected}

    def client_update(self, payload, cstate, data, rng, ctx):
        h = self.hyper
        eta1 = ctx.config.lr_local if h["eta1"] is None else h["eta1"]
        eta2 = ctx.config.lr_local if h["eta2"] is None else h["eta2"]
        w, w_ag = np.array(payload["w"]), np.array(payload["w_ag"])
        steps = ctx.local_steps(data.n_i, cstate.client_id)
        for X, Y in ctx.iter_batches(data.train, rng, steps):
            w, w_ag = fedac_local_step(w, w_ag, lambda x: ctx.model.grad(x, X, Y), h["zeta1"], h["zeta2"], eta1, eta2)
        return {"w": w, "w_ag": w_ag}, cstate

    def aggregate(self, state, uplinks, t, ctx, rng):
        ids = sorted(uplinks)
        wts = ctx.agg_weights(ids)
        w = weighted_average([uplinks[c]["w"] for c in ids], wts)
        w_ag = weighted_average([uplinks[c]["w_ag"] for c in ids], wts)
        return state.evolve(w, w_ag=w_ag)


def loadaboost_epochs(loss_after, prev_median: float | None, budget: float) -> float:
    """Epochs a client trains this round.

    ``loss_after(e)`` is the client's training loss after ``e`` epochs. Training
    starts with ``budget / 2`` epochs and adds half-epochs while the loss is
    above last round's median, never exceeding ``1.5 * budget``.
    """
    e = budget / 2.0
    cap = 1.5 * budget
    if prev_median is None:
        return e
    while e + 0.5 <= cap + 1e-12 and loss_after(e) > prev_median:
        e += 0.5
    return e


class LoAdaBoost(Strategy):
    """Adaptive local epochs driven by the median of last round's client losses.

    ``budget`` is the average epoch budget (defaults to ``local_epochs``);
    step counts are rounded to whole minibatch steps with at least one step per
    half-epoch.
    """

    name = "loadaboost"
    family = "global"
    summary = "clients with above-median loss train longer"
    defaults = {"budget": None}

    def _budget(self, ctx):
        b = self.hyper["budget"]
        return float(ctx.config.epochs_for(0) if b is None else b)

    def validate(self, ctx):
        if self._budget(ctx) <= 0:
            raise ConfigError("loadaboost: budget must be > 0")

    def init_server(self, ctx, rng):
        return StrategyState(ParamVector(ctx.init_params(), ctx.layout), {"median": None, "epochs": []})

    def round_payload(self, state, t, selected, ctx, rng):
        w, med = state.w.values, state.server["median"]
        if med is None:
            return {c: {"w": w} for c in selected}
        return {c: {"w": w, "median": med} for c in selected}

    def client_update(self, payload, cstate, data, rng, ctx):
        budget = self._budget(ctx)
        spe = ctx.steps_per_epoch(data.n_i)
        half = max(1, int(round(0.5 * spe)))
        cap_steps = max(1, int(round(1.5 * budget * spe)))
        steps = min(cap_steps, max(1, int(round(budget / 2.0 * spe))))
        w = ctx.local_train(payload["w"], data.train, rng, steps=steps)
        f = ctx.model.loss(w, data.train.inputs, data.train.targets)
        med = payload.get("median")
        while med is not None and f > med and steps + half <= cap_steps:
            w = ctx.local_train(w, data.train, rng, steps=half)
            steps += half
            f = ctx.model.loss(w, data.train.inputs, data.train.targets)
        return {"w": w, "loss": f, "steps": steps}, cstate

    def aggregate(self, state, uplinks, t, ctx, rng):
        ids = sorted(uplinks)
        w = ctx.fedavg_step(state.w.values, {c: uplinks[c]["w"] for c in ids})
        med = float(np.median([uplinks[c]["loss"] for c in ids]))
        return state.evolve(w, median=med, epochs=[uplinks[c]["steps"] for c in ids])

    def record_extra(self, state, ctx):
        return {"local_steps": list(state.server["epochs"])}


def ensemble_schedule(N: int, K: int, t: int, blocks) -> np.ndarray:
    """Model index each client trains in round ``t``."""
    return (np.asarray(blocks) + t) % K


def ensemble_predict(model, members, X) -> np.ndarray:
    """Unweighted mean of member predictions."""
    X = np.asarray(X, dtype=np.float64)
    preds = [model.predict(np.asarray(m), X) for m in members]
    return np.mean(preds, axis=0)


class FedEnsemble(Strategy):
    """K models trained by FedAvg on rotating client blocks.

    A fixed seeded permutation assigns every client a block in ``0..K-1``; in
    round ``t`` client ``i`` trains model ``(block_i + t) mod K``, so any K
    consecutive rounds pair every client with every model exactly once.
    Member 0 starts from the same initialization as FedAvg and is reported as
    the state's ``w``; evaluation uses the ensemble mean.
    """

    name = "fedensemble"
    family = "global"
    summary = "ensemble of K models on a rotating client-block schedule"
    defaults = {"K": 3}

    def check_hyper(self):
        if int(self.hyper["K"]) < 1:
            raise ConfigError("fedensemble: K must be >= 1")

    def blocks(self, ctx) -> np.ndarray:
        K = int(self.hyper["K"])
        perm = ctx.rng("ensemble.blocks").permutation(ctx.N)
        blocks = np.empty(ctx.N, dtype=np.int64)
        blocks[perm] = np.arange(ctx.N) % K
        return blocks

    def init_server(self, ctx, rng):
        K = int(self.hyper["K"])
        members = np.stack([ctx.init_params(k) for k in range(K)])
        return StrategyState(ParamVector(members[0], ctx.layout), {"members": members, "blocks": self.blocks(ctx)})

    def round_payload(self, state, t, selected, ctx, rng):
        K = int(self.hyper["K"])
        assign = ensemble_schedule(ctx.N, K, t, state.server["blocks"])
        members = state.server["members"]
        return {c: {"w": members[assign[c]], "model": int(assign[c])} for c in selected}

    def client_update(self, payload, cstate, data, rng, ctx):
        w = ctx.local_train(payload["w"], data.train, rng, client_id=cstate.client_id)
        return {"w": w, "model": payload["model"]}, cstate

    def aggregate(self, state, uplinks, t, ctx, rng):
        members = state.server["members"].copy()
        for k in range(members.shape[0]):
            group = {c: u["w"] for c, u in uplinks.items() if u["model"] == k}
            if group:
                members[k] = ctx.fedavg_step(members[k], group)
        return state.evolve(members[0], members=members)

    def evaluate(self, state, cstate, data, ctx):
        members = state.server["members"]
        if members.shape[0] == 1:
            return super().evaluate(state, cstate, data, ctx)
        return evaluate_predictions(ctx, lambda X: ensemble_predict(ctx.model, members, X), data)

    def predict(self, state, cstate, data, X, ctx):
        return ensemble_predict(ctx.model, state.server["members"], X)
