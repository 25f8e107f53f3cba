"""Strategy base class and shared helpers."""

from __future__ import annotations

import numpy as np

from ..engine import ClientState, RunContext, StrategyState, select_clients
from ..errors import ConfigError
from ..params import ParamVector


def evaluate_params(ctx: RunContext, w, data) -> dict:
    """Train/test loss (and accuracy for classifiers) of one parameter vector."""
    model = ctx.model
    tr, te = data.train, data.eval_set
    out = {
        "train_loss": model.loss(w, tr.inputs, tr.targets),
        "test_loss": model.loss(w, te.inputs, te.targets),
    }
    if ctx.spec.classifier:
        out["train_acc"] = model.accuracy(w, tr.inputs, tr.targets)
        out["test_acc"] = model.accuracy(w, te.inputs, te.targets)
    return out


def evaluate_predictions(ctx: RunContext, predict, data) -> dict:
    """Same as :func:`evaluate_params` for an arbitrary ``predict(X)`` callable."""
    model = ctx.model
    tr, te = data.train, data.eval_set
    p_tr, p_te = predict(tr.inputs), predict(te.inputs)
    out = {
        "train_loss": model.loss_from_predictions(p_tr, tr.targets),
        "test_loss": model.loss_from_predictions(p_te, te.targets),
    }
    if ctx.spec.classifier:
        out["train_acc"] = model.accuracy_from_predictions(p_tr, tr.targets)
        out["test_acc"] = model.accuracy_from_predictions(p_te, te.targets)
    return out


def require_full_participation(ctx: RunContext, name: str) -> None:
    if ctx.config.sample_fraction < 1.0:
        raise ConfigError(f"{name} needs every client in every round (sample_fraction=1)")


class Strategy:
    """Base class for federated strategies.

    Subclasses set ``name``, ``family`` (a short tag shown by ``fedsim list``),
    ``defaults`` (every accepted hyperparameter with its default) and override
    the hooks they need. Hooks never mutate their arguments.
    """

    name = ""
    family = ""
    summary = ""
    defaults: dict = {}
    full_participation = False  # True: every client must train every round

    def __init__(self, **hyper):
        unknown = sorted(set(hyper) - set(self.defaults))
        if unknown:
            raise ConfigError(f"{self.name}: unknown hyperparameter(s) {unknown}; accepted: {sorted(self.defaults)}")
        self.hyper = {**self.defaults, **hyper}
        self.check_hyper()

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.hyper})"

    def check_hyper(self) -> None:
        pass

    def validate(self, ctx: RunContext) -> None:
        if self.full_participation:
            require_full_participation(ctx, self.name)

    # -- engine hooks --------------------------------------------------------
    def select(self, ctx: RunContext, state: StrategyState, t: int, stats: dict, rng) -> list[int]:
        cfg = ctx.config
        return select_clients(cfg.sampling_scheme, t, stats, cfg.sample_fraction, rng, ctx.sizes, cfg.sampling_gamma)

    def init_server(self, ctx: RunContext, rng) -> StrategyState:
        return StrategyState(ParamVector(ctx.init_params(), ctx.layout))

    def init_client(self, ctx: RunContext, cid: int, state: StrategyState) -> ClientState:
        return ClientState(cid)

    def round_payload(self, state: StrategyState, t: int, selected, ctx: RunContext, rng) -> dict:
        w = state.w.values
        return {cid: {"w": w} for cid in selected}

    def client_update(self, payload: dict, cstate: ClientState, data, rng, ctx: RunContext):
        raise NotImplementedError

    def aggregate(self, state: StrategyState, uplinks: dict, t: int, ctx: RunContext, rng) -> StrategyState:
        raise NotImplementedError

    # -- evaluation ----------------------------------------------------------
    def eval_params(self, state: StrategyState, cstate: ClientState, data, ctx: RunContext) -> np.ndarray:
        """Parameters used to score client ``cstate.client_id`` (global by default)."""
        return state.w.values

    def evaluate(self, state: StrategyState, cstate: ClientState, data, ctx: RunContext) -> dict:
        return evaluate_params(ctx, self.eval_params(state, cstate, data, ctx), data)

    def predict(self, state: StrategyState, cstate: ClientState, data, X, ctx: RunContext) -> np.ndarray:
        return ctx.model.predict(self.eval_params(state, cstate, data, ctx), np.asarray(X, dtype=np.float64))

    def record_extra(self, state: StrategyState, ctx: RunContext) -> dict:
        return {}


class FedAvgLike(Strategy):
    """Clients run local SGD from the broadcast model; the server averages.

    Subclasses customize :meth:`local_grad_fn` to change the local objective.
    """

    def local_grad_fn(self, payload, cstate, ctx):
        return None

    def client_update(self, payload, cstate, data, rng, ctx):
        w = ctx.local_train(payload["w"], data.train, rng, self.local_grad_fn(payload, cstate, ctx),
                            client_id=cstate.client_id)
        return {"w": w}, cstate

    def aggregate(self, state, uplinks, t, ctx, rng):
        return state.evolve(ctx.fedavg_step(state.w.values, {c: u["w"] for c, u in uplinks.items()}))
