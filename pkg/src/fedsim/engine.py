"""Round loop: select, broadcast, local update, aggregate, record.

Strategies plug in through four hooks (see :class:`fedsim.strategies.base.Strategy`):
``init_server``, ``round_payload``, ``client_update`` and ``aggregate``. Client
updates are pure functions of their payload, their own state, their data and
a private random stream, so they can run on a thread pool without changing
any result. Aggregation always walks clients in ascending id.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .datagen import FederatedDataset
from .errors import ConfigError, DivergenceError, StructuralError
from .models import Batch, Model, build_model
from .params import ParamVector, weighted_average
from .rng import rng_substream
from .sampling import adaptive_sampling_probs, size_probs

SCHEMA_VERSION = 1
SAMPLING_SCHEMES = ("uniform", "size", "grad_norm", "loss")
WEIGHTINGS = ("auto", "size", "equal")


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 100
    local_epochs: int | tuple[int, ...] = 1
    batch_size: int | str = "full"
    lr_local: float = 0.1
    lr_server: float = 1.0
    sample_fraction: float = 1.0
    sampling_scheme: str = "uniform"
    sampling_gamma: float = 1.0
    weighting: str = "auto"
    strategy: str = "fedavg"
    strategy_params: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    target_loss: float | None = None

    def __post_init__(self):
        if isinstance(self.local_epochs, (list, tuple)):
            object.__setattr__(self, "local_epochs", tuple(int(e) for e in self.local_epochs))
            if any(e < 1 for e in self.local_epochs):
                raise ConfigError("local_epochs must be >= 1")
        elif int(self.local_epochs) < 1:
            raise ConfigError("local_epochs must be >= 1")
        if int(self.rounds) < 1:
            raise ConfigError("rounds must be >= 1")
        if self.batch_size != "full" and (not isinstance(self.batch_size, int) or self.batch_size < 1):
            raise ConfigError("batch_size must be a positive int or 'full'")
        if not self.lr_local > 0:
            raise ConfigError("lr_local must be > 0")
        if self.lr_server < 0:
            raise ConfigError("lr_server must be >= 0")
        if not 0 < self.sample_fraction <= 1:
            raise ConfigError("sample_fraction must be in (0, 1]")
        if self.sampling_scheme not in SAMPLING_SCHEMES:
            raise ConfigError(f"sampling_scheme must be one of {SAMPLING_SCHEMES}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}")
        if int(self.workers) < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["local_epochs"], tuple):
            d["local_epochs"] = list(d["local_epochs"])
        return d

    def epochs_for(self, client_id: int) -> int:
        if isinstance(self.local_epochs, tuple):
            return self.local_epochs[client_id]
        return int(self.local_epochs)


@dataclass(frozen=True)
class ClientState:
    """Per-client persistent state; arrays are never mutated in place."""

    client_id: int
    vectors: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)

    def get(self, key: str, default=None):
        return self.vectors.get(key, default)

    def evolve(self, **vectors) -> "ClientState":
        return replace(self, vectors={**self.vectors, **vectors})

    def with_scalars(self, **scalars) -> "ClientState":
        return replace(self, scalars={**self.scalars, **scalars})


@dataclass(frozen=True)
class StrategyState:
    """Server-side state: the global model plus strategy-specific entries.

    ``clients`` is filled in by :func:`run_federation` on the final state so
    personalized models can be read back after a run.
    """

    w: ParamVector
    server: dict = field(default_factory=dict)
    clients: tuple = ()

    def evolve(self, w=None, **server) -> "StrategyState":
        new_w = self.w if w is None else (w if isinstance(w, ParamVector) else self.w.with_values(w))
        return StrategyState(new_w, {**self.server, **server}, self.clients)


@dataclass
class RoundRecord:
    round: int
    selected: list
    train_loss: list
    test_loss: list
    train_acc: list | None
    test_acc: list | None
    loss_variance: float
    floats_uplink: int
    floats_downlink: int
    param_norm: float
    extra: dict = field(default_factory=dict)
    wall_ms: float = 0.0

    @property
    def mean_train_loss(self) -> float:
        return float(np.mean(self.train_loss))

    @property
    def mean_test_loss(self) -> float:
        return float(np.mean(self.test_loss))

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "round": self.round,
            "selected": self.selected,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "train_acc": self.train_acc,
            "test_acc": self.test_acc,
            "mean_train_loss": self.mean_train_loss,
            "mean_test_loss": self.mean_test_loss,
            "loss_variance": self.loss_variance,
            "floats_uplink": self.floats_uplink,
            "floats_downlink": self.floats_downlink,
            "param_norm": self.param_norm,
            "extra": self.extra,
        }
        if include_timing:
            d["wall_ms"] = self.wall_ms
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(_jsonable(self.to_dict(include_timing)), sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, ParamVector):
        return obj.values.tolist()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


class RunContext:
    """Everything a strategy hook may read: config, data, model."""

    def __init__(self, config: FederationConfig, dataset: FederatedDataset):
        self.config = config
        self.dataset = dataset
        self.spec = dataset.spec
        self.model: Model = build_model(dataset.spec)
        self.layout = self.model.layout
        self.dim = self.model.dim
        self.N = dataset.N
        self.sizes = dataset.sizes
        if isinstance(config.local_epochs, tuple) and len(config.local_epochs) != self.N:
            raise ConfigError(f"per-client local_epochs has {len(config.local_epochs)} entries for {self.N} clients")

    def rng(self, domain: str, round: int = -1, client_id: int = -1) -> np.random.Generator:
        return rng_substream(self.config.seed, domain, round, client_id)

    def init_params(self, index: int = 0) -> np.ndarray:
        """Initial weights; index 0 is shared by every strategy."""
        return self.model.init(self.rng("init", client_id=index - 1))

    def agg_weights(self, ids: Sequence[int]) -> np.ndarray:
        mode = self.config.weighting
        if mode == "auto":
            mode = "equal" if self.config.sampling_scheme == "size" else "size"
        if mode == "size":
            return self.sizes[list(ids)].astype(np.float64)
        return np.ones(len(ids))

    def grad(self, w, batch: Batch) -> np.ndarray:
        return self.model.grad(w, batch.inputs, batch.targets)

    def loss(self, w, batch: Batch) -> float:
        return self.model.loss(w, batch.inputs, batch.targets)

    def steps_per_epoch(self, n: int) -> int:
        bs = self.config.batch_size
        return 1 if bs == "full" else math.ceil(n / bs)

    def local_steps(self, n: int, client_id: int | None = None, epochs: float | None = None) -> int:
        if epochs is None:
            epochs = self.config.epochs_for(0 if client_id is None else client_id)
        return max(1, int(round(epochs * self.steps_per_epoch(n))))

    def iter_batches(self, batch: Batch, rng: np.random.Generator, steps: int):
        """Yield ``steps`` minibatches ``(X, Y)``, reshuffling at each epoch start."""
        n = batch.n
        X, Y = batch.inputs, batch.targets
        bs = self.config.batch_size
        if bs == "full" or bs >= n:
            for _ in range(steps):
                yield X, Y
            return
        done = 0
        while done < steps:
            perm = rng.permutation(n)
            for start in range(0, n, bs):
                if done >= steps:
                    return
                idx = perm[start:start + bs]
                yield X[idx], Y[idx]
                done += 1

    def local_train(self, w0, batch: Batch, rng: np.random.Generator, grad_fn=None,
                    epochs: float | None = None, client_id: int | None = None,
                    steps: int | None = None, lr: float | None = None) -> np.ndarray:
        """Run local SGD and return the final weights.

        ``grad_fn(w, X, Y)`` defaults to the model gradient. One epoch is a
        pass over the data in ``batch_size`` chunks (reshuffled each epoch), so
        ``batch_size="full"`` means one gradient step per epoch. ``steps``
        overrides the epoch count with an explicit step budget.
        """
        grad_fn = grad_fn or self.model.grad
        lr = self.config.lr_local if lr is None else lr
        if steps is None:
            steps = self.local_steps(batch.n, client_id, epochs)
        w = np.array(w0, dtype=np.float64)
        for X, Y in self.iter_batches(batch, rng, steps):
            w = w - lr * grad_fn(w, X, Y)
        return w

    def fedavg_step(self, w, client_ws: dict, lr_server: float | None = None) -> np.ndarray:
        """``w + lr_server * weighted_mean(w_i - w)`` over ascending client ids."""
        ids = sorted(client_ws)
        if not ids:
            return np.asarray(w, dtype=np.float64)
        w = np.asarray(w, dtype=np.float64)
        deltas = [np.asarray(client_ws[i]) - w for i in ids]
        delta = weighted_average(deltas, self.agg_weights(ids))
        eta = self.config.lr_server if lr_server is None else lr_server
        return w + eta * delta


def count_floats(obj) -> int:
    """Number of real scalars in a payload (ints and strings are metadata).

    A client may attach a ``"diag"`` entry to its uplink; the engine strips it
    before accounting and aggregation and copies it into the round record.
    """
    if obj is None or isinstance(obj, (str, bool, int, np.integer)):
        return 0
    if isinstance(obj, ParamVector):
        return obj.dim
    if isinstance(obj, np.ndarray):
        return int(obj.size) if obj.dtype.kind == "f" else 0
    if isinstance(obj, (float, np.floating)):
        return 1
    if isinstance(obj, dict):
        return sum(count_floats(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return sum(count_floats(v) for v in obj)
    raise StructuralError(f"cannot count floats in payload of type {type(obj).__name__}")


def communication_accounting(uplinks: dict, downlinks: dict) -> tuple[int, int]:
    """(floats sent client->server, floats sent server->client) for one round."""
    up = sum(count_floats(uplinks[i]) for i in sorted(uplinks))
    down = sum(count_floats(downlinks[i]) for i in sorted(downlinks))
    return up, down


def select_clients(scheme: str, round: int, stats: dict, fraction: float, rng: np.random.Generator,
                   sizes=None, gamma: float = 1.0) -> list[int]:
    """Sample ``ceil(fraction * N)`` distinct clients, returned in ascending id order.

    ``stats`` maps ``"loss"`` / ``"grad_norm"`` to per-client arrays (NaN where
    unknown). Adaptive schemes fall back to uniform when nothing is known yet,
    which is always the case in round 0.
    """
    if sizes is None:
        raise ConfigError("select_clients needs client sizes")
    N = len(sizes)
    if fraction * N < 1 - 1e-12:
        raise ConfigError(f"sample_fraction {fraction} selects no clients out of {N}")
    m = min(N, math.ceil(fraction * N - 1e-9))
    if m >= N:
        return list(range(N))
    if scheme == "uniform":
        p = None
    elif scheme == "size":
        p = size_probs(sizes)
    elif scheme in ("grad_norm", "loss"):
        p = adaptive_sampling_probs(stats.get(scheme, np.full(N, np.nan)), gamma)
    else:
        raise ConfigError(f"unknown sampling scheme {scheme!r}")
    if p is not None and np.all(p == p[0]):
        p = None  # identical draws to the uniform scheme
    chosen = rng.choice(N, size=m, replace=False, p=p)
    return sorted(int(c) for c in chosen)


def _check_finite_state(state: StrategyState, round: int) -> None:
    def walk(obj):
        if isinstance(obj, np.ndarray) and obj.dtype.kind == "f":
            if not np.all(np.isfinite(obj)):
                raise DivergenceError("server state is not finite", round=round)
        elif isinstance(obj, dict):
            for v in obj.values():
                walk(v)
        elif isinstance(obj, (list, tuple)):
            for v in obj:
                walk(v)
        elif isinstance(obj, float) and not math.isfinite(obj):
            raise DivergenceError("server state is not finite", round=round)

    walk(state.server)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("FEDSIM_WORKERS", "1")))
    except ValueError:
        return 1


def run_federation(config: FederationConfig, dataset: FederatedDataset, strategy=None, *,
                   workers: int | None = None, callback=None):
    """Run ``config.rounds`` rounds and return ``(final_state, records)``.

    ``final_state.clients`` holds the per-client states after the last round.
    ``callback(record, state)``, if given, sees every round's record and
    state (with client states attached).

    Output is a pure function of (config, dataset) whatever ``workers`` is.
    """
    from .strategies import build_strategy

    if strategy is None:
        strategy = build_strategy(config.strategy, config.strategy_params)
    ctx = RunContext(config, dataset)
    strategy.validate(ctx)
    workers = config.workers if workers is None else workers
    state = strategy.init_server(ctx, ctx.rng("server.init"))
    cstates = [strategy.init_client(ctx, i, state) for i in range(ctx.N)]
    records: list[RoundRecord] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(config.rounds):
            t0 = time.perf_counter()
            try:
                state, cstates, rec = _one_round(strategy, ctx, state, cstates, t, pool)
            except DivergenceError as exc:
                if exc.round is None:
                    raise DivergenceError(str(exc), round=t) from exc
                raise
            except FloatingPointError as exc:
                raise DivergenceError(str(exc), round=t) from exc
            rec.wall_ms = (time.perf_counter() - t0) * 1000.0
            records.append(rec)
            if callback is not None:
                callback(rec, replace(state, clients=tuple(cstates)))
            if config.target_loss is not None and rec.mean_train_loss <= config.target_loss:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return replace(state, clients=tuple(cstates)), records


def _client_stats(cstates) -> dict:
    loss = np.array([c.scalars.get("last_loss", np.nan) for c in cstates], dtype=np.float64)
    gn = np.array([c.scalars.get("last_grad_norm", np.nan) for c in cstates], dtype=np.float64)
    return {"loss": loss, "grad_norm": gn}


def _one_round(strategy, ctx: RunContext, state, cstates, t, pool):
    cfg = ctx.config
    selected = strategy.select(ctx, state, t, _client_stats(cstates), ctx.rng("select", t))
    payloads = strategy.round_payload(state, t, selected, ctx, ctx.rng("server.payload", t))

    def task(cid):
        data = ctx.dataset.clients[cid]
        uplink, new_cstate = strategy.client_update(payloads[cid], cstates[cid], data, ctx.rng("client", t, cid), ctx)
        diag = None
        if isinstance(uplink, dict) and "diag" in uplink:
            uplink = dict(uplink)
            diag = uplink.pop("diag")
        w_up = uplink.get("w") if isinstance(uplink, dict) else None
        if w_up is not None and np.asarray(w_up).shape == (ctx.dim,):
            w_up = np.asarray(w_up)
            f, g = ctx.model.loss_and_grad(w_up, data.train.inputs, data.train.targets)
            new_cstate = new_cstate.with_scalars(last_loss=f, last_grad_norm=float(g @ g))
        return uplink, new_cstate, diag

    if pool is None:
        results = {cid: task(cid) for cid in selected}
    else:
        futures = {cid: pool.submit(task, cid) for cid in selected}
        results = {cid: futures[cid].result() for cid in selected}
    uplinks = {cid: results[cid][0] for cid in sorted(results)}
    cstates = list(cstates)
    for cid in sorted(results):
        cstates[cid] = results[cid][1]
    diags = {cid: results[cid][2] for cid in sorted(results) if results[cid][2] is not None}
    up, down = communication_accounting(uplinks, {cid: payloads[cid] for cid in selected})
    state = strategy.aggregate(state, uplinks, t, ctx, ctx.rng("server.aggregate", t))
    _check_finite_state(state, t)
    rec = _evaluate(strategy, ctx, state, cstates, t, selected, up, down)
    if diags:
        rec.extra["client_diag"] = _jsonable(diags)
    return state, cstates, rec


def _evaluate(strategy, ctx, state, cstates, t, selected, up, down) -> RoundRecord:
    train_loss, test_loss, train_acc, test_acc = [], [], [], []
    for cid, data in enumerate(ctx.dataset.clients):
        m = strategy.evaluate(state, cstates[cid], data, ctx)
        train_loss.append(m["train_loss"])
        test_loss.append(m["test_loss"])
        train_acc.append(m.get("train_acc"))
        test_acc.append(m.get("test_acc"))
    classifier = ctx.spec.classifier
    return RoundRecord(
        round=t,
        selected=list(selected),
        train_loss=train_loss,
        test_loss=test_loss,
        train_acc=train_acc if classifier else None,
        test_acc=test_acc if classifier else None,
        loss_variance=float(np.var(test_loss)),
        floats_uplink=int(up),
        floats_downlink=int(down),
        param_norm=state.w.norm(),
        extra=_jsonable(strategy.record_extra(state, ctx)),
    )


def metrics_jsonl(records: Sequence[RoundRecord], include_timing: bool = False) -> str:
    return "".join(r.to_json(include_timing) + "\n" for r in records)
