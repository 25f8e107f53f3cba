"""Clustered FL: HypCluster (pick the best of G models) and CFL (recursive
bipartition by cosine similarity of client updates)."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..engine import StrategyState
from ..errors import ConfigError
from ..params import ParamVector
from .base import Strategy


def assignment_accuracy(predicted, truth) -> float:
    """Fraction of clients correctly grouped, under the best relabeling of clusters."""
    pred = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("predicted and true assignments differ in length")
    P, T = pred.max() + 1, true.max() + 1
    confusion = np.zeros((P, T), dtype=np.int64)
    np.add.at(confusion, (pred, true), 1)
    rows, cols = linear_sum_assignment(-confusion)
    return float(confusion[rows, cols].sum() / pred.size)


def best_model(model, members, batch) -> tuple[int, np.ndarray]:
    """Index of the lowest-loss member (ties go to the lowest index) and all losses."""
    losses = np.array([model.loss(m, batch.inputs, batch.targets) for m in members])
    return int(np.argmin(losses)), losses


class HypCluster(Strategy):
    """G cluster models; each client trains the one that fits it best.

    All G models are broadcast. Each selected client picks the member with the
    lowest training loss, trains it with local SGD and uploads it with the
    member index. Members nobody picked keep their previous value. Member 0
    starts from the FedAvg initialization.
    """

    name = "hypcluster"
    family = "cluster"
    summary = "clients choose the lowest-loss of G cluster models"
    defaults = {"G": 2}

    def check_hyper(self):
        if int(self.hyper["G"]) < 1:
            raise ConfigError("hypcluster: G must be >= 1")

    def validate(self, ctx):
        if int(self.hyper["G"]) > ctx.N:
            raise ConfigError("hypcluster: G must not exceed the number of clients")

    def init_server(self, ctx, rng):
        G = int(self.hyper["G"])
        members = np.stack([ctx.init_params(g) for g in range(G)])
        return StrategyState(ParamVector(members[0], ctx.layout),
                             {"members": members, "assignment": np.full(ctx.N, -1, dtype=np.int64)})

    def round_payload(self, state, t, selected, ctx, rng):
        members = state.server["members"]
        return {c: {"members": members} for c in selected}

    def client_update(self, payload, cstate, data, rng, ctx):
        members = payload["members"]
        j, _ = best_model(ctx.model, members, data.train)
        w = ctx.local_train(members[j], data.train, rng, client_id=cstate.client_id)
        return {"w": w, "cluster": j}, cstate

    def aggregate(self, state, uplinks, t, ctx, rng):
        members = state.server["members"].copy()
        assignment = state.server["assignment"].copy()
        for c, u in uplinks.items():
            assignment[c] = u["cluster"]
        for g in range(members.shape[0]):
            group = {c: u["w"] for c, u in uplinks.items() if u["cluster"] == g}
            if group:
                members[g] = ctx.fedavg_step(members[g], group)
        return state.evolve(members[0], members=members, assignment=assignment)

    def eval_params(self, state, cstate, data, ctx):
        members = state.server["members"]
        return members[best_model(ctx.model, members, data.train)[0]]

    def record_extra(self, state, ctx):
        return {"assignment": state.server["assignment"]}


def cosine_matrix(updates) -> np.ndarray:
    """Pairwise cosine similarities; zero vectors get similarity 0 to everything else."""
    U = np.asarray(updates, dtype=np.float64)
    norms = np.linalg.norm(U, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    V = U / safe[:, None]
    S = np.clip(V @ V.T, -1.0, 1.0)
    np.fill_diagonal(S, 1.0)
    return S


def leading_eigvec_bipartition(S) -> np.ndarray:
    """Boolean mask from the sign of the leading eigenvector of symmetric ``S``.

    The sign is fixed so the first client is on the ``True`` side.
    """
    S = np.asarray(S, dtype=np.float64)
    _, vecs = np.linalg.eigh(S)
    side = vecs[:, -1] >= 0
    return side if side[0] else ~side


def cfl_check_and_split(updates, eps1: float, eps2: float, min_norm: float = 0.0):
    """Decide whether a cluster should split; returns a boolean mask or ``None``.

    A split happens when the averaged update is small (the cluster is at a
    stationary point of its joint objective), at least one client update is
    still larger than ``min_norm`` and some pair of client updates points in
    conflicting directions (cosine below ``eps2``).
    """
    U = np.asarray(updates, dtype=np.float64)
    if U.shape[0] < 2:
        return None
    norms = np.linalg.norm(U, axis=1)
    if np.linalg.norm(U.mean(axis=0)) >= eps1 or norms.max() <= min_norm:
        return None
    S = cosine_matrix(U)
    if S.min() >= eps2:
        return None
    mask = leading_eigvec_bipartition(S)
    if mask.all() or not mask.any():
        return None
    return mask


class CFL(Strategy):
    """Clustered FL by recursive bipartition.

    Every cluster runs FedAvg on its own model. After aggregation, a cluster
    whose mean update has fallen below ``eps1`` (default ``1e-3 (1 + ||w||)``)
    while its client updates still conflict (minimum pairwise cosine below
    ``eps2``) is split in two along the sign of the leading eigenvector of the
    cosine matrix; both halves start from the cluster's current model.
    ``min_norm`` guards against splitting on numerically zero updates and
    ``max_clusters`` caps the recursion.
    """

    name = "cfl"
    family = "cluster"
    summary = "recursive bipartition of clients by update cosine similarity"
    defaults = {"eps1": None, "eps2": 0.0, "min_norm": 1e-8, "max_clusters": 8}
    full_participation = True

    def check_hyper(self):
        if int(self.hyper["max_clusters"]) < 1:
            raise ConfigError("cfl: max_clusters must be >= 1")

    def init_server(self, ctx, rng):
        w = ctx.init_params()
        return StrategyState(ParamVector(w, ctx.layout),
                             {"assignment": np.zeros(ctx.N, dtype=np.int64), "members": w[None, :].copy(), "splits": []})

    def round_payload(self, state, t, selected, ctx, rng):
        members, a = state.server["members"], state.server["assignment"]
        return {c: {"w": members[a[c]]} for c in selected}

    def client_update(self, payload, cstate, data, rng, ctx):
        return {"w": ctx.local_train(payload["w"], data.train, rng, client_id=cstate.client_id)}, cstate

    def aggregate(self, state, uplinks, t, ctx, rng):
        members = [m for m in state.server["members"]]
        assignment = state.server["assignment"].copy()
        splits = list(state.server["splits"])
        n_clusters = len(members)
        for g in range(n_clusters):
            ids = [c for c in sorted(uplinks) if assignment[c] == g]
            if not ids:
                continue
            old = members[g]
            deltas = np.stack([uplinks[c]["w"] - old for c in ids])
            members[g] = ctx.fedavg_step(old, {c: uplinks[c]["w"] for c in ids})
            if len(members) >= int(self.hyper["max_clusters"]):
                continue
            eps1 = self.hyper["eps1"]
            if eps1 is None:
                eps1 = 1e-3 * (1.0 + float(np.linalg.norm(old)))
            mask = cfl_check_and_split(deltas, eps1, self.hyper["eps2"], self.hyper["min_norm"])
            if mask is None:
                continue
            new_g = len(members)
            members.append(members[g].copy())
            for c, keep in zip(ids, mask):
                if not keep:
                    assignment[c] = new_g
            splits.append([t, g, new_g])
        members = np.stack(members)
        return state.evolve(members[0], members=members, assignment=assignment, splits=splits)

    def eval_params(self, state, cstate, data, ctx):
        return state.server["members"][state.server["assignment"][cstate.client_id]]

    def record_extra(self, state, ctx):
        return {"assignment": state.server["assignment"], "clusters": int(state.server["members"].shape[0])}
