"""Synthetic federated datasets with known answers, plus CSV ingestion.

Each generator returns a :class:`FederatedDataset` whose ``truth`` fields hold
the generating parameters so tests can compare learned models against them.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, DomainError, StructuralError
from .models import Batch, ModelSpec
from .rng import rng_substream


@dataclass(frozen=True, eq=False)
class ClientDataset:
    client_id: int
    group: int
    train: Batch
    test: Batch | None = None
    truth: dict = field(default_factory=dict)

    @property
    def n_i(self) -> int:
        return self.train.n

    @property
    def eval_set(self) -> Batch:
        return self.test if self.test is not None else self.train


@dataclass(frozen=True, eq=False)
class FederatedDataset:
    clients: tuple[ClientDataset, ...]
    spec: ModelSpec
    d: int = 1
    truth: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        for i, c in enumerate(self.clients):
            if c.client_id != i:
                raise StructuralError(f"client ids must be 0..N-1, got {c.client_id} at position {i}")
            if c.train.inputs.shape[1] != self.spec.input_dim:
                raise StructuralError(f"client {i} has input dim {c.train.inputs.shape[1]}, model expects {self.spec.input_dim}")
            if not 0 <= c.group < self.d:
                raise StructuralError(f"client {i} group {c.group} outside [0, {self.d})")

    @property
    def N(self) -> int:
        return len(self.clients)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([c.n_i for c in self.clients], dtype=np.int64)

    @property
    def groups(self) -> np.ndarray:
        return np.array([c.group for c in self.clients], dtype=np.int64)

    def fingerprint(self) -> str:
        """SHA-256 over every array in the dataset."""
        h = hashlib.sha256()
        h.update(repr(self.spec.to_dict()).encode())
        for c in self.clients:
            h.update(f"{c.client_id}:{c.group}".encode())
            for b in (c.train, c.test):
                if b is not None:
                    h.update(b.inputs.tobytes())
                    h.update(b.targets.tobytes())
        return h.hexdigest()

    def pooled_train(self) -> Batch:
        return Batch.concat([c.train for c in self.clients])


def gen_quadratic_clients(curvatures: Sequence[float], optima: Sequence[float], n_per_client: int = 1) -> FederatedDataset:
    """Clients whose loss under a bias-free 1-D linear model is ``h_i (w - a_i)^2 / 2``.

    Each client holds ``n_per_client`` copies of the point ``x = sqrt(h_i)``,
    ``y = sqrt(h_i) a_i``. The test split repeats the same point, since the
    client's distribution is a single atom.
    """
    h = np.asarray(curvatures, dtype=np.float64)
    a = np.asarray(optima, dtype=np.float64)
    if h.shape != a.shape or h.ndim != 1 or h.size == 0:
        raise StructuralError("curvatures and optima must be equal-length 1-D sequences")
    if np.any(h <= 0):
        raise DomainError("curvatures must be positive")
    if n_per_client < 1:
        raise DomainError("n_per_client must be >= 1")
    spec = ModelSpec("linear", 1, 1, bias=False)
    clients = []
    for i, (hi, ai) in enumerate(zip(h, a)):
        x = np.full((n_per_client, 1), np.sqrt(hi))
        y = x * ai
        batch = Batch(x, y)
        clients.append(ClientDataset(i, 0, batch, Batch(x.copy(), y.copy()), {"h": float(hi), "a": float(ai)}))
    optimum = float(np.sum(h * a) / np.sum(h))
    return FederatedDataset(tuple(clients), spec, 1, {"kind": "quadratic", "h": h.tolist(), "a": a.tolist(), "optimum": optimum})


def quadratic_fedavg_fixed_point(curvatures, optima, lr: float, local_steps: int) -> float:
    """Limit of full-batch FedAvg on quadratic clients with equal weights."""
    h = np.asarray(curvatures, dtype=np.float64)
    a = np.asarray(optima, dtype=np.float64)
    s = 1.0 - (1.0 - lr * h) ** local_steps
    return float(np.sum(s * a) / np.sum(s))


def gen_sine_clients(
    N: int,
    n_per_client: int = 40,
    noise_sd: float = 0.0,
    *,
    n_test: int | None = None,
    seed: int = 0,
    thetas: Sequence[float] | None = None,
    phase_sampling: str = "stratified",
    hidden_dims: Sequence[int] = (20, 20),
) -> FederatedDataset:
    """Phase-shifted sines ``y = sin(2 pi (x + theta_i)) + noise`` on ``x ~ U[0, 1]``.

    ``phase_sampling="iid"`` draws each theta independently from U[0, 1];
    ``"stratified"`` draws one theta per stratum ``[k/N, (k+1)/N)`` and shuffles
    them, which keeps every marginal uniform but makes the client population a
    much tighter approximation of the uniform phase distribution.
    """
    if N < 1:
        raise DomainError("N must be >= 1")
    if n_per_client < 1:
        raise DomainError("n_per_client must be >= 1")
    n_test = n_per_client if n_test is None else n_test
    rng = rng_substream(seed, "datagen.sine")
    if thetas is None:
        if phase_sampling == "iid":
            thetas = rng.uniform(0.0, 1.0, size=N)
        elif phase_sampling == "stratified":
            thetas = (np.arange(N) + rng.uniform(0.0, 1.0, size=N)) / N
            thetas = thetas[rng.permutation(N)]
        else:
            raise DomainError(f"unknown phase_sampling {phase_sampling!r}")
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.shape != (N,):
        raise StructuralError("need one theta per client")
    spec = ModelSpec("mlp", 1, 1, tuple(hidden_dims))
    clients = []
    for i in range(N):
        crng = rng_substream(seed, "datagen.sine", client_id=i)

        def draw(n):
            x = crng.uniform(0.0, 1.0, size=(n, 1))
            y = np.sin(2 * np.pi * (x + thetas[i]))
            if noise_sd > 0:
                y = y + noise_sd * crng.standard_normal(size=y.shape)
            return Batch(x, y)

        train = draw(n_per_client)
        test = draw(n_test) if n_test > 0 else None
        clients.append(ClientDataset(i, 0, train, test, {"theta": float(thetas[i])}))
    return FederatedDataset(tuple(clients), spec, 1, {"kind": "sine", "thetas": thetas.tolist()})


def gen_label_skew_classification(
    N: int,
    classes: int,
    dirichlet_alpha: float,
    *,
    n_total: int | None = None,
    n_test_per_client: int = 20,
    input_dim: int = 2,
    class_sep: float = 3.0,
    groups: int = 1,
    seed: int = 0,
) -> FederatedDataset:
    """Gaussian class blobs with per-client class mix drawn from Dirichlet(alpha).

    Client ``i`` gets ``n_total // N`` training points (the remainder goes to the
    lowest ids); its class counts are multinomial with its Dirichlet proportions.
    Class means sit on a circle of radius ``class_sep`` in the first two
    coordinates. ``truth["proportions"]`` holds the drawn proportions.
    """
    if dirichlet_alpha <= 0:
        raise DomainError("dirichlet_alpha must be > 0")
    if classes < 2:
        raise DomainError("need at least two classes")
    if N < 1 or groups < 1:
        raise DomainError("N and groups must be >= 1")
    n_total = 50 * N if n_total is None else int(n_total)
    if n_total < N:
        raise DomainError(f"cannot give each of {N} clients an example from {n_total} total")
    rng = rng_substream(seed, "datagen.label_skew")
    angles = 2 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, input_dim))
    means[:, 0] = class_sep * np.cos(angles)
    if input_dim > 1:
        means[:, 1] = class_sep * np.sin(angles)
    props = rng.dirichlet(np.full(classes, dirichlet_alpha), size=N)
    base, extra = divmod(n_total, N)
    sizes = [base + (1 if i < extra else 0) for i in range(N)]
    out_dim = 1 if classes == 2 else classes
    spec = ModelSpec("logistic", input_dim, out_dim)
    clients = []
    for i in range(N):
        crng = rng_substream(seed, "datagen.label_skew", client_id=i)
        p = props[i] / props[i].sum()

        def draw(n):
            counts = crng.multinomial(n, p)
            y = np.repeat(np.arange(classes), counts)
            x = means[y] + crng.standard_normal(size=(n, input_dim))
            order = crng.permutation(n)
            return Batch(x[order], y[order])

        train = draw(sizes[i])
        test = draw(n_test_per_client) if n_test_per_client > 0 else None
        clients.append(ClientDataset(i, i % groups, train, test, {"proportions": props[i].tolist()}))
    return FederatedDataset(tuple(clients), spec, groups, {"kind": "label_skew", "proportions": props.tolist(), "alpha": dirichlet_alpha})


def gen_concept_shift_regression(
    N: int,
    cluster_count: int,
    *,
    input_dim: int = 1,
    n_per_client: int = 30,
    n_test: int = 30,
    noise_sd: float = 0.0,
    truths: Sequence | None = None,
    seed: int = 0,
) -> FederatedDataset:
    """``y = x . beta_g + noise`` with clients assigned round-robin to ``G`` truths.

    Inputs share one distribution (standard normal) across clients. Default
    truths for 1-D inputs are evenly spaced in [-1, 1] (so G=2 gives -1 and
    +1); higher dimensions draw them from a standard normal.
    """
    G = int(cluster_count)
    if not 1 <= G <= N:
        raise DomainError("cluster_count must satisfy 1 <= G <= N")
    rng = rng_substream(seed, "datagen.concept_shift")
    if truths is None:
        if input_dim == 1:
            truths = np.linspace(-1.0, 1.0, G).reshape(G, 1) if G > 1 else np.ones((1, 1))
        else:
            truths = rng.standard_normal(size=(G, input_dim))
    truths = np.asarray(truths, dtype=np.float64).reshape(G, input_dim)
    spec = ModelSpec("linear", input_dim, 1)
    clients = []
    for i in range(N):
        g = i % G
        crng = rng_substream(seed, "datagen.concept_shift", client_id=i)

        def draw(n):
            x = crng.standard_normal(size=(n, input_dim))
            y = x @ truths[g].reshape(-1, 1)
            if noise_sd > 0:
                y = y + noise_sd * crng.standard_normal(size=y.shape)
            return Batch(x, y)

        train = draw(n_per_client)
        test = draw(n_test) if n_test > 0 else None
        clients.append(ClientDataset(i, g, train, test, {"beta": truths[g].tolist(), "cluster": g}))
    return FederatedDataset(tuple(clients), spec, G, {"kind": "concept_shift", "truths": truths.tolist()})


def load_csv_partition(
    path,
    partition_column: str,
    *,
    target_column: str | None = None,
    group_column: str | None = None,
    task: str = "regression",
    test_fraction: float = 0.2,
    seed: int = 0,
) -> FederatedDataset:
    """One client per distinct value of ``partition_column``.

    Every other column (except target and group) must be numeric. The target
    defaults to the last remaining column. Each client's rows are shuffled with
    a seeded stream and the first ``round(test_fraction * n)`` (at most n-1)
    become its test set.
    """
    path = Path(path)
    if task not in ("regression", "classification"):
        raise DomainError(f"unknown task {task!r}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty CSV file", row=1, column=None) from None
        header = [h.strip() for h in header]
        if partition_column not in header:
            raise DataError(f"partition column {partition_column!r} not in header {header}", row=1, column=partition_column)
        part_idx = header.index(partition_column)
        skip = {part_idx}
        group_idx = None
        if group_column is not None:
            if group_column not in header:
                raise DataError(f"group column {group_column!r} not in header", row=1, column=group_column)
            group_idx = header.index(group_column)
            skip.add(group_idx)
        remaining = [j for j in range(len(header)) if j not in skip]
        if target_column is None:
            if len(remaining) < 2:
                raise DataError("need at least one feature and one target column", row=1, column=None)
            target_idx = remaining[-1]
        else:
            if target_column not in header:
                raise DataError(f"target column {target_column!r} not in header", row=1, column=target_column)
            target_idx = header.index(target_column)
        feature_idx = [j for j in remaining if j != target_idx]
        if not feature_idx:
            raise DataError("no feature columns", row=1, column=None)

        rows: dict[str, list] = {}
        order: list[str] = []
        groups: dict[str, str] = {}
        labels = []
        for r, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", row=r, column=None)
            key = row[part_idx].strip()
            if key == "":
                raise DomainError(f"empty partition value at row {r}")
            feats = []
            for j in feature_idx:
                try:
                    feats.append(float(row[j]))
                except ValueError:
                    raise DataError(f"non-numeric value {row[j]!r}", row=r, column=header[j]) from None
            raw_target = row[target_idx].strip()
            if task == "regression":
                try:
                    target = float(raw_target)
                except ValueError:
                    raise DataError(f"non-numeric target {raw_target!r}", row=r, column=header[target_idx]) from None
            else:
                target = raw_target
                labels.append(raw_target)
            if key not in rows:
                rows[key] = []
                order.append(key)
            rows[key].append((feats, target))
            if group_idx is not None:
                groups.setdefault(key, row[group_idx].strip())
    if not rows:
        raise DomainError("CSV has no data rows")

    keys = sorted(order)
    group_names = sorted(set(groups.values())) if groups else []
    if task == "classification":
        classes = sorted(set(labels))
        if len(classes) < 2:
            raise DomainError("classification needs at least two distinct labels")
        class_index = {c: k for k, c in enumerate(classes)}
        out_dim = 1 if len(classes) == 2 else len(classes)
        spec = ModelSpec("logistic", len(feature_idx), out_dim)
    else:
        spec = ModelSpec("linear", len(feature_idx), 1)
    clients = []
    for i, key in enumerate(keys):
        data = rows[key]
        x = np.array([f for f, _ in data], dtype=np.float64)
        if task == "classification":
            y = np.array([class_index[t] for _, t in data], dtype=np.int64)
        else:
            y = np.array([t for _, t in data], dtype=np.float64)
        n = len(data)
        crng = rng_substream(seed, "datagen.csv", client_id=i)
        perm = crng.permutation(n)
        n_test = min(int(round(test_fraction * n)), n - 1)
        test_idx, train_idx = perm[:n_test], perm[n_test:]
        train = Batch(x[train_idx], y[train_idx])
        test = Batch(x[test_idx], y[test_idx]) if n_test > 0 else None
        group = group_names.index(groups[key]) if groups else 0
        clients.append(ClientDataset(i, group, train, test, {"partition": key}))
    return FederatedDataset(
        tuple(clients), spec, max(1, len(group_names)),
        {"kind": "csv", "path": str(path), "partitions": keys, "groups": group_names},
    )
