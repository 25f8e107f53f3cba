"""Acceptance suite: one PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section at the end of the report.
"""

import json
import time
import warnings

import numpy as np
import pytest

from fedsim import (
    FederationConfig,
    gen_concept_shift_regression,
    gen_label_skew_classification,
    gen_quadratic_clients,
    gen_sine_clients,
    quadratic_fedavg_fixed_point,
    run_federation,
    strategy_names,
)
from fedsim.cli import main as cli_main
from fedsim.engine import RunContext, metrics_jsonl
from fedsim.gradcheck import run_gradcheck
from fedsim.models import build_model
from fedsim.strategies import REGISTRY, build_strategy
from fedsim.strategies.cluster import assignment_accuracy
from fedsim.strategies.global_models import ensemble_schedule


def run(dataset, strategy="fedavg", rounds=20, **kw):
    hp = kw.pop("hp", {})
    cfg = FederationConfig(rounds=rounds, strategy=strategy, strategy_params=hp, **kw)
    return run_federation(cfg, dataset)


def trajectory(dataset, strategy, rounds=20, personal=None, **kw):
    """Per-round global params (or a per-client vector when ``personal`` names one)."""
    hp = kw.pop("hp", {})
    cfg = FederationConfig(rounds=rounds, strategy=strategy, strategy_params=hp, **kw)
    steps = []

    def keep(rec, state):
        if personal is None:
            steps.append(state.w.values.copy())
        else:
            steps.append(np.concatenate([c.vectors[personal] for c in state.clients]))

    run_federation(cfg, dataset, callback=keep)
    return np.array(steps)


def max_gap(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# 1 -------------------------------------------------------------------------

def test_criterion_01_derivatives_match_finite_differences(verdict):
    t0 = time.perf_counter()
    report = run_gradcheck(trials=100, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(report.max_error.items(), key=lambda kv: kv[1] / report.thresholds[kv[0][1]])
    detail = (f"{len(report.max_error)} (family, op) pairs, worst {worst[0]} rel err {worst[1]:.2e}, "
              f"{elapsed:.1f}s (limit 10s)")
    verdict(1, "gradient oracle suite", report.passed and elapsed < 10.0, detail)


# 2 -------------------------------------------------------------------------

def test_criterion_02_client_drift_battery(verdict):
    ds = gen_quadratic_clients((1.0, 3.0), (0.0, 1.0))
    oracle = quadratic_fedavg_fixed_point((1.0, 3.0), (0.0, 1.0), 0.1, 2)
    t0 = time.perf_counter()
    finals = {}
    for name in ("fedavg", "scaffold", "feddyn", "fedpd", "fedsplit", "dane"):
        state, _ = run(ds, name, rounds=500, local_epochs=2, lr_local=0.1)
        finals[name] = float(state.w.values[0])
    elapsed = time.perf_counter() - t0
    ok = abs(finals["fedavg"] - 0.728571) < 1e-3 and abs(oracle - 0.728571) < 1e-6
    ok &= all(abs(v - 0.75) < 1e-3 for k, v in finals.items() if k != "fedavg")
    ok &= elapsed < 5.0
    detail = ", ".join(f"{k}={v:.6f}" for k, v in finals.items()) + f"; {elapsed:.2f}s (limit 5s)"
    verdict(2, "client-drift battery", ok, detail)


# 3 -------------------------------------------------------------------------

def test_criterion_03_reduction_identities(verdict):
    warnings.simplefilter("ignore")
    reg = gen_concept_shift_regression(6, 2, seed=1)
    cls = gen_label_skew_classification(6, 3, 0.5, seed=1)
    common = dict(rounds=20, local_epochs=2, batch_size=8, lr_local=0.1, seed=7)
    gaps = {}

    base = trajectory(cls, "fedavg", sample_fraction=0.5, **common)
    gaps["fedprox(mu=0)"] = max_gap(trajectory(cls, "fedprox", hp={"mu": 0.0}, sample_fraction=0.5, **common), base)
    gaps["fedensemble(K=1)"] = max_gap(trajectory(cls, "fedensemble", hp={"K": 1}, sample_fraction=0.5, **common), base)
    gaps["hypcluster(G=1)"] = max_gap(trajectory(cls, "hypcluster", hp={"G": 1}, sample_fraction=0.5, **common), base)
    gaps["qffl(q=0)"] = max_gap(trajectory(cls, "qffl", hp={"q": 0.0}, sample_fraction=0.5, **common), base)

    scaled = dict(common, lr_server=0.7)
    gaps["fedavgm(zeta=0)"] = max_gap(trajectory(reg, "fedavgm", hp={"zeta": 0.0}, **scaled),
                                      trajectory(reg, "fedavg", **scaled))

    # FedSGD against plain gradient descent on the pooled (equal-size) data.
    cfg = FederationConfig(rounds=20, strategy="fedsgd", lr_local=0.3, seed=7)
    model = build_model(cls.spec)
    w = RunContext(cfg, cls).init_params()
    pooled = cls.pooled_train()
    central = []
    for _ in range(20):
        w = w - 0.3 * model.grad(w, pooled.inputs, pooled.targets)
        central.append(w)
    gaps["fedsgd vs centralized GD"] = max_gap(trajectory(cls, "fedsgd", lr_local=0.3, seed=7), central)

    gaps["ditto(mu=0) vs local"] = max_gap(
        trajectory(reg, "ditto", hp={"mu": 0.0}, personal="beta", **common),
        trajectory(reg, "local", personal="beta", **common),
    )
    ok = all(g <= 1e-12 for g in gaps.values())
    verdict(3, "reduction identities", ok, ", ".join(f"{k} {v:.1e}" for k, v in gaps.items()))


# 4 -------------------------------------------------------------------------

def test_criterion_04_sine_counterexample(verdict):
    t0 = time.perf_counter()
    ds = gen_sine_clients(50, seed=0)
    model = build_model(ds.spec)
    common = dict(lr_local=0.3, seed=0)
    g_state, g_recs = run(ds, "fedavg", rounds=60, local_epochs=5, **common)
    _, l_recs = run(ds, "local", rounds=10, local_epochs=200, **common)
    _, p_recs = run(ds, "fedper", rounds=60, local_epochs=5, **common)
    _, m_recs = run(ds, "perfedavg", rounds=60, local_epochs=5, hp={"alpha": 0.3, "eval_adapt_steps": 5}, **common)
    elapsed = time.perf_counter() - t0

    grid = np.linspace(0.0, 1.0, 201).reshape(-1, 1)
    mean_abs = float(np.mean(np.abs(model.predict(g_state.w.values, grid))))
    glob, local = np.array(g_recs[-1].test_loss), np.array(l_recs[-1].test_loss)
    worse = int(np.sum(glob > local))
    fedper, perfed = p_recs[-1].mean_test_loss, m_recs[-1].mean_test_loss
    ok = mean_abs < 0.1 and worse >= 48 and fedper < glob.mean() and perfed < glob.mean() and elapsed < 60.0
    detail = (f"mean|pred|={mean_abs:.3f}, global worse than local on {worse}/50, "
              f"mean test loss global={glob.mean():.3f} fedper={fedper:.3f} perfedavg={perfed:.3f}; "
              f"{elapsed:.1f}s (limit 60s)")
    verdict(4, "sine counterexample", ok, detail)


# 5 -------------------------------------------------------------------------

def test_criterion_05_moreau_fixed_point_residual(verdict):
    ds = gen_concept_shift_regression(10, 2, seed=0)
    strat = build_strategy("pfedme", {"mu": 15.0})
    tol = strat.hyper["tol"]
    _, recs = run(ds, "pfedme", rounds=50, lr_local=0.1, lr_server=2.0, hp={"mu": 15.0})
    residuals = [d["residual"] for r in recs for d in r.extra["client_diag"].values()]
    checked = sum(len(r.extra["client_diag"]) for r in recs)
    ok = len(recs) == 50 and checked == 500 and max(residuals) < 10 * tol
    verdict(5, "pFedMe fixed-point residual", ok,
            f"max residual {max(residuals):.2e} over {checked} client-rounds (bound {10 * tol:.0e})")


# 6 -------------------------------------------------------------------------

def test_criterion_06_fairness(verdict):
    warnings.simplefilter("ignore")
    quad = gen_quadratic_clients((1.0, 3.0), (0.0, 1.0))
    var = {q: run(quad, "qffl", rounds=300, local_epochs=2, lr_local=0.1, lr_server=0.5,
                  hp={"q": q})[1][-1].loss_variance for q in (0.0, 5.0)}

    skew = gen_label_skew_classification(10, 3, 0.3, class_sep=1.0, seed=0)
    common = dict(rounds=100, local_epochs=2, lr_local=0.5, seed=0)
    v_avg = run(skew, "fedavg", **common)[1][-1].loss_variance
    v_gif = run(skew, "gifair", hp={"lam": 0.005, "group_mode": "individual"}, **common)[1][-1].loss_variance

    _, afl = run(skew, "afl", rounds=50, lr_local=0.5, seed=0)
    ps = [np.asarray(r.extra["p"]) for r in afl]
    simplex_gap = max(max(abs(p.sum() - 1.0), max(0.0, -p.min())) for p in ps)

    ok = var[5.0] < var[0.0] and v_gif < v_avg and len(ps) == 50 and simplex_gap <= 1e-12
    detail = (f"qffl var q=0 {var[0.0]:.2e} > q=5 {var[5.0]:.2e}; gifair var {v_gif:.4f} < fedavg {v_avg:.4f}; "
              f"afl simplex gap {simplex_gap:.1e} over {len(ps)} rounds")
    verdict(6, "fairness", ok, detail)


# 7 -------------------------------------------------------------------------

def test_criterion_07_cluster_recovery(verdict):
    t0 = time.perf_counter()
    accs = []
    for seed in range(5):
        ds = gen_concept_shift_regression(10, 2, seed=seed)
        hyp, _ = run(ds, "hypcluster", rounds=20, lr_local=0.1, seed=seed, hp={"G": 2})
        cfl, _ = run(ds, "cfl", rounds=100, lr_local=0.1, seed=seed)
        accs.append((assignment_accuracy(hyp.server["assignment"], ds.groups),
                     assignment_accuracy(cfl.server["assignment"], ds.groups)))
    elapsed = time.perf_counter() - t0
    ok = all(a == 1.0 and b == 1.0 for a, b in accs) and elapsed < 30.0
    detail = ", ".join(f"seed {s}: hyp {a:.2f} cfl {b:.2f}" for s, (a, b) in enumerate(accs))
    verdict(7, "cluster recovery", ok, f"{detail}; {elapsed:.1f}s (limit 30s)")


# 8 -------------------------------------------------------------------------

def _determinism_cases():
    reg = gen_concept_shift_regression(6, 2, seed=2)
    cls = gen_label_skew_classification(6, 3, 0.5, seed=2)
    for name in strategy_names():
        fractions = (1.0,) if REGISTRY[name].full_participation else (1.0, 0.5)
        for frac in fractions:
            yield name, reg, dict(sample_fraction=frac)
            yield name, cls, dict(sample_fraction=frac)
    yield "fedavg", cls, dict(sample_fraction=0.5, sampling_scheme="loss")
    yield "fedavg", cls, dict(sample_fraction=0.5, sampling_scheme="grad_norm")
    yield "fedavg", cls, dict(sample_fraction=0.5, sampling_scheme="size")


def test_criterion_08_determinism_and_parallel_safety(verdict, tmp_path):
    warnings.simplefilter("ignore")
    mismatches, count = [], 0
    for name, ds, extra in _determinism_cases():
        cfg = dict(rounds=4, local_epochs=2, batch_size=8, lr_local=0.1, seed=11, strategy=name, **extra)
        outs = [metrics_jsonl(run_federation(FederationConfig(workers=w, **cfg), ds)[1]) for w in (1, 1, 8)]
        count += 1
        if not (outs[0] == outs[1] == outs[2]):
            mismatches.append(f"{name}/{ds.spec.family}/{extra}")

    config = {
        "seed": 3,
        "dataset": {"kind": "label_skew", "N": 8, "classes": 3, "dirichlet_alpha": 0.5},
        "strategy": {"name": "scaffold"},
        "engine": {"rounds": 5, "batch_size": 10, "sample_fraction": 0.5},
    }
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(config))
    files = []
    for tag, workers in (("a", "1"), ("b", "1"), ("c", "8")):
        assert cli_main(["run", str(path), "--out", str(tmp_path / tag), "--workers", workers]) == 0
        files.append((tmp_path / tag / "metrics.jsonl").read_bytes())
    if not (files[0] == files[1] == files[2]):
        mismatches.append("cli run")
    verdict(8, "determinism and parallel safety", not mismatches,
            f"{count} in-process configs x (1, 1, 8 workers) + CLI run; mismatches: {mismatches or 'none'}")


# 9 -------------------------------------------------------------------------

def test_criterion_09_communication_accounting(verdict):
    ds = gen_label_skew_classification(10, 3, 0.5, seed=0)
    common = dict(rounds=10, local_epochs=1, batch_size=10, sample_fraction=0.5, seed=4)
    _, avg = run(ds, "fedavg", **common)
    _, sca = run(ds, "scaffold", **common)
    dim = build_model(ds.spec).dim
    ok = all(s.floats_uplink == 2 * a.floats_uplink == 2 * len(a.selected) * dim for a, s in zip(avg, sca))
    ok &= all(a.selected == s.selected for a, s in zip(avg, sca))
    verdict(9, "communication accounting", ok,
            f"per round fedavg {avg[0].floats_uplink} floats, scaffold {sca[0].floats_uplink} (dim {dim}, "
            f"{len(avg[0].selected)} clients), checked {len(avg)} rounds")


# 10 ------------------------------------------------------------------------

def test_criterion_10_ensemble_schedule_and_prediction(verdict):
    N, K = 6, 3
    ds = gen_concept_shift_regression(N, 2, seed=0)
    strat = build_strategy("fedensemble", {"K": K})
    cfg = FederationConfig(rounds=12, strategy="fedensemble", strategy_params={"K": K}, seed=5)
    ctx = RunContext(cfg, ds)
    state = strat.init_server(ctx, ctx.rng("init"))
    bad_windows = 0
    for start in range(4 * K):
        counts = np.zeros((N, K), dtype=int)
        for t in range(start, start + K):
            for c, p in strat.round_payload(state, t, list(range(N)), ctx, None).items():
                counts[c, p["model"]] += 1
        bad_windows += int(not np.all(counts == 1))
    blocks = state.server["blocks"]
    formula_ok = all(np.array_equal(ensemble_schedule(N, K, t, blocks),
                                    [strat.round_payload(state, t, [c], ctx, None)[c]["model"] for c in range(N)])
                     for t in range(2 * K))

    final, _ = run_federation(cfg, ds)
    members = final.server["members"]
    X = ds.clients[0].test.inputs
    manual = sum(build_model(ds.spec).predict(members[k], X) for k in range(K)) / K
    got = strat.predict(final, None, None, X, ctx)
    gap = max_gap(got, manual)
    ok = bad_windows == 0 and formula_ok and gap <= 1e-12 and members.shape[0] == K
    verdict(10, "fed-ensemble schedule", ok,
            f"{4 * K} windows of {K} rounds, {bad_windows} with a pair not trained exactly once; "
            f"prediction vs member mean gap {gap:.1e}")


@pytest.mark.parametrize("name", ["afl", "cfl", "dane", "fedpd", "fedsplit", "l2gd"])
def test_full_participation_strategies_are_flagged(name):
    assert REGISTRY[name].full_participation
