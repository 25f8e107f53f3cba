import warnings

import numpy as np
import pytest

from fedsim import FederationConfig, gen_concept_shift_regression, gen_sine_clients, run_federation
from fedsim.datagen import gen_quadratic_clients
from fedsim.engine import ClientState, RunContext
from fedsim.errors import ConfigError
from fedsim.models import Batch, ModelSpec, build_model
from fedsim.rng import rng_substream
from fedsim.strategies import build_strategy
from fedsim.strategies.personal import (
    adapt,
    apfl_local_gradient,
    metasgd_meta_gradient,
    moreau_prox_solve,
    moreau_residual,
    perfedavg_meta_gradient,
    split_train_val,
    ttp_finetune,
)


def quad(h=1.0, a=1.0):
    return gen_quadratic_clients((h,), (a,))


def context(ds, **cfg):
    return RunContext(FederationConfig(**cfg), ds)


def rng():
    return rng_substream(0, "test")


def run(ds, name, params=None, **cfg):
    return run_federation(FederationConfig(strategy=name, strategy_params=params or {}, **cfg), ds)


@pytest.fixture(scope="module")
def sine():
    return gen_sine_clients(6, n_per_client=10, seed=3)


# --- train then personalize -------------------------------------------------

def test_ttp_zero_steps_returns_global_model():
    ds = quad()
    model = context(ds).model
    w = np.array([0.3])
    assert np.array_equal(ttp_finetune(model, w, ds.clients[0].train, 0, 0.1), w)


def test_ttp_prox_limit():
    # argmin (b-1)^2/2 + (b-0)^2/2 = 0.5
    ds = quad(1.0, 1.0)
    b = ttp_finetune(context(ds).model, np.array([0.0]), ds.clients[0].train, 500, 0.1, "prox", 1.0)
    assert b[0] == pytest.approx(0.5, abs=1e-10)


def test_ttp_ewc_with_zero_fisher_is_plain(sine):
    ctx = context(sine)
    w = ctx.init_params()
    batch = sine.clients[0].train
    plain = ttp_finetune(ctx.model, w, batch, 7, 0.1)
    ewc = ttp_finetune(ctx.model, w, batch, 7, 0.1, "ewc", 5.0, fisher=np.zeros_like(w))
    assert np.array_equal(plain, ewc)


def test_ttp_rejects_unknown_variant():
    with pytest.raises(ConfigError):
        build_strategy("ttp", {"variant": "bogus"})


def test_ttp_improves_on_global_model(sine):
    _, glob = run(sine, "fedavg", rounds=20, local_epochs=5, lr_local=0.3)
    _, pers = run(sine, "ttp", {"steps": 20}, rounds=20, local_epochs=5, lr_local=0.3)
    assert pers[-1].mean_train_loss < glob[-1].mean_train_loss


# --- Ditto ----------------------------------------------------------------------

def test_ditto_personal_fixed_point():
    # b minimizes (b-2)^2/2 + (b-0)^2/2 -> 1
    ds = quad(1.0, 2.0)
    ctx = context(ds, local_epochs=400, lr_local=0.1)
    strat = build_strategy("ditto", {"mu": 1.0})
    up, cs = strat.client_update({"w": np.array([0.0])}, ClientState(0, {"beta": np.array([0.0])}),
                                 ds.clients[0], rng(), ctx)
    assert cs.get("beta")[0] == pytest.approx(1.0, abs=1e-10)
    assert set(up) == {"w"}
    assert up["w"][0] != cs.get("beta")[0]


def test_ditto_mu_zero_decouples(sine):
    cfg = dict(rounds=4, local_epochs=2, batch_size=4, lr_local=0.1, seed=2)
    ditto_state, _ = run(sine, "ditto", {"mu": 0.0}, **cfg)
    local_state, _ = run(sine, "local", **cfg)
    for d, l in zip(ditto_state.clients, local_state.clients):
        assert np.array_equal(d.get("beta"), l.get("beta"))
    full = dict(rounds=4, local_epochs=2, lr_local=0.1, seed=2)
    ditto_state, _ = run(sine, "ditto", {"mu": 0.0}, **full)
    fedavg_state, _ = run(sine, "fedavg", **full)
    assert np.array_equal(ditto_state.w.values, fedavg_state.w.values)


def test_ditto_strong_pull_is_no_better_than_local():
    ds = gen_sine_clients(10, seed=0)
    _, local = run(ds, "local", rounds=10, local_epochs=100, lr_local=0.3)
    _, ditto = run(ds, "ditto", {"mu": 1.0}, rounds=30, local_epochs=5, lr_local=0.3)
    assert ditto[-1].mean_test_loss >= local[-1].mean_test_loss


# --- pFedMe ---------------------------------------------------------------------

def test_moreau_solve_closed_form():
    grad = lambda b: b - 1.0
    b, gnorm, steps = moreau_prox_solve(grad, np.array([0.0]), 1.0, 0.1, 1e-12, 10_000)
    assert b[0] == pytest.approx(0.5, abs=1e-11)
    assert gnorm < 1e-12 and steps > 0
    assert moreau_residual(grad(b), b, np.array([0.0]), 1.0) < 1e-11


def test_moreau_solve_step_budget():
    _, gnorm, steps = moreau_prox_solve(lambda b: b - 1.0, np.array([0.0]), 1.0, 0.1, 1e-12, 3)
    assert steps == 3 and gnorm > 1e-12


def test_pfedme_residuals_within_tolerance():
    ds = gen_quadratic_clients((1, 3), (0, 1))
    tol = 1e-6
    _, records = run(ds, "pfedme", {"mu": 15.0, "tol": tol}, rounds=100)
    res = [d["residual"] for r in records for d in r.extra["client_diag"].values()]
    assert len(res) == 200
    assert max(res) < 10 * tol


def test_pfedme_stable_across_server_rates():
    ds = gen_quadratic_clients((1, 3), (0, 1))
    finals = []
    for lr_server in (1.0, 2.0, 4.0):
        state, records = run(ds, "pfedme", {"mu": 15.0}, rounds=300, lr_server=lr_server)
        assert all(np.isfinite(r.mean_train_loss) for r in records)
        finals.append(state.w.values[0])
    assert abs(finals[1] - finals[2]) < 1e-3
    assert abs(finals[2] - 0.75) < 0.05


def test_pfedme_rejects_bad_mu():
    with pytest.raises(ConfigError):
        build_strategy("pfedme", {"mu": 0.0})


# --- L2GD -----------------------------------------------------------------------

def test_l2gd_alpha_zero_is_pure_local_descent():
    ds = gen_concept_shift_regression(4, 2, seed=1)
    T, lr, p = 30, 0.5, 0.2
    state, _ = run(ds, "l2gd", {"alpha": 0.0, "p": p}, rounds=T, lr_local=lr, seed=5)
    ctx = context(ds, lr_local=lr, seed=5)
    local_steps = T - state.server["mixes"]
    assert 0 < local_steps < T
    step = lr / (ds.N * (1 - p))
    for cs, data in zip(state.clients, ds.clients):
        b = ctx.init_params()
        for _ in range(local_steps):
            b = b - step * ctx.model.grad(b, data.train.inputs, data.train.targets)
        np.testing.assert_allclose(cs.get("beta"), b, rtol=0, atol=1e-14)


def test_l2gd_mixing_preserves_mean():
    strat = build_strategy("l2gd", {"alpha": 0.7, "mu": 2.0, "p": 0.3})
    betas = np.random.default_rng(0).standard_normal((5, 3))
    mean = betas.mean(axis=0)
    mixed = np.array([strat._apply_pending(b, mean, 5) for b in betas])
    np.testing.assert_allclose(mixed.mean(axis=0), mean, atol=1e-15)
    assert strat.mix_coef(5) == pytest.approx(0.7 * 2.0 / (5 * 0.3))


@pytest.mark.parametrize("p", [0.0, 1.0])
def test_l2gd_rejects_degenerate_p(p):
    with pytest.raises(ConfigError):
        build_strategy("l2gd", {"p": p})


def test_l2gd_personal_models_cluster_by_concept():
    ds = gen_concept_shift_regression(10, 2, seed=0)
    state, _ = run(ds, "l2gd", {"alpha": 0.01}, rounds=400, lr_local=0.5)
    betas = np.array([c.get("beta") for c in state.clients])
    groups = np.array([c.group for c in ds.clients])
    centers = [betas[groups == g].mean(axis=0) for g in (0, 1)]
    for b, g in zip(betas, groups):
        assert np.linalg.norm(b - centers[g]) < 0.05
    assert np.linalg.norm(centers[0] - centers[1]) > 1.0


# --- FedPer / LG-FedAvg ---------------------------------------------------------

def test_fedper_sharing_everything_is_fedavg(sine):
    last = context(sine).layout.names[-1]
    cfg = dict(rounds=5, local_epochs=2, batch_size=5, lr_local=0.1, seed=4)
    fp_state, fp = run(sine, "fedper", {"boundary": last}, **cfg)
    fa_state, fa = run(sine, "fedavg", **cfg)
    assert np.array_equal(fp_state.w.values, fa_state.w.values)
    assert [r.test_loss for r in fp] == [r.test_loss for r in fa]


def test_fedper_sharing_nothing_is_local(sine):
    cfg = dict(rounds=5, local_epochs=2, batch_size=5, lr_local=0.1, seed=4)
    _, fp = run(sine, "fedper", {"boundary": None}, **cfg)
    _, lo = run(sine, "local", **cfg)
    assert [r.test_loss for r in fp] == [r.test_loss for r in lo]


def test_fedper_and_lg_share_complementary_blocks(sine):
    ctx = context(sine)
    fp, lg = build_strategy("fedper"), build_strategy("lgfedavg")
    a, b = fp.shared_slice(ctx), lg.shared_slice(ctx)
    assert a.start == 0 and a.stop == b.start and b.stop == ctx.dim


def test_fedper_unknown_boundary(sine):
    with pytest.raises(ConfigError):
        run(sine, "fedper", {"boundary": "nope"}, rounds=1)


# --- APFL -----------------------------------------------------------------------

def test_apfl_gradient_limits():
    grad_at = lambda x: 2.0 * x
    beta, w = np.array([1.5]), np.array([-3.0])
    assert np.array_equal(apfl_local_gradient(grad_at, beta, w, 1.0), grad_at(beta))
    assert np.all(apfl_local_gradient(grad_at, beta, w, 0.0) == 0)


def test_apfl_zero_mixing_warns():
    with pytest.warns(UserWarning, match="zeta=0"):
        build_strategy("apfl", {"zeta": 0.0})


def test_apfl_half_mixing_stationary_point():
    # F(x) = (x-1)^2/2 evaluated at 0.5 b + 0.5 * 0 is stationary at b = 2
    ds = quad(1.0, 1.0)
    ctx = context(ds, local_epochs=2000, lr_local=0.5)
    strat = build_strategy("apfl", {"zeta": 0.5})
    _, cs = strat.client_update({"w": np.array([0.0])}, ClientState(0, {"beta": np.array([0.0])}),
                                ds.clients[0], rng(), ctx)
    assert cs.get("beta")[0] == pytest.approx(2.0, abs=1e-9)


# --- Per-FedAvg -----------------------------------------------------------------

def test_perfedavg_meta_gradient_quadratic():
    # u = 0.9, grad F(u) = 0.9, Jacobian 1 - 0.1 = 0.9
    ds = quad(1.0, 0.0)
    g = perfedavg_meta_gradient(context(ds).model, np.array([1.0]), ds.clients[0].train, 0.1)
    assert g[0] == pytest.approx(0.81, abs=1e-8)
    g1 = perfedavg_meta_gradient(context(ds).model, np.array([1.0]), ds.clients[0].train, 0.1, "first")
    assert g1[0] == pytest.approx(0.9, abs=1e-12)


def test_perfedavg_zero_step_is_plain_gradient(sine):
    ctx = context(sine)
    w, b = ctx.init_params(), sine.clients[0].train
    g = perfedavg_meta_gradient(ctx.model, w, b, 0.0)
    assert np.array_equal(g, ctx.model.grad(w, b.inputs, b.targets))


def _meta_loss(model, w, batch, eta, k):
    for _ in range(k):
        w = w - eta * model.grad(w, batch.inputs, batch.targets)
    return model.loss(w, batch.inputs, batch.targets)


@pytest.mark.parametrize("inner_steps", [1, 2])
def test_perfedavg_meta_gradient_matches_finite_differences(sine, inner_steps):
    ctx = context(sine)
    w, b, eta = ctx.init_params(), sine.clients[1].train, 0.2
    g = perfedavg_meta_gradient(ctx.model, w, b, eta, "second", inner_steps)
    h = 1e-6
    fd = np.array([(_meta_loss(ctx.model, w + h * e, b, eta, inner_steps)
                    - _meta_loss(ctx.model, w - h * e, b, eta, inner_steps)) / (2 * h) for e in np.eye(w.size)])
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-7)


def test_first_order_error_shrinks_linearly(sine):
    ctx = context(sine)
    w, b = ctx.init_params(), sine.clients[2].train
    gaps = []
    for eta in (1e-2, 1e-3):
        diff = perfedavg_meta_gradient(ctx.model, w, b, eta) - perfedavg_meta_gradient(ctx.model, w, b, eta, "first")
        gaps.append(np.linalg.norm(diff))
    slope = np.log10(gaps[0] / gaps[1])
    assert slope == pytest.approx(1.0, abs=0.1)


def test_perfedavg_full_warmup_is_fedavg(sine):
    cfg = dict(rounds=6, local_epochs=2, batch_size=5, lr_local=0.1, seed=9)
    hp = {"schedule": "fedavg_then_meta", "switch_fraction": 1.0, "eval_adapt_steps": 0}
    pa_state, pa = run(sine, "perfedavg", hp, **cfg)
    fa_state, fa = run(sine, "fedavg", **cfg)
    assert np.array_equal(pa_state.w.values, fa_state.w.values)
    assert [r.test_loss for r in pa] == [r.test_loss for r in fa]


def test_perfedavg_beats_adapted_fedavg_on_sine():
    ds = gen_sine_clients(20, seed=0)
    cfg = dict(rounds=60, local_epochs=5, lr_local=0.3)
    _, fedavg = run(ds, "perfedavg", {"alpha": 0.3, "eval_adapt_steps": 5, "schedule": "fedavg_then_meta",
                                      "switch_fraction": 1.0}, **cfg)
    _, meta = run(ds, "perfedavg", {"alpha": 0.3, "eval_adapt_steps": 5}, **cfg)
    assert meta[-1].mean_test_loss < fedavg[-1].mean_test_loss


# --- MetaSGD --------------------------------------------------------------------

def test_metasgd_elementwise_adaptation():
    model = build_model(ModelSpec("linear", 1, 1, ()))
    batch = Batch(np.array([[1.0]]), np.array([[0.0]]))
    w = np.array([0.5, 0.5])
    np.testing.assert_allclose(model.grad(w, batch.inputs, batch.targets), [1.0, 1.0])
    np.testing.assert_allclose(adapt(model, w, batch, 1, np.array([0.1, -0.2])) - w, [-0.1, 0.2], atol=1e-15)


def test_metasgd_scalar_rate_reduces_to_second_order(sine):
    ctx = context(sine)
    w, b, eta = ctx.init_params(), sine.clients[0].train, 0.1
    g_w, _ = metasgd_meta_gradient(ctx.model, w, np.full(w.size, eta), b, b)
    np.testing.assert_allclose(g_w, perfedavg_meta_gradient(ctx.model, w, b, eta), rtol=1e-6, atol=1e-9)


def test_split_train_val():
    b = Batch(np.arange(5.0).reshape(5, 1), np.arange(5.0).reshape(5, 1))
    tr, va = split_train_val(b, 0.5)
    assert tr.inputs[:, 0].tolist() == [0, 1, 2] and va.inputs[:, 0].tolist() == [3, 4]
    tr, va = split_train_val(b, 0.99)
    assert tr.n == 1 and va.n == 4


def test_metasgd_frozen_rates_stay_put(sine):
    state, records = run(sine, "metasgd", {"learn_alpha": False, "alpha_init": 0.05}, rounds=3, lr_local=0.1)
    assert np.all(state.server["alpha"] == 0.05)
    assert records[-1].extra["alpha_mean"] == pytest.approx(0.05, rel=1e-12)
    state, _ = run(sine, "metasgd", {"alpha_init": 0.05}, rounds=3, lr_local=0.1)
    assert not np.all(state.server["alpha"] == 0.05)


def test_metasgd_needs_two_examples():
    with pytest.raises(ConfigError):
        run(quad(), "metasgd", rounds=1)


def test_personal_strategies_are_deterministic(sine):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name in ("ttp", "ditto", "pfedme", "l2gd", "fedper", "lgfedavg", "apfl", "perfedavg", "metasgd"):
            cfg = dict(rounds=3, batch_size=5, sample_fraction=1.0, seed=11)
            a = run(sine, name, **cfg)[1]
            b = run(sine, name, **cfg)[1]
            assert [r.test_loss for r in a] == [r.test_loss for r in b], name
