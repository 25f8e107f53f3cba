import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.errors import DivergenceError, StructuralError
from fedsim.gradcheck import fd_gradient, relative_error
from fedsim.models import Batch, ModelSpec, build_model, fisher_diag, gradient, hvp, init_params, loss
from fedsim.rng import rng_substream

LINEAR_1D = ModelSpec("linear", 1, 1)
SPECS = [
    ModelSpec("linear", 3, 2),
    ModelSpec("logistic", 3, 1),
    ModelSpec("logistic", 3, 4),
    ModelSpec("mlp", 2, 1, (4, 3)),
    ModelSpec("mlp", 2, 3, (5,), loss_kind="cross_entropy"),
]


def random_batch(spec, rng, n=7):
    X = rng.standard_normal((n, spec.input_dim))
    if spec.classifier:
        Y = rng.integers(0, max(2, spec.output_dim), size=n)
    else:
        Y = rng.standard_normal((n, spec.output_dim))
    return Batch(X, Y)


def test_init_is_deterministic_and_sized():
    spec = ModelSpec("mlp", 2, 1, (3,))
    a = init_params(spec, rng_substream(0, "t"))
    b = init_params(spec, rng_substream(0, "t"))
    assert a == b
    assert a.dim == 2 * 3 + 3 + 3 * 1 + 1 == 13
    assert init_params(ModelSpec("linear", 4, 1), rng_substream(0, "t")).dim == 5
    assert build_model(spec).layout.names == ["layer0", "layer1"]


def test_loss_hand_values():
    assert loss(LINEAR_1D, [1.0, 0.0], Batch([[2.0]], [[2.0]])) == 0.0
    assert loss(LINEAR_1D, [0.0, 0.0], Batch([[1.0]], [[2.0]])) == 2.0
    X = np.random.default_rng(0).standard_normal((5, 3))
    assert loss(ModelSpec("logistic", 3, 1), np.zeros(4), Batch(X, np.array([0, 1, 1, 0, 1]))) == pytest.approx(np.log(2))
    assert loss(ModelSpec("logistic", 3, 4), np.zeros(16), Batch(X, np.array([0, 1, 2, 3, 1]))) == pytest.approx(np.log(4))


def test_quadratic_gradient_and_hvp():
    # one point at x = sqrt(h), y = sqrt(h) a, no bias: loss h (w - a)^2 / 2
    spec = ModelSpec("linear", 1, 1, bias=False)
    h, a = 3.0, 0.0
    b = Batch([[np.sqrt(h)]], [[np.sqrt(h) * a]])
    assert gradient(spec, [1.0], b).values[0] == pytest.approx(h * 1.0)
    assert hvp(spec, [0.4], b, [2.0]).values[0] == pytest.approx(6.0, rel=1e-8)
    assert np.all(hvp(spec, [0.4], b, [0.0]).values == 0)
    unit = Batch([[1.0]], [[0.0]])
    assert gradient(spec, [1.0], unit).values[0] == 1.0


def test_gradient_vanishes_at_exact_fit():
    X = np.random.default_rng(1).standard_normal((6, 2))
    w = np.array([0.5, -1.0, 0.25])
    Y = X @ w[:2].reshape(2, 1) + w[2]
    np.testing.assert_allclose(gradient(ModelSpec("linear", 2, 1), w, Batch(X, Y)).values, 0.0, atol=1e-15)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.family}-{s.output_dim}")
def test_gradient_matches_finite_differences(spec):
    model = build_model(spec)
    for k in range(20):
        rng = rng_substream(k, "models.fd")
        w = 0.5 * rng.standard_normal(model.dim)
        b = random_batch(spec, rng)
        fd = fd_gradient(lambda p: model.loss(p, b.inputs, b.targets), w)
        assert relative_error(model.grad(w, b.inputs, b.targets), fd) < 1e-5


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.family}-{s.output_dim}")
def test_gradient_is_mean_linear_in_concatenation(spec):
    model = build_model(spec)
    rng = rng_substream(3, "models.concat")
    w = rng.standard_normal(model.dim)
    A, B = random_batch(spec, rng, 4), random_batch(spec, rng, 9)
    AB = Batch.concat([A, B])
    g = model.grad(w, AB.inputs, AB.targets)
    expected = (4 * model.grad(w, A.inputs, A.targets) + 9 * model.grad(w, B.inputs, B.targets)) / 13
    np.testing.assert_allclose(g, expected, rtol=1e-12, atol=1e-14)
    perm = rng.permutation(13)
    assert model.loss(w, AB.inputs[perm], AB.targets[perm]) == pytest.approx(model.loss(w, AB.inputs, AB.targets), rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(range(len(SPECS))))
def test_losses_are_nonnegative_and_hvp_is_linear(seed, which):
    spec = SPECS[which]
    model = build_model(spec)
    rng = rng_substream(seed, "models.prop")
    w = rng.standard_normal(model.dim)
    b = random_batch(spec, rng)
    assert model.loss(w, b.inputs, b.targets) >= 0.0
    u, v = rng.standard_normal(model.dim), rng.standard_normal(model.dim)
    lhs = model.hvp(w, b.inputs, b.targets, 2.0 * u + v)
    rhs = 2.0 * model.hvp(w, b.inputs, b.targets, u) + model.hvp(w, b.inputs, b.targets, v)
    assert relative_error(lhs, rhs) < 1e-5


def test_fisher_diagonal():
    spec = ModelSpec("linear", 2, 1)
    model = build_model(spec)
    X = np.array([[1.0, 2.0], [-1.0, 0.5]])
    w = np.array([0.3, -0.2, 0.1])
    Y = np.array([[1.0], [0.0]])
    one = fisher_diag(spec, w, Batch(X[:1], Y[:1])).values
    np.testing.assert_allclose(one, model.grad(w, X[:1], Y[:1]) ** 2, rtol=1e-14)
    brute = np.mean([model.grad(w, X[j:j + 1], Y[j:j + 1]) ** 2 for j in range(2)], axis=0)
    np.testing.assert_allclose(fisher_diag(spec, w, Batch(X, Y)).values, brute, rtol=1e-14)
    fit = X @ w[:2].reshape(2, 1) + w[2]
    assert np.all(fisher_diag(spec, w, Batch(X, fit)).values == 0)


def test_spec_and_batch_validation():
    with pytest.raises(StructuralError):
        ModelSpec("cnn", 2, 1)
    with pytest.raises(StructuralError):
        ModelSpec("linear", 2, 1, loss_kind="cross_entropy")
    with pytest.raises(StructuralError):
        ModelSpec("linear", 0, 1)
    with pytest.raises(StructuralError):
        Batch(np.zeros((2, 1)), np.zeros((3, 1)))
    with pytest.raises(StructuralError):
        Batch([[np.inf]], [[0.0]])
    with pytest.raises(StructuralError):
        loss(LINEAR_1D, [1.0], Batch([[1.0]], [[1.0]]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_is_a_divergence():
    with pytest.raises(DivergenceError):
        loss(LINEAR_1D, [1e200, 0.0], Batch([[1e200]], [[0.0]]))
