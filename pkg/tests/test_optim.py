import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plasticity_lab.network import ParamSet, init_glorot
from plasticity_lab.numerics import RandomStream, ShapeError
from plasticity_lab.optim import (
    AdamState,
    Regularizer,
    RegularizerSpec,
    adam_step,
    feature_rank_penalty,
    regenerative_penalty,
    wasserstein_penalty,
    weight_decay_penalty,
)


def single(values, init):
    """One-layer ParamSet holding ``values`` as a 1 x n weight row and zero bias."""
    w = np.asarray(init, dtype=float).reshape(1, -1)
    p = ParamSet([w], [np.zeros(1)])
    p.assign_flat(np.concatenate([np.asarray(values, dtype=float), [0.0]]))
    return p


def brute_force_w2(cur, ref):
    """Minimum over all matchings of the summed squared differences."""
    best = np.inf
    for perm in itertools.permutations(range(len(cur))):
        best = min(best, sum((cur[i] - ref[j]) ** 2 for i, j in zip(perm, range(len(ref)))))
    return best


def fd(fun, params, h=1e-6):
    theta = params.flatten()
    out = np.empty_like(theta)
    for j in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        out[j] = (fun(params.with_flat(up)) - fun(params.with_flat(down))) / (2 * h)
    return out


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b))


def test_adam_first_step_is_sign():
    p = single([0.0, 0.0, 0.0], [0.0, 0.0, 0.0])
    state = AdamState.zeros(p.size)
    g = np.array([3.0, -0.5, 100.0, 0.0])
    delta = adam_step(state, p, g)
    assert np.allclose(delta[:3], -1e-3 * np.sign(g[:3]), rtol=1e-6)
    assert delta[3] == 0.0
    assert state.t == 1


def test_adam_zero_gradient_keeps_params():
    p = single([1.0, 2.0], [0.0, 0.0])
    before = p.flatten()
    state = AdamState.zeros(p.size)
    for _ in range(50):
        adam_step(state, p, np.zeros(p.size))
    assert np.array_equal(p.flatten(), before)


def test_adam_quadratic_converges():
    # minimise (x - 3)^2 from x = 2.5 with lr 0.02; reference is a scalar loop
    p = single([2.5], [0.0])
    state = AdamState.zeros(p.size, lr=0.02)
    x, m, v = 2.5, 0.0, 0.0
    for t in range(1, 101):
        g = 2 * (x - 3.0)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.02 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        adam_step(state, p, np.array([2 * (p.data[0] - 3.0), 0.0]))
    assert p.data[0] == pytest.approx(x, abs=1e-12)
    assert abs(p.data[0] - 3.0) < 1e-3


def test_adam_dimension_mismatch():
    p = single([0.0], [0.0])
    with pytest.raises(ShapeError):
        adam_step(AdamState.zeros(p.size), p, np.zeros(5))


def test_regularizer_spec_validation():
    assert RegularizerSpec("none", 0.5).strength == 0.0
    assert RegularizerSpec("Wasserstein", 0.1).kind == "wasserstein"
    with pytest.raises(ValueError):
        RegularizerSpec("l1", 0.1)
    with pytest.raises(ValueError):
        RegularizerSpec("weight_decay", -1.0)


def test_wasserstein_of_permutation_is_zero():
    init = [0.3, -1.2, 0.7, 2.0]
    p = single([2.0, 0.3, 0.7, -1.2], init)
    value, grad = wasserstein_penalty(p)
    assert value == 0.0
    assert not np.any(grad)


def test_worked_example():
    p = single([3.0, 1.0], [0.0, 2.0])
    assert wasserstein_penalty(p)[0] == pytest.approx(2.0)
    assert regenerative_penalty(p)[0] == pytest.approx(10.0)
    # sorted current [1, 3] vs init [0, 2]: gradient 2 * (1 - 0) at index 1, 2 * (3 - 2) at index 0
    assert np.allclose(wasserstein_penalty(p)[1][:2], [2.0, 2.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.integers(0, 2**32 - 1))
def test_wasserstein_matches_brute_force(cur, seed):
    ref = np.random.default_rng(seed).normal(size=len(cur))
    p = single(cur, ref)
    assert wasserstein_penalty(p)[0] == pytest.approx(brute_force_w2(cur, ref), rel=1e-9, abs=1e-12)


def test_wasserstein_is_per_tensor():
    # weights and biases are matched separately, never across tensors
    p = ParamSet([np.array([[0.0, 1.0]])], [np.array([5.0])])
    p.assign_flat(np.array([1.0, 0.0, 5.0]))
    assert wasserstein_penalty(p)[0] == 0.0
    p.assign_flat(np.array([5.0, 0.0, 1.0]))
    assert wasserstein_penalty(p)[0] == pytest.approx(16.0 + 16.0)


def test_wasserstein_gradient_finite_differences():
    params = init_glorot([4, 5, 3], "relu", RandomStream(8))
    params.assign_flat(params.flatten() + RandomStream(9).gaussian(params.size) * 0.3)
    _, g = wasserstein_penalty(params)
    assert rel_err(g, fd(lambda q: wasserstein_penalty(q)[0], params)) < 1e-4


def test_wasserstein_ties_use_stable_order():
    p = single([1.0, 1.0], [0.0, 3.0])
    _, g = wasserstein_penalty(p)
    # first occurrence is matched to the smaller initial value
    assert np.allclose(g[:2], [2.0, -4.0])


def test_layout_mismatch_rejected():
    p = single([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(ShapeError):
        wasserstein_penalty(p, [np.zeros((1, 3)), np.zeros(1)])
    with pytest.raises(ShapeError):
        regenerative_penalty(p, [np.zeros((1, 3)), np.zeros(1)])


def test_regenerative_values():
    p = single([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert regenerative_penalty(p)[0] == 0.0
    p = single([1.0, 1.0, 1.0], [0.0, 0.0, 0.0])
    p.assign_flat(np.ones(4))
    value, grad = regenerative_penalty(p)
    assert value == 4.0
    assert np.all(grad == 2.0)


def test_regenerative_dominates_wasserstein():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = rng.integers(1, 30)
        init = rng.normal(size=n)
        p = single(rng.normal(size=n), init)
        assert 0.0 <= wasserstein_penalty(p)[0] <= regenerative_penalty(p)[0] + 1e-12


def test_weight_decay():
    p = single([0.0, 0.0], [0.0, 0.0])
    assert weight_decay_penalty(p)[0] == 0.0
    p.assign_flat(np.array([0.6, 0.8, 0.0]))
    assert weight_decay_penalty(p)[0] == pytest.approx(1.0)
    params = init_glorot([3, 4, 2], "relu", RandomStream(1))
    assert rel_err(weight_decay_penalty(params)[1], fd(lambda q: weight_decay_penalty(q)[0], params)) < 1e-6


def test_feature_rank_equal_singular_values_is_zero():
    # representation = input for a net whose hidden layer copies an orthogonal input batch
    params = ParamSet([np.eye(3), np.ones((2, 3))], [np.zeros(3), np.zeros(2)])
    value, _ = feature_rank_penalty(params, "identity", 2.0 * np.eye(3))
    assert value == pytest.approx(0.0, abs=1e-12)


def test_feature_rank_of_rank_one_representation():
    w = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 0.0]])
    params = ParamSet([w, np.ones((2, 3))], [np.zeros(3), np.zeros(2)])
    x = np.array([[1.0, 0.0], [3.0, 0.0], [-2.0, 0.0], [0.5, 0.0]])
    phi = x @ w.T
    value, _ = feature_rank_penalty(params, "identity", x)
    assert value == pytest.approx(np.linalg.svd(phi, compute_uv=False)[0] ** 2)


def test_feature_rank_zero_representation():
    params = init_glorot([3, 4, 2], "relu", RandomStream(0))
    params.weights[0][:] = 0.0
    value, grad = feature_rank_penalty(params, "relu", np.ones((5, 3)))
    assert value == 0.0 and not np.any(grad)


@pytest.mark.parametrize("activation", ["tanh", "leaky_relu", "identity"])
def test_feature_rank_gradient_finite_differences(activation):
    params = init_glorot([5, 6, 4], activation, RandomStream(4))
    x = RandomStream(5).gaussian((10, 5))
    _, g = feature_rank_penalty(params, activation, x)
    numeric = fd(lambda q: feature_rank_penalty(q, activation, x)[0], params)
    assert rel_err(g, numeric) < 1e-3


def test_zero_strength_is_bit_identical():
    params = init_glorot([4, 5, 3], "relu", RandomStream(3))
    g = RandomStream(4).gaussian(params.size)
    for kind in ("weight_decay", "regenerative", "wasserstein", "feature_rank"):
        reg = Regularizer(RegularizerSpec(kind, 0.0), params, "relu")
        assert np.array_equal(reg.add_gradient(params, g, np.ones((2, 4))), g)
    reg = Regularizer(RegularizerSpec("regenerative", 0.5), params, "relu")
    params.assign_flat(params.flatten() + 1.0)
    assert np.allclose(reg.add_gradient(params, g), g + 0.5 * 2.0)
