import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plasticity_lab import diagnostics as dg
from plasticity_lab.network import ParamSet, init_glorot, per_sample_gradients, softmax
from plasticity_lab.numerics import RandomStream


def test_effective_rank_examples():
    assert dg.effective_rank([1.0, 0.0, 0.0]) == 1
    assert dg.effective_rank([1.0, 1.0, 1.0, 1.0]) == 4
    assert dg.effective_rank([0.99, 0.01]) == 2
    assert dg.effective_rank([0.0, 0.0]) == 0
    assert dg.effective_rank([]) == 0


def test_effective_rank_rejects_bad_input():
    with pytest.raises(ValueError):
        dg.effective_rank([1.0, -0.1])
    with pytest.raises(ValueError):
        dg.effective_rank([0.5, 1.0])


@settings(max_examples=60, deadline=None)
# zero or normal floats: power-of-two scaling is then exact
@given(st.lists(st.just(0.0) | st.floats(1e-200, 100), min_size=1, max_size=30), st.integers(-20, 20))
def test_effective_rank_scale_invariant(values, power):
    s = np.sort(np.asarray(values))[::-1]
    assert dg.effective_rank(s) == dg.effective_rank(s * 2.0 ** power)


def test_rank_report_relative():
    r = dg.RankReport.from_values([3.0, 2.0, 1.0, 0.0], 8)
    assert (r.erank, r.max_rank) == (3, 8)
    assert r.relative == pytest.approx(3 / 8)


def test_empirical_fisher_single_column():
    g = np.zeros((10, 4))
    g[:, 2] = np.arange(10)
    r = dg.empirical_fisher_rank(g)
    assert r.erank == 1 and r.max_rank == 4


def test_gram_trick_matches_direct_svd(np_rng):
    g = np_rng.standard_normal((200, 32)) * np.geomspace(1, 1e-3, 32)
    # singular values of G G^T are the squared singular values of G
    direct = dg.effective_rank(np.linalg.svd(g, compute_uv=False) ** 2)
    assert dg.empirical_fisher_rank(g).erank == direct
    outer = np.sort(np.clip(np.linalg.eigvalsh(g @ g.T), 0, None))[::-1]
    assert dg.effective_rank(outer) == direct


def linear_softmax(d_in=4, c=3, m=6, seed=0):
    rng = RandomStream(seed, 2)
    params = init_glorot([d_in, c], "identity", rng)
    params.assign_flat(params.flatten() + 0.2 * rng.gaussian(params.size))
    x = rng.gaussian((m, d_in))
    y = rng.integers(c, m)
    return params, x, y


def analytic_linear_hessian(params, x):
    """(1/M) sum_i (diag(p_i) - p_i p_i^T) kron [x_i; 1][x_i; 1]^T in flat order."""
    w, b = params.weights[0], params.biases[0]
    c, d_in = w.shape
    p = softmax(x @ w.T + b)
    xt = np.hstack([x, np.ones((len(x), 1))])
    h_aug = sum(np.kron(np.diag(pi) - np.outer(pi, pi), np.outer(xi, xi)) for pi, xi in zip(p, xt)) / len(x)
    # augmented order is (class, input-or-bias); flat order puts all weights first
    order = [k * (d_in + 1) + j for k in range(c) for j in range(d_in)] + [k * (d_in + 1) + d_in for k in range(c)]
    return h_aug[np.ix_(order, order)]


def test_exact_hessian_linear_softmax():
    params, x, y = linear_softmax()
    h = dg.exact_hessian(params, "identity", x, y)
    ref = analytic_linear_hessian(params, x)
    assert np.linalg.norm(h - ref) <= 1e-4 * np.linalg.norm(ref)


def test_exact_hessian_asymmetry_small():
    params = init_glorot([3, 5, 3], "tanh", RandomStream(1))
    x = RandomStream(2).gaussian((6, 3))
    y = RandomStream(3).integers(3, 6)
    raw = dg.exact_hessian(params, "tanh", x, y, symmetrize=False)
    assert np.linalg.norm(raw - raw.T) < 1e-5 * np.linalg.norm(raw)


def test_exact_hessian_zero_input_block():
    params = init_glorot([3, 4, 2], "tanh", RandomStream(1))
    h = dg.exact_hessian(params, "tanh", np.zeros((4, 3)), np.array([0, 1, 0, 1]))
    block = 12  # first-layer weights
    assert np.allclose(h[:block, :], 0.0, atol=1e-10)
    assert np.allclose(h[:, :block], 0.0, atol=1e-10)


def test_size_guard():
    params = init_glorot([100, 60, 10], "relu", RandomStream(0))
    with pytest.raises(dg.SizeGuardError):
        dg.exact_hessian(params, "relu", np.zeros((1, 100)), [0])
    with pytest.raises(dg.SizeGuardError):
        dg.gauss_newton_rank(params, "relu", np.zeros((1, 100)))


def test_gauss_newton_equals_hessian_for_linear_model():
    params, x, y = linear_softmax(seed=4)
    gn = dg.gauss_newton_matrix(params, "identity", x)
    assert np.allclose(gn, analytic_linear_hessian(params, x), atol=1e-12)
    assert np.allclose(gn, dg.exact_hessian(params, "identity", x, y), atol=1e-6)


def test_softmax_hessian_rows_sum_to_zero():
    p = softmax(RandomStream(0).gaussian((5, 4)))
    hz = dg.softmax_hessian(p)
    assert np.all(np.abs(hz.sum(axis=2)) < 1e-12)
    assert np.all(np.abs(dg.softmax_hessian(p[0]).sum(axis=1)) < 1e-12)


def test_gauss_newton_max_rank():
    params, x, _ = linear_softmax(d_in=6, c=3, m=2)
    r = dg.gauss_newton_rank(params, "identity", x)
    assert r.max_rank == min(params.size, 2 * 2)
    assert r.erank <= 4


def test_fisher_rank_degenerate_and_deterministic():
    params = ParamSet([np.array([[50.0, 0.0], [0.0, 50.0], [-50.0, -50.0]])], [np.zeros(3)])
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.2], [0.1, 1.0]])
    labels = dg.sampled_labels(params, "identity", x, RandomStream(5))
    assert np.array_equal(labels, [0, 1, 0, 1])
    ef = dg.empirical_fisher_rank(per_sample_gradients(params, "identity", x, labels))
    assert dg.fisher_rank(params, "identity", x, RandomStream(5)) == ef
    tiny = init_glorot([4, 6, 3], "relu", RandomStream(2))
    z = RandomStream(3).gaussian((20, 4))
    assert dg.fisher_rank(tiny, "relu", z, RandomStream(7)) == dg.fisher_rank(tiny, "relu", z, RandomStream(7))


def dense_overlap(g_matrix, g):
    """Build the truncated d x d operator explicitly."""
    h = g_matrix @ g_matrix.T
    w, v = np.linalg.eigh(h)
    w, v = w[::-1], v[:, ::-1]
    k = dg.effective_rank(np.clip(w, 0, None))
    h_top = (v[:, :k] * w[:k]) @ v[:, :k].T
    hg = h_top @ g
    return (g @ hg) / (np.linalg.norm(g) * np.linalg.norm(hg))


def test_grad_overlap_matches_dense(np_rng):
    for _ in range(5):
        g_matrix = np_rng.standard_normal((50, 8)) * np.geomspace(1, 0.01, 8)
        g = np_rng.standard_normal(50)
        assert dg.grad_overlap(g_matrix, g) == pytest.approx(dense_overlap(g_matrix, g), abs=1e-8)


def test_grad_overlap_special_cases(np_rng):
    g_matrix = np.zeros((6, 3))
    g_matrix[0, 0], g_matrix[1, 1], g_matrix[2, 2] = 3.0, 0.1, 0.01
    top = np.zeros(6)
    top[0] = 2.0
    assert dg.grad_overlap(g_matrix, top) == pytest.approx(1.0, abs=1e-9)
    null = np.zeros(6)
    null[5] = 1.0
    assert dg.grad_overlap(g_matrix, null) == 0.0
    with pytest.raises(ValueError):
        dg.grad_overlap(g_matrix, np.zeros(6))
    rand = np_rng.standard_normal((30, 10))
    for _ in range(10):
        assert 0.0 <= dg.grad_overlap(rand, np_rng.standard_normal(30)) <= 1.0


def test_dormancy():
    n = 8
    assert dg.dormancy_negentropy(np.ones((3, n))) == pytest.approx(-np.log(n))
    one = np.zeros((3, n))
    one[:, 2] = 4.0
    assert dg.dormancy_negentropy(one) == 0.0
    assert dg.dormancy_negentropy(np.array([[3.0, -1.0], [-3.0, 1.0]])) == pytest.approx(-0.562335, abs=1e-6)
    assert dg.dormancy_negentropy(np.zeros((2, 3))) == 0.0
    rand = RandomStream(0).gaussian((10, 5))
    assert -np.log(5) <= dg.dormancy_negentropy(rand) <= 0.0


def test_update_norm_and_weight_norm():
    assert dg.update_norm_avg([np.full(100, 0.001)] * 7) == pytest.approx(0.1)
    assert dg.update_norm_avg([np.full(100, -0.001)]) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        dg.update_norm_avg([])
    p = ParamSet([np.array([[1.0, -2.0]])], [np.array([0.5])])
    assert dg.weight_norm(p) == 3.5


def test_distances_from_init():
    params = init_glorot([4, 5, 3], "relu", RandomStream(0))
    assert dg.dist_from_init(params) == (0.0, 0.0)
    rng = RandomStream(1)
    for _ in range(50):
        params.assign_flat(params.init_flat() + rng.gaussian(params.size))
        l2, w2 = dg.dist_from_init(params)
        assert 0.0 <= w2 <= l2 + 1e-12


def test_feature_effective_rank():
    r = dg.feature_effective_rank(np.eye(5))
    assert r.relative == 1.0
    assert dg.feature_effective_rank(np.outer(np.arange(1, 7), np.arange(1, 4))).erank == 1
    phi = RandomStream(2).gaussian((40, 6)) * np.geomspace(1, 1e-2, 6)
    via_gram = dg.effective_rank(np.sqrt(np.clip(np.linalg.eigvalsh(phi.T @ phi)[::-1], 0, None)))
    assert dg.feature_effective_rank(phi).erank == via_gram
    assert dg.feature_effective_rank(phi).max_rank == 6


def test_record_columns():
    cols = dg.DiagnosticsRecord.columns()
    assert cols[0] == "task" and cols[-3:] == list(dg.OPTIONAL_COLUMNS)
