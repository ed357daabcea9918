"""Curvature and plasticity metrics.

Curvature is summarised by the effective rank of a Hessian estimate: the
smallest number of leading singular values holding more than 99% of the
total singular value mass. The main estimator is the empirical Fisher
``H = G G^T`` (G = per-sample gradients, d x M). Its singular values are the
eigenvalues of the small M x M Gram matrix ``G^T G``, so the rank is read
off that matrix. Exact, sampled-Fisher and Gauss-Newton versions exist for
validation on small networks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .network import (
    ParamSet, backprop, flat_gradient, forward, forward_from, output_delta, output_jacobians, per_sample_gram, softmax,
)
from .numerics import RandomStream, ShapeError, singular_values, sym_eig, sym_eigvals
from .optim import regenerative_penalty, wasserstein_penalty

ERANK_THRESHOLD = 0.99
DENSE_GUARD = 5000


class SizeGuardError(ValueError):
    pass


@dataclass(frozen=True)
class RankReport:
    erank: int
    max_rank: int
    relative: float

    @classmethod
    def from_values(cls, singular, max_rank: int) -> "RankReport":
        erank = effective_rank(singular)
        max_rank = max(int(max_rank), 1)
        return cls(erank, max_rank, min(erank / max_rank, 1.0))


def effective_rank(singular_values, threshold: float = ERANK_THRESHOLD) -> int:
    """Smallest j whose leading-j share of the total strictly exceeds ``threshold``."""
    s = np.asarray(singular_values, dtype=np.float64)
    if s.size == 0:
        return 0
    if np.any(s < 0):
        raise ValueError("singular values must be non-negative")
    if np.any(np.diff(s) > 0):
        raise ValueError("singular values must be sorted in descending order")
    cum = np.cumsum(s)
    total = cum[-1]
    if total == 0.0:
        return 0
    return int(np.argmax(cum / total > threshold)) + 1


def gram_spectrum(gram) -> np.ndarray:
    """Singular values of G G^T, i.e. the clamped eigenvalues of G^T G."""
    return np.clip(sym_eigvals(gram), 0.0, None)


def empirical_fisher_rank_from_gram(gram, num_params: int) -> RankReport:
    gram = np.asarray(gram, dtype=np.float64)
    return RankReport.from_values(gram_spectrum(gram), min(num_params, gram.shape[0]))


def empirical_fisher_rank(g_matrix) -> RankReport:
    """Effective rank of G G^T computed in the M x M space of G^T G.

    ``max_rank`` is min(d, M).
    """
    g_matrix = np.asarray(g_matrix, dtype=np.float64)
    if g_matrix.ndim != 2 or g_matrix.shape[1] < 1:
        raise ShapeError("gradient matrix must be d x M with M >= 1")
    return empirical_fisher_rank_from_gram(g_matrix.T @ g_matrix, g_matrix.shape[0])


def symmetric_rank_report(matrix, max_rank: int | None = None) -> RankReport:
    """Rank report of a symmetric (possibly indefinite) matrix; sigma = |lambda|."""
    evals = sym_eigvals(matrix)
    sv = np.sort(np.abs(evals))[::-1]
    return RankReport.from_values(sv, matrix.shape[0] if max_rank is None else max_rank)


def _guard(params: ParamSet) -> None:
    if params.size > DENSE_GUARD:
        raise SizeGuardError(f"{params.size} parameters exceed the dense-matrix guard of {DENSE_GUARD}")


def fd_step(params: ParamSet) -> float:
    return 1e-4 * (1.0 + float(np.max(np.abs(params.data))))


def exact_hessian(params: ParamSet, activation: str, x, y, symmetrize: bool = True) -> np.ndarray:
    """Hessian of the mean cross-entropy by central differences of the gradient.

    Column j is (grad(theta + h e_j) - grad(theta - h e_j)) / 2h with
    h = 1e-4 (1 + max|theta|).
    """
    _guard(params)
    d = params.size
    h = fd_step(params)
    probe = params.copy()
    base_logits, base = forward(probe, activation, x)
    m = base.inputs[0].shape[0]
    output_delta(base_logits, y)  # label validation
    neg_onehot = np.zeros_like(base_logits)
    neg_onehot[np.arange(m), np.asarray(y, dtype=np.int64)] = -1.0
    # perturbing layer l leaves the forward pass below it untouched
    sizes = [w.size + b.size for w, b in zip(params.weights, params.biases)]
    layer_of = np.repeat(np.arange(params.num_layers), sizes)

    def grad(j):
        logits, cache = forward_from(probe, activation, base, int(layer_of[j]))
        delta = softmax(logits)
        delta += neg_onehot
        delta /= m
        return flat_gradient(probe, cache, backprop(probe, activation, cache, delta))

    hess = np.empty((d, d))
    for j in range(d):
        orig = probe.data[j]
        probe.data[j] = orig + h
        gp = grad(j)
        probe.data[j] = orig - h
        gm = grad(j)
        probe.data[j] = orig
        hess[:, j] = (gp - gm) / (2.0 * h)
    if symmetrize:
        hess = 0.5 * (hess + hess.T)
    return hess


def exact_rank(params: ParamSet, activation: str, x, y) -> RankReport:
    return symmetric_rank_report(exact_hessian(params, activation, x, y))


def sampled_labels(params: ParamSet, activation: str, x, rng: RandomStream) -> np.ndarray:
    """One label per input drawn from the model's own predictive distribution."""
    logits, _ = forward(params, activation, x)
    return rng.categorical(softmax(logits))


def fisher_rank(params: ParamSet, activation: str, x, rng: RandomStream) -> RankReport:
    """Empirical-Fisher machinery applied to labels sampled from the model."""
    y_hat = sampled_labels(params, activation, x, rng)
    return empirical_fisher_rank_from_gram(per_sample_gram(params, activation, x, y_hat), params.size)


def softmax_hessian(p) -> np.ndarray:
    """Hessian of cross-entropy w.r.t. logits: diag(p) - p p^T (one row per sample stacked)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        return np.diag(p) - np.outer(p, p)
    return np.einsum("mc,cd->mcd", p, np.eye(p.shape[1])) - np.einsum("mc,md->mcd", p, p)


def gauss_newton_matrix(params: ParamSet, activation: str, x, chunk: int = 128) -> np.ndarray:
    """Mean over samples of J_i^T (diag(p_i) - p_i p_i^T) J_i.

    Accumulated ``chunk`` samples at a time to bound the Jacobian's memory.
    """
    _guard(params)
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    gn = np.zeros((params.size, params.size))
    for lo in range(0, m, chunk):
        jac, logits = output_jacobians(params, activation, x[lo:lo + chunk])
        p = softmax(logits)
        # diag(p) - p p^T = L^T L with L = diag(sqrt p) - sqrt(p) p^T
        root = np.sqrt(p)
        factor = np.einsum("mc,cd->mcd", root, np.eye(p.shape[1])) - np.einsum("mc,md->mcd", root, p)
        flat = np.matmul(factor, jac).reshape(-1, jac.shape[2])
        gn += flat.T @ flat
    gn /= m
    return 0.5 * (gn + gn.T)


def gauss_newton_rank(params: ParamSet, activation: str, x) -> RankReport:
    x = np.asarray(x, dtype=np.float64)
    gn = gauss_newton_matrix(params, activation, x)
    c = params.layout[-1]
    return symmetric_rank_report(gn, min(params.size, x.shape[0] * (c - 1)))


def grad_overlap_from_gram(gram, gtg_col, g_norm: float) -> float:
    """Top-subspace overlap computed entirely in the M-dimensional space.

    ``gram`` is G^T G, ``gtg_col`` is G^T g and ``g_norm`` is ||g||. With
    G^T G = V L V^T truncated to its effective rank k,
    g^T H_k g = ||V_k^T G^T g||^2 and ||H_k g||^2 = sum_j l_j (v_j^T G^T g)^2.
    """
    evals, evecs = sym_eig(gram)
    return grad_overlap_from_eig(np.clip(evals, 0.0, None), evecs, gtg_col, g_norm)


def grad_overlap_from_eig(evals, evecs, gtg_col, g_norm: float) -> float:
    """As :func:`grad_overlap_from_gram` given the (clamped, descending) eigenpairs of G^T G."""
    if not g_norm > 0.0:
        raise ValueError("gradient must be nonzero")
    k = effective_rank(evals)
    if k == 0:
        return 0.0
    proj = evecs[:, :k].T @ np.asarray(gtg_col, dtype=np.float64)
    num = float(proj @ proj)
    hg_norm = math.sqrt(float(np.sum(evals[:k] * proj * proj)))
    if hg_norm == 0.0:
        return 0.0
    return min(max(num / (g_norm * hg_norm), 0.0), 1.0)


def grad_overlap(g_matrix, g) -> float:
    """g^T H g / (||g|| ||H g||) for H = G G^T truncated to its top eigenpairs."""
    g_matrix = np.asarray(g_matrix, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (g_matrix.shape[0],):
        raise ShapeError(f"gradient shape {g.shape} does not match G rows {g_matrix.shape[0]}")
    norm = float(np.linalg.norm(g))
    if norm == 0.0:
        raise ValueError("gradient must be nonzero")
    return grad_overlap_from_gram(g_matrix.T @ g_matrix, g_matrix.T @ g, norm)


def dormancy_negentropy(phi) -> float:
    """Negative entropy (natural log) of normalised mean |activation| per unit."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 2 or phi.shape[1] < 1:
        raise ShapeError("representation must be batch x units with >= 1 unit")
    a = np.mean(np.abs(phi), axis=0)
    total = a.sum()
    if total == 0.0:
        return 0.0
    p = a / total
    nz = p[p > 0]
    return float(np.sum(nz * np.log(nz)))


def update_norm_avg(deltas) -> float:
    """Mean over steps of the L1 norm of each update (a scalar counts as its own norm)."""
    norms = [float(np.sum(np.abs(d))) for d in deltas]
    if not norms:
        raise ValueError("need at least one recorded update")
    return float(np.mean(norms))


def weight_norm(params: ParamSet) -> float:
    return float(np.sum(np.abs(params.data)))


def dist_from_init(params: ParamSet, snapshot=None) -> tuple[float, float]:
    """(L2 distance, per-tensor Wasserstein-2 distance) to the initial parameters."""
    l2_sq, _ = regenerative_penalty(params, snapshot)
    w2_sq, _ = wasserstein_penalty(params, snapshot)
    return math.sqrt(l2_sq), math.sqrt(w2_sq)


def feature_effective_rank(phi) -> RankReport:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 2 or phi.size == 0:
        raise ShapeError("representation must be a non-empty batch x width matrix")
    return RankReport.from_values(singular_values(phi), min(phi.shape))


@dataclass
class DiagnosticsRecord:
    task: int
    task_end_error: float
    task_end_loss: float
    avg_online_error: float
    hessian_erank_rel: float
    feature_erank_rel: float
    update_norm_l1_avg: float
    weight_norm_l1: float
    dormancy_negentropy: float
    grad_overlap: float
    dist_init_l2: float
    dist_init_w2: float
    fisher_erank_rel: float | None = None
    gauss_newton_erank_rel: float | None = None
    exact_erank_rel: float | None = None

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)


OPTIONAL_COLUMNS = ("fisher_erank_rel", "gauss_newton_erank_rel", "exact_erank_rel")
