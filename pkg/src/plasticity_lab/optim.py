"""Adam and the parameter/feature regularizers.

Every penalty returns ``(value, gradient)`` with the gradient in the
canonical flat parameter ordering. During training the regularizer
contributes ``strength * gradient`` on top of the minibatch loss gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import ParamSet, backprop, flat_gradient, forward
from .numerics import ShapeError, sym_eig

REGULARIZERS = ("none", "weight_decay", "regenerative", "wasserstein", "feature_rank")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, **hyper) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), **hyper)

    def reset(self) -> None:
        self.m[:] = 0.0
        self.v[:] = 0.0
        self.t = 0


def adam_step(state: AdamState, params: ParamSet, gradient) -> np.ndarray:
    """Bias-corrected Adam update applied in place; returns the applied delta."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.data.shape or state.m.shape != g.shape:
        raise ShapeError(
            f"gradient {g.shape}, params {params.data.shape} and state {state.m.shape} disagree"
        )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * (g * g)
    # -lr * m_hat / (sqrt(v_hat) + eps), evaluated with few temporaries
    denom = np.sqrt(state.v)
    denom *= 1.0 / math.sqrt(1.0 - b2 ** state.t)
    denom += state.eps
    delta = np.divide(state.m, denom, out=denom)
    delta *= -state.lr / (1.0 - b1 ** state.t)
    params.data += delta
    return delta


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    strength: float = 0.0

    def __post_init__(self):
        kind = self.kind.strip().lower().replace("-", "_")
        if kind not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.kind!r}; expected one of {REGULARIZERS}")
        if not self.strength >= 0.0:
            raise ValueError(f"regularizer strength must be >= 0, got {self.strength}")
        object.__setattr__(self, "kind", kind)
        if kind == "none":
            object.__setattr__(self, "strength", 0.0)


def _snapshot_tensors(params: ParamSet, snapshot) -> list[np.ndarray]:
    if snapshot is None:
        init = params.init_tensors()
    elif isinstance(snapshot, ParamSet):
        init = snapshot.tensors()
    else:
        init = [np.asarray(t, dtype=np.float64) for t in snapshot]
    current = params.tensors()
    if len(init) != len(current) or any(a.shape != b.shape for a, b in zip(init, current)):
        raise ShapeError("parameter and snapshot layouts differ")
    return init


def regenerative_penalty(params: ParamSet, snapshot=None) -> tuple[float, np.ndarray]:
    """Squared L2 distance to the initial parameters, position by position."""
    init = _snapshot_tensors(params, snapshot)
    diff = params.data - np.concatenate([t.ravel() for t in init])
    return float(diff @ diff), 2.0 * diff


def weight_decay_penalty(params: ParamSet) -> tuple[float, np.ndarray]:
    theta = params.data
    return float(theta @ theta), 2.0 * theta


def sorted_tensors(tensors) -> list[np.ndarray]:
    return [np.sort(np.ravel(t), kind="stable") for t in tensors]


def _stable_sort(flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Without ties every correct sort is the stable one, and the unstable
    # introsort is several times faster than timsort on large tensors.
    order = np.argsort(flat)
    ordered = np.take(flat, order)
    if np.any(ordered[1:] == ordered[:-1]):
        order = np.argsort(flat, kind="stable")
        ordered = np.take(flat, order)
    return order, ordered


def wasserstein_penalty(params: ParamSet, snapshot=None, presorted=None) -> tuple[float, np.ndarray]:
    """Squared 1-D Wasserstein-2 distance between current and initial values.

    Computed separately for every weight matrix and bias vector: both are
    flattened and sorted, and matched order statistics are compared. The
    gradient of each sorted difference is routed back through the sort
    permutation (stable, so ties keep their original index order).
    ``presorted`` may hold the already sorted snapshot tensors.
    """
    if presorted is None:
        presorted = sorted_tensors(_snapshot_tensors(params, snapshot))
    elif len(presorted) != len(params.tensors()):
        raise ShapeError("parameter and snapshot layouts differ")
    total = 0.0
    grads = []
    for cur, ref in zip(params.tensors(), presorted):
        flat = cur.ravel()
        if flat.shape != ref.shape:
            raise ShapeError("parameter and snapshot layouts differ")
        order, diff = _stable_sort(flat)
        diff -= ref
        total += float(diff @ diff)
        diff *= 2.0
        g = np.empty_like(flat)
        np.put(g, order, diff)
        grads.append(g)
    return total, np.concatenate(grads)


def feature_rank_penalty(params: ParamSet, activation: str, x) -> tuple[float, np.ndarray]:
    """sigma_1^2 - sigma_d^2 of the last hidden representation, d = min(batch, width).

    The representation gradient 2 Phi (v_1 v_1^T - v_d v_d^T) is pushed back
    through the network. Repeated extreme singular values take whichever
    vectors the eigensolver returns, which is still a valid subgradient.
    """
    if params.num_layers < 2:
        raise ValueError("feature rank penalty needs at least one hidden layer")
    _, cache = forward(params, activation, x)
    phi = cache.representation
    if not np.any(phi):
        return 0.0, np.zeros(params.size)
    batch, width = phi.shape
    d = min(batch, width)
    evals, evecs = sym_eig(phi.T @ phi)
    evals = np.clip(evals, 0.0, None)
    penalty = float(evals[0] - evals[d - 1])
    v1, vd = evecs[:, 0], evecs[:, d - 1]
    grad_phi = 2.0 * (np.outer(phi @ v1, v1) - np.outer(phi @ vd, vd))
    top = params.num_layers - 2
    deltas = backprop(params, activation, cache, grad_phi, top=top)
    return penalty, flat_gradient(params, cache, deltas)


class Regularizer:
    """Training-time wrapper around a RegularizerSpec.

    Caches the sorted initial tensors so the Wasserstein penalty only sorts
    the current parameters each step.
    """

    def __init__(self, spec: RegularizerSpec, params: ParamSet, activation: str):
        self.spec = spec
        self.activation = activation
        self._presorted = None
        if spec.kind == "wasserstein":
            self._presorted = sorted_tensors(params.init_tensors())

    @property
    def active(self) -> bool:
        return self.spec.kind != "none" and self.spec.strength > 0.0

    def penalty(self, params: ParamSet, x=None) -> tuple[float, np.ndarray]:
        kind = self.spec.kind
        if kind == "weight_decay":
            return weight_decay_penalty(params)
        if kind == "regenerative":
            return regenerative_penalty(params)
        if kind == "wasserstein":
            return wasserstein_penalty(params, presorted=self._presorted)
        if kind == "feature_rank":
            return feature_rank_penalty(params, self.activation, x)
        return 0.0, np.zeros(params.size)

    def add_gradient(self, params: ParamSet, gradient: np.ndarray, x=None) -> np.ndarray:
        if not self.active:
            return gradient
        _, g = self.penalty(params, x)
        return gradient + self.spec.strength * g
