"""Fully connected classifier with hand-written backprop.

Weights are stored ``[fan_out, fan_in]`` and applied to row-major batches,
``Z = A @ W.T + b``. The canonical flat ordering is layer 0 weights
(row-major), layer 0 biases, layer 1 weights, and so on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import RandomStream, ShapeError

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")
LEAKY_SLOPE = 0.01


def check_activation(kind: str) -> str:
    kind = kind.strip().lower().replace("-", "_")
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return kind


def _leaky_slopes(z: np.ndarray) -> np.ndarray:
    # 1 where z > 0, LEAKY_SLOPE elsewhere; arithmetic on the mask is much
    # faster than np.where on unpredictable signs ((1 - s) + s == 1 exactly)
    out = (z > 0.0) * (1.0 - LEAKY_SLOPE)
    out += LEAKY_SLOPE
    return out


def activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "leaky_relu":
        out = _leaky_slopes(z)
        out *= z
        return out
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Derivative of the activation at ``z`` (``a`` is the activation output).

    At exactly zero relu uses 0 and leaky_relu uses its negative slope.
    """
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "leaky_relu":
        return _leaky_slopes(z)
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {kind!r}")


def _check_layout(layout) -> tuple[int, ...]:
    layout = tuple(int(w) for w in layout)
    if len(layout) < 2 or any(w <= 0 for w in layout):
        raise ValueError(f"layout needs >= 2 positive widths, got {layout}")
    return layout


def _read_only(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(eq=False)
class ParamSet:
    """Per-layer weights and biases plus a frozen copy of their initial values."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    init_weights: tuple[np.ndarray, ...] = field(default=(), repr=False)
    init_biases: tuple[np.ndarray, ...] = field(default=(), repr=False)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i}: fan_in {w.shape[1]} != previous fan_out")
        self.data = np.concatenate([t.ravel() for t in self.tensors()])
        self._bind_views()
        if not self.init_weights:
            self.init_weights = tuple(_read_only(w) for w in self.weights)
            self.init_biases = tuple(_read_only(b) for b in self.biases)

    def _bind_views(self) -> None:
        # weights/biases are views into one flat buffer so optimizers can
        # update ``data`` in place
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = self.data[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            self.biases[i] = self.data[pos:pos + b.size]
            pos += b.size

    @property
    def layout(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def init_tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.init_weights, self.init_biases):
            out.extend((w, b))
        return out

    def flatten(self) -> np.ndarray:
        return self.data.copy()

    def init_flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.init_tensors()])

    def assign_flat(self, flat: np.ndarray) -> None:
        """Overwrite the current values in place from a canonical flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.data.shape:
            raise ShapeError(f"flat vector has shape {flat.shape}, expected {self.data.shape}")
        self.data[:] = flat

    def with_flat(self, flat: np.ndarray) -> "ParamSet":
        """New ParamSet holding ``flat`` but sharing this set's init snapshot."""
        ws, bs = unflatten(self.layout, flat)
        return ParamSet(ws, bs, self.init_weights, self.init_biases)

    def set_snapshot(self, flat: np.ndarray) -> None:
        """Replace the init snapshot (used when restoring a checkpoint)."""
        ws, bs = unflatten(self.layout, flat)
        self.init_weights = tuple(_read_only(w) for w in ws)
        self.init_biases = tuple(_read_only(b) for b in bs)

    def copy(self) -> "ParamSet":
        return self.with_flat(self.flatten())


def unflatten(layout, flat) -> tuple[list[np.ndarray], list[np.ndarray]]:
    layout = _check_layout(layout)
    flat = np.asarray(flat, dtype=np.float64)
    expected = sum(o * i + o for i, o in zip(layout[:-1], layout[1:]))
    if flat.shape != (expected,):
        raise ShapeError(f"flat vector has shape {flat.shape}, layout needs ({expected},)")
    weights, biases, pos = [], [], 0
    for fan_in, fan_out in zip(layout[:-1], layout[1:]):
        weights.append(flat[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in).copy())
        pos += fan_out * fan_in
        biases.append(flat[pos:pos + fan_out].copy())
        pos += fan_out
    return weights, biases


def init_glorot(layout, activation: str = "relu", rng: RandomStream | None = None) -> ParamSet:
    """Glorot-uniform weights on +-sqrt(6 / (fan_in + fan_out)), zero biases.

    The same scheme is used for every activation; ``activation`` is only
    validated.
    """
    layout = _check_layout(layout)
    check_activation(activation)
    rng = rng if rng is not None else RandomStream(0)
    weights, biases = [], []
    for fan_in, fan_out in zip(layout[:-1], layout[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ParamSet(weights, biases)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # inputs[l] is what layer l consumes
    pre: list[np.ndarray]
    post: list[np.ndarray]

    @property
    def representation(self) -> np.ndarray:
        """Post-activation output of the last hidden layer (batch x width).

        For a network without hidden layers this is the raw input.
        """
        return self.inputs[-1]


def forward(params: ParamSet, activation: str, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layout[0]:
        raise ShapeError(f"input shape {x.shape} does not match input width {params.layout[0]}")
    return forward_from(params, activation, ForwardCache([x], [], []), 0)


def forward_from(params: ParamSet, activation: str, cache: ForwardCache, start: int):
    """Recompute layers ``start`` and above, reusing ``cache`` for the layers below.

    Only valid when the parameters of layers below ``start`` are those the
    cache was built with.
    """
    inputs, pre, post = cache.inputs[:start + 1], cache.pre[:start], cache.post[:start]
    a = inputs[start]
    last = params.num_layers - 1
    for l in range(start, params.num_layers):
        if l > start:
            inputs.append(a)
        z = a @ params.weights[l].T + params.biases[l]
        a = z if l == last else activate(activation, z)
        pre.append(z)
        post.append(a)
    return a, ForwardCache(inputs, pre, post)


def _check_labels(labels, logits: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_error(logits, labels) -> tuple[float, float]:
    """Mean softmax cross-entropy and 0-1 error (argmax, ties to lowest class)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits)
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.mean(logz - z[rows, labels]))
    error = float(np.mean(np.argmax(logits, axis=1) != labels))
    return loss, error


def backprop(params: ParamSet, activation: str, cache: ForwardCache, grad_out, top: int | None = None):
    """Propagate a gradient down the network.

    ``grad_out`` is the gradient with respect to the output of layer ``top``
    (logits by default, otherwise that hidden layer's post-activation).
    Returns per-layer gradients with respect to pre-activations; layers above
    ``top`` get ``None``.
    """

    last = params.num_layers - 1
    top = last if top is None else top
    deltas: list[np.ndarray | None] = [None] * params.num_layers
    if top == last:
        delta = grad_out
    else:
        delta = grad_out * activate_grad(activation, cache.pre[top], cache.post[top])
    for l in range(top, -1, -1):
        deltas[l] = delta
        if l:
            da = delta @ params.weights[l]
            delta = da * activate_grad(activation, cache.pre[l - 1], cache.post[l - 1])
    return deltas


def flat_gradient(params: ParamSet, cache: ForwardCache, deltas) -> np.ndarray:
    """Assemble a canonical flat gradient from per-layer pre-activation deltas."""
    out = np.zeros(params.size)
    pos = 0
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        d = deltas[l]
        if d is not None:
            np.matmul(d.T, cache.inputs[l], out=out[pos:pos + w.size].reshape(w.shape))
            np.sum(d, axis=0, out=out[pos + w.size:pos + w.size + b.size])
        pos += w.size + b.size
    return out


def output_delta(logits: np.ndarray, labels) -> np.ndarray:
    """Per-sample gradient of the (unaveraged) cross-entropy w.r.t. logits."""
    labels = _check_labels(labels, logits)
    p = softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return p


def loss_gradient(params: ParamSet, activation: str, x, y):
    """Mean cross-entropy, 0-1 error and flat gradient in one pass."""
    logits, cache = forward(params, activation, x)
    loss, error = loss_and_error(logits, y)
    deltas = backprop(params, activation, cache, output_delta(logits, y) / len(logits))
    return loss, error, flat_gradient(params, cache, deltas), cache


def batch_gradient(params: ParamSet, activation: str, x, y) -> np.ndarray:
    return loss_gradient(params, activation, x, y)[2]


def _per_sample_deltas(params, activation, x, y):
    logits, cache = forward(params, activation, x)
    deltas = backprop(params, activation, cache, output_delta(logits, y))
    return cache, deltas


def per_sample_gradients(params: ParamSet, activation: str, x, y) -> np.ndarray:
    """Matrix G (d x M) whose column i is the gradient of sample i's loss."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError("need a non-empty 2-D batch")
    cache, deltas = _per_sample_deltas(params, activation, x, y)
    m = x.shape[0]
    blocks = []
    for l in range(params.num_layers):
        d, a = deltas[l], cache.inputs[l]
        blocks.append(np.einsum("mo,mi->moi", d, a).reshape(m, -1))
        blocks.append(d)
    return np.concatenate(blocks, axis=1).T


def per_sample_gram(params: ParamSet, activation: str, x, y) -> np.ndarray:
    """G^T G for the per-sample gradient matrix, without forming G.

    A dense layer's per-sample gradient is the outer product of its
    pre-activation delta and its input, so the inner product of two such
    gradients factorises as (delta_i . delta_j) * (a_i . a_j + 1), the
    ``+ 1`` accounting for the bias.
    """
    x = np.asarray(x, dtype=np.float64)
    cache, deltas = _per_sample_deltas(params, activation, x, y)
    gram = np.zeros((x.shape[0], x.shape[0]))
    for l in range(params.num_layers):
        d, a = deltas[l], cache.inputs[l]
        gram += (d @ d.T) * (a @ a.T + 1.0)
    return 0.5 * (gram + gram.T)


def output_jacobians(params: ParamSet, activation: str, x) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample Jacobians of the logits w.r.t. parameters.

    Returns ``(jac, logits)`` with ``jac`` of shape (M, C, d).
    """
    logits, cache = forward(params, activation, x)
    m, c = logits.shape
    jac = np.empty((m, c, params.size))
    for k in range(c):
        seed = np.zeros_like(logits)
        seed[:, k] = 1.0
        deltas = backprop(params, activation, cache, seed)
        blocks = []
        for l in range(params.num_layers):
            d, a = deltas[l], cache.inputs[l]
            blocks.append(np.einsum("mo,mi->moi", d, a).reshape(m, -1))
            blocks.append(d)
        jac[:, k, :] = np.concatenate(blocks, axis=1)
    return jac, logits
