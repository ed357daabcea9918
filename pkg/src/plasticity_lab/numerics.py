"""Dense linear algebra helpers and seeded random streams.

Matrices are plain 2-D ``float64`` numpy arrays. Eigendecompositions go
through LAPACK (``numpy.linalg.eigh``); a cyclic Jacobi solver is kept
alongside for small matrices and as an independent cross-check.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

SYMMETRY_RTOL = 1e-10
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100

_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    pass


class SymmetryError(ValueError):
    pass


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def _check_symmetric(a) -> np.ndarray:
    m = as_matrix(a)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {m.shape}")
    if m.shape[0] == 0:
        raise ShapeError("matrix dimension must be >= 1")
    scale = np.linalg.norm(m)
    if np.linalg.norm(m - m.T) > SYMMETRY_RTOL * max(scale, np.finfo(float).tiny):
        raise SymmetryError("matrix is not symmetric within tolerance")
    return 0.5 * (m + m.T)


def sym_eig(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    descending order and eigenvectors as the matching columns.
    """
    m = _check_symmetric(a)
    w, v = np.linalg.eigh(m)
    return w[::-1].copy(), v[:, ::-1].copy()


def sym_eigvals(a) -> np.ndarray:
    """Descending eigenvalues of a symmetric matrix (no vectors)."""
    m = _check_symmetric(a)
    return np.linalg.eigvalsh(m)[::-1].copy()


def jacobi_eig(a, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi eigen-decomposition, descending order.

    Sweeps over all (p, q) pairs in row order until the off-diagonal
    Frobenius norm drops below ``tol * ||A||_F``. Intended for matrices up
    to a few hundred rows.
    """
    m = _check_symmetric(a).copy()
    n = m.shape[0]
    v = np.eye(n)
    target = tol * np.linalg.norm(m)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(m * m) - np.sum(np.diag(m) ** 2), 0.0))
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if apq == 0.0:
                    continue
                theta = (m[q, q] - m[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                mp = m[p, :].copy()
                mq = m[q, :].copy()
                m[p, :] = c * mp - s * mq
                m[q, :] = s * mp + c * mq
                mp = m[:, p].copy()
                mq = m[:, q].copy()
                m[:, p] = c * mp - s * mq
                m[:, q] = s * mp + c * mq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(m).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def singular_values(a) -> np.ndarray:
    """Singular values via the smaller Gram matrix, descending.

    Negative round-off eigenvalues of the Gram matrix are clamped to zero
    before taking square roots.
    """
    m = as_matrix(a)
    if m.size == 0:
        return np.zeros(0)
    gram = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    w = np.linalg.eigvalsh(0.5 * (gram + gram.T))[::-1]
    return np.sqrt(np.clip(w, 0.0, None))


def splitmix64(x: int) -> int:
    """One step of the SplitMix64 finalizer; used to derive child stream ids."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RandomStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox4x64-10 with the 128-bit key set to ``(seed, stream_id)``
    and a zero starting counter, so a stream's output depends only on the
    pair and the number of draws taken so far.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id})"

    def child(self, label: int) -> "RandomStream":
        """Fresh stream for a sub-task; independent of this stream's position."""
        return RandomStream(self.seed, splitmix64(self.stream_id ^ splitmix64(int(label))))

    def next_uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        if not lo < hi:
            raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
        return float(self.generator.uniform(lo, hi))

    def next_gaussian(self) -> float:
        return float(self.generator.standard_normal())

    def uniform(self, lo: float, hi: float, size) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
        return self.generator.uniform(lo, hi, size)

    def gaussian(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)

    def integers(self, high: int, size) -> np.ndarray:
        return self.generator.integers(0, high, size)

    def permutation(self, n: int) -> np.ndarray:
        idx = np.arange(n)
        self.generator.shuffle(idx)
        return idx

    def shuffle(self, seq: Sequence) -> list:
        """Return a Fisher-Yates shuffled copy of ``seq``."""
        return [seq[i] for i in self.permutation(len(seq))]

    def categorical(self, probs: np.ndarray) -> np.ndarray:
        """One draw per row of a row-stochastic matrix (inverse CDF)."""
        cdf = np.cumsum(probs, axis=1)
        u = self.generator.random(probs.shape[0])[:, None] * cdf[:, -1:]
        draws = np.sum(cdf <= u, axis=1)
        return np.minimum(draws, probs.shape[1] - 1)
