"""Dense float64 matrix primitives and seeded randomness.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The
elementwise / row-wise primitives also accept a leading batch axis, which
the finite-difference harness relies on.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_RANK_TOL = 1e-6
DEFAULT_LN_EPS = 1e-5


def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D float64 array; vectors become single rows."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    return m


def check_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite entries in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return check_finite(np.matmul(a, b), "matmul")


def row_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def row_log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_normalize(x, gain, bias, eps: float = DEFAULT_LN_EPS) -> np.ndarray:
    """Normalise each row to zero mean / unit population variance, then
    apply ``gain * x_hat + bias``."""
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError("layer_normalize: gain/bias width must equal x.cols")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return gain * (xc / np.sqrt(var + eps)) + bias


def singular_values(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    check_finite(m, "rank input")
    try:
        return np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc


def numerical_rank(m: np.ndarray, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Count singular values above ``rel_tol * sigma_max``."""
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    s = singular_values(m)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


class SeededRng:
    """Thin wrapper over a PCG64 generator.

    PCG64 streams are specified bit-for-bit by numpy, so equal seeds give
    equal draws on every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)

    def glorot(self, rows: int, cols: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (rows + cols))
        return self._gen.uniform(-limit, limit, size=(rows, cols))

    def spawn(self, key: int) -> "SeededRng":
        """Derive an independent child stream keyed by ``key``."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return SeededRng(int(ss.generate_state(1, dtype=np.uint64)[0]))
