"""Dense-tensor substrate: float64 numpy arrays plus a splittable RNG.

Everything in the kit runs in 64-bit floats so that the exact-equivalence
checks have headroom far below their 1e-10 tolerances. Values are plain
``numpy.ndarray`` objects (row-major, last index fastest); the helpers here
add the shape checking and numeric guards the rest of the kit relies on.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import NumericError, ShapeMismatchError

Array = np.ndarray


def _derive_key(seed: int, path: tuple[str, ...]) -> int:
    """Map (seed, label path) to a 128-bit Philox key, stably across runs."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for label in path:
        h.update(b"/")
        h.update(label.encode())
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Counter-based (Philox) random stream, splittable by label.

    ``split(label)`` derives an independent child stream from the label
    alone, so per-weight streams do not depend on the order in which
    weights are drawn, and parallel trials keyed by index are
    reproducible at any worker count.
    """

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, _path)))

    def split(self, label) -> "Rng":
        return Rng(self.seed, self._path + (str(label),))

    def normal(self, shape, sigma: float = 1.0) -> Array:
        if sigma == 0.0:
            return np.zeros(shape, dtype=np.float64)
        return sigma * self._gen.standard_normal(size=shape, dtype=np.float64)

    def integers(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))


def matmul(a: Array, b: Array) -> Array:
    """Matrix product with explicit inner-dimension check (float64 accumulate)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}"
        )
    return a @ b


def softmax_rows(m: Array) -> Array:
    """Row-wise softmax with per-row max subtraction.

    Rows may contain -inf entries (masked positions) but each row must keep
    at least one finite entry; NaN anywhere is rejected.
    """
    m = np.asarray(m, dtype=np.float64)
    if np.isnan(m).any():
        raise NumericError("softmax_rows: NaN in input")
    peak = np.max(m, axis=-1, keepdims=True)
    if np.isneginf(peak).any():
        raise NumericError("softmax_rows: row with no finite entry")
    e = np.exp(m - peak)
    return e / np.sum(e, axis=-1, keepdims=True)


def rmsnorm(m: Array, eps: float = 1e-6) -> Array:
    """Root-mean-square normalization over the last axis, no learnable gain."""
    m = np.asarray(m, dtype=np.float64)
    ms = np.mean(m * m, axis=-1, keepdims=True)
    return m / np.sqrt(ms + eps)


def gaussian_init(shape, sigma: float, rng: Rng) -> Array:
    """I.i.d. N(0, sigma^2) tensor; sigma=0 yields exact zeros."""
    if sigma < 0:
        raise NumericError(f"gaussian_init: negative sigma {sigma}")
    return rng.normal(shape, sigma)


def silu(x: Array) -> Array:
    return x / (1.0 + np.exp(-x))


def sigmoid(x: Array) -> Array:
    return 1.0 / (1.0 + np.exp(-x))
