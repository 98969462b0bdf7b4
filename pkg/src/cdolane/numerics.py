"""Dense linear algebra helpers and the seeded random stream.

Matrices are 2-D ``float64`` numpy arrays and feature maps are 3-D
``(C, H, W)`` arrays. Every helper rejects NaN/Inf so that nothing
non-finite leaks into the loss or its gradient.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


class ParameterError(ValueError):
    """Raised for invalid scalar parameters (ranges, counts, ...)."""


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ParameterError(f"{name} contains non-finite entries")
    return m


def as_tensor3(a, name="tensor"):
    """Return ``a`` as a finite ``(C, H, W)`` float64 array."""
    t = np.asarray(a, dtype=np.float64)
    if t.ndim != 3 or min(t.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty (C, H, W) array, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ParameterError(f"{name} contains non-finite entries")
    return t


def matmul(a, b):
    """Matrix product ``a @ b`` with shape and finiteness checks."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_reference(a, b):
    """Triple-loop product accumulating strictly left to right over ``k``.

    Slow; used where an exact, order-pinned result matters more than speed.
    """
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def transpose(a):
    return as_matrix(a).T.copy()


def pivot_mean(x, pivot, axis=None):
    """``pivot + mean(x - pivot)``.

    Equal to the plain mean in exact arithmetic. Shifting by a
    representative entry keeps the sum well conditioned and makes the mean
    of a constant array return that constant exactly, so two means of the
    same constant data always compare equal.
    """
    x = np.asarray(x)
    out = pivot + np.mean(x - pivot, axis=axis, keepdims=True)
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def mean_all(a):
    """Arithmetic mean of every entry."""
    a = as_matrix(a)
    return float(pivot_mean(a, a[0, 0]))


def mean_diag(a):
    """Mean of the main diagonal of a square matrix."""
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"mean_diag needs a square matrix, got {a.shape}")
    return float(pivot_mean(np.diagonal(a), a[0, 0]))


_SEED_MAX = 2**64 - 1


class SeededRng:
    """Reproducible random stream backed by numpy's PCG64.

    PCG64 and ``SeedSequence`` have a documented, platform-independent
    output stream, so a 64-bit seed alone pins every draw. One instance
    belongs to one logical task; use :meth:`derive` for independent
    sub-streams (e.g. one per generated scene).
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed <= _SEED_MAX:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def uniform(self, lo: float, hi: float) -> float:
        if not lo < hi:
            raise ParameterError(f"uniform needs lo < hi, got [{lo}, {hi})")
        return float(self._gen.uniform(lo, hi))

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        if std < 0:
            raise ParameterError(f"std must be >= 0, got {std}")
        z = float(self._gen.standard_normal())
        if std == 0:
            return float(mean)
        return mean + std * z

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi]`` (inclusive)."""
        if hi < lo:
            raise ParameterError(f"integers needs lo <= hi, got [{lo}, {hi}]")
        return int(self._gen.integers(lo, hi, endpoint=True))

    def uniform_array(self, lo, hi, shape):
        if not lo < hi:
            raise ParameterError(f"uniform needs lo < hi, got [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size=shape)

    def normal_array(self, mean, std, shape):
        if std < 0:
            raise ParameterError(f"std must be >= 0, got {std}")
        return mean + std * self._gen.standard_normal(size=shape)

    def permutation(self, n: int):
        return self._gen.permutation(n)

    def choice(self, n: int, k: int):
        """``k`` distinct indices from ``range(n)``, sorted."""
        return sorted(int(i) for i in self._gen.choice(n, size=k, replace=False))

    def derive(self, index: int) -> "SeededRng":
        """Independent child stream keyed by ``(seed, index)``.

        Does not consume from this stream.
        """
        return SeededRng(derive_seed(self.seed, index))

    def get_state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(state["seed"])
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng


def derive_seed(seed: int, index: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])
