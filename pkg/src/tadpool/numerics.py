"""Low-level numeric kernels and the deterministic random source.

Everything else in the package is built on the handful of primitives in
this module, so their contracts are kept deliberately strict: degenerate
inputs raise instead of silently propagating NaNs, and the random source
is a pure function of ``(seed, split path, draw counter)`` so any stream
can be reproduced in isolation.

Training arithmetic uses single precision (``REAL``); verification code
is expected to pass float64 arrays, which every kernel preserves.
"""

from __future__ import annotations

import math

import numpy as np

# Default dtype for training-time arrays.  Double precision is reserved
# for oracles and gradient checks.
REAL = np.float32

# Guard against division by ~zero norms in l2_normalize.
NORM_EPS = 1e-12

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_KEY_SALT = 0x8E1FDE13A4B6C329


def log_sum_exp(values: np.ndarray) -> float | np.ndarray:
    """Numerically stable log(sum(exp(values))) along the last axis.

    The maximum is subtracted before exponentiation, so the result is
    exact for constant inputs and never overflows for finite ones.
    """
    v = np.asarray(values)
    if v.size == 0:
        raise ValueError("empty input")
    m = np.max(v, axis=-1, keepdims=True)
    out = np.squeeze(m, axis=-1) + np.log(np.sum(np.exp(v - m), axis=-1))
    return float(out) if out.ndim == 0 else out


def softmax(values: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis; rows sum to 1."""
    v = np.asarray(values)
    if v.size == 0:
        raise ValueError("empty input")
    shifted = v - np.max(v, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(values: np.ndarray) -> np.ndarray:
    """log(softmax(values)) along the last axis without intermediate overflow."""
    v = np.asarray(values)
    if v.size == 0:
        raise ValueError("empty input")
    shifted = v - np.max(v, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def l2_normalize(values: np.ndarray) -> np.ndarray:
    """Scale vectors (last axis) to unit Euclidean norm.

    Raises if any row's norm falls below ``NORM_EPS``: a zero embedding
    has no direction and downstream cosine machinery must not see one.
    """
    v = np.asarray(values)
    if v.size == 0:
        raise ValueError("empty input")
    norms = np.sqrt(np.sum(np.square(v, dtype=v.dtype), axis=-1, keepdims=True))
    if np.any(norms < NORM_EPS) or not np.all(np.isfinite(norms)):
        raise ValueError("degenerate embedding")
    return v / norms


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors, computed in double precision.

    The result is clipped to [-1, 1] so rounding can never push it
    outside the geometric range.
    """
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape or av.ndim != 1:
        raise ValueError("shape mismatch")
    na = math.sqrt(float(av @ av))
    nb = math.sqrt(float(bv @ bv))
    if na < NORM_EPS or nb < NORM_EPS:
        raise ValueError("degenerate embedding")
    return float(np.clip(av @ bv / (na * nb), -1.0, 1.0))


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, vectorized over uint64 arrays."""
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_MIX_A)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_MIX_B)
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    """SplitMix64 finalizer on Python ints (wraps mod 2**64)."""
    z &= _MASK64
    z ^= z >> 30
    z = (z * _MIX_A) & _MASK64
    z ^= z >> 27
    z = (z * _MIX_B) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Counter-based splittable random source.

    A stream is identified by a 64-bit key derived from the seed and the
    split path; the ``i``-th raw word of a stream is
    ``mix(key + i * GOLDEN)`` (SplitMix64).  Consequences:

    * two instances with the same seed and path replay bit-identical
      streams, regardless of platform or draw batching;
    * ``split(a, b)`` equals ``split(a).split(b)``, so a stream for, say,
      ``(sample_id, step)`` can be derived wherever it is convenient;
    * draws never touch global state.

    Child keys are ``mix(key ^ mix((id + 1) * GOLDEN ^ SALT))``, which in
    practice separates sibling streams as well as independent seeds.
    """

    def __init__(self, seed: int, _key: int | None = None):
        self.seed = int(seed) & _MASK64
        if _key is None:
            key = _mix_int(self.seed ^ _KEY_SALT)
            key = _mix_int((key + _GOLDEN) & _MASK64)
            self._key = key
        else:
            self._key = int(_key) & _MASK64
        self._counter = 0

    def split(self, *ids: int) -> "Rng":
        """Derive an independent child stream; pure in (seed, path)."""
        key = self._key
        for i in ids:
            token = _mix_int(((int(i) + 1) * _GOLDEN & _MASK64) ^ _KEY_SALT)
            key = _mix_int(key ^ token)
        return Rng(self.seed, _key=key)

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw uint64 words of the stream."""
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        return _mix(np.uint64(self._key) + idx * np.uint64(_GOLDEN))

    def random(self, size: int | tuple[int, ...] | None = None) -> float | np.ndarray:
        """Uniform float64 draws in [0, 1)."""
        if size is None:
            return float(self.raw(1)[0] >> np.uint64(11)) * 2.0**-53
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, size: int | tuple[int, ...] | None = None) -> float | np.ndarray:
        """Standard normal draws via Box-Muller."""
        shape = () if size is None else ((size,) if isinstance(size, int) else tuple(size))
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        words = self.raw(2 * pairs)
        # u1 in (0, 1] so the log is finite; u2 in [0, 1).
        u1 = ((words[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (words[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if size is None:
            return float(z[0])
        return z.reshape(shape)

    def uniform(self, low: float, high: float, size=None):
        """Uniform draws in [low, high)."""
        return low + (high - low) * self.random(size)

    def integers(self, high: int, size: int | None = None):
        """Uniform integers in [0, high)."""
        if high <= 0:
            raise ValueError("empty input")
        u = self.random(size)
        return (np.floor(u * high)).astype(np.int64) if size is not None else int(u * high)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of range(n) via random sort keys."""
        return np.argsort(self.raw(n), kind="stable").astype(np.int64)

    def choice_without_replacement(self, n: int, m: int) -> np.ndarray:
        """Uniform sample of ``m`` distinct indices from range(n)."""
        if m > n:
            raise ValueError("sample larger than population")
        return self.permutation(n)[:m]
