"""Probability transforms, clamped logs and seeded random streams.

Everything is float64. Log arguments are clamped to ``[floor, 1]`` so that
losses stay finite when a network saturates.
"""
import zlib

import numpy as np

from .errors import DimensionError, DomainError

CLAMP_FLOOR = 1e-12


def as_vector(v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {v.shape}")
    return v


def softmax(v, axis=-1):
    """Max-shifted softmax along ``axis`` (rows of a matrix by default)."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise DimensionError("softmax of an empty input")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def clamped_log(p, floor=CLAMP_FLOOR):
    return np.log(np.clip(p, floor, 1.0))


def clamp_mask(p, floor=CLAMP_FLOOR):
    """1.0 where ``clamped_log`` is differentiable in ``p``, else 0.0."""
    p = np.asarray(p)
    return ((p >= floor) & (p <= 1.0)).astype(np.float64)


def entropy(p, axis=-1):
    """Shannon entropy in nats with 0 ln 0 = 0.

    Works row-wise on matrices; a plain vector returns a scalar.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise DomainError("entropy of a vector with negative entries")
    safe = np.where(p > 0, p, 1.0)
    return -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=axis)


def cross_entropy(target, pred, floor=CLAMP_FLOOR):
    """-sum target * ln(clamp(pred)). ``pred`` need not be normalised."""
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise DimensionError(f"cross_entropy shapes differ: {target.shape} vs {pred.shape}")
    return -np.sum(target * clamped_log(pred, floor), axis=-1)


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _key(name):
    if isinstance(name, int):
        return name
    return zlib.crc32(str(name).encode("utf-8"))


class SeededStream:
    """Counter-based (Philox) random stream with named sub-streams.

    ``SeededStream(7).child("data", "batches")`` is independent of
    ``SeededStream(7).child("nn", "init")`` and both are reproducible on any
    platform, so toggling one consumer never perturbs another.
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(path)
        seq = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=tuple(_key(p) for p in self.path))
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *names):
        return SeededStream(self.seed, self.path + names)

    @property
    def generator(self):
        return self._gen

    def uniform(self, n):
        return self._gen.random(int(n))

    def normal(self, size):
        return self._gen.standard_normal(size)

    def permutation(self, n):
        return self._gen.permutation(int(n))

    def __repr__(self):
        return f"SeededStream(seed={self.seed}, path={self.path!r})"


def seeded_uniform(stream, n):
    """Draw ``n`` floats in [0, 1) and advance the stream."""
    return stream.uniform(n)
