"""
Dense float64 matrices, stable softmaxes, norms, row permutations and
named deterministic random streams.

Every function takes a 2-D matrix; the softmaxes, norms and matmul also
accept a stacked leading batch axis so layers can process b token
matrices in one call.
"""
import hashlib

import numpy as np

from core.shared import ConfigError, NonFiniteError, ShapeError

DTYPE = np.float64


def as_matrix(x, name='matrix'):
    """Coerces to a float64 array with at least 2 dims and nonempty trailing dims."""
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim < 2 or a.shape[-1] < 1 or a.shape[-2] < 1:
        raise ShapeError(f"{name} must have shape (..., rows >= 1, cols >= 1), got {a.shape}")
    return a


def check_finite(x, name='matrix'):
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{name} contains non-finite entries")
    return x


def matmul(a, b):
    a = as_matrix(a, 'a')
    b = as_matrix(b, 'b')
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}: {a.shape[-1]} != {b.shape[-2]}")
    return np.matmul(a, b)


def _stable_softmax(logits, axis):
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_over_rows_per_column(logits):
    """Each column becomes a distribution over the rows (dispatch weights)."""
    logits = check_finite(as_matrix(logits, 'logits'), 'logits')
    return _stable_softmax(logits, axis=-2)


def softmax_over_columns_per_row(logits):
    """Each row becomes a distribution over the columns (combine weights)."""
    logits = check_finite(as_matrix(logits, 'logits'), 'logits')
    return _stable_softmax(logits, axis=-1)


def frobenius_norm(x):
    x = np.asarray(x, dtype=DTYPE)
    flat = x.reshape(-1)
    return float(np.sqrt(np.sum(flat * flat)))


def frobenius_norms(xs):
    """Per-item norms of a (b, rows, cols) stack; equal to frobenius_norm on each item."""
    xs = np.asarray(xs, dtype=DTYPE)
    flat = xs.reshape(xs.shape[0], -1)
    return np.sqrt(np.sum(flat * flat, axis=1))


def _check_permutation(perm, size):
    perm = np.asarray(perm)
    if perm.ndim != 1 or perm.shape[0] != size or not np.array_equal(np.sort(perm), np.arange(size)):
        raise ShapeError(f"not a permutation of 0..{size - 1}: {perm.tolist()}")
    return perm.astype(np.intp)


def permute_rows(x, perm):
    """Output row i is input row perm[i]."""
    x = as_matrix(x)
    perm = _check_permutation(perm, x.shape[-2])
    return x[..., perm, :]


def inverse_permutation(perm):
    perm = _check_permutation(perm, len(perm))
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.shape[0])
    return inv


class RngStream:
    """
    Deterministic random stream keyed by (seed, stream_name).

    Backed by the counter-based Philox generator; the key is a SHA-256 digest
    of the pair, so distinct names give independent sequences. One owner per
    stream; derive children instead of sharing.
    """

    def __init__(self, seed, stream_name):
        self.seed = int(seed)
        self.stream_name = str(stream_name)
        digest = hashlib.sha256(f"{self.seed}:{self.stream_name}".encode('utf-8')).digest()
        key = int.from_bytes(digest[:16], 'little')
        self.generator = np.random.Generator(np.random.Philox(key=key))
        self.draws = 0

    def child(self, name):
        return RngStream(self.seed, f"{self.stream_name}/{name}")

    def normal(self, size, mean=0.0, std=1.0):
        self.draws += 1
        return self.generator.normal(mean, std, size=size)

    def permutation(self, n):
        self.draws += 1
        return self.generator.permutation(n)

    def choice(self, n, k):
        self.draws += 1
        return self.generator.choice(n, size=k, replace=False)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_name={self.stream_name!r}, draws={self.draws})"


def sample_gaussian(stream, rows, cols, mean=0.0, std=1.0):
    if std < 0:
        raise ConfigError(f"std must be >= 0, got {std}")
    if rows < 1 or cols < 1:
        raise ShapeError(f"cannot sample a {rows}x{cols} matrix")
    if std == 0:
        stream.draws += 1
        return np.full((rows, cols), float(mean), dtype=DTYPE)
    return stream.normal((rows, cols), mean, std).astype(DTYPE, copy=False)
