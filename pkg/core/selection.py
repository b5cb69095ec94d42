"""
Expert subset selection: combine-mass top-k (with its batched variant),
the uniform random baseline and the exhaustive best-k oracle.
"""
from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from core.shared import ConfigError, ShapeError
from core.softmoe_layer import _as_batch, forward_batch, router_logits
from core.tensor_core import softmax_over_columns_per_row


@dataclass(frozen=True)
class SubsetMask:
    indices: tuple

    def __post_init__(self):
        object.__setattr__(self, 'indices', tuple(sorted(int(j) for j in self.indices)))
        if len(set(self.indices)) != len(self.indices):
            raise ShapeError(f"duplicate expert indices in {self.indices}")

    @property
    def k(self):
        return len(self.indices)

    def validate(self, n):
        if any(not 0 <= j < n for j in self.indices):
            raise ShapeError(f"mask {self.indices} has indices outside [0, {n})")
        return self

    def __str__(self):
        return '{' + ','.join(str(j) for j in self.indices) + '}'


@dataclass
class CombineMass:
    values: np.ndarray

    @property
    def n(self):
        return self.values.shape[0]


def _check_k(k, n):
    if not 1 <= k <= n:
        raise ShapeError(f"k must satisfy 1 <= k <= n={n}, got {k}")


def combine_mass(c):
    """Column sums of a row-stochastic m x n combine matrix."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeError(f"combine weights must be m x n, got {c.shape}")
    if (c < 0).any() or not np.allclose(c.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
        raise ShapeError("combine weights must be nonnegative with rows summing to 1")
    return CombineMass(c.sum(axis=0))


def _top_k_order(values, k, listing_order):
    # stable sorts break ties toward the smaller index
    if listing_order:
        return np.argsort(values, axis=-1, kind='stable')[..., :k]
    return np.argsort(-values, axis=-1, kind='stable')[..., :k]


def select_top_k(mass, k, listing_order=False):
    """
    Indices of the k largest combine-mass entries.

    listing_order=True keeps the k smallest instead, matching the ascending
    sort of the batched reference listing.
    """
    _check_k(k, mass.n)
    return SubsetMask(tuple(_top_k_order(mass.values, k, listing_order)))


def top_k_active(combine, k, listing_order=False):
    """Batched selection: (b, m, n) combine weights -> (b, n) bool mask."""
    b, _, n = combine.shape
    _check_k(k, n)
    chosen = _top_k_order(combine.sum(axis=1), k, listing_order)
    active = np.zeros((b, n), dtype=bool)
    np.put_along_axis(active, chosen, True, axis=1)
    return active


def algorithm1_batch(layer, xs, k, listing_order=False):
    """Selection and masked evaluation for a (b, m, d) stack; activations stay batched."""
    combine = softmax_over_columns_per_row(router_logits(layer, xs))
    active = top_k_active(combine, k, listing_order)
    return forward_batch(layer, xs, active)


def algorithm1_forward(layer, x, k, listing_order=False):
    """Forward pass that only evaluates the k experts with the largest combine mass."""
    xs, single = _as_batch(layer, x)
    if not single:
        raise ShapeError("algorithm1_forward takes one token matrix; use batched_select for batches")
    _check_k(k, layer.n)
    return algorithm1_batch(layer, xs, k, listing_order).item(0)


def batched_select(layer, xs, k, listing_order=False):
    """
    Per-item selection over a batch; each expert processes, once, the
    sub-batch of items that selected it. Returns one LayerActivations per item.
    """
    try:
        xs = np.asarray(xs, dtype=np.float64)
    except ValueError as e:
        raise ShapeError(f"ragged batch: {e}") from e
    if xs.ndim != 3:
        raise ShapeError(f"batch must be b x m x d, got {xs.shape}")
    xs, _ = _as_batch(layer, xs)
    _check_k(k, layer.n)
    acts = algorithm1_batch(layer, xs, k, listing_order)
    return [acts.item(i) for i in range(xs.shape[0])]


def random_subset(n, k, stream):
    _check_k(k, n)
    return SubsetMask(tuple(stream.choice(n, k)))


def random_active(n, k, batch, stream):
    """(batch, n) bool mask with an independent uniform k-subset per row."""
    _check_k(k, n)
    active = np.zeros((batch, n), dtype=bool)
    for i in range(batch):
        active[i, stream.choice(n, k)] = True
    return active


def subset_masks(n, k):
    """All C(n, k) masks in lexicographic order."""
    _check_k(k, n)
    return [SubsetMask(c) for c in combinations(range(n), k)]


def subsets_active(n, k):
    masks = subset_masks(n, k)
    active = np.zeros((len(masks), n), dtype=bool)
    for i, mask in enumerate(masks):
        active[i, list(mask.indices)] = True
    return masks, active


def exhaustive_best_subset(model, x, label, k):
    """
    Brute force over every size-k mask in lexicographic order (single-layer
    models only: one mask covers the whole model).

    Returns (True, first mask whose masked prediction equals label) or
    (False, None). All C(n, k) masked passes run as one batch.
    """
    from core.training import predict_active

    if len(model.layers) != 1:
        raise ConfigError(f"the exhaustive oracle needs a single-layer model, got {len(model.layers)} layers")
    n = model.layers[0].n
    masks, active = subsets_active(n, k)
    xs = np.broadcast_to(np.asarray(x, dtype=np.float64), (len(masks),) + np.shape(x))
    predictions = predict_active(model, np.ascontiguousarray(xs), active)
    hits = np.flatnonzero(predictions == label)
    if hits.size == 0:
        return False, None
    return True, masks[int(hits[0])]


def subset_count(n, k):
    return comb(n, k)
