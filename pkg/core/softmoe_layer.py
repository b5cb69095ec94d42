"""
Soft MoE layer: dispatch D(X), combine C(X), full and subset-masked forward
passes, and exact reverse-mode gradients.

One slot per expert. Internally everything runs on a (b, m, d) stack; the
single-input entry points wrap their token matrix as a batch of one and
return the item back, so batched and unbatched results share a code path.
"""
from dataclasses import dataclass, field

import numpy as np

from core.experts import build_bank, expert_bank_backward, expert_bank_forward
from core.shared import ShapeError
from core.tensor_core import (
    DTYPE,
    as_matrix,
    check_finite,
    softmax_over_columns_per_row,
    softmax_over_rows_per_column,
)


@dataclass
class RouterParams:
    phi: np.ndarray  # d x n


@dataclass
class SoftMoELayerState:
    router: RouterParams
    bank: object  # ExpertBank

    def __post_init__(self):
        if self.router.phi.shape != (self.bank.d, self.bank.n):
            raise ShapeError(f"phi must be {self.bank.d}x{self.bank.n}, got {self.router.phi.shape}")

    @property
    def d(self):
        return self.bank.d

    @property
    def n(self):
        return self.bank.n


@dataclass
class LayerActivations:
    x: np.ndarray
    dispatch: np.ndarray
    combine: np.ndarray
    expert_inputs: np.ndarray
    expert_outputs: np.ndarray
    output: np.ndarray
    hidden: np.ndarray = field(repr=False)
    active: np.ndarray = field(repr=False)  # bool, True where the expert was evaluated

    @property
    def batched(self):
        return self.x.ndim == 3

    def item(self, i):
        return LayerActivations(
            x=self.x[i], dispatch=self.dispatch[i], combine=self.combine[i],
            expert_inputs=self.expert_inputs[i], expert_outputs=self.expert_outputs[i],
            output=self.output[i], hidden=self.hidden[i], active=self.active[i],
        )

    @property
    def selected(self):
        """Indices of the evaluated experts (single-item activations only)."""
        return tuple(int(j) for j in np.flatnonzero(self.active))


@dataclass
class LayerGrads:
    phi: np.ndarray
    bank: object  # BankGrads


def build_layer(d, n, hidden_budget, stream):
    phi = stream.child('router').normal((d, n), 0.0, 1.0 / np.sqrt(d)).astype(DTYPE, copy=False)
    bank = build_bank(d, n, hidden_budget, stream.child('experts'))
    return SoftMoELayerState(RouterParams(phi), bank)


def _as_batch(layer, x):
    x = as_matrix(x, 'tokens')
    if x.ndim not in (2, 3):
        raise ShapeError(f"tokens must be m x d or b x m x d, got {x.shape}")
    if x.shape[-1] != layer.d:
        raise ShapeError(f"layer expects token dimension {layer.d}, got {x.shape[-1]}")
    check_finite(x, 'tokens')
    single = x.ndim == 2
    return (x[None] if single else x), single


def router_logits(layer, xs):
    return np.matmul(xs, layer.router.phi)


def compute_dispatch(layer, x):
    xs, single = _as_batch(layer, x)
    dispatch = softmax_over_rows_per_column(router_logits(layer, xs))
    return dispatch[0] if single else dispatch


def compute_combine(layer, x):
    xs, single = _as_batch(layer, x)
    combine = softmax_over_columns_per_row(router_logits(layer, xs))
    return combine[0] if single else combine


def mask_to_active(n, mask, batch):
    """Expands None (all experts), a SubsetMask, or an index iterable to a (batch, n) bool array."""
    active = np.zeros((batch, n), dtype=bool)
    if mask is None:
        active[:] = True
        return active
    indices = getattr(mask, 'indices', mask)
    for j in indices:
        if not 0 <= int(j) < n:
            raise ShapeError(f"expert index {j} out of range for n={n}")
        active[:, int(j)] = True
    return active


def forward_batch(layer, xs, active):
    """Batched masked forward; `active` is a (b, n) bool array of experts to evaluate."""
    logits = router_logits(layer, xs)
    dispatch = softmax_over_rows_per_column(logits)
    combine = softmax_over_columns_per_row(logits)
    expert_inputs = np.matmul(np.swapaxes(dispatch, -1, -2), xs)
    expert_outputs, hidden = expert_bank_forward(layer.bank, expert_inputs, active)
    output = np.matmul(combine, expert_outputs)
    return LayerActivations(
        x=xs, dispatch=dispatch, combine=combine, expert_inputs=expert_inputs,
        expert_outputs=expert_outputs, output=output, hidden=hidden, active=active,
    )


def masked_forward(layer, x, mask):
    """
    Forward pass where experts outside `mask` are never evaluated and their
    rows of the expert outputs are exact zeros. Combine weights are kept as
    they are (no renormalization over the mask).
    """
    xs, single = _as_batch(layer, x)
    active = mask_to_active(layer.n, mask, xs.shape[0])
    acts = forward_batch(layer, xs, active)
    return acts.item(0) if single else acts


def forward(layer, x):
    return masked_forward(layer, x, None)


def masked_output_from(acts, mask):
    """C(X) times the expert outputs with rows outside `mask` zeroed."""
    keep = mask_to_active(acts.expert_outputs.shape[-2], mask, 1)[0]
    zeroed = np.where(keep[:, None], acts.expert_outputs, 0.0)
    return np.matmul(acts.combine, zeroed)


def _softmax_backward(probs, dprobs, axis):
    return probs * (dprobs - np.sum(dprobs * probs, axis=axis, keepdims=True))


def backward(layer, acts, upstream):
    """Returns (d/dphi, d/dbank, d/dX) for activations produced by this layer."""
    single = not acts.batched
    if single:
        acts_b = LayerActivations(
            x=acts.x[None], dispatch=acts.dispatch[None], combine=acts.combine[None],
            expert_inputs=acts.expert_inputs[None], expert_outputs=acts.expert_outputs[None],
            output=acts.output[None], hidden=acts.hidden[None], active=acts.active[None],
        )
        upstream = np.asarray(upstream, dtype=DTYPE)[None]
    else:
        acts_b = acts
        upstream = np.asarray(upstream, dtype=DTYPE)

    b, m, d = acts_b.x.shape
    if d != layer.d or acts_b.dispatch.shape != (b, m, layer.n) or acts_b.hidden.shape[-1] != layer.bank.h:
        raise ShapeError("activations do not belong to this layer (shape drift)")
    if upstream.shape != acts_b.output.shape:
        raise ShapeError(f"upstream must have shape {acts_b.output.shape}, got {upstream.shape}")

    # output = C @ Y
    d_combine = np.matmul(upstream, np.swapaxes(acts_b.expert_outputs, -1, -2))
    d_outputs = np.matmul(np.swapaxes(acts_b.combine, -1, -2), upstream)

    bank_grads, d_inputs = expert_bank_backward(
        layer.bank, acts_b.expert_inputs, acts_b.hidden, acts_b.active, d_outputs)

    # expert_inputs = D^T X
    d_dispatch = np.matmul(acts_b.x, np.swapaxes(d_inputs, -1, -2))
    dx = np.matmul(acts_b.dispatch, d_inputs)

    d_logits = (_softmax_backward(acts_b.dispatch, d_dispatch, axis=-2)
                + _softmax_backward(acts_b.combine, d_combine, axis=-1))
    dphi = np.einsum('bmd,bmn->dn', acts_b.x, d_logits)
    dx = dx + np.matmul(d_logits, layer.router.phi.T)

    return LayerGrads(phi=dphi, bank=bank_grads), (dx[0] if single else dx)
