"""
Two-layer ReLU MLP experts and the budget-preserving expert bank.

The bank stores its n experts stacked (w1: n x d x h, ...) so a whole bank
can be checkpointed and optimized as four arrays; `bank.expert(j)` hands
out views of a single expert.
"""
from dataclasses import dataclass

import numpy as np

from core.shared import ShapeError
from core.tensor_core import DTYPE


@dataclass
class MlpExpert:
    w1: np.ndarray  # d x h
    b1: np.ndarray  # h
    w2: np.ndarray  # h x d
    b2: np.ndarray  # d

    @property
    def d(self):
        return self.w1.shape[0]

    @property
    def h(self):
        return self.w1.shape[1]


@dataclass
class ExpertGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ExpertBank:
    w1: np.ndarray  # n x d x h
    b1: np.ndarray  # n x h
    w2: np.ndarray  # n x h x d
    b2: np.ndarray  # n x d
    hidden_budget: int

    @property
    def n(self):
        return self.w1.shape[0]

    @property
    def d(self):
        return self.w1.shape[1]

    @property
    def h(self):
        return self.w1.shape[2]

    def expert(self, j):
        return MlpExpert(self.w1[j], self.b1[j], self.w2[j], self.b2[j])

    @property
    def experts(self):
        return [self.expert(j) for j in range(self.n)]


# ExpertBank-shaped gradient container
BankGrads = ExpertGrads


def hidden_width(n, hidden_budget):
    return max(1, hidden_budget // n)


def build_bank(d, n, hidden_budget, init_stream):
    """He-initialized bank: every expert gets max(1, H // n) hidden units, zero biases."""
    if d < 1 or n < 1 or hidden_budget < 1:
        raise ShapeError(f"build_bank needs d, n, H >= 1, got d={d} n={n} H={hidden_budget}")
    h = hidden_width(n, hidden_budget)
    w1 = init_stream.normal((n, d, h), 0.0, np.sqrt(2.0 / d))
    w2 = init_stream.normal((n, h, d), 0.0, np.sqrt(2.0 / h))
    return ExpertBank(
        w1=w1.astype(DTYPE, copy=False),
        b1=np.zeros((n, h), dtype=DTYPE),
        w2=w2.astype(DTYPE, copy=False),
        b2=np.zeros((n, d), dtype=DTYPE),
        hidden_budget=int(hidden_budget),
    )


def parameter_count(bank):
    d, h = bank.d, bank.h
    return bank.n * (d * h + h + h * d + d)


def weight_parameter_count(bank):
    return bank.n * 2 * bank.d * bank.h


def _check_input(e, z):
    z = np.asarray(z, dtype=DTYPE)
    if z.ndim < 1 or z.shape[-1] != e.d:
        raise ShapeError(f"expert expects inputs of length {e.d}, got shape {z.shape}")
    return z


def expert_hidden(e, z):
    """Hidden pre-activation W1^T z + b1."""
    return _check_input(e, z) @ e.w1 + e.b1


def expert_forward(e, z):
    """W2^T relu(W1^T z + b1) + b2, for one vector or a (batch, d) block."""
    pre = expert_hidden(e, z)
    return np.maximum(pre, 0.0) @ e.w2 + e.b2


def expert_backward(e, z, upstream, pre=None):
    """
    Reverse-mode gradients of expert_forward.

    Batched inputs sum parameter gradients over the batch. ReLU derivative at
    exactly zero is zero.
    """
    z = _check_input(e, z)
    upstream = np.asarray(upstream, dtype=DTYPE)
    if upstream.shape != z.shape:
        raise ShapeError(f"upstream shape {upstream.shape} does not match input shape {z.shape}")
    if pre is None:
        pre = z @ e.w1 + e.b1
    act = np.maximum(pre, 0.0)

    z2 = np.atleast_2d(z)
    up2 = np.atleast_2d(upstream)
    act2 = np.atleast_2d(act)
    dpre = (up2 @ e.w2.T) * (np.atleast_2d(pre) > 0.0)

    grads = ExpertGrads(
        w1=z2.T @ dpre,
        b1=dpre.sum(axis=0),
        w2=act2.T @ up2,
        b2=up2.sum(axis=0),
    )
    dz = dpre @ e.w1.T
    return grads, dz.reshape(z.shape)


def zero_bank_grads(bank):
    return BankGrads(
        w1=np.zeros_like(bank.w1),
        b1=np.zeros_like(bank.b1),
        w2=np.zeros_like(bank.w2),
        b2=np.zeros_like(bank.b2),
    )


def expert_bank_forward(bank, z, active):
    """
    Evaluates the bank on slot inputs z (b x n x d).

    active (b x n bool) marks which (item, expert) pairs are evaluated; each
    expert processes the sub-batch of items that selected it in one call.
    Unselected rows stay exact zeros. Returns (outputs, hidden pre-activations).
    """
    b, n, d = z.shape
    if n != bank.n or d != bank.d:
        raise ShapeError(f"bank is n={bank.n}, d={bank.d}; slot inputs have shape {z.shape}")
    outputs = np.zeros((b, n, d), dtype=DTYPE)
    hidden = np.zeros((b, n, bank.h), dtype=DTYPE)
    for j in range(n):
        rows = np.flatnonzero(active[:, j])
        if rows.size == 0:
            continue
        e = bank.expert(j)
        pre = expert_hidden(e, z[rows, j, :])
        hidden[rows, j, :] = pre
        outputs[rows, j, :] = np.maximum(pre, 0.0) @ e.w2 + e.b2
    return outputs, hidden


def expert_bank_backward(bank, z, hidden, active, upstream):
    """Gradients of expert_bank_forward: (BankGrads, d loss / d z)."""
    grads = zero_bank_grads(bank)
    dz = np.zeros_like(z)
    for j in range(bank.n):
        rows = np.flatnonzero(active[:, j])
        if rows.size == 0:
            continue
        g, dzj = expert_backward(bank.expert(j), z[rows, j, :], upstream[rows, j, :], pre=hidden[rows, j, :])
        grads.w1[j] = g.w1
        grads.b1[j] = g.b1
        grads.w2[j] = g.w2
        grads.b2[j] = g.b2
        dz[rows, j, :] = dzj
    return grads, dz
