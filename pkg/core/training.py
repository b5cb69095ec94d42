"""
Prediction heads, losses, Adam, model assembly and the training loop.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from core.datasets import ClassificationData, NormTaskConfig, gen_norm_batch
from core.selection import top_k_active
from core.shared import ConfigError, ShapeError
from core.softmoe_layer import (
    LayerActivations,
    backward,
    build_layer,
    forward_batch,
    mask_to_active,
    router_logits,
)
from core.tensor_core import DTYPE, check_finite, softmax_over_columns_per_row

logger = logging.getLogger(__name__)

EVAL_CHUNK = 1024


# --- Heads ---

@dataclass
class SummationHead:
    kind: str = 'sum'


@dataclass
class LinearHead:
    w: np.ndarray  # (m*d) x classes
    b: np.ndarray  # classes
    kind: str = 'linear'

    @property
    def classes(self):
        return self.w.shape[1]


def build_linear_head(m, d, classes, stream):
    w = stream.normal((m * d, classes), 0.0, 1.0 / np.sqrt(m * d)).astype(DTYPE, copy=False)
    return LinearHead(w=w, b=np.zeros(classes, dtype=DTYPE))


def head_forward(head, y):
    """Summation head -> sum of all entries; linear head -> W^T flatten(y) + b."""
    y = np.asarray(y, dtype=DTYPE)
    single = y.ndim == 2
    ys = y[None] if single else y
    if isinstance(head, SummationHead):
        out = ys.reshape(ys.shape[0], -1).sum(axis=1)
    else:
        flat = ys.reshape(ys.shape[0], -1)
        if flat.shape[1] != head.w.shape[0]:
            raise ShapeError(f"linear head expects {head.w.shape[0]} features, got {flat.shape[1]}")
        out = flat @ head.w + head.b
    return out[0] if single else out


def head_backward(head, y, dpred):
    """Returns ({param: grad}, d loss / d y) for a batched y."""
    if isinstance(head, SummationHead):
        dy = np.broadcast_to(np.asarray(dpred, dtype=DTYPE)[:, None, None], y.shape).copy()
        return {}, dy
    flat = y.reshape(y.shape[0], -1)
    grads = {'w': flat.T @ dpred, 'b': dpred.sum(axis=0)}
    dy = (dpred @ head.w.T).reshape(y.shape)
    return grads, dy


# --- Losses ---

def mse_loss(pred, target):
    diff = np.asarray(pred, dtype=DTYPE) - np.asarray(target, dtype=DTYPE)
    loss = diff * diff
    grad = 2.0 * diff
    if np.ndim(loss) == 0:
        return float(loss), float(grad)
    return loss, grad


def _log_softmax(logits):
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy_loss(logits, label):
    """(-log softmax(logits)[label], softmax(logits) - onehot(label))."""
    logits = check_finite(np.asarray(logits, dtype=DTYPE), 'logits')
    if not 0 <= int(label) < logits.shape[-1]:
        raise ShapeError(f"label {label} out of range for {logits.shape[-1]} classes")
    log_probs = _log_softmax(logits)
    grad = np.exp(log_probs)
    grad[int(label)] -= 1.0
    return float(-log_probs[int(label)]), grad


def batch_mse(preds, targets):
    loss, grad = mse_loss(preds, targets)
    b = preds.shape[0]
    return float(np.mean(loss)), grad / b


def batch_cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if (labels < 0).any() or (labels >= logits.shape[1]).any():
        raise ShapeError(f"labels out of range for {logits.shape[1]} classes")
    log_probs = _log_softmax(logits)
    rows = np.arange(logits.shape[0])
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    b = logits.shape[0]
    return float(-np.mean(log_probs[rows, labels])), grad / b


# --- Adam ---

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)


def adam_step(state, params, grads):
    """Bias-corrected Adam update, applied in place to `params` (name -> array)."""
    for name, p in params.items():
        if name not in grads or np.shape(grads[name]) != p.shape:
            raise ShapeError(f"gradient for {name} must have shape {p.shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    step_size = state.lr / bc1
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] *= state.beta1
        state.m[name] += (1.0 - state.beta1) * g
        state.v[name] *= state.beta2
        state.v[name] += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(state.v[name] / bc2) + state.eps
        p -= step_size * state.m[name] / denom
    return params


# --- Model ---

@dataclass
class ModelSpec:
    layers: int = 1
    tokens: int = 4
    token_dim: int = 8
    n: int = 8
    hidden_budget: int = 64
    head: str = 'linear'
    classes: int = 10

    def __post_init__(self):
        if min(self.layers, self.tokens, self.token_dim, self.n, self.hidden_budget) < 1:
            raise ConfigError(f"model dimensions must be >= 1: {self}")
        if self.head not in ('sum', 'linear'):
            raise ConfigError(f"unknown head {self.head!r}")


@dataclass
class Model:
    spec: ModelSpec
    layers: list
    head: object


@dataclass
class ModelPass:
    activations: list  # LayerActivations per layer, batched
    prediction: np.ndarray


def build_model(spec, stream):
    layers = [build_layer(spec.token_dim, spec.n, spec.hidden_budget, stream.child(f"layer{i}"))
              for i in range(spec.layers)]
    if spec.head == 'sum':
        head = SummationHead()
    else:
        head = build_linear_head(spec.tokens, spec.token_dim, spec.classes, stream.child('head'))
    return Model(spec=spec, layers=layers, head=head)


def model_parameters(model):
    """Name -> array references; updating them in place updates the model."""
    params = {}
    for i, layer in enumerate(model.layers):
        params[f"layer{i}.phi"] = layer.router.phi
        params[f"layer{i}.w1"] = layer.bank.w1
        params[f"layer{i}.b1"] = layer.bank.b1
        params[f"layer{i}.w2"] = layer.bank.w2
        params[f"layer{i}.b2"] = layer.bank.b2
    if isinstance(model.head, LinearHead):
        params['head.w'] = model.head.w
        params['head.b'] = model.head.b
    return params


def _check_batch(model, xs):
    xs = np.asarray(xs, dtype=DTYPE)
    if xs.ndim == 2:
        xs = xs[None]
    expected = (model.spec.tokens, model.spec.token_dim)
    if xs.ndim != 3 or xs.shape[1:] != expected:
        raise ShapeError(f"model expects inputs of shape (b, {expected[0]}, {expected[1]}), got {xs.shape}")
    return xs


def model_forward(model, xs, active=None, k=None, listing_order=False):
    """
    Runs every layer then the head.

    active (b x n bool) fixes the evaluated experts in every layer; k instead
    selects per layer by combine mass. Neither means all experts.
    """
    h = _check_batch(model, xs)
    acts = []
    for layer in model.layers:
        if k is not None:
            layer_active = top_k_active(softmax_over_columns_per_row(router_logits(layer, h)), k, listing_order)
        elif active is not None:
            layer_active = active
        else:
            layer_active = mask_to_active(layer.n, None, h.shape[0])
        a = forward_batch(layer, h, layer_active)
        acts.append(a)
        h = a.output
    return ModelPass(activations=acts, prediction=head_forward(model.head, h))


def model_backward(model, mpass, dpred):
    """Gradients of every model parameter (same names as model_parameters) and of the input."""
    grads = {}
    last: LayerActivations = mpass.activations[-1]
    head_grads, dy = head_backward(model.head, last.output, np.asarray(dpred, dtype=DTYPE))
    for name, g in head_grads.items():
        grads[f"head.{name}"] = g
    for i in reversed(range(len(model.layers))):
        layer_grads, dy = backward(model.layers[i], mpass.activations[i], dy)
        grads[f"layer{i}.phi"] = layer_grads.phi
        grads[f"layer{i}.w1"] = layer_grads.bank.w1
        grads[f"layer{i}.b1"] = layer_grads.bank.b1
        grads[f"layer{i}.w2"] = layer_grads.bank.w2
        grads[f"layer{i}.b2"] = layer_grads.bank.b2
    return grads, dy


def is_classifier(model):
    return isinstance(model.head, LinearHead)


def predict_active(model, xs, active=None, k=None, listing_order=False):
    """Class labels for a linear head, raw scalars for a summation head."""
    xs = _check_batch(model, xs)
    out = []
    for start in range(0, xs.shape[0], EVAL_CHUNK):
        chunk = xs[start:start + EVAL_CHUNK]
        chunk_active = None if active is None else active[start:start + EVAL_CHUNK]
        pred = model_forward(model, chunk, active=chunk_active, k=k, listing_order=listing_order).prediction
        out.append(np.argmax(pred, axis=1) if is_classifier(model) else pred)
    return np.concatenate(out)


def predict(model, xs, k=None, mask=None):
    active = None
    if mask is not None:
        xs = _check_batch(model, xs)
        active = mask_to_active(model.spec.n, mask, xs.shape[0])
    return predict_active(model, xs, active=active, k=k)


def correct_flags(model, data, active=None, k=None, listing_order=False):
    return predict_active(model, data.inputs, active=active, k=k, listing_order=listing_order) == data.labels


def evaluate_accuracy(model, data, active=None, k=None, listing_order=False):
    return float(np.mean(correct_flags(model, data, active=active, k=k, listing_order=listing_order)))


# --- Training loop ---

@dataclass
class TrainingStreams:
    data: object  # RngStream
    shuffle: object  # RngStream


@dataclass
class TraceRow:
    epoch: int
    loss: float
    accuracy: float = None


@dataclass
class TrainingTrace:
    rows: list = field(default_factory=list)
    stopped_early: bool = False

    @property
    def final_loss(self):
        return self.rows[-1].loss if self.rows else None

    @property
    def final_accuracy(self):
        return self.rows[-1].accuracy if self.rows else None


def train_step(model, adam, xs, targets):
    mpass = model_forward(model, xs)
    if is_classifier(model):
        loss, dpred = batch_cross_entropy(mpass.prediction, targets)
    else:
        loss, dpred = batch_mse(mpass.prediction, targets)
    grads, _ = model_backward(model, mpass, dpred)
    adam_step(adam, model_parameters(model), grads)
    return loss


def train_model(model, task, epochs, batch_size, streams, stop_at_accuracy=None,
                learning_rate=1e-3, steps_per_epoch=1):
    """
    Trains in place with Adam and returns the per-epoch trace.

    `task` is a NormTaskConfig (fresh batches, steps_per_epoch of them per
    epoch) or a ClassificationData (shuffled mini-batches over the train set,
    test accuracy after every epoch, optional stop at the first epoch that
    reaches stop_at_accuracy).
    """
    adam = AdamState(lr=learning_rate)
    trace = TrainingTrace()
    if isinstance(task, NormTaskConfig):
        if is_classifier(model):
            raise ConfigError("the norm task needs a summation head")
        cfg = NormTaskConfig(task.input_dim, task.tokens, task.token_dim, task.std, batch_size)
        for epoch in range(epochs):
            losses = []
            for step in range(steps_per_epoch):
                xs, ys = gen_norm_batch(cfg, streams.data.child(f"epoch{epoch}/step{step}"))
                losses.append(train_step(model, adam, xs, ys))
            trace.rows.append(TraceRow(epoch=epoch, loss=float(np.mean(losses))))
        return trace

    if not isinstance(task, ClassificationData):
        raise ConfigError(f"unsupported training task {type(task).__name__}")
    train = task.train
    if len(train) == 0 or len(task.test) == 0:
        raise ConfigError("cannot train on an empty dataset")
    for epoch in range(epochs):
        order = streams.shuffle.child(f"epoch{epoch}").permutation(len(train))
        losses = []
        for start in range(0, len(train), batch_size):
            idx = order[start:start + batch_size]
            losses.append(train_step(model, adam, train.inputs[idx], train.labels[idx]))
        accuracy = evaluate_accuracy(model, task.test)
        trace.rows.append(TraceRow(epoch=epoch, loss=float(np.mean(losses)), accuracy=accuracy))
        logger.debug("epoch %d loss %.6f accuracy %.4f", epoch, trace.rows[-1].loss, accuracy)
        if stop_at_accuracy is not None and accuracy >= stop_at_accuracy:
            trace.stopped_early = True
            break
    return trace
