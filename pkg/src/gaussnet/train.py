"""Reverse-mode gradients, ADAM and the toy-scale training loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .layers import NetworkSpec, classify, layer_backward, layer_forward, pool, pool_adjoint, weight_sup

log = logging.getLogger(__name__)


@dataclass
class GradientTape:
    grads: dict

    @classmethod
    def zeros_like(cls, net: NetworkSpec) -> "GradientTape":
        return cls({k: np.zeros_like(v) for k, v in net.parameters().items()})

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(g))) for g in self.grads.values() if g.size), default=0.0)


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def _check_labels(net: NetworkSpec, batch: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(batch),):
        raise ValueError("labels must align with the batch")
    if labels.size and (labels.min() < 0 or labels.max() >= net.classes):
        raise ValueError(f"labels must lie in [0, {net.classes})")
    return labels


def loss_value(net: NetworkSpec, batch: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy without gradients."""
    labels = _check_labels(net, batch, labels)
    x = batch
    for layer in net.layers:
        x = layer_forward(layer, x)
    feats = pool(net, x)
    logits = feats @ np.asarray(net.head_weight, np.float64).T + np.asarray(net.head_bias, np.float64)
    return _softmax_xent(logits, labels)[0]


def loss_and_grad(net: NetworkSpec, batch: np.ndarray, labels, return_logits: bool = False):
    labels = _check_labels(net, batch, labels)
    caches = []
    x = batch
    for layer in net.layers:
        x, cache = layer_forward(layer, x, keep=True)
        caches.append(cache)
    feats = pool(net, x)
    head_w = np.asarray(net.head_weight, np.float64)
    logits = feats @ head_w.T + np.asarray(net.head_bias, np.float64)
    loss, dlogits = _softmax_xent(logits, labels)

    params = net.parameters()
    grads = {"head.weight": dlogits.T @ feats, "head.bias": dlogits.sum(axis=0)}
    g = pool_adjoint(net, dlogits @ head_w, x.shape[-2:], batch.dtype)
    for i in reversed(range(len(net.layers))):
        g, layer_grads = layer_backward(net.layers[i], caches[i], g)
        for name, val in layer_grads.items():
            grads[f"layers.{i}.{name}"] = val
    tape = GradientTape({k: np.asarray(grads[k]).astype(params[k].dtype, copy=False) for k in params})
    if return_logits:
        return loss, tape, logits
    return loss, tape


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def for_network(cls, net: NetworkSpec, **hyper) -> "AdamState":
        params = net.parameters()
        return cls(
            **hyper,
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(net: NetworkSpec, tape: GradientTape, state: AdamState):
    """One bias-corrected ADAM update; returns ``(net, state)`` without mutating inputs."""
    params = net.parameters()
    if not state.first_moment:
        state = AdamState.for_network(net, lr=state.lr, beta1=state.beta1, beta2=state.beta2, epsilon=state.epsilon)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = tape.grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.first_moment[name] + (1 - b1) * g
        v = b2 * state.second_moment[name] + (1 - b2) * g * g
        m_new[name] = m.astype(p.dtype)
        v_new[name] = v.astype(p.dtype)
        update = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        new_params[name] = (p - update).astype(p.dtype)
    new_state = AdamState(state.lr, b1, b2, state.epsilon, t, m_new, v_new)
    return net.with_parameters(new_params), new_state


def project_contractive(net: NetworkSpec, input_size: tuple[int, int], factor: float = 0.99) -> NetworkSpec:
    """Rescale each layer so its folded weight norm stays below ``factor / N_i``."""
    params = dict(net.parameters())
    size = tuple(input_size)
    for i, layer in enumerate(net.layers):
        size = layer.output_size(size)
        limit = factor / (size[0] * size[1])
        current = weight_sup(layer)
        if current > limit:
            key = f"layers.{i}.weights"
            params[key] = (params[key] * (limit / current)).astype(params[key].dtype)
    return net.with_parameters(params)


def data_init(net: NetworkSpec, images: np.ndarray, eps: float = 1e-5) -> NetworkSpec:
    """Set each layer's affine so its pre-activations start zero-mean, unit-variance on ``images``.

    A statistics-free stand-in for batch normalisation: the statistics are read once,
    then the scale and shift train like any other parameter.
    """
    layers = []
    x = images
    for layer in net.layers:
        _, cache = layer_forward(layer, x, keep=True)
        z = cache.z.astype(np.float64)
        mean = z.mean(axis=(0, 2, 3))
        std = z.std(axis=(0, 2, 3))
        dtype = np.asarray(layer.affine_scale).dtype
        scale = (1.0 / (std + eps)).astype(dtype)
        layer = replace(layer, affine_scale=scale, affine_shift=(-mean * scale).astype(dtype))
        layers.append(layer)
        x = layer_forward(layer, x)
    return replace(net, layers=tuple(layers))


@dataclass
class TrainResult:
    net: NetworkSpec
    state: AdamState
    metrics: list
    seconds: float = 0.0


def accuracy(net: NetworkSpec, images: np.ndarray, labels: np.ndarray, batch_size: int = 250) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(classify(net, images, batch_size) == labels))


def train(net: NetworkSpec, dataset, epochs: int, seed: int = 0, *, test_set=None, batch_size: int = 50,
          lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8,
          shuffle: bool = True, state: AdamState | None = None, constraint=None, on_epoch=None) -> TrainResult:
    """Mini-batch ADAM on ``dataset`` (no augmentation).

    ``constraint`` maps a network to a projected network after every step;
    ``on_epoch(epoch, net)`` may return extra metrics merged into that epoch's row.
    """
    images, labels = dataset.images, dataset.labels
    if len(labels) == 0:
        raise ValueError("training set is empty")
    if state is None:
        state = AdamState.for_network(net, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
    rng = np.random.default_rng(seed)
    metrics = []
    start = time.perf_counter()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(labels)) if shuffle else np.arange(len(labels))
        total_loss, correct = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            loss, tape, logits = loss_and_grad(net, images[idx], labels[idx], return_logits=True)
            net, state = adam_step(net, tape, state)
            if constraint is not None:
                net = constraint(net)
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))
        row = {
            "epoch": epoch,
            "train_loss": total_loss / len(order),
            "train_acc": correct / len(order),
            "test_acc": accuracy(net, test_set.images, test_set.labels) if test_set is not None else float("nan"),
        }
        if on_epoch is not None:
            row.update(on_epoch(epoch, net) or {})
        log.info("epoch %d loss %.4f train_acc %.4f test_acc %.4f", epoch, row["train_loss"], row["train_acc"], row["test_acc"])
        metrics.append(row)
    return TrainResult(net, state, metrics, time.perf_counter() - start)
