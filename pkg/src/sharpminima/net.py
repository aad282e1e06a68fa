"""Fully-connected networks with batch normalization and a softmax/cross-entropy head.

Parameters live in one flat float64 vector (``ParamVector.values``); the layout
maps each parameter-bearing layer to a contiguous slice.  Batch-norm running
statistics are carried next to the vector as buffers so that an iterate and
the statistics it is evaluated with always travel together.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, Union

import numpy as np

from .errors import InvalidBatchError, NumericError, SpecError

# Fixed row-block size for Eval-mode reductions; independent of worker count.
EVAL_BLOCK = 256


class EvalMode(Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class Dense:
    fan_in: int
    fan_out: int
    has_bias: bool = True


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class BatchNorm:
    dim: int
    momentum: float = 0.9
    variance_epsilon: float = 1e-5


@dataclass(frozen=True)
class SoftmaxCrossEntropyOutput:
    num_classes: int


Layer = Union[Dense, ReLU, BatchNorm, SoftmaxCrossEntropyOutput]


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        validate_spec(self)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].num_classes

    def to_json(self) -> dict:
        out = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                out.append({"kind": "dense", "in": layer.fan_in, "out": layer.fan_out, "bias": layer.has_bias})
            elif isinstance(layer, ReLU):
                out.append({"kind": "relu"})
            elif isinstance(layer, BatchNorm):
                out.append({"kind": "batchnorm", "dim": layer.dim, "momentum": layer.momentum,
                            "variance_epsilon": layer.variance_epsilon})
            else:
                out.append({"kind": "softmax_ce", "classes": layer.num_classes})
        return {"input_dim": self.input_dim, "layers": out}

    @classmethod
    def from_json(cls, obj: Union[dict, str]) -> "NetworkSpec":
        if isinstance(obj, str):
            obj = json.loads(obj)
        try:
            layers = []
            for item in obj["layers"]:
                kind = item["kind"]
                if kind == "dense":
                    layers.append(Dense(int(item["in"]), int(item["out"]), bool(item.get("bias", True))))
                elif kind == "relu":
                    layers.append(ReLU())
                elif kind == "batchnorm":
                    layers.append(BatchNorm(int(item["dim"]), float(item.get("momentum", 0.9)),
                                            float(item.get("variance_epsilon", 1e-5))))
                elif kind == "softmax_ce":
                    layers.append(SoftmaxCrossEntropyOutput(int(item["classes"])))
                else:
                    raise SpecError(f"unknown layer kind {kind!r}")
            return cls(int(obj["input_dim"]), tuple(layers))
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"malformed network spec: {exc}") from exc


def validate_spec(spec: NetworkSpec) -> None:
    if spec.input_dim <= 0:
        raise SpecError("input_dim must be positive")
    if not spec.layers or not isinstance(spec.layers[-1], SoftmaxCrossEntropyOutput):
        raise SpecError("final layer must be the softmax cross-entropy output")
    width = spec.input_dim
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            if layer.fan_in <= 0 or layer.fan_out <= 0:
                raise SpecError(f"layer {i}: dense dimensions must be positive")
            if layer.fan_in != width:
                raise SpecError(f"layer {i}: dense fan_in {layer.fan_in} != incoming width {width}")
            width = layer.fan_out
        elif isinstance(layer, BatchNorm):
            if layer.dim != width:
                raise SpecError(f"layer {i}: batchnorm dim {layer.dim} != incoming width {width}")
            if not 0.0 < layer.momentum < 1.0:
                raise SpecError(f"layer {i}: batchnorm momentum must lie in (0, 1)")
            if not layer.variance_epsilon > 0.0:
                raise SpecError(f"layer {i}: batchnorm variance_epsilon must be positive")
        elif isinstance(layer, SoftmaxCrossEntropyOutput):
            if i != len(spec.layers) - 1:
                raise SpecError(f"layer {i}: softmax output must be last")
            if layer.num_classes < 2 or layer.num_classes != width:
                raise SpecError(f"layer {i}: softmax over {layer.num_classes} classes but width is {width}")
        elif not isinstance(layer, ReLU):
            raise SpecError(f"layer {i}: unsupported layer {layer!r}")


def mlp_spec(input_dim: int, hidden: Sequence[int], num_classes: int, batchnorm: bool = True) -> NetworkSpec:
    """Dense -> [BatchNorm] -> ReLU stacks followed by the softmax head."""
    layers: list = []
    width = input_dim
    for h in hidden:
        layers.append(Dense(width, h, True))
        if batchnorm:
            layers.append(BatchNorm(h))
        layers.append(ReLU())
        width = h
    layers.append(Dense(width, num_classes, True))
    layers.append(SoftmaxCrossEntropyOutput(num_classes))
    return NetworkSpec(input_dim, tuple(layers))


@dataclass(frozen=True)
class Slot:
    layer: int
    offset: int
    length: int


@dataclass(frozen=True)
class Layout:
    n: int
    slots: tuple

    def slot(self, layer: int) -> Slot:
        for s in self.slots:
            if s.layer == layer:
                return s
        raise KeyError(layer)


def build_layout(spec: NetworkSpec) -> Layout:
    offset = 0
    slots = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            length = layer.fan_in * layer.fan_out + (layer.fan_out if layer.has_bias else 0)
        elif isinstance(layer, BatchNorm):
            length = 2 * layer.dim
        else:
            continue
        slots.append(Slot(i, offset, length))
        offset += length
    return Layout(offset, tuple(slots))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ParamVector:
    """Flat weights plus the batch-norm running statistics of this iterate.

    ``buffers`` maps a BatchNorm layer index to ``(running_mean, running_var)``.
    """

    values: np.ndarray
    layout: Layout
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "buffers", {k: (_frozen(m), _frozen(v)) for k, (m, v) in self.buffers.items()})
        if self.values.shape != (self.layout.n,):
            raise SpecError(f"parameter vector has shape {self.values.shape}, layout needs ({self.layout.n},)")

    @property
    def n(self) -> int:
        return self.layout.n

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout, self.buffers)

    def with_buffers(self, buffers: dict) -> "ParamVector":
        return ParamVector(self.values, self.layout, buffers)


def default_buffers(spec: NetworkSpec) -> dict:
    return {i: (np.zeros(l.dim), np.ones(l.dim)) for i, l in enumerate(spec.layers) if isinstance(l, BatchNorm)}


def init_params(spec: NetworkSpec, seed: int) -> ParamVector:
    layout = build_layout(spec)
    rng = np.random.default_rng(seed)
    x = np.zeros(layout.n)
    for s in layout.slots:
        layer = spec.layers[s.layer]
        if isinstance(layer, Dense):
            a = math.sqrt(6.0 / (layer.fan_in + layer.fan_out))
            nw = layer.fan_in * layer.fan_out
            x[s.offset:s.offset + nw] = rng.uniform(-a, a, size=nw)
        else:
            x[s.offset:s.offset + layer.dim] = 1.0
    return ParamVector(x, layout, default_buffers(spec))


def unpack(spec: NetworkSpec, layout: Layout, values: np.ndarray) -> dict:
    """Views into ``values``: {layer: (W, b)} for dense, {layer: (gamma, beta)} for batch-norm."""
    out = {}
    for s in layout.slots:
        layer = spec.layers[s.layer]
        chunk = values[s.offset:s.offset + s.length]
        if isinstance(layer, Dense):
            nw = layer.fan_in * layer.fan_out
            W = chunk[:nw].reshape(layer.fan_in, layer.fan_out)
            b = chunk[nw:] if layer.has_bias else None
            out[s.layer] = (W, b)
        else:
            out[s.layer] = (chunk[:layer.dim], chunk[layer.dim:])
    return out


def _check(a: np.ndarray, layer: int) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite activation at layer {layer}", layer=layer)


def _as_inputs(spec: NetworkSpec, inputs) -> np.ndarray:
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise SpecError(f"inputs must have shape (batch, {spec.input_dim}), got {X.shape}")
    return X


def _run(spec, layout, values, buffers, X, y, train, want_param_grad, want_input_grad):
    """One forward/backward pass over a batch.

    Returns (loss_sum, param_grad_of_sum, input_grad_of_sum, probs, new_buffers).
    Gradients are of the *summed* per-example loss; callers divide by the count.
    """
    has_bn = any(isinstance(l, BatchNorm) for l in spec.layers)
    m = X.shape[0]
    if train and has_bn and m < 2:
        raise InvalidBatchError("Train mode with batch normalization needs a batch of at least 2 rows")
    p = unpack(spec, layout, values)
    h = X
    caches = []
    new_buffers = dict(buffers)
    probs = None
    loss_sum = 0.0
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            W, b = p[i]
            caches.append(h)
            h = h @ W
            if b is not None:
                h = h + b
        elif isinstance(layer, ReLU):
            caches.append(h > 0)
            h = np.maximum(h, 0.0)
        elif isinstance(layer, BatchNorm):
            gamma, beta = p[i]
            if train:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
                rm, rv = buffers[i]
                new_buffers[i] = (layer.momentum * rm + (1.0 - layer.momentum) * mu,
                                  layer.momentum * rv + (1.0 - layer.momentum) * var)
            else:
                mu, var = buffers[i]
            inv = 1.0 / np.sqrt(var + layer.variance_epsilon)
            xhat = (h - mu) * inv
            caches.append((xhat, inv))
            h = gamma * xhat + beta
        else:
            zmax = h.max(axis=1, keepdims=True)
            shifted = h - zmax
            lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            logp = shifted - lse
            probs = np.exp(logp)
            if y is not None:
                loss_sum = float(-logp[np.arange(m), y].sum())
            caches.append(probs)
        _check(h, i)

    if y is None or not (want_param_grad or want_input_grad):
        return loss_sum, None, None, probs, new_buffers

    grad = np.zeros(layout.n) if want_param_grad else None
    g = probs.copy()
    g[np.arange(m), y] -= 1.0
    for i in range(len(spec.layers) - 2, -1, -1):
        layer = spec.layers[i]
        cache = caches[i]
        if isinstance(layer, Dense):
            W, b = p[i]
            if want_param_grad:
                s = layout.slot(i)
                nw = layer.fan_in * layer.fan_out
                grad[s.offset:s.offset + nw] = (cache.T @ g).ravel()
                if b is not None:
                    grad[s.offset + nw:s.offset + s.length] = g.sum(axis=0)
            if i == 0 and not want_input_grad:
                break
            g = g @ W.T
        elif isinstance(layer, ReLU):
            g = g * cache
        else:
            gamma, _ = p[i]
            xhat, inv = cache
            if want_param_grad:
                s = layout.slot(i)
                grad[s.offset:s.offset + layer.dim] = (g * xhat).sum(axis=0)
                grad[s.offset + layer.dim:s.offset + s.length] = g.sum(axis=0)
            gx = g * gamma
            if train:
                g = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            else:
                g = gx * inv
        _check(g, i)
    input_grad = g if want_input_grad else None
    return loss_sum, grad, input_grad, probs, new_buffers


def _pairwise_sum(items: list):
    if len(items) == 1:
        return items[0]
    mid = len(items) // 2
    return _pairwise_sum(items[:mid]) + _pairwise_sum(items[mid:])


def _labels(spec: NetworkSpec, labels, m: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (m,):
        raise SpecError(f"labels must have shape ({m},), got {y.shape}")
    if m == 0:
        raise InvalidBatchError("empty batch")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise SpecError("label out of range")
    return y


def _eval_blocks(spec, params, X, y, want_param_grad, want_input_grad, workers):
    m = X.shape[0]
    bounds = [(a, min(a + EVAL_BLOCK, m)) for a in range(0, m, EVAL_BLOCK)]

    def job(ab):
        a, b = ab
        return _run(spec, params.layout, params.values, params.buffers, X[a:b], y[a:b], False,
                    want_param_grad, want_input_grad)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, bounds))
    else:
        results = [job(ab) for ab in bounds]
    loss = _pairwise_sum([r[0] for r in results]) / m
    grad = _pairwise_sum([r[1] for r in results]) / m if want_param_grad else None
    input_grad = np.concatenate([r[2] for r in results]) / m if want_input_grad else None
    return loss, grad, input_grad


def forward(spec: NetworkSpec, params: ParamVector, inputs, mode: EvalMode = EvalMode.EVAL):
    """Class probabilities for each input row (running statistics are not modified)."""
    X = _as_inputs(spec, inputs)
    _, _, _, probs, _ = _run(spec, params.layout, params.values, params.buffers, X, None,
                             mode is EvalMode.TRAIN, False, False)
    return probs


def loss_and_grad(spec: NetworkSpec, params: ParamVector, batch_inputs, batch_labels,
                  mode: EvalMode = EvalMode.EVAL, workers: int = 1):
    """Mean cross-entropy over the batch and its exact gradient w.r.t. the flat parameters."""
    X = _as_inputs(spec, batch_inputs)
    y = _labels(spec, batch_labels, X.shape[0])
    if mode is EvalMode.EVAL:
        loss, grad, _ = _eval_blocks(spec, params, X, y, True, False, workers)
        return loss, grad
    loss, grad, _, _, _ = _run(spec, params.layout, params.values, params.buffers, X, y, True, True, False)
    m = X.shape[0]
    return loss / m, grad / m


def train_batch(spec: NetworkSpec, params: ParamVector, batch_inputs, batch_labels):
    """Train-mode loss/gradient plus the batch-norm buffers updated by this batch."""
    X = _as_inputs(spec, batch_inputs)
    y = _labels(spec, batch_labels, X.shape[0])
    loss, grad, _, _, buffers = _run(spec, params.layout, params.values, params.buffers, X, y, True, True, False)
    m = X.shape[0]
    return loss / m, grad / m, buffers


def loss_value(spec: NetworkSpec, params: ParamVector, inputs, labels, workers: int = 1) -> float:
    X = _as_inputs(spec, inputs)
    y = _labels(spec, labels, X.shape[0])
    return _eval_blocks(spec, params, X, y, False, False, workers)[0]


def input_gradient(spec: NetworkSpec, params: ParamVector, batch_inputs, batch_labels) -> np.ndarray:
    """Gradient of the Eval-mode mean loss with respect to every input entry."""
    X = _as_inputs(spec, batch_inputs)
    y = _labels(spec, batch_labels, X.shape[0])
    return _eval_blocks(spec, params, X, y, False, True, 1)[2]


def predict(spec: NetworkSpec, params: ParamVector, inputs) -> np.ndarray:
    # argmax picks the lowest index among ties
    return np.argmax(forward(spec, params, inputs), axis=1)


def accuracy(spec: NetworkSpec, params: ParamVector, dataset) -> float:
    if len(dataset.labels) == 0:
        raise InvalidBatchError("accuracy of an empty dataset")
    return float(np.mean(predict(spec, params, dataset.features) == dataset.labels))


def recalibrate_buffers(spec: NetworkSpec, params: ParamVector, inputs) -> ParamVector:
    """Replace running statistics by exact population statistics of ``inputs`` at these weights."""
    X = _as_inputs(spec, inputs)
    p = unpack(spec, params.layout, params.values)
    buffers = {}
    h = X
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            W, b = p[i]
            h = h @ W + (b if b is not None else 0.0)
        elif isinstance(layer, ReLU):
            h = np.maximum(h, 0.0)
        elif isinstance(layer, BatchNorm):
            mu, var = h.mean(axis=0), h.var(axis=0)
            buffers[i] = (mu, var)
            gamma, beta = p[i]
            h = gamma * (h - mu) / np.sqrt(var + layer.variance_epsilon) + beta
    return params.with_buffers(buffers)
