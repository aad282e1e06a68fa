"""Mini-batch sampling, SGD/ADAM updates and the training loops."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import net
from .data import AugmentPolicy, Dataset, adversarial_examples, augment
from .errors import FormatError, NumericError, SpecError, TrainingDiverged

SNAPSHOT_MAGIC = b"MSPV"
SNAPSHOT_VERSION = 1


class Strategy(Enum):
    EPOCH_SHUFFLE = "epoch_shuffle"
    UNIFORM_WITHOUT_REPLACEMENT = "uniform_without_replacement"


@dataclass(frozen=True)
class BatchSampler:
    size: int
    batch_size: int
    strategy: Strategy = Strategy.EPOCH_SHUFFLE
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.batch_size <= self.size:
            raise SpecError(f"batch size {self.batch_size} must lie in [1, {self.size}]")

    @property
    def iterations_per_epoch(self) -> int:
        if self.strategy is Strategy.EPOCH_SHUFFLE:
            return self.size // self.batch_size
        return math.ceil(self.size / self.batch_size)

    def epoch(self, epoch: int) -> List[np.ndarray]:
        """Index batches for one epoch; a pure function of (seed, epoch).

        Indices inside a batch are sorted, so the batch gradient depends only on which
        rows were drawn and not on the order they were drawn in.
        """
        rng = np.random.default_rng([self.seed, epoch])
        if self.strategy is Strategy.EPOCH_SHUFFLE:
            perm = rng.permutation(self.size)
            b = self.batch_size
            return [np.sort(perm[i * b:(i + 1) * b]) for i in range(self.size // b)]
        return [np.sort(rng.choice(self.size, size=self.batch_size, replace=False))
                for _ in range(self.iterations_per_epoch)]


def _check_grad(grad: np.ndarray) -> None:
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")


def sgd_step(x: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if x.shape != grad.shape:
        raise SpecError("gradient and parameter dimensions differ")
    if not lr > 0:
        raise SpecError("step size must be positive")
    _check_grad(grad)
    return x - lr * grad


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, x: np.ndarray, grad: np.ndarray):
    """One bias-corrected ADAM update. Returns ``(new_state, new_x)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape or np.shape(x) != grad.shape:
        raise SpecError("gradient and parameter dimensions differ")
    _check_grad(grad)
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    x_new = np.asarray(x, dtype=np.float64) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, t=t), x_new


@dataclass(frozen=True)
class StopRule:
    rel_improvement_tol: float = 1e-4
    patience_epochs: int = 10
    max_epochs: int = 200


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise SpecError(f"unknown optimizer {self.kind!r}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float


@dataclass(frozen=True)
class TrainTrace:
    records: tuple
    final: net.ParamVector
    epochs_run: int
    best_epoch: int
    snapshots: Optional[tuple] = None  # snapshots[e] = iterate after e epochs (0 = start)


def _evaluate(spec, params, train: Dataset, test: Optional[Dataset], epoch: int, workers: int) -> EpochRecord:
    loss = net.loss_value(spec, params, train.features, train.labels, workers)
    if not math.isfinite(loss):
        raise NumericError("non-finite training loss")
    test_acc = net.accuracy(spec, params, test) if test is not None else float("nan")
    return EpochRecord(epoch, loss, net.accuracy(spec, params, train), test_acc)


# Per-epoch dataset transform; receives (params at epoch start, epoch) and returns the data to sample from.
DataHook = Callable[[net.ParamVector, int], Dataset]


def _loop(spec, train_data: Dataset, test_data, sampler: BatchSampler, stop: StopRule, init: net.ParamVector,
          step: Callable, snapshot: bool, workers: int, data_hook: Optional[DataHook],
          fixed_epochs: Optional[int]) -> TrainTrace:
    params = init
    try:
        record = _evaluate(spec, params, train_data, test_data, 0, workers)
    except NumericError as exc:
        raise TrainingDiverged("initial loss is not finite", last_finite=init, epoch=0) from exc
    records = [record]
    snaps = [params] if snapshot else None
    best, best_params, best_epoch = record.train_loss, params, 0
    stale = 0
    max_epochs = fixed_epochs if fixed_epochs is not None else stop.max_epochs
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        data = data_hook(params, epoch) if data_hook is not None else train_data
        last_good = params
        try:
            for idx in sampler.epoch(epoch):
                params = step(params, data.features[idx], data.labels[idx])
            record = _evaluate(spec, params, train_data, test_data, epoch, workers)
        except NumericError as exc:
            raise TrainingDiverged(f"training diverged in epoch {epoch}: {exc}", last_finite=last_good,
                                   epoch=epoch) from exc
        records.append(record)
        if snaps is not None:
            snaps.append(params)
        if fixed_epochs is not None:
            best_params, best_epoch = params, epoch
            continue
        if record.train_loss < best * (1.0 - stop.rel_improvement_tol):
            stale = 0
        else:
            stale += 1
        if record.train_loss < best:
            best, best_params, best_epoch = record.train_loss, params, epoch
        if stale >= stop.patience_epochs:
            break
    return TrainTrace(tuple(records), best_params, epoch, best_epoch, tuple(snaps) if snaps is not None else None)


def _adam_stepper(spec, opt: OptimizerConfig, n: int):
    state = [AdamState.fresh(n, opt.lr, opt.beta1, opt.beta2, opt.eps)]

    def step(params, X, y):
        _, grad, buffers = net.train_batch(spec, params, X, y)
        state[0], x = adam_step(state[0], params.values, grad)
        return net.ParamVector(x, params.layout, buffers)

    return step


def _sgd_stepper(spec, opt: OptimizerConfig):
    def step(params, X, y):
        _, grad, buffers = net.train_batch(spec, params, X, y)
        return net.ParamVector(sgd_step(params.values, grad, opt.lr), params.layout, buffers)

    return step


def train(spec: net.NetworkSpec, train_data: Dataset, test_data: Optional[Dataset], optimizer: OptimizerConfig,
          sampler: BatchSampler, stop: StopRule = StopRule(), snapshot: bool = False, seed: int = 0,
          init: Optional[net.ParamVector] = None, workers: int = 1, data_hook: Optional[DataHook] = None,
          fixed_epochs: Optional[int] = None) -> TrainTrace:
    """Train with mini-batch SGD or ADAM until the stop rule fires.

    The returned ``final`` iterate is the one with the lowest full-training loss.
    ``fixed_epochs`` overrides the stop rule and returns the last iterate instead.
    """
    if sampler.size != len(train_data):
        raise SpecError("sampler size does not match the training set")
    params = init if init is not None else net.init_params(spec, seed)
    if optimizer.kind == "adam":
        step = _adam_stepper(spec, optimizer, params.n)
    else:
        step = _sgd_stepper(spec, optimizer)
    return _loop(spec, train_data, test_data, sampler, stop, params, step, snapshot, workers, data_hook,
                 fixed_epochs)


def proximal_step(spec, params: net.ParamVector, X, y, lam: float, inner_iters: int, state: AdamState):
    """Inexactly minimise batch loss + lam/2 ||x - x_k||^2 from x_k with ``inner_iters`` ADAM steps.

    Returns ``(state, accepted_params)``.  The ADAM moments carry over between outer
    iterations.  The best inner iterate by regularized objective is accepted, so the
    objective never goes uphill relative to x_k.  Batch-norm buffers advance once per
    inner step, as in plain training.
    """
    anchor = params.values
    current = params
    best_obj, best = None, params
    for _ in range(inner_iters):
        loss, grad, buffers = net.train_batch(spec, current, X, y)
        diff = current.values - anchor
        obj = loss + 0.5 * lam * float(diff @ diff)
        if best_obj is None or obj < best_obj:
            best_obj, best = obj, current
        if lam:
            grad = grad + lam * diff
        state, x = adam_step(state, current.values, grad)
        current = net.ParamVector(x, params.layout, buffers)
    loss, _, _ = net.train_batch(spec, current, X, y)
    diff = current.values - anchor
    if loss + 0.5 * lam * float(diff @ diff) <= best_obj:
        best = current
    return state, best


def conservative_train(spec: net.NetworkSpec, train_data: Dataset, test_data: Optional[Dataset],
                       sampler: BatchSampler, lam: float = 1e-3, inner_iters: int = 3,
                       stop: StopRule = StopRule(), seed: int = 0, optimizer: OptimizerConfig = OptimizerConfig(),
                       init: Optional[net.ParamVector] = None, snapshot: bool = False, workers: int = 1,
                       fixed_epochs: Optional[int] = None) -> TrainTrace:
    """Outer loop over batches, each solving the proximally regularized batch subproblem."""
    if lam < 0:
        raise SpecError("lambda must be non-negative")
    if inner_iters < 1:
        raise SpecError("need at least one inner iteration")
    params = init if init is not None else net.init_params(spec, seed)
    state = [AdamState.fresh(params.n, optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps)]

    def step(p, X, y):
        state[0], accepted = proximal_step(spec, p, X, y, lam, inner_iters, state[0])
        return accepted

    return _loop(spec, train_data, test_data, sampler, stop, params, step, snapshot, workers, None, fixed_epochs)


def augment_hook(train_data: Dataset, policy: AugmentPolicy) -> DataHook:
    return lambda params, epoch: augment(train_data, policy, epoch)


def adversarial_hook(spec, train_data: Dataset, eta: float, seed: int = 0, fraction: float = 0.5) -> DataHook:
    """Each epoch swaps a random ``fraction`` of the rows for FGSM examples built against the
    iterate at the start of the epoch.  The row choice is a pure function of (seed, epoch)."""
    if not 0.0 <= fraction <= 1.0:
        raise SpecError("adversarial fraction must lie in [0, 1]")

    def hook(params, epoch):
        if eta == 0 or fraction == 0:
            return train_data
        adv = adversarial_examples(spec, params, train_data, eta)
        mask = np.random.default_rng([seed, epoch]).random(len(train_data)) < fraction
        X = np.where(mask[:, None], adv.features, train_data.features)
        return Dataset(X, train_data.labels, train_data.num_classes, train_data.image_shape)

    return hook


# Snapshot files: "MSPV" | u32 version | u64 n | n little-endian float64


def encode_snapshot(values: np.ndarray) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f8")
    return SNAPSHOT_MAGIC + struct.pack("<IQ", SNAPSHOT_VERSION, values.size) + values.tobytes()


def decode_snapshot(raw: bytes) -> np.ndarray:
    if len(raw) < 16 or raw[:4] != SNAPSHOT_MAGIC:
        raise FormatError("not a parameter snapshot (bad magic)", offset=0)
    version, n = struct.unpack("<IQ", raw[4:16])
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"unsupported snapshot version {version}", offset=4)
    if len(raw) - 16 != 8 * n:
        raise FormatError(f"snapshot declares {n} values but holds {(len(raw) - 16) / 8:g}", offset=8)
    return np.frombuffer(raw, dtype="<f8", offset=16).astype(np.float64)


def save_params(path, params: net.ParamVector) -> None:
    """Writes the weights as a snapshot; batch-norm buffers follow the weights in the same file
    when present, so the stored vector has length n + 2 * (total batch-norm width)."""
    parts = [params.values] + [np.concatenate(params.buffers[k]) for k in sorted(params.buffers)]
    Path(path).write_bytes(encode_snapshot(np.concatenate(parts)))


def load_params(path, spec: net.NetworkSpec) -> net.ParamVector:
    layout = net.build_layout(spec)
    flat = decode_snapshot(Path(path).read_bytes())
    bn = {i: l.dim for i, l in enumerate(spec.layers) if isinstance(l, net.BatchNorm)}
    if flat.size != layout.n + 2 * sum(bn.values()):
        raise FormatError(f"{path}: snapshot length {flat.size} does not fit the network", offset=8)
    buffers, off = {}, layout.n
    for i in sorted(bn):
        d = bn[i]
        buffers[i] = (flat[off:off + d], flat[off + d:off + 2 * d])
        off += 2 * d
    return net.ParamVector(flat[:layout.n], layout, buffers)
