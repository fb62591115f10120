"""Loss, Adam optimizer, training loop, and classification metrics.

Training is softmax cross-entropy over shuffled mini-batches with standard
bias-corrected Adam (lr 1e-4, beta1 0.9, beta2 0.999, eps 1e-8 by
default). Runs are deterministic under a fixed seed and single-threaded
reduction: batches are shuffled by a seeded generator and gradients are
accumulated in a fixed order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import PatchDataset
from .model import ModelConfig, ModelParams, model_forward
from .tensor import Tensor, make_node, zero_grads


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; message names where it happened."""


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean -log softmax(logits)[label], computed max-shifted in log space.

    ``logits`` may be (K,) with an int label or (B, K) with B labels.
    """
    if logits.ndim == 1:
        logits2 = logits.reshape((1, logits.shape[0]))
        labels_arr = np.array([labels], dtype=np.int64)
    else:
        logits2 = logits
        labels_arr = np.asarray(labels, dtype=np.int64)
        if labels_arr.shape != (logits2.shape[0],):
            raise ValueError(f"expected {logits2.shape[0]} labels, got shape {labels_arr.shape}")
    k = logits2.shape[1]
    if labels_arr.min() < 0 or labels_arr.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range"
                         f" [{labels_arr.min()}, {labels_arr.max()}]")
    z = logits2.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    b = z.shape[0]
    picked = log_probs[np.arange(b), labels_arr]
    out = make_node(np.asarray(-picked.mean(), dtype=z.dtype), (logits2,), "cross_entropy")

    def backward(g: np.ndarray) -> None:
        if logits2.requires_grad:
            grad = np.exp(log_probs)
            grad[np.arange(b), labels_arr] -= 1.0
            logits2._accumulate((g * grad / b).astype(z.dtype))

    out._backward = backward
    return out


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict) -> None:
    """One bias-corrected Adam update from the gradients stored on ``params``.

    Parameters with no gradient (unreached leaves) are left untouched.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name in params:
        p = params[name]
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p.data = p.data - (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


# -- training loop ----------------------------------------------------------------


@dataclass
class TrainSettings:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 0.0
    lr_decay: float = 1.0  # per-epoch multiplicative factor
    seed: int = 42
    log_every: int = 10
    verbose: bool = True


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_oa: float


def train(config: ModelConfig, params: ModelParams, dataset: PatchDataset,
          settings: TrainSettings) -> list:
    """Train in place; returns one record (mean loss, train OA) per epoch."""
    if len(dataset) == 0:
        raise TrainingError("training set is empty")
    named = params.named_parameters()
    state = AdamState(lr=settings.lr, weight_decay=settings.weight_decay)
    rng = np.random.default_rng([settings.seed, 0x7A17])
    n = len(dataset)
    history = []
    for epoch in range(1, settings.epochs + 1):
        order = rng.permutation(n)
        losses = []
        correct = 0
        for start in range(0, n, settings.batch_size):
            batch = order[start:start + settings.batch_size]
            hsi = Tensor(dataset.hsi[batch])
            aux = Tensor(dataset.aux[batch])
            labels = dataset.labels[batch]
            logits = model_forward(hsi, aux, config, params)
            loss = cross_entropy(logits, labels)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // settings.batch_size}")
            zero_grads(named)
            loss.backward()
            adam_step(state, named)
            losses.append(value * batch.size)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
        state.lr *= settings.lr_decay
        record = EpochRecord(epoch, float(np.sum(losses) / n), correct / n)
        history.append(record)
        if settings.verbose and (epoch % settings.log_every == 0 or epoch == 1
                                 or epoch == settings.epochs):
            print(f"epoch {record.epoch:4d}  loss {record.loss:.6f}  train_oa {record.train_oa:.4f}")
    return history


def write_history(path, history) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss,train_oa\n")
        for rec in history:
            fh.write(f"{rec.epoch},{rec.loss:.17g},{rec.train_oa:.17g}\n")


# -- evaluation --------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predictions."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def predict_batched(config: ModelConfig, params: ModelParams, dataset: PatchDataset,
                    batch_size: int = 128) -> np.ndarray:
    """Argmax class index per sample; ties resolve to the lowest index."""
    preds = np.empty(len(dataset), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, min(start + batch_size, len(dataset)))
        logits = model_forward(Tensor(dataset.hsi[sl]), Tensor(dataset.aux[sl]),
                               config, params)
        preds[sl] = logits.data.argmax(axis=1)
    return preds


def evaluate(config: ModelConfig, params: ModelParams, dataset: PatchDataset,
             batch_size: int = 128) -> ConfusionMatrix:
    preds = predict_batched(config, params, dataset, batch_size)
    k = config.num_classes
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (dataset.labels, preds), 1)
    return ConfusionMatrix(counts)


@dataclass
class Metrics:
    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray
    empty_classes: list


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Overall accuracy, average per-class accuracy, and Cohen's kappa.

    Classes with no true samples are excluded from AA (with a warning) and
    reported in ``empty_classes``.
    """
    counts = cm.counts
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    row_sums = counts.sum(axis=1)
    col_sums = counts.sum(axis=0)
    diag = np.diagonal(counts)
    oa = float(diag.sum() / total)
    present = row_sums > 0
    empty = [int(i) for i in np.nonzero(~present)[0]]
    if empty:
        warnings.warn(f"classes with no true samples excluded from AA: {empty}")
    per_class = np.full(counts.shape[0], np.nan)
    per_class[present] = diag[present] / row_sums[present]
    aa = float(per_class[present].mean())
    p_e = float((row_sums * col_sums).sum() / (total * total))
    if p_e >= 1.0:
        kappa = 1.0  # degenerate single-class case; only reachable with oa == 1
    else:
        kappa = (oa - p_e) / (1.0 - p_e)
    return Metrics(oa=oa, aa=aa, kappa=float(kappa), per_class=per_class, empty_classes=empty)


def write_confusion(path, cm: ConfusionMatrix) -> None:
    np.savetxt(path, cm.counts, fmt="%d", delimiter=",")
