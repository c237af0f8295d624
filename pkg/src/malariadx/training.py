"""Binary cross-entropy training with Adam."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .augment import AugmentConfig, AugmentedBatch, augment_pipeline, batch_rng
from .checkpoint import save_checkpoint, write_bytes_atomic
from .data import DatasetSplit, iter_batches
from .errors import RejectedInputError
from .model import ModelConfig, ModelParams, build_model, forward_train, predict_proba
from .tensor import Tape, Tensor, backward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    freeze_prefixes: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise RejectedInputError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise RejectedInputError("learning_rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise RejectedInputError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise RejectedInputError("eps must be positive")


def is_frozen(name: str, prefixes: Sequence[str]) -> bool:
    """True if ``name`` starts with one of ``prefixes`` at a dotted-name boundary."""
    for p in prefixes:
        if p and (name == p or name.startswith(p if p.endswith(".") else p + ".")):
            return True
    return False


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: Mapping[str, Tensor], state: AdamState,
              config: TrainConfig) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update of every non-frozen parameter.

    ``grads`` must name exactly the non-frozen parameters.  Frozen tensors
    are passed through untouched.
    """
    trainable = [n for n in params.tensors if not is_frozen(n, config.freeze_prefixes)]
    if set(grads) != set(trainable):
        missing = sorted(set(trainable) - set(grads))
        extra = sorted(set(grads) - set(trainable))
        raise RejectedInputError(f"gradient names do not match trainable params "
                                 f"(missing {missing}, unexpected {extra})")
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    tensors = dict(params.tensors)
    m, v = dict(state.m), dict(state.v)
    for name in trainable:
        p = params.tensors[name].data
        g = grads[name].data
        if g.shape != p.shape:
            raise RejectedInputError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m_prev = m.get(name, np.zeros_like(p))
        v_prev = v.get(name, np.zeros_like(p))
        m[name] = b1 * m_prev + (1 - b1) * g
        v[name] = b2 * v_prev + (1 - b2) * g * g
        step = config.learning_rate * (m[name] / c1) / (np.sqrt(v[name] / c2) + config.eps)
        tensors[name] = Tensor((p - step).astype(p.dtype, copy=False))
    return params.replace(tensors=tensors), AdamState(m, v, t)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    val_loss: Optional[float] = None
    val_acc: Optional[float] = None
    seconds: float = 0.0

    def log_line(self) -> str:
        def fmt(x):
            return "nan" if x is None else f"{x:.8f}"
        return (f"{self.epoch}\t{fmt(self.loss)}\t{fmt(self.train_acc)}\t"
                f"{fmt(self.val_loss)}\t{fmt(self.val_acc)}\t{self.seconds:.3f}")


@dataclass
class Model:
    """Architecture, current parameters and optimizer state; mutated by training."""

    config: ModelConfig
    params: ModelParams
    adam: AdamState = field(default_factory=AdamState)

    @classmethod
    def create(cls, config: ModelConfig, init_seed: int = 0, dtype=np.float32) -> "Model":
        return cls(config, build_model(config, init_seed, dtype=dtype))

    @property
    def dtype(self):
        return next(iter(self.params.tensors.values())).dtype


def evaluate(model: Model, split: DatasetSplit, batch_size: int = 64) -> Tuple[float, float, np.ndarray]:
    """Eval-mode ``(bce loss, accuracy, probabilities)`` over a split."""
    images, labels = split.images, split.labels
    probs = predict_proba(model.params, model.config, images, batch_size)
    loss = ops.bce_loss(Tensor(probs), Tensor(labels)).item()
    acc = float(np.mean((probs >= 0.5) == (labels >= 0.5)))
    return loss, acc, probs


def train_epoch(model: Model, data: DatasetSplit, augment: Optional[AugmentConfig],
                config: TrainConfig, epoch: int = 0,
                validation: Optional[DatasetSplit] = None) -> EpochStats:
    """One pass over ``data`` in a seeded shuffled order, updating ``model`` in place."""
    if len(data) == 0:
        raise RejectedInputError("training split is empty")
    start = time.perf_counter()
    images, labels = data.images, data.labels
    order = batch_rng(config.seed, epoch).permutation(len(data))
    trainable = [n for n in model.params.tensors if not is_frozen(n, config.freeze_prefixes)]
    total_loss, correct, seen = 0.0, 0, 0
    for b, idx in enumerate(iter_batches(len(data), config.batch_size, order)):
        batch = AugmentedBatch(images[idx], labels[idx])
        if augment is not None:
            batch = augment_pipeline(batch, augment, batch_rng(augment.seed, epoch, b))
        x = Tensor(batch.images.astype(model.dtype, copy=False))
        y = Tensor(batch.labels.astype(model.dtype))

        tape = Tape()
        probs, buffers = forward_train(model.params, model.config, x, tape, watch=trainable)
        loss = ops.bce_loss(probs, y)
        grads = backward(tape, loss)
        params, model.adam = adam_step(model.params, grads, model.adam, config)
        for name in buffers:
            if is_frozen(name, config.freeze_prefixes):
                buffers[name] = model.params.buffers[name]
        model.params = params.replace(buffers=buffers)

        total_loss += loss.item() * len(idx)
        correct += int(np.sum((probs.data >= 0.5) == (batch.labels >= 0.5)))
        seen += len(idx)

    val_loss = val_acc = None
    if validation is not None and len(validation):
        val_loss, val_acc, _ = evaluate(model, validation)
    return EpochStats(epoch + 1, total_loss / seen, correct / seen, val_loss, val_acc,
                      time.perf_counter() - start)


@dataclass
class FitResult:
    params: ModelParams
    history: List[EpochStats]
    best_params: Optional[ModelParams] = None
    best_epoch: Optional[int] = None
    best_val_acc: Optional[float] = None
    best_val_loss: Optional[float] = None
    checkpoint_path: Optional[Path] = None


def _better(stats: EpochStats, acc: Optional[float], loss: Optional[float]) -> bool:
    if acc is None:
        return True
    if stats.val_acc != acc:
        return stats.val_acc > acc
    return stats.val_loss < loss


def fit(model: Model, splits: Mapping[str, DatasetSplit],
        augment: Optional[AugmentConfig], config: TrainConfig,
        checkpoint_path=None, log_path=None) -> FitResult:
    """Train for ``config.epochs`` epochs, tracking the best validation accuracy.

    Only the ``"train"`` and ``"validation"`` entries of ``splits`` are
    touched.  Ties on validation accuracy go to the lower validation loss.  When
    ``checkpoint_path`` is given the best model is written there on every
    improvement; ``log_path`` receives one tab-separated line per epoch.
    """
    train, validation = splits.get("train"), splits.get("validation")
    if not train or not validation:
        raise RejectedInputError("train and validation splits must be non-empty")
    result = FitResult(model.params, [])
    lines: List[str] = []
    for epoch in range(config.epochs):
        stats = train_epoch(model, train, augment, config, epoch, validation)
        result.history.append(stats)
        lines.append(stats.log_line())
        logger.info("epoch %s", stats.log_line())
        if _better(stats, result.best_val_acc, result.best_val_loss):
            result.best_params = model.params
            result.best_epoch = stats.epoch
            result.best_val_acc, result.best_val_loss = stats.val_acc, stats.val_loss
            if checkpoint_path is not None:
                save_checkpoint(model.params, model.config, checkpoint_path)
                result.checkpoint_path = Path(checkpoint_path)
        if log_path is not None:
            write_bytes_atomic(log_path, "".join(line + "\n" for line in lines).encode())
    result.params = model.params
    return result


def conv_gradient_norms(model: Model, images: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
    """L2 norm of the loss gradient for every conv weight, on one train-mode batch."""
    tape = Tape()
    names = [n for n in model.params.tensors if n.endswith(".weight") and not n.startswith("head")]
    probs, _ = forward_train(model.params, model.config,
                             Tensor(images.astype(model.dtype)), tape, watch=names)
    grads = backward(tape, ops.bce_loss(probs, Tensor(labels.astype(model.dtype))))
    return {n: float(np.linalg.norm(grads[n].data)) for n in names}
