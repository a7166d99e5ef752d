"""Fine-tuning harness: loss, optimizer, training loop, evaluation.

Everything here is deterministic given (seed, config, dataset): batches
come from counter-based permutations, the per-batch loss is a fixed-order
mean over per-sample losses on one tape, and gradient accumulation order
is the tape's reverse execution order. The optimizer is the decoupled
weight-decay variant of adaptive moments, written out explicitly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import LabeledSet, batch_iter
from .model import Model, model_forward
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    _accumulate,
    _check_finite,
    active_tape,
    add,
    scale,
)


class PolicyViolationError(RuntimeError):
    """A frozen parameter received a gradient or changed value."""


def cross_entropy_loss(logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of the true class, shape (1,).

    Stabilized by max subtraction; backward is softmax(logits) - onehot.
    """
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy_loss expects a logit vector, got {logits.shape}")
    k = logits.data.shape[0]
    if not 0 <= label < k:
        raise ValueError(f"label {label} outside [0, {k})")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    total = e.sum()
    probs = e / total
    out_data = (np.log(total) - z[label]).reshape(1).astype(logits.data.dtype)
    _check_finite(out_data, "cross_entropy_loss")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        tape.other_flops += 4 * k
        tape.activation_bytes += out_data.nbytes
        tape.op_count += 1
        if logits.requires_grad:
            out.requires_grad = True

            def backward():
                if out.grad is None:
                    return
                g = probs.copy()
                g[label] -= 1.0
                _accumulate(logits, out.grad.reshape(()) * g)

            tape.record(backward)
    return out


@dataclass
class OptimizerState:
    """Adaptive-moment state for exactly the trainable parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(state: OptimizerState, named_params, lr: float | None = None) -> None:
    """One decoupled-weight-decay update over (name, Tensor) pairs.

    Moments are created lazily per trainable parameter. A gradient sitting
    on a frozen parameter means some upstream freeze contract broke, and
    raises rather than silently training it. Gradients are consumed
    (cleared) by the step.
    """
    if lr is None:
        lr = state.lr
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in named_params:
        if not p.requires_grad:
            if p.grad is not None:
                raise PolicyViolationError(f"frozen parameter {name!r} received a gradient")
            continue
        g = p.grad
        if g is None:
            continue  # trainable but unused by this loss; nothing to do
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= lr * (update + state.weight_decay * p.data)
        p.grad = None


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    schedule: str = "cosine"  # or "constant"
    seed: int = 0
    eval_interval: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be cosine or constant, got {self.schedule!r}")


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for 0-based step index."""
    if cfg.schedule == "constant":
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))


@dataclass
class TrainResult:
    model: Model
    history: list  # dict rows: step, loss, train_acc, eval_acc
    final_eval_acc: float | None
    final_train_loss: float


def _param_norms(model: Model) -> str:
    parts = []
    for name, t in model.named_tensors():
        if t.requires_grad:
            parts.append(f"{name}={float(np.linalg.norm(t.data)):.3e}")
    return ", ".join(parts)


def train(
    model: Model,
    dataset: LabeledSet,
    cfg: TrainConfig,
    eval_set: LabeledSet | None = None,
    history_path: str | None = None,
) -> TrainResult:
    """Deterministic fine-tuning loop.

    Batches cycle through per-epoch shuffles; each step builds one tape
    over the whole batch, backpropagates the mean loss, and applies one
    optimizer step at the scheduled learning rate. Frozen tensors are
    snapshotted up front and verified bit-identical afterwards.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    named = list(model.named_tensors())
    frozen_before = {name: t.data.copy() for name, t in named if not t.requires_grad}
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    step = 0
    epoch = 0
    final_loss = float("nan")
    last_eval: float | None = None
    while step < cfg.steps:
        # each epoch reshuffles under a seed derived from (cfg.seed, epoch)
        for images, labels in batch_iter(
            dataset, cfg.batch_size, seed=cfg.seed ^ (epoch * 0x9E3779B9), shuffle=True
        ):
            if step >= cfg.steps:
                break
            hits = 0
            try:
                with Tape() as tape:
                    total = None
                    for img, label in zip(images, labels):
                        logits = model_forward(model, img)
                        if int(np.argmax(logits.data)) == int(label):
                            hits += 1
                        sample_loss = cross_entropy_loss(logits, int(label))
                        total = sample_loss if total is None else add(total, sample_loss)
                    mean_loss = scale(total, 1.0 / len(labels))
                    tape.backward(mean_loss)
            except NonFiniteError as err:
                raise NonFiniteError(
                    f"training diverged at step {step}: {err}; trainable norms: "
                    f"{_param_norms(model)}"
                ) from err
            optimizer_step(state, named, lr=lr_at(cfg, step))
            loss_value = float(mean_loss.data[0])
            final_loss = loss_value
            step += 1
            if step % cfg.eval_interval == 0 or step == cfg.steps:
                last_eval = evaluate(model, eval_set) if eval_set is not None else None
                history.append(
                    {
                        "step": step,
                        "loss": loss_value,
                        "train_acc": hits / len(labels),
                        "eval_acc": last_eval,
                    }
                )
        epoch += 1
    for name, before in frozen_before.items():
        after = model.tensor(name).data
        if not np.array_equal(before, after):
            raise PolicyViolationError(f"frozen parameter {name!r} changed during training")
    if history_path is not None:
        write_history_csv(history, history_path)
    return TrainResult(
        model=model, history=history, final_eval_acc=last_eval, final_train_loss=final_loss
    )


def write_history_csv(history: list, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "train_acc", "eval_acc"])
        for row in history:
            eval_acc = "" if row["eval_acc"] is None else f"{row['eval_acc']:.4f}"
            writer.writerow([row["step"], f"{row['loss']:.6f}", f"{row['train_acc']:.4f}", eval_acc])


def evaluate(model: Model, dataset: LabeledSet) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    hits = 0
    for img, label in zip(dataset.images, dataset.labels):
        logits = model_forward(model, img)
        if int(np.argmax(logits.data)) == int(label):
            hits += 1
    return hits / len(dataset)
