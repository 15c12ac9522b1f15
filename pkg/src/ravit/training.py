"""Desk-scale training: the multi-exit loss, AdamW, cosine schedule, the loop.

Every exit of the model contributes a cross-entropy term to one weighted
sum, and the whole forward (including the CLS handoff between branches) is
recorded on a single tape, so coarse branches receive gradient from finer
exits too. Training is single-threaded and bit-deterministic given the
seed, the configs, and the dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from . import checkpoint
from .data import Dataset, Sample, augment, eval_samples, normalize
from .errors import ConfigError, DivergenceError, NonFiniteError, ShapeError
from .model import RavitConfig, RavitParams, forward_all_exits, init_ravit_params
from .numerics import Tape, Tensor, add, backward, cross_entropy, scale
from .rng import Rng


def total_loss(exit_losses: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Weighted sum of per-exit losses (a scalar tensor on the active tape)."""
    if len(exit_losses) != len(weights):
        raise ShapeError(f"{len(exit_losses)} losses vs {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise ValueError("loss weights must be non-negative")
    if not exit_losses:
        raise ShapeError("need at least one exit loss")
    out = None
    for loss, w in zip(exit_losses, weights):
        term = scale(loss, w)
        out = term if out is None else add(out, term)
    return out


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at step `total`."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step >= total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


@dataclass
class OptimizerState:
    """AdamW moments keyed by parameter name, plus the hyperparameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    named_params: Sequence[tuple[str, Tensor]],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> dict[str, Tensor]:
    """One decoupled-weight-decay Adam update; returns the new tensors by name.

    Weight decay multiplies each parameter by (1 - lr * wd) before the
    bias-corrected adaptive step.
    """
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    out: dict[str, Tensor] = {}
    for name, p in named_params:
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        decayed = p.array * (1.0 - state.lr * state.weight_decay)
        new = decayed - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = Tensor._wrap(new)
    return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr: float = 1e-3
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    seed: int = 0
    augment: bool = False
    checkpoint_path: str | None = None
    checkpoint_every: int = 0  # epochs between snapshots; 0 = final only

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lr: float
    loss: float
    exit_losses: tuple[float, ...]  # per branch; nan where the branch is skipped
    exit_accuracies: tuple[float, ...]  # on the test split; nan where skipped/empty


def _sample_loss(sample: Sample, cfg: RavitConfig, params: RavitParams) -> tuple[Tensor, list[tuple[int, float]]]:
    exits = forward_all_exits(sample.image, cfg, params)
    losses = [cross_entropy(logits, sample.label) for _, logits in exits]
    weights = [cfg.loss_weights[b] for b, _ in exits]
    per_branch = [(b, loss.item()) for (b, _), loss in zip(exits, losses)]
    return total_loss(losses, weights), per_branch


def _exit_accuracies(samples: list[Sample], cfg: RavitConfig, params: RavitParams) -> tuple[float, ...]:
    active = cfg.active_branches()
    if not samples:
        return (math.nan,) * cfg.branches
    correct = {b: 0 for b in active}
    for s in samples:
        for b, logits in forward_all_exits(s.image, cfg, params):
            correct[b] += int(np.argmax(logits.array)) == s.label
    return tuple(
        correct[b] / len(samples) if b in correct else math.nan for b in range(cfg.branches)
    )


def train(
    cfg: RavitConfig,
    tcfg: TrainConfig,
    dataset: Dataset,
    log_out: TextIO | None = None,
) -> tuple[RavitParams, list[EpochLog]]:
    """Minimize the weighted multi-exit loss with AdamW and cosine annealing.

    Returns the final parameters and one log row per epoch (per-exit
    accuracy is measured on the test split). Raises DivergenceError if any
    forward or update produces non-finite values.
    """
    if dataset.side != cfg.input_side:
        raise ConfigError(f"dataset side {dataset.side} does not match config {cfg.input_side}")
    if int(dataset.train_labels.max(initial=0)) >= cfg.num_classes:
        raise ConfigError("dataset labels exceed the configured class count")
    rng = Rng(tcfg.seed)
    params = init_ravit_params(cfg, rng)
    state = OptimizerState(
        lr=tcfg.lr,
        beta1=tcfg.beta1,
        beta2=tcfg.beta2,
        eps=tcfg.eps,
        weight_decay=tcfg.weight_decay,
    )
    test_split = eval_samples(dataset.test_images, dataset.test_labels, dataset.mean, dataset.std)
    n = len(dataset.train_images)
    logs: list[EpochLog] = []
    for epoch in range(tcfg.epochs):
        state.lr = cosine_lr(epoch, tcfg.epochs, tcfg.lr, tcfg.lr_min)
        order = rng.permutation(n)
        loss_sum = 0.0
        branch_loss_sum = {b: 0.0 for b in cfg.active_branches()}
        try:
            for start in range(0, n, tcfg.batch_size):
                batch = order[start : start + tcfg.batch_size]
                named = list(params.named_tensors())
                grad_sum: dict[str, np.ndarray] = {}
                for idx in batch:
                    raw = dataset.train_images[idx]
                    if tcfg.augment:
                        image = augment(raw, rng, dataset.mean, dataset.std)
                    else:
                        image = normalize(raw, dataset.mean, dataset.std)
                    sample = Sample(image=Tensor(image), label=int(dataset.train_labels[idx]))
                    with Tape() as tape:
                        loss, per_branch = _sample_loss(sample, cfg, params)
                    grads = backward(tape, loss, [t for _, t in named])
                    for (name, t) in named:
                        g = grads[t].array
                        acc = grad_sum.get(name)
                        grad_sum[name] = g.copy() if acc is None else acc + g
                    loss_sum += loss.item()
                    for b, value in per_branch:
                        branch_loss_sum[b] += value
                mean_grads = {name: g / len(batch) for name, g in grad_sum.items()}
                new_tensors = adamw_step(named, mean_grads, state)
                params = params.replace_tensors(lambda name, _old: new_tensors[name])
        except NonFiniteError as exc:
            raise DivergenceError(
                f"non-finite values during epoch {epoch} (lr={state.lr!r}): {exc}"
            ) from exc
        logs.append(
            EpochLog(
                epoch=epoch,
                lr=state.lr,
                loss=loss_sum / n,
                exit_losses=tuple(
                    branch_loss_sum[b] / n if b in branch_loss_sum else math.nan
                    for b in range(cfg.branches)
                ),
                exit_accuracies=_exit_accuracies(test_split, cfg, params),
            )
        )
        if log_out is not None:
            last = logs[-1]
            accs = " ".join(f"{a:.3f}" for a in last.exit_accuracies)
            print(
                f"epoch {epoch + 1}/{tcfg.epochs} lr {last.lr:.6g} loss {last.loss:.4f} exit_acc [{accs}]",
                file=log_out,
            )
        if (
            tcfg.checkpoint_path
            and tcfg.checkpoint_every
            and (epoch + 1) % tcfg.checkpoint_every == 0
        ):
            checkpoint.save_checkpoint(tcfg.checkpoint_path, cfg, params)
    if tcfg.checkpoint_path:
        checkpoint.save_checkpoint(tcfg.checkpoint_path, cfg, params)
    return params, logs


def write_train_log(out: TextIO, logs: Sequence[EpochLog]) -> None:
    """CSV with header epoch,lr,loss,exit1_acc,...,exitB_acc."""
    if not logs:
        raise ValueError("no epochs to write")
    b = len(logs[0].exit_accuracies)
    out.write("epoch,lr,loss," + ",".join(f"exit{i + 1}_acc" for i in range(b)) + "\n")
    for row in logs:
        cells = [str(row.epoch), repr(row.lr), repr(row.loss)]
        cells.extend(repr(a) for a in row.exit_accuracies)
        out.write(",".join(cells) + "\n")
