"""Multi-branch adaptive inference over a resolution pyramid.

A model is a list of encoder branches ordered coarse to fine. Inference runs
the coarsest branch first, hands its CLS summary to the next branch, and
stops as soon as the prediction entropy drops below the branch's exit
threshold; the finest (last non-empty) branch always answers. Branches with
zero layers are skipped entirely: no resize, no exit head, and the CLS
passes through unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from . import cost
from .encoder import EncoderConfig, EncoderParams, build_encoder_params, classify, encode, init_encoder_params, patchify
from .errors import ConfigError, ShapeError
from .numerics import MacCounter, Tensor, entropy_nats, reshape, softmax_rows
from .rng import Rng


def halving_sides(side: int, branches: int) -> tuple[int, ...]:
    """Default pyramid: each branch sees half the side of the next one."""
    sides = [side >> (branches - 1 - i) for i in range(branches)]
    if sides[0] << (branches - 1) != side:
        raise ConfigError(f"side {side} cannot be halved {branches - 1} times")
    return tuple(sides)


@dataclass(frozen=True)
class RavitConfig:
    """Branch layout plus the exit and loss settings that ride along with it.

    sides are per-branch input sides, strictly increasing, with the last one
    equal to the real input size. exit_thresholds (nats, one per branch
    except the last) default to 0, i.e. never exit early; loss_weights
    default to uniform 1/B.
    """

    sides: tuple[int, ...]
    layers: tuple[int, ...]
    patch: int = 4
    embed_dim: int = 32
    hidden_dim: int = 128
    heads: int = 4
    num_classes: int = 10
    channels: int = 3
    exit_thresholds: tuple[float, ...] = None  # type: ignore[assignment]
    loss_weights: tuple[float, ...] = None  # type: ignore[assignment]
    resize_mode: str = "box"

    def __post_init__(self):
        object.__setattr__(self, "sides", tuple(int(s) for s in self.sides))
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))
        b = len(self.sides)
        if b < 1:
            raise ConfigError("need at least one branch")
        if len(self.layers) != b:
            raise ConfigError(f"{len(self.layers)} layer counts for {b} branches")
        if any(l < 0 for l in self.layers):
            raise ConfigError("layer counts must be >= 0")
        if any(a >= c for a, c in zip(self.sides, self.sides[1:])):
            raise ConfigError(f"branch sides must be strictly increasing, got {self.sides}")
        for s in self.sides:
            if s <= 0 or s % self.patch != 0:
                raise ConfigError(f"branch side {s} not divisible by patch {self.patch}")
        if self.resize_mode not in ("box", "bilinear"):
            raise ConfigError(f"unknown resize mode {self.resize_mode!r}")
        th = self.exit_thresholds
        th = (0.0,) * (b - 1) if th is None else tuple(float(t) for t in th)
        if len(th) != b - 1:
            raise ConfigError(f"need {b - 1} exit thresholds, got {len(th)}")
        object.__setattr__(self, "exit_thresholds", th)
        w = self.loss_weights
        w = (1.0 / b,) * b if w is None else tuple(float(x) for x in w)
        if len(w) != b:
            raise ConfigError(f"need {b} loss weights, got {len(w)}")
        if any(x < 0 for x in w):
            raise ConfigError("loss weights must be non-negative")
        object.__setattr__(self, "loss_weights", w)

    @property
    def branches(self) -> int:
        return len(self.sides)

    @property
    def input_side(self) -> int:
        return self.sides[-1]

    def active_branches(self) -> tuple[int, ...]:
        """Indices of branches that actually run (layer count > 0)."""
        return tuple(i for i, l in enumerate(self.layers) if l > 0)

    def encoder_config(self, branch: int) -> EncoderConfig:
        return EncoderConfig(
            image_side=self.sides[branch],
            patch=self.patch,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            heads=self.heads,
            layers=self.layers[branch],
            num_classes=self.num_classes,
            channels=self.channels,
        )


@dataclass(frozen=True, eq=False)
class RavitParams:
    """Per-branch encoder weights; skipped (zero-layer) branches hold None."""

    branches: tuple[EncoderParams | None, ...]

    def named_tensors(self):
        for i, bp in enumerate(self.branches):
            if bp is None:
                continue
            yield from bp.named_tensors(f"branch{i}.")

    def replace_tensors(self, lookup: Callable[[str, Tensor], Tensor]) -> "RavitParams":
        return RavitParams(
            branches=tuple(
                None if bp is None else bp.replace_tensors(lookup, f"branch{i}.")
                for i, bp in enumerate(self.branches)
            )
        )


def init_ravit_params(cfg: RavitConfig, rng: Rng) -> RavitParams:
    return RavitParams(
        branches=tuple(
            init_encoder_params(cfg.encoder_config(i), rng) if l > 0 else None
            for i, l in enumerate(cfg.layers)
        )
    )


def build_ravit_params(cfg: RavitConfig, make: Callable[[str, tuple[int, ...]], Tensor]) -> RavitParams:
    """Assemble params by calling make(qualified_name, shape) in canonical order."""
    out = []
    for i, l in enumerate(cfg.layers):
        if l == 0:
            out.append(None)
            continue
        prefix = f"branch{i}."
        out.append(
            build_encoder_params(cfg.encoder_config(i), lambda n, s, p=prefix: make(p + n, s))
        )
    return RavitParams(branches=tuple(out))


# ---------------------------------------------------------------------------
# resizing


def resize(image: Tensor, target: int, mode: str = "box") -> Tensor:
    """Downscale a (C, S, S) image to (C, target, target).

    Box mode averages f x f blocks and needs an integer factor; bilinear
    handles arbitrary factors. Both preserve constants and the value range.
    Like patchify this is input-side data movement, not differentiated.
    """
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise ShapeError(f"resize needs a square (C, S, S) image, got {image.shape}")
    if target <= 0:
        raise ShapeError(f"target side must be positive, got {target}")
    side = image.shape[1]
    if target == side:
        return image
    if mode == "box":
        if target > side or side % target != 0:
            raise ShapeError(
                f"box resize needs an integer factor, got {side} -> {target}; use bilinear"
            )
        f = side // target
        arr = image.array.reshape(image.shape[0], target, f, target, f).mean(axis=(2, 4))
        return Tensor._wrap(arr)
    if mode == "bilinear":
        return Tensor._wrap(_bilinear(image.array, target))
    raise ShapeError(f"unknown resize mode {mode!r}")


def _bilinear(arr: np.ndarray, target: int) -> np.ndarray:
    side = arr.shape[1]
    pos = (np.arange(target) + 0.5) * (side / target) - 0.5
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    lo0 = np.clip(lo, 0, side - 1)
    hi0 = np.clip(lo + 1, 0, side - 1)
    rows = arr[:, lo0, :] * (1 - frac)[None, :, None] + arr[:, hi0, :] * frac[None, :, None]
    return rows[:, :, lo0] * (1 - frac)[None, None, :] + rows[:, :, hi0] * frac[None, None, :]


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class ExitRecord:
    """Trace of one adaptive inference: which exit answered and why.

    visited/entropies/logits cover the branches actually run, in order, up
    to and including the exit branch. macs_spent is the instrumented
    transformer-layer MAC count of those branches.
    """

    exit_branch: int
    visited: tuple[int, ...]
    entropies: tuple[float, ...]
    logits: tuple[Tensor, ...]
    macs_spent: int
    predicted_class: int


def confidence(logits: Tensor) -> tuple[Tensor, float]:
    """Softmax probabilities and their entropy in nats."""
    probs = reshape(softmax_rows(reshape(logits, (1, logits.shape[0]))), logits.shape)
    return probs, entropy_nats(probs)


def _check_inputs(image: Tensor, cfg: RavitConfig, params: RavitParams) -> None:
    expected = (cfg.channels, cfg.input_side, cfg.input_side)
    if image.shape != expected:
        raise ConfigError(f"image shape {image.shape} does not match config {expected}")
    if len(params.branches) != cfg.branches:
        raise ConfigError(f"params have {len(params.branches)} branches, config {cfg.branches}")
    for i, (l, bp) in enumerate(zip(cfg.layers, params.branches)):
        if (l > 0) != (bp is not None):
            raise ConfigError(f"branch {i}: layers={l} but params {'missing' if bp is None else 'present'}")
        if bp is not None and bp.config != cfg.encoder_config(i):
            raise ConfigError(f"branch {i}: params built for {bp.config}, config wants {cfg.encoder_config(i)}")


def _resolve_thresholds(cfg: RavitConfig, override) -> tuple[float, ...]:
    if override is None:
        return cfg.exit_thresholds
    if isinstance(override, (int, float)):
        return (float(override),) * (cfg.branches - 1)
    th = tuple(float(t) for t in override)
    if len(th) != cfg.branches - 1:
        raise ConfigError(f"need {cfg.branches - 1} thresholds, got {len(th)}")
    return th


def _branch_input(image: Tensor, cfg: RavitConfig, branch: int) -> Tensor:
    side = cfg.sides[branch]
    img = image if side == cfg.input_side else resize(image, side, cfg.resize_mode)
    return patchify(img, cfg.patch)


def infer(
    image: Tensor,
    cfg: RavitConfig,
    params: RavitParams,
    thresholds: float | Sequence[float] | None = None,
) -> tuple[int, ExitRecord]:
    """Adaptive coarse-to-fine prediction for one full-resolution image.

    Runs non-empty branches in order, seeding each CLS from the previous
    branch (the first from its learned token), and exits at the first branch
    whose prediction entropy is below its threshold; the last non-empty
    branch always exits.
    """
    _check_inputs(image, cfg, params)
    th = _resolve_thresholds(cfg, thresholds)
    active = cfg.active_branches()
    if not active:
        raise ConfigError("all branches have zero layers; nothing to run")
    counter = MacCounter()
    cls = None
    visited: list[int] = []
    entropies: list[float] = []
    logit_list: list[Tensor] = []
    for pos, b in enumerate(active):
        bp = params.branches[b]
        _, cls = encode(_branch_input(image, cfg, b), cls, bp, mac_counter=counter)
        logits = classify(cls, bp)
        _, ent = confidence(logits)
        visited.append(b)
        entropies.append(ent)
        logit_list.append(logits)
        if pos == len(active) - 1 or ent < th[b]:
            pred = int(np.argmax(logits.array))
            record = ExitRecord(
                exit_branch=b,
                visited=tuple(visited),
                entropies=tuple(entropies),
                logits=tuple(logit_list),
                macs_spent=counter.total,
                predicted_class=pred,
            )
            return pred, record
    raise AssertionError("unreachable")


def forward_all_exits(image: Tensor, cfg: RavitConfig, params: RavitParams) -> list[tuple[int, Tensor]]:
    """Logits of every non-empty branch with CLS chaining, no early exit.

    The per-branch computation is identical to infer's, so infer's trace is
    a literal prefix of this list.
    """
    _check_inputs(image, cfg, params)
    active = cfg.active_branches()
    if not active:
        raise ConfigError("all branches have zero layers; nothing to run")
    cls = None
    out: list[tuple[int, Tensor]] = []
    for b in active:
        bp = params.branches[b]
        _, cls = encode(_branch_input(image, cfg, b), cls, bp)
        out.append((b, classify(cls, bp)))
    return out


def _route(entropies: Sequence[float], active: Sequence[int], th: Sequence[float]) -> int:
    """Position (within active) of the exit taken under per-branch thresholds."""
    for pos, b in enumerate(active[:-1]):
        if entropies[pos] < th[b]:
            return pos
    return len(active) - 1


@dataclass(frozen=True)
class BranchOutputs:
    """Cached per-sample outputs of all exits, for post-hoc threshold routing."""

    entropies: tuple[float, ...]
    predictions: tuple[int, ...]
    label: int


def collect_outputs(samples, cfg: RavitConfig, params: RavitParams) -> list[BranchOutputs]:
    out = []
    for s in samples:
        exits = forward_all_exits(s.image, cfg, params)
        ents, preds = [], []
        for _, logits in exits:
            _, ent = confidence(logits)
            ents.append(ent)
            preds.append(int(np.argmax(logits.array)))
        out.append(BranchOutputs(tuple(ents), tuple(preds), s.label))
    return out


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    expected_flops: float
    exit_counts: tuple[int, ...]  # one entry per branch, zeros where skipped


def _tally(outputs: Sequence[BranchOutputs], cfg: RavitConfig, th: Sequence[float]) -> EvalResult:
    active = cfg.active_branches()
    flops_cum = cost.cumulative_flops(cfg)
    counts = [0] * cfg.branches
    correct = 0
    for rec in outputs:
        pos = _route(rec.entropies, active, th)
        counts[active[pos]] += 1
        correct += rec.predictions[pos] == rec.label
    active_counts = [counts[b] for b in active]
    return EvalResult(
        accuracy=correct / len(outputs),
        expected_flops=cost.expected_flops(active_counts, flops_cum),
        exit_counts=tuple(counts),
    )


def evaluate(
    samples,
    cfg: RavitConfig,
    params: RavitParams,
    thresholds: float | Sequence[float] | None = None,
) -> EvalResult:
    """Accuracy and average cost of adaptive inference over a sample list."""
    if not samples:
        raise ValueError("evaluate needs a non-empty sample list")
    th = _resolve_thresholds(cfg, thresholds)
    return _tally(collect_outputs(samples, cfg, params), cfg, th)


@dataclass(frozen=True)
class ExitDistRow:
    threshold: float
    exit_counts: tuple[int, ...]
    accuracy: float
    expected_flops: float


def exit_distribution(
    samples,
    cfg: RavitConfig,
    params: RavitParams,
    sweep: Sequence[float],
) -> list[ExitDistRow]:
    """Exit histogram, accuracy, and average FLOPs per uniform threshold.

    Each branch is run once per sample; the sweep is applied post hoc, which
    matches adaptive inference exactly because a run's trace is a prefix of
    the all-exits forward. Rows are ordered by ascending threshold.
    """
    if not samples:
        raise ValueError("exit_distribution needs a non-empty sample list")
    if sweep is None or len(sweep) == 0:
        raise ValueError("exit_distribution needs a non-empty threshold sweep")
    outputs = collect_outputs(samples, cfg, params)
    rows = []
    for tau in sorted(float(t) for t in sweep):
        res = _tally(outputs, cfg, (tau,) * max(cfg.branches - 1, 1))
        rows.append(
            ExitDistRow(
                threshold=tau,
                exit_counts=res.exit_counts,
                accuracy=res.accuracy,
                expected_flops=res.expected_flops,
            )
        )
    return rows


def write_exit_csv(out: TextIO, rows: Sequence[ExitDistRow]) -> None:
    """CSV with header threshold,s1,...,sB,accuracy,expected_flops."""
    if not rows:
        raise ValueError("no rows to write")
    b = len(rows[0].exit_counts)
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["threshold"] + [f"s{i + 1}" for i in range(b)] + ["accuracy", "expected_flops"])
    for r in rows:
        writer.writerow([repr(r.threshold)] + [str(c) for c in r.exit_counts] + [repr(r.accuracy), repr(r.expected_flops)])
