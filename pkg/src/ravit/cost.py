"""Analytic MAC/FLOP accounting for branch transformer stacks.

One transformer layer at sequence length L and embed dim D costs
2*L^2*D + 12*L*D^2 multiply-accumulates: the quadratic term covers the two
attention dot products, the linear term the QKVO projections plus a 4x MLP.
FLOPs are defined as 2x MACs. Patch embedding and the affine exit heads are
deliberately excluded (they are negligible next to a layer), so instrumented
counts scoped to transformer layers match these numbers exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import TYPE_CHECKING, Sequence

from .errors import ConfigError, ShapeError

if TYPE_CHECKING:  # pragma: no cover
    from .model import RavitConfig


def mac_layer(seq_len: int, embed_dim: int) -> int:
    """Exact MACs of one transformer layer: 2*L^2*D + 12*L*D^2."""
    if seq_len < 1 or embed_dim < 1:
        raise ShapeError("sequence length and embed dim must be >= 1")
    return 2 * seq_len * seq_len * embed_dim + 12 * seq_len * embed_dim * embed_dim


def seq_len(side: int, patch: int) -> int:
    """Tokens at a given image side: (side/patch)^2 patches plus the CLS slot."""
    if patch <= 0 or side % patch != 0:
        raise ShapeError(f"side {side} not divisible by patch {patch}")
    return (side // patch) ** 2 + 1


def _check_cost_parity(cfg: "RavitConfig") -> None:
    # The 12*L*D^2 term assumes a 4x MLP; refuse configs the formula cannot
    # describe rather than reporting silently wrong numbers.
    if cfg.hidden_dim != 4 * cfg.embed_dim:
        raise ConfigError(
            f"cost model requires hidden_dim == 4 * embed_dim, "
            f"got {cfg.hidden_dim} vs 4 * {cfg.embed_dim}"
        )


def mac_total(cfg: "RavitConfig") -> int:
    """Total MACs of all branches: sum of layer count x per-layer MACs."""
    _check_cost_parity(cfg)
    return sum(
        layers * mac_layer(seq_len(side, cfg.patch), cfg.embed_dim)
        for side, layers in zip(cfg.sides, cfg.layers)
        if layers > 0
    )


def cumulative_flops(cfg: "RavitConfig") -> list[int]:
    """Cumulative FLOPs at each exit, one entry per non-zero-layer branch.

    Exiting at branch i pays for every branch up to and including i; exit
    heads are excluded.
    """
    _check_cost_parity(cfg)
    out: list[int] = []
    macs = 0
    for side, layers in zip(cfg.sides, cfg.layers):
        if layers == 0:
            continue
        macs += layers * mac_layer(seq_len(side, cfg.patch), cfg.embed_dim)
        out.append(2 * macs)
    return out


def expected_flops(exit_counts: Sequence[int], cumulative: Sequence[float]) -> float:
    """Dataset-averaged cost: sum(S_i * FLOP_i) / sum(S_i).

    cumulative must be the strictly increasing per-exit cost, aligned with
    exit_counts.
    """
    if len(exit_counts) != len(cumulative):
        raise ShapeError(
            f"{len(exit_counts)} exit counts vs {len(cumulative)} cost entries"
        )
    if any(c < 0 for c in exit_counts):
        raise ValueError("exit counts must be non-negative")
    total = sum(exit_counts)
    if total <= 0:
        raise ValueError("expected_flops needs at least one sample")
    if any(b <= a for a, b in zip(cumulative, cumulative[1:])):
        raise ValueError("cumulative per-exit FLOPs must be strictly increasing")
    return sum(s * f for s, f in zip(exit_counts, cumulative)) / total


@dataclass(frozen=True)
class BranchCost:
    branch: int
    side: int
    seq_len: int
    layers: int
    macs_per_layer: int
    macs: int


@dataclass(frozen=True)
class CostReport:
    branches: tuple[BranchCost, ...]
    total_macs: int
    total_flops: int
    expected: float | None = None


def cost_report(cfg: "RavitConfig", exit_counts: Sequence[int] | None = None) -> CostReport:
    """Per-branch and total cost; optionally averaged under an exit histogram.

    exit_counts, when given, has one entry per non-zero-layer branch in
    branch order.
    """
    _check_cost_parity(cfg)
    rows = []
    for i, (side, layers) in enumerate(zip(cfg.sides, cfg.layers)):
        per_layer = mac_layer(seq_len(side, cfg.patch), cfg.embed_dim)
        rows.append(
            BranchCost(
                branch=i,
                side=side,
                seq_len=seq_len(side, cfg.patch),
                layers=layers,
                macs_per_layer=per_layer,
                macs=layers * per_layer,
            )
        )
    total = sum(r.macs for r in rows)
    expected = None
    if exit_counts is not None:
        expected = expected_flops(exit_counts, cumulative_flops(cfg))
    return CostReport(branches=tuple(rows), total_macs=total, total_flops=2 * total, expected=expected)


def sweep_grid(cfg: "RavitConfig", ranges: Sequence[tuple[int, int]]) -> list[tuple[tuple[int, ...], int]]:
    """Total MACs for every layer allocation on an inclusive per-branch grid.

    Rows come out in lexicographic order of the layer tuple.
    """
    from dataclasses import replace

    if len(ranges) != len(cfg.sides):
        raise ConfigError(f"need one range per branch, got {len(ranges)} for {len(cfg.sides)} branches")
    for lo, hi in ranges:
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad layer range {lo}:{hi}")
    rows: list[tuple[tuple[int, ...], int]] = []

    def rec(prefix: tuple[int, ...]):
        if len(prefix) == len(ranges):
            rows.append((prefix, mac_total(replace(cfg, layers=prefix))))
            return
        lo, hi = ranges[len(prefix)]
        for val in range(lo, hi + 1):
            rec(prefix + (val,))

    rec(())
    return rows


def format_flops(flops: float) -> str:
    """Human-readable FLOPs with two decimals, half-up, in M or G units."""
    unit, div = ("GFLOPs", 10**9) if flops >= 10**9 else ("MFLOPs", 10**6)
    value = Decimal(str(flops)) / Decimal(div)
    return f"{value.quantize(Decimal('0.01'), rounding=ROUND_HALF_UP)} {unit}"


def flops_value(flops: float, unit: str = "M") -> float:
    """FLOPs scaled to MFLOPs or GFLOPs, rounded half-up to two decimals."""
    div = 10**9 if unit == "G" else 10**6
    value = Decimal(str(flops)) / Decimal(div)
    return float(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))
