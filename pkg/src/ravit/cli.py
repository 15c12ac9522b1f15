"""Command-line surface: cost, sweep, train, eval, exitdist, synth.

Exit codes: 0 success, 2 configuration error, 3 data/checkpoint error,
4 numeric divergence. All randomness flows from one seed (--seed overrides
the config's train.seed); data generation and weight initialization use
separate streams derived from it.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .checkpoint import arch_mismatch, load_checkpoint, save_checkpoint
from .config import RunConfig, load_dataset, parse_run_config
from .cost import cost_report, format_flops, sweep_grid
from .data import eval_samples, write_cifar_records
from .errors import ConfigError, DataFormatError, DivergenceError
from .model import evaluate, exit_distribution, write_exit_csv
from .rng import Rng
from .training import train, write_train_log


def _effective_seed(run: RunConfig, args) -> int:
    return args.seed if args.seed is not None else run.train.seed


def _derived_seeds(seed: int) -> tuple[int, int]:
    # Decouple data generation from weight init while keeping one root seed.
    stream = Rng(seed)
    return stream.next_u64(), stream.next_u64()


def _load_run(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    return parse_run_config(args.config)


def _print_cost_table(run: RunConfig, out) -> None:
    report = cost_report(run.model)
    print(f"{'branch':>6} {'side':>5} {'tokens':>7} {'layers':>7} {'macs/layer':>12} {'macs':>14}  flops", file=out)
    for row in report.branches:
        print(
            f"{row.branch + 1:>6} {row.side:>5} {row.seq_len:>7} {row.layers:>7} "
            f"{row.macs_per_layer:>12} {row.macs:>14}  {format_flops(2 * row.macs)}",
            file=out,
        )
    print(f"{'total':>6} {'':>5} {'':>7} {'':>7} {'':>12} {report.total_macs:>14}  {format_flops(report.total_flops)}", file=out)


def cmd_cost(args) -> int:
    run = _load_run(args)
    _print_cost_table(run, sys.stdout)
    if args.out:
        report = cost_report(run.model)
        with open(args.out, "w") as f:
            f.write("branch,side,tokens,layers,macs_per_layer,macs,flops\n")
            for row in report.branches:
                f.write(
                    f"{row.branch + 1},{row.side},{row.seq_len},{row.layers},"
                    f"{row.macs_per_layer},{row.macs},{2 * row.macs}\n"
                )
            f.write(f"total,,,,,{report.total_macs},{report.total_flops}\n")
    return 0


def _parse_ranges(text: str, branches: int) -> list[tuple[int, int]]:
    try:
        ranges = []
        for part in text.split(","):
            lo, _, hi = part.partition(":")
            ranges.append((int(lo), int(hi if hi else lo)))
    except ValueError as exc:
        raise ConfigError(f"bad --ranges {text!r}: {exc}") from exc
    if len(ranges) != branches:
        raise ConfigError(f"--ranges has {len(ranges)} entries for {branches} branches")
    return ranges


def cmd_sweep(args) -> int:
    run = _load_run(args)
    ranges = _parse_ranges(args.ranges, run.model.branches)
    rows = sweep_grid(run.model, ranges)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        header = ",".join(f"l{i + 1}" for i in range(run.model.branches)) + ",mflops"
        if args.train:
            header += ",accuracy"
        print(header, file=out)
        for layer_tuple, macs in rows:
            cells = [str(l) for l in layer_tuple]
            cells.append(f"{2 * macs / 1e6:.2f}")
            if args.train:
                cells.append(repr(_trained_cell_accuracy(run, layer_tuple, args)))
            print(",".join(cells), file=out)
    finally:
        if args.out:
            out.close()
    return 0


def _trained_cell_accuracy(run: RunConfig, layer_tuple: tuple[int, ...], args) -> float:
    if not any(layer_tuple):
        return float("nan")
    seed = _effective_seed(run, args)
    data_seed, train_seed = _derived_seeds(seed)
    cfg = replace(run.model, layers=layer_tuple)
    dataset = load_dataset(run, data_seed)
    tcfg = replace(run.train, seed=train_seed, checkpoint_path=None, checkpoint_every=0)
    params, _ = train(cfg, tcfg, dataset)
    samples = eval_samples(dataset.test_images, dataset.test_labels, dataset.mean, dataset.std)
    return evaluate(samples, cfg, params, thresholds=0.0).accuracy


def cmd_train(args) -> int:
    run = _load_run(args)
    seed = _effective_seed(run, args)
    data_seed, train_seed = _derived_seeds(seed)
    dataset = load_dataset(run, data_seed)
    tcfg = replace(
        run.train,
        seed=train_seed,
        checkpoint_path=args.checkpoint,
        checkpoint_every=run.train.checkpoint_every,
    )
    _, logs = train(run.model, tcfg, dataset, log_out=sys.stdout)
    if args.out:
        with open(args.out, "w") as f:
            write_train_log(f, logs)
    if args.checkpoint:
        print(f"checkpoint written to {args.checkpoint}")
    return 0


def _load_eval_state(args, run: RunConfig):
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    ckpt_cfg, params = load_checkpoint(args.checkpoint)
    diffs = arch_mismatch(run.model, ckpt_cfg)
    if diffs:
        raise ConfigError("checkpoint does not match config: " + "; ".join(diffs))
    seed = _effective_seed(run, args)
    data_seed, _ = _derived_seeds(seed)
    dataset = load_dataset(run, data_seed)
    samples = eval_samples(dataset.test_images, dataset.test_labels, dataset.mean, dataset.std)
    if not samples:
        raise DataFormatError("dataset has no test split to evaluate")
    return params, samples


def cmd_eval(args) -> int:
    run = _load_run(args)
    params, samples = _load_eval_state(args, run)
    thresholds = args.threshold if args.threshold is not None else None
    res = evaluate(samples, run.model, params, thresholds=thresholds)
    used = (
        (args.threshold,) * (run.model.branches - 1)
        if args.threshold is not None
        else run.model.exit_thresholds
    )
    print(f"samples: {len(samples)}")
    print("thresholds: " + " ".join(repr(t) for t in used))
    print("exit_counts: " + " ".join(f"s{i + 1}={c}" for i, c in enumerate(res.exit_counts)))
    print(f"accuracy: {res.accuracy!r}")
    print(f"expected_flops: {res.expected_flops!r} ({format_flops(res.expected_flops)})")
    return 0


def cmd_exitdist(args) -> int:
    run = _load_run(args)
    params, samples = _load_eval_state(args, run)
    rows = exit_distribution(samples, run.model, params, run.exit.sweep)
    if args.out:
        with open(args.out, "w") as f:
            write_exit_csv(f, rows)
    else:
        write_exit_csv(sys.stdout, rows)
    return 0


def cmd_synth(args) -> int:
    run = _load_run(args)
    if run.data.source != "synth":
        raise ConfigError("synth command needs data.source = 'synth'")
    if run.model.input_side != 32:
        raise ConfigError("synth export uses 32x32 CIFAR-style records; set model sides accordingly")
    seed = _effective_seed(run, args)
    data_seed, _ = _derived_seeds(seed)
    dataset = load_dataset(run, data_seed)
    if args.out is None:
        raise ConfigError("--out directory is required")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_cifar_records(out_dir / "data_batch_1.bin", dataset.train_images, dataset.train_labels)
    write_cifar_records(out_dir / "test_batch.bin", dataset.test_images, dataset.test_labels)
    print(f"wrote {len(dataset.train_images)} train / {len(dataset.test_images)} test records to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ravit",
        description="Resolution-adaptive multi-branch ViT: train, evaluate, and cost models.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, threshold=False, out_help="output CSV path"):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", default=None, help=out_help)
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint path")
        if threshold:
            p.add_argument("--threshold", type=float, default=None, help="uniform exit threshold (nats)")

    p = sub.add_parser("cost", help="analytic per-branch and total FLOPs")
    common(p)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("sweep", help="grid of layer allocations vs FLOPs")
    common(p)
    p.add_argument("--ranges", required=True, help="inclusive per-branch layer ranges, e.g. 0:3,0:7")
    p.add_argument("--train", action="store_true", help="also train each grid cell and report accuracy")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p, out_help="training log CSV path")
    p.add_argument("--checkpoint", default=None, help="checkpoint output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and expected FLOPs at a threshold")
    common(p, checkpoint=True, threshold=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("exitdist", help="exit distribution over a threshold sweep")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_exitdist)

    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    common(p, out_help="output directory")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
