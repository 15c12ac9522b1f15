"""End-to-end acceptance checks, one test per criterion.

Each test prints a [PASS]/[FAIL] line (visible with pytest -s) and enforces
its wall-clock budget.
"""

import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from ravit.cli import main as cli_main
from ravit.cost import cumulative_flops, flops_value, mac_layer, mac_total
from ravit.encoder import classify, encode, init_encoder_params, patchify
from ravit.model import (
    RavitConfig,
    evaluate,
    exit_distribution,
    forward_all_exits,
    infer,
    init_ravit_params,
)
from ravit.numerics import MacCounter, Tape, Tensor, backward, cross_entropy
from ravit.rng import Rng
from ravit.training import total_loss

from _util import bump
from conftest import ADAPTIVE_CFG


@contextmanager
def criterion(name: str, budget_s: float):
    start = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"[FAIL] {name}")
        raise
    elapsed = time.monotonic() - start
    print(f"[PASS] {name} ({elapsed:.1f}s / budget {budget_s:.0f}s)")
    assert elapsed < budget_s, f"{name} exceeded its {budget_s}s budget ({elapsed:.1f}s)"


def hundredths_off(value: float, reference: float) -> int:
    return abs(round(value * 100) - round(reference * 100))


def small_image_cfg(layers, sides):
    return RavitConfig(sides=sides, layers=layers, patch=4, embed_dim=128, hidden_dim=512,
                       heads=4, num_classes=10)


def large_image_cfg(layers, sides):
    return RavitConfig(sides=sides, layers=layers, patch=16, embed_dim=768, hidden_dim=3072,
                       heads=12, num_classes=1000)


def test_cost_table_small_images():
    with criterion("cost-table reproduction (32px operating points)", 1.0):
        for layers, want in [((3,), 83.16), ((4,), 110.88), ((5,), 138.61)]:
            flops = 2 * mac_total(small_image_cfg(layers, (32,)))
            assert hundredths_off(flops_value(flops), want) <= 1, (layers, flops)
        flops = 2 * mac_total(small_image_cfg((1, 3), (16, 32)))
        assert hundredths_off(flops_value(flops), 89.99) <= 1


def test_cost_table_large_images():
    with criterion("cost-table reproduction (224px operating points)", 1.0):
        for layers, want in [((8,), 23.26), ((10,), 29.07), ((12,), 34.89)]:
            flops = 2 * mac_total(large_image_cfg(layers, (224,)))
            assert hundredths_off(flops_value(flops, unit="G"), want) <= 1, (layers, flops)
        for layers, want in [((1, 1, 8), 24.43), ((1, 1, 10), 30.25)]:
            flops = 2 * mac_total(large_image_cfg(layers, (64, 128, 224)))
            assert hundredths_off(flops_value(flops, unit="G"), want) <= 1, (layers, flops)


def test_formula_instrumentation_equivalence():
    with criterion("formula vs instrumented MACs (exact)", 10.0):
        for side in (16, 32, 64):  # sequence lengths 17, 65, 257
            for dim in (32, 128):
                cfg = RavitConfig(sides=(side,), layers=(2,), patch=4, embed_dim=dim,
                                  hidden_dim=4 * dim, heads=4, num_classes=10)
                params = init_ravit_params(cfg, Rng(side + dim))
                rng = Rng(1)
                image = Tensor(rng.uniforms(3 * side * side).reshape(3, side, side))
                counter = MacCounter()
                encode(patchify(image, 4), None, params.branches[0], mac_counter=counter)
                want = 2 * mac_layer((side // 4) ** 2 + 1, dim)
                assert counter.total == want, (side, dim, counter.total, want)


def test_gradient_correctness_full_model():
    with criterion("full-model gradients vs central differences", 60.0):
        cfg = RavitConfig(sides=(8, 16), layers=(1, 1), patch=4, embed_dim=16, hidden_dim=64,
                          heads=4, num_classes=5, loss_weights=(0.5, 0.5))
        params = init_ravit_params(cfg, Rng(7))
        data_rng = Rng(8)
        image = Tensor(data_rng.normals(3 * 16 * 16).reshape(3, 16, 16))
        label = 2

        def loss_for(p):
            exits = forward_all_exits(image, cfg, p)
            losses = [cross_entropy(lg, label) for _, lg in exits]
            return total_loss(losses, [cfg.loss_weights[b] for b, _ in exits])

        named = list(params.named_tensors())
        with Tape() as tape:
            loss = loss_for(params)
        grads = backward(tape, loss, [t for _, t in named])

        h = 1e-5
        pick = Rng(99)
        worst = 0.0
        for _ in range(220):
            name, tensor = named[pick.randbelow(len(named))]
            idx = pick.randbelow(tensor.size)

            def loss_at(delta):
                replaced = bump(tensor, idx, delta)
                p2 = params.replace_tensors(lambda n, old: replaced if n == name else old)
                return loss_for(p2).item()

            fd = (loss_at(+h) - loss_at(-h)) / (2 * h)
            ad = grads[tensor].data[idx]
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-3)
            worst = max(worst, rel)
        assert worst < 1e-4, f"max relative error {worst}"


def test_adaptive_advantage(adaptive_model, adaptive_test_samples):
    with criterion("adaptive advantage on the 50/50 mix", 15 * 60.0):
        params, _ = adaptive_model
        cfg = ADAPTIVE_CFG
        full = evaluate(adaptive_test_samples, cfg, params, thresholds=0.0)
        flop_full = cumulative_flops(cfg)[-1]
        assert full.expected_flops == flop_full

        sweep = [i * math.log(10) / 20 for i in range(21)]
        rows = exit_distribution(adaptive_test_samples, cfg, params, sweep)
        viable = [
            r for r in rows
            if r.accuracy >= full.accuracy - 0.02 and r.expected_flops <= 0.80 * flop_full
        ]
        assert viable, (
            "no threshold keeps accuracy within 2 points at <= 80% of the "
            f"full cost; full accuracy {full.accuracy:.3f}, rows "
            + ", ".join(f"({r.threshold:.2f}: {r.accuracy:.3f}, {r.expected_flops / flop_full:.2f})" for r in rows)
        )
        best = min(viable, key=lambda r: r.expected_flops)
        print(
            f"  threshold {best.threshold:.3f}: accuracy {best.accuracy:.3f} vs {full.accuracy:.3f}, "
            f"cost ratio {best.expected_flops / flop_full:.2f}"
        )


def test_early_exit_behavior(adaptive_model, adaptive_test_samples):
    with criterion("early-exit partition/monotonicity/threshold-zero", 5 * 60.0):
        params, _ = adaptive_model
        cfg = ADAPTIVE_CFG
        total = len(adaptive_test_samples)
        sweep = [i * math.log(10) / 9 for i in range(10)]
        rows = exit_distribution(adaptive_test_samples, cfg, params, sweep)

        # (a) every threshold partitions the dataset across exits
        assert all(sum(r.exit_counts) == total for r in rows)

        # (b) coarse-exit fraction non-decreasing, expected cost non-increasing
        first_counts = [r.exit_counts[0] for r in rows]
        assert first_counts == sorted(first_counts)
        costs = [r.expected_flops for r in rows]
        assert costs == sorted(costs, reverse=True)

        # (c) threshold 0 equals exits-disabled, exactly
        disabled = evaluate(adaptive_test_samples, cfg, params, thresholds=0.0)
        assert rows[0].threshold == 0.0
        assert rows[0].accuracy == disabled.accuracy
        assert rows[0].exit_counts[-1] == total


def test_degenerate_equivalence():
    with criterion("zero-branch pyramid equals plain encoder (bit-exact)", 10.0):
        cfg = RavitConfig(sides=(16, 32), layers=(0, 3), patch=4, embed_dim=32, hidden_dim=128,
                          heads=4, num_classes=10, exit_thresholds=(0.0,))
        params = init_ravit_params(cfg, Rng(31))
        plain = params.branches[1]
        rng = Rng(32)
        for _ in range(5):
            image = Tensor(rng.normals(3 * 32 * 32).reshape(3, 32, 32))
            pred, record = infer(image, cfg, params)
            _, cls = encode(patchify(image, 4), None, plain)
            logits = classify(cls, plain)
            assert np.array_equal(record.logits[-1].array, logits.array)
            assert pred == int(np.argmax(logits.array))


def test_determinism(tmp_path):
    with criterion("seeded train + exitdist reruns are byte-identical", 10 * 60.0):
        doc = {
            "model": {"sides": [8, 16], "layers": [1, 1], "embed_dim": 8, "hidden_dim": 32,
                      "heads": 2, "num_classes": 4},
            "train": {"epochs": 2, "batch_size": 8, "lr": 0.002, "weight_decay": 0.01,
                      "seed": 9, "augment": True},
            "exit": {"sweep": [0.0, 0.4, 0.8, 1.2]},
            "data": {"source": "synth", "samples": 40, "easy_frac": 0.5},
        }
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text(json.dumps(doc))

        ckpt_a, ckpt_b = tmp_path / "a.bin", tmp_path / "b.bin"
        assert cli_main(["train", "--config", str(cfg_path), "--checkpoint", str(ckpt_a)]) == 0
        assert cli_main(["train", "--config", str(cfg_path), "--checkpoint", str(ckpt_b)]) == 0
        assert ckpt_a.read_bytes() == ckpt_b.read_bytes()

        dist_a, dist_b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert cli_main(["exitdist", "--config", str(cfg_path), "--checkpoint", str(ckpt_a),
                         "--out", str(dist_a)]) == 0
        assert cli_main(["exitdist", "--config", str(cfg_path), "--checkpoint", str(ckpt_a),
                         "--out", str(dist_b)]) == 0
        assert dist_a.read_bytes() == dist_b.read_bytes()
