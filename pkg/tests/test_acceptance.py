"""Acceptance gate: one test per numbered criterion, each printing a PASS/FAIL line.

Criteria 5 and 8 train the desk-scale model (3000 steps, up to three seeds,
with and without the memory path) and dominate the runtime. Those runs feed
each sample through forward windows of one chunk, so the recalled pair lies
outside what full attention sees, and backpropagate through the banks
across the windows of a sample.
"""

import time

import numpy as np
import pytest

from conftest import record_criterion
from hctx.harness.bench import LINEAR_MAX, QUADRATIC_MIN, run_bench
from hctx.harness.checkpoint import load_checkpoint, save_checkpoint
from hctx.harness.tasks import TaskSpec
from hctx.harness.train import TrainConfig, evaluate, train
from hctx.model import ModelConfig
from hctx.verify import degeneracy_checks, gradient_checks, identity_checks, init_identity_checks, random_model, tiny_config


def _report(number, results, extra=""):
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
    detail = f"{len(results) - len(failed)}/{len(results)} checks within tolerance"
    if failed:
        detail += "; failing: " + ", ".join(r.name for r in failed)
    record_criterion(number, not failed, detail + extra)
    assert not failed, [r.line() for r in failed]


def test_criterion_1_gradient_oracles():
    t0 = time.perf_counter()
    results = gradient_checks()
    elapsed = time.perf_counter() - t0
    _report(1, results + [_RuntimeCheck(elapsed)], f" in {elapsed:.0f}s")


class _RuntimeCheck:
    """Adapter so the runtime bound shows up next to the numeric checks."""

    def __init__(self, elapsed):
        self.elapsed = elapsed
        self.name = "runtime < 120 s"
        self.passed = elapsed < 120.0

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] c1 {self.name}: {self.elapsed:.1f} s"


def test_criterion_2_equation_identities():
    _report(2, identity_checks())


def test_criterion_3_degeneracy_equivalences():
    _report(3, degeneracy_checks())


def test_criterion_4_init_identity():
    _report(4, init_identity_checks())


# ------------------------------------------------------------ criterion 5/8

C5_SEEDS = (0, 1, 2)
C5_WINDOW = 32
C5_DETACH = False
C5_EVAL_SAMPLES = 512


def c5_configs(seed: int, disable_mem: bool):
    model = ModelConfig(vocab_size=64, d_model=64, n_heads=4, n_layers=2, chunk_size=32, memory_slots=8,
                        precision="f32", disabled_paths=("mem",) if disable_mem else ())
    task = TaskSpec("kv_recall", seq_len=160, vocab=64, chunk_size=32, n_pairs=1, gap_chunks=3)
    tcfg = TrainConfig(steps=3000, batch_size=16, peak_lr=3e-3, warmup_steps=100, clip_norm=1.0, seed=seed,
                       task=task, eval_samples=C5_EVAL_SAMPLES, window=C5_WINDOW, detach_memory=C5_DETACH)
    return model, tcfg


@pytest.fixture(scope="module")
def capability_runs():
    """Seeded runs with and without memory; stops once the 2-of-3 verdict is settled."""
    runs = {}
    passes = fails = 0
    for seed in C5_SEEDS:
        on = train(*c5_configs(seed, disable_mem=False))
        off = train(*c5_configs(seed, disable_mem=True))
        ok = on.final_eval["accuracy"] >= 0.90 and off.final_eval["accuracy"] <= 0.60
        runs[seed] = {"on": on, "off": off, "pass": ok}
        print(f"seed {seed}: memory {on.final_eval['accuracy']:.3f}, no memory {off.final_eval['accuracy']:.3f}, "
              f"lambdas {np.round(on.model.lambdas(), 3).tolist()}")
        passes += ok
        fails += not ok
        if passes >= 2 or fails >= 2:
            break
    return runs


@pytest.mark.slow
def test_criterion_5_capability(capability_runs):
    passes = sum(r["pass"] for r in capability_runs.values())
    detail = "; ".join(f"seed {s}: mem {r['on'].final_eval['accuracy']:.3f} (>= 0.90), "
                       f"no-mem {r['off'].final_eval['accuracy']:.3f} (<= 0.60)"
                       for s, r in capability_runs.items())
    record_criterion(5, passes >= 2, f"{passes}/{len(capability_runs)} seeds pass; {detail}")
    assert passes >= 2


@pytest.mark.slow
def test_criterion_8_lambda_adaptivity(capability_runs):
    lam = capability_runs[0]["on"].model.lambdas()
    best = float(lam[:, 2].max())
    record_criterion(8, best > 0.34, f"seed-0 trained lambda3 per layer {np.round(lam[:, 2], 4).tolist()}, "
                                     f"max {best:.4f} (> 0.34)")
    assert best > 0.34


# --------------------------------------------------------------- criterion 6

def test_criterion_6_complexity():
    res = run_bench(lengths=(1024, 2048), d_model=64, n_heads=4, chunk_size=64, repeats=5)
    for r in res["rows"]:
        print(f"{r.mode} T={r.seq_len}: median {r.median_s * 1e3:.2f} ms")
    chunk, full = res["ratios"]["chunk_only"], res["ratios"]["full_only"]
    ok = chunk <= LINEAR_MAX and full >= QUADRATIC_MIN
    record_criterion(6, ok, f"T 1024->2048: chunked-only x{chunk:.2f} (<= {LINEAR_MAX}), "
                            f"full-only x{full:.2f} (>= {QUADRATIC_MIN})")
    assert ok


# --------------------------------------------------------------- criterion 7

def test_criterion_7_determinism_and_persistence(tmp_path):
    model_cfg = ModelConfig(vocab_size=64, d_model=32, n_heads=4, n_layers=2, chunk_size=16, memory_slots=4,
                            max_positions=128, precision="f32")
    task = TaskSpec("kv_recall", seq_len=80, vocab=64, chunk_size=16, gap_chunks=2)
    tcfg = TrainConfig(steps=4, batch_size=4, warmup_steps=2, task=task, eval_samples=8, window=32)
    train(model_cfg, tcfg, out_dir=tmp_path / "a")
    train(model_cfg, tcfg, out_dir=tmp_path / "b")
    csv_same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    cfg = tiny_config()
    model = random_model(cfg, 0)
    rng = np.random.default_rng(0)
    _, banks = model.forward(rng.integers(0, cfg.vocab_size, size=12))
    nxt = rng.integers(0, cfg.vocab_size, size=8)
    before, _ = model.forward(nxt, banks, position_offset=12)
    save_checkpoint(tmp_path / "warm.hctx", model, banks)
    ck = load_checkpoint(tmp_path / "warm.hctx")
    after, _ = ck.model.forward(nxt, ck.banks, position_offset=12)
    logits_same = before.values.tobytes() == after.values.tobytes()

    ck_a = load_checkpoint(tmp_path / "a" / "checkpoint.hctx")
    eval_same = evaluate(ck_a.model, task, 8, window=32) == evaluate(tmp_path / "a" / "checkpoint.hctx", task, 8)

    ok = csv_same and logits_same and eval_same
    record_criterion(7, ok, f"metrics CSV byte-identical: {csv_same}; warm-bank checkpoint logits bitwise "
                            f"identical: {logits_same}; reloaded eval identical: {eval_same}")
    assert ok
