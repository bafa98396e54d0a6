import csv

import numpy as np
import pytest

from hctx import tensor as T
from hctx.harness import train as train_mod
from hctx.harness.tasks import TaskSpec
from hctx.harness.train import TrainConfig, TrainingDiverged, evaluate, metrics_header, train
from hctx.model import ModelConfig

SMALL = ModelConfig(vocab_size=32, d_model=16, n_heads=2, n_layers=2, chunk_size=8, memory_slots=4,
                    max_positions=64, precision="f32")
TASK = TaskSpec("kv_recall", seq_len=40, vocab=32, chunk_size=8, n_pairs=1, gap_chunks=2)


def small_cfg(**kw):
    base = dict(steps=3, batch_size=4, warmup_steps=2, task=TASK, eval_samples=16)
    base.update(kw)
    return TrainConfig(**base)


def test_metrics_header():
    assert metrics_header(2) == ["step", "loss", "accuracy", "lr", "lambda1_l0", "lambda2_l0", "lambda3_l0",
                                 "lambda1_l1", "lambda2_l1", "lambda3_l1"]


def test_outputs_and_lambda_rows(tmp_path):
    res = train(SMALL, small_cfg(), out_dir=tmp_path)
    for f in ("metrics.csv", "run.log", "checkpoint.hctx", "summary.json"):
        assert (tmp_path / f).exists()
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["step"]) for r in rows] == [1, 2, 3]
    for r in rows:
        for i in range(2):
            lam = [float(r[f"lambda{j}_l{i}"]) for j in (1, 2, 3)]
            assert all(np.isfinite(lam)) and abs(sum(lam) - 1) < 1e-6
    assert 0.0 <= res.final_eval["accuracy"] <= 1.0
    assert res.state.step == 3


def test_seeded_runs_reproduce_losses(tmp_path):
    a = train(SMALL, small_cfg(steps=2), out_dir=tmp_path / "a")
    b = train(SMALL, small_cfg(steps=2), out_dir=tmp_path / "b")
    assert [r["loss"] for r in a.rows] == [r["loss"] for r in b.rows]
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    c = train(SMALL, small_cfg(steps=2, seed=1))
    assert [r["loss"] for r in a.rows] != [r["loss"] for r in c.rows]


def test_evaluate_from_checkpoint_matches_in_memory(tmp_path):
    res = train(SMALL, small_cfg(window=16), out_dir=tmp_path)
    direct = evaluate(res.model, TASK, 16, window=16)
    loaded = evaluate(tmp_path / "checkpoint.hctx", TASK, 16)
    assert direct == loaded


def test_disabled_path_keeps_lambda_zero():
    cfg = ModelConfig(**{**SMALL.to_dict(), "disabled_paths": ("mem",)})
    res = train(cfg, small_cfg())
    assert (res.model.lambdas()[:, 2] == 0).all()
    for n in res.model.params:
        if ".memory." in n or ".mem." in n:
            assert res.model.params[n].values.tobytes() == \
                train_mod.HybridLM(cfg, seed=0).params[n].values.tobytes()


def test_divergence_guard(monkeypatch):
    def boom(*a, **k):
        raise T.NonFiniteError("loss is inf")
    monkeypatch.setattr(train_mod, "lm_loss", boom)
    with pytest.raises(TrainingDiverged):
        train(SMALL, small_cfg())


def test_task_vocab_must_fit_model():
    with pytest.raises(ValueError):
        train(SMALL, small_cfg(task=TaskSpec("kv_recall", 40, 64, 8, gap_chunks=2)))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=0.0)
    cfg = small_cfg(window=16)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
