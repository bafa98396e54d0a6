"""Training and evaluation loops with CSV metrics, a text run log and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .. import tensor as T
from ..model import HybridLM, ModelConfig, lm_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import TrainState, adam_step, clip_global_norm, lr_at
from .tasks import TaskSpec, sample_seed

log = logging.getLogger(__name__)

TRAIN_STREAM = 0
EVAL_STREAM = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    peak_lr: float = 3e-3
    warmup_steps: int = 100
    clip_norm: float = 1.0
    seed: int = 0
    task: TaskSpec = field(default_factory=TaskSpec)
    eval_every: int = 0
    eval_samples: int = 256
    window: int | None = None
    detach_memory: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["task"] = TaskSpec(**d.get("task", {}))
        return cls(**d)


def metrics_header(n_layers: int) -> list[str]:
    cols = ["step", "loss", "accuracy", "lr"]
    for i in range(n_layers):
        cols += [f"lambda1_l{i}", f"lambda2_l{i}", f"lambda3_l{i}"]
    return cols


def _fmt(v) -> str:
    return str(int(v)) if isinstance(v, (int, np.integer)) else f"{float(v):.10g}"


def masked_accuracy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    pred = logits.argmax(axis=-1)
    return float((pred[mask] == targets[mask]).mean())


def _grads(model: HybridLM, names: list[str]) -> dict[str, np.ndarray]:
    # a parameter the loss never reached has zero gradient
    out = {}
    for n in names:
        p = model.params[n]
        out[n] = p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype)
    return out


@dataclass
class TrainResult:
    model: HybridLM
    state: TrainState
    rows: list[dict]
    final_eval: dict | None = None


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the seeded training loop.

    Each step draws a fresh batch, runs the model over it in forward
    windows, takes the masked LM loss, backpropagates, clips, and applies
    Adam at the scheduled rate. With ``out_dir`` the loop writes
    ``metrics.csv``, ``run.log``, ``checkpoint.hctx`` and ``summary.json``.
    """
    task = train_cfg.task
    if task.name == "kv_recall" and task.chunk_size != model_cfg.chunk_size:
        task = replace(task, chunk_size=model_cfg.chunk_size)
        train_cfg = replace(train_cfg, task=task)
    if task.vocab > model_cfg.vocab_size:
        raise ValueError(f"task vocab {task.vocab} exceeds model vocab {model_cfg.vocab_size}")

    model = HybridLM(model_cfg, seed=train_cfg.seed)
    names = model.trainable_names()
    state = TrainState.create(model.params, names, seed=train_cfg.seed)
    header = metrics_header(model_cfg.n_layers)
    rows: list[dict] = []

    out = Path(out_dir) if out_dir is not None else None
    csv_file = run_log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_file = open(out / "metrics.csv", "w", newline="\n")
        csv_file.write(",".join(header) + "\n")
        run_log = open(out / "run.log", "w")
        run_log.write(f"model {json.dumps(model_cfg.to_dict(), sort_keys=True)}\n")
        run_log.write(f"train {json.dumps(train_cfg.to_dict(), sort_keys=True)}\n")

    try:
        for step in range(1, train_cfg.steps + 1):
            seeds = [sample_seed(train_cfg.seed, TRAIN_STREAM, step, b) for b in range(train_cfg.batch_size)]
            inputs, targets, mask = task.batch(seeds)
            try:
                with T.GradTape() as tape:
                    logits, _ = model.forward_windows(inputs, train_cfg.window, None, train_cfg.detach_memory)
                    loss = lm_loss(logits, targets, mask)
                T.backward(loss, tape)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at step {step}: {exc}") from exc

            grads, _norm = clip_global_norm(_grads(model, names), train_cfg.clip_norm)
            lr = lr_at(step, train_cfg.peak_lr, train_cfg.warmup_steps, train_cfg.steps)
            new_params, state = adam_step(model.params, grads, state, lr)
            for p in model.params.values():
                p.zero_grad()
            model.params = new_params

            row = {"step": step, "loss": loss.item(),
                   "accuracy": masked_accuracy(logits.values, targets, mask), "lr": lr}
            lam = model.lambdas()
            if not np.isfinite(lam).all() or not np.allclose(lam.sum(axis=1), 1.0):
                raise TrainingDiverged(f"fusion weights degenerate at step {step}: {lam}")
            for i, layer in enumerate(lam):
                for j in range(3):
                    row[f"lambda{j + 1}_l{i}"] = layer[j]
            rows.append(row)
            if csv_file is not None:
                csv_file.write(",".join(_fmt(row[c]) for c in header) + "\n")
            if on_step is not None:
                on_step(row)

            if train_cfg.eval_every and step % train_cfg.eval_every == 0:
                ev = evaluate(model, task, train_cfg.eval_samples, seed=train_cfg.seed,
                              window=train_cfg.window)
                msg = f"step {step} loss {row['loss']:.4f} acc {row['accuracy']:.3f} eval_acc {ev['accuracy']:.3f} eval_loss {ev['loss']:.4f} lambdas {np.round(lam, 3).tolist()}"
                log.info(msg)
                if run_log is not None:
                    run_log.write(msg + "\n")
                    run_log.flush()
    finally:
        if csv_file is not None:
            csv_file.close()

    final = evaluate(model, task, train_cfg.eval_samples, seed=train_cfg.seed, window=train_cfg.window)
    if out is not None:
        run_log.write(f"final eval_acc {final['accuracy']:.4f} eval_loss {final['loss']:.4f}\n")
        run_log.close()
        save_checkpoint(out / "checkpoint.hctx", model, state=state,
                        extra={"train": train_cfg.to_dict()})
        summary = {"final_eval": final, "lambdas": model.lambdas().tolist(),
                   "steps": train_cfg.steps}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return TrainResult(model, state, rows, final)


def evaluate(model: HybridLM | str | Path, task: TaskSpec, n_samples: int = 256, seed: int = 0,
             window: int | None = None, batch_size: int = 64) -> dict:
    """Masked accuracy and mean masked loss on held-out samples (cold memory per sample)."""
    if not isinstance(model, HybridLM):
        ckpt = load_checkpoint(model)
        model = ckpt.model
        train = ckpt.header.get("extra", {}).get("train", {})
        if window is None:
            window = train.get("window")
    if task.name == "kv_recall" and task.chunk_size != model.config.chunk_size:
        task = replace(task, chunk_size=model.config.chunk_size)
    correct = total = 0
    loss_sum = 0.0
    for start in range(0, n_samples, batch_size):
        seeds = [sample_seed(seed, EVAL_STREAM, 0, i) for i in range(start, min(start + batch_size, n_samples))]
        inputs, targets, mask = task.batch(seeds)
        logits, _ = model.forward_windows(inputs, window)
        k = int(mask.sum())
        loss_sum += lm_loss(logits, targets, mask).item() * k
        pred = logits.values.argmax(axis=-1)
        correct += int((pred[mask] == targets[mask]).sum())
        total += k
    return {"accuracy": correct / total, "loss": loss_sum / total, "n_scored": total}
