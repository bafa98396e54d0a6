"""Command line: ``hctx train | eval | verify | bench``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .attention import PATHS
from .memory import WRITE_POLICIES
from .model import ModelConfig

log = logging.getLogger("hctx")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--vocab", type=int, default=64, help="vocabulary size (model and task)")
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--chunk-size", type=int, default=32)
    g.add_argument("--memory-slots", type=int, default=8)
    g.add_argument("--write-policy", choices=WRITE_POLICIES, default="gru_fifo")
    g.add_argument("--disable-path", choices=PATHS, action="append", default=[],
                   help="drop an attention path from the fusion (repeatable)")
    g.add_argument("--rope-spread", type=float, default=16.0,
                   help="ratio between the last and first head's RoPE base")
    g.add_argument("--max-positions", type=int, default=4096)
    g.add_argument("--precision", choices=("f32", "f64"), default="f32")


def _add_task_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("task")
    g.add_argument("--task", choices=("copy", "kv_recall"), default="kv_recall")
    g.add_argument("--seq-len", type=int, default=160)
    g.add_argument("--gap-chunks", type=int, default=3)
    g.add_argument("--pairs", type=int, default=1, help="key-value pairs per recall sample")
    g.add_argument("--span", type=int, default=8, help="copied span length")


def _model_config(a) -> ModelConfig:
    return ModelConfig(vocab_size=a.vocab, d_model=a.d_model, n_heads=a.heads, n_layers=a.layers,
                       chunk_size=a.chunk_size, memory_slots=a.memory_slots,
                       max_positions=a.max_positions, rope_per_head_spread=a.rope_spread,
                       write_policy=a.write_policy, precision=a.precision,
                       disabled_paths=tuple(dict.fromkeys(a.disable_path)))


def _task_spec(a, chunk_size: int):
    from .harness.tasks import TaskSpec
    return TaskSpec(name=a.task, seq_len=a.seq_len, vocab=a.vocab, chunk_size=chunk_size,
                    span=a.span, n_pairs=a.pairs, gap_chunks=a.gap_chunks)


def _print_rows(rows: list[dict]) -> None:
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def cmd_train(a) -> int:
    from .harness.train import TrainConfig, train
    from .plotting import plot_training

    mcfg = _model_config(a)
    tcfg = TrainConfig(steps=a.steps, batch_size=a.batch, peak_lr=a.lr, warmup_steps=a.warmup,
                       clip_norm=a.clip, seed=a.seed, task=_task_spec(a, mcfg.chunk_size),
                       eval_every=a.eval_every, eval_samples=a.eval_samples, window=a.window,
                       detach_memory=not a.bptt)
    res = train(mcfg, tcfg, out_dir=a.out)
    figures = plot_training(Path(a.out) / "metrics.csv", a.out)
    summary = {"accuracy": res.final_eval["accuracy"], "loss": res.final_eval["loss"],
               "n_scored": res.final_eval["n_scored"], "steps": a.steps}
    for i, lam in enumerate(res.model.lambdas()):
        for j in range(3):
            summary[f"lambda{j + 1}_l{i}"] = round(float(lam[j]), 6)
    _print_rows([summary])
    for f in figures:
        log.info("wrote %s", f)
    return 0


def cmd_eval(a) -> int:
    from .harness.checkpoint import load_checkpoint
    from .harness.train import evaluate

    ckpt = load_checkpoint(a.checkpoint)
    train_task = ckpt.header.get("extra", {}).get("train", {}).get("task")
    if a.task is None and train_task:
        from .harness.tasks import TaskSpec
        task = TaskSpec(**train_task)
    else:
        a.task = a.task or "kv_recall"
        a.vocab = ckpt.model.config.vocab_size
        task = _task_spec(a, ckpt.model.config.chunk_size)
    window = a.window if a.window is not None else ckpt.header.get("extra", {}).get("train", {}).get("window")
    res = evaluate(ckpt.model, task, a.n_samples, seed=a.seed, window=window)
    _print_rows([{"task": task.name, **res}])
    return 0


def cmd_verify(a) -> int:
    from .verify import run_checks

    results = run_checks(tuple(a.criteria), seeds=range(a.seeds))
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_bench(a) -> int:
    from .harness.bench import LINEAR_MAX, QUADRATIC_MIN, run_bench
    from .plotting import plot_bench

    res = run_bench(tuple(a.lengths), a.d_model, a.heads, a.chunk_size, a.repeats, a.precision, a.seed)
    rows = [{"mode": r.mode, "seq_len": r.seq_len, "median_s": f"{r.median_s:.6g}"} for r in res["rows"]]
    _print_rows(rows)
    print(f"# chunk_only ratio {res['ratios']['chunk_only']:.3f} (<= {LINEAR_MAX}), "
          f"full_only ratio {res['ratios']['full_only']:.3f} (>= {QUADRATIC_MIN}): "
          f"{'PASS' if res['pass'] else 'FAIL'}")
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        (out / "bench.json").write_text(json.dumps({"ratios": res["ratios"], "pass": res["pass"]}, indent=2) + "\n")
        plot_bench(res["rows"], out / "bench_scaling.png")
    return 0 if res["pass"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hctx", description="Hybrid chunked-attention LM with recurrent memory.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a synthetic task; writes metrics, figures and a checkpoint")
    _add_model_args(p)
    _add_task_args(p)
    g = p.add_argument_group("optimization")
    g.add_argument("--steps", type=int, default=3000)
    g.add_argument("--batch", type=int, default=16)
    g.add_argument("--lr", type=float, default=3e-3)
    g.add_argument("--warmup", type=int, default=100)
    g.add_argument("--clip", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--window", type=int, default=None,
                   help="forward window in tokens (default: whole sequence)")
    g.add_argument("--bptt", action="store_true",
                   help="backpropagate through memory carried across windows of a sample")
    g.add_argument("--eval-every", type=int, default=0)
    g.add_argument("--eval-samples", type=int, default=256)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="masked accuracy and loss of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--task", choices=("copy", "kv_recall"), default=None,
                   help="defaults to the task the checkpoint was trained on")
    p.add_argument("--seq-len", type=int, default=160)
    p.add_argument("--gap-chunks", type=int, default=3)
    p.add_argument("--pairs", type=int, default=1)
    p.add_argument("--span", type=int, default=8)
    p.add_argument("--n-samples", type=int, default=256)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="gradient checks and identity suite (64-bit)")
    p.add_argument("--criteria", type=int, nargs="+", choices=(1, 2, 3, 4), default=[1, 2, 3, 4])
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="attention time scaling, chunked-only vs full-only")
    p.add_argument("--lengths", type=int, nargs="+", default=[1024, 2048])
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--chunk-size", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="directory for bench.csv and bench_scaling.png")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, IndexError, OSError) as exc:
        print(f"hctx {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
