"""Wall-clock scaling of the attention sublayer as the sequence doubles."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..model import HybridLM, ModelConfig
from ..tensor import Tensor

# path set kept per mode; everything else is disabled
MODES = {"chunk_only": ("chunk",), "full_only": ("full",)}
LINEAR_MAX = 2.4
QUADRATIC_MIN = 3.2


@dataclass(frozen=True)
class BenchRow:
    mode: str
    seq_len: int
    median_s: float
    runs: tuple[float, ...]


def bench_model(mode: str, max_len: int, d_model: int = 64, n_heads: int = 4,
                chunk_size: int = 64, precision: str = "f32", seed: int = 0) -> HybridLM:
    keep = MODES[mode]
    cfg = ModelConfig(vocab_size=64, d_model=d_model, n_heads=n_heads, n_layers=1,
                      chunk_size=chunk_size, memory_slots=8, max_positions=max_len,
                      precision=precision,
                      disabled_paths=tuple(p for p in ("full", "chunk", "mem") if p not in keep))
    return HybridLM(cfg, seed=seed)


def time_attention(model: HybridLM, seq_len: int, repeats: int = 5, seed: int = 0) -> BenchRow:
    """Median forward time of layer 0's attention sublayer on a random [T, d] input."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((seq_len, cfg.d_model)), dtype=cfg.dtype)
    bank = model.init_banks()[0]
    model.attention_sublayer(x, bank, 0)  # warm caches
    runs = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.attention_sublayer(x, bank, 0)
        runs.append(time.perf_counter() - t0)
    mode = "+".join(p for p, on in zip(("full", "chunk", "mem"), cfg.enabled) if on)
    return BenchRow(mode, seq_len, float(np.median(runs)), tuple(runs))


def run_bench(lengths=(1024, 2048), d_model: int = 64, n_heads: int = 4, chunk_size: int = 64,
              repeats: int = 5, precision: str = "f32", seed: int = 0) -> dict:
    """Time both modes at each length; ratios compare the last length to the first."""
    rows: list[BenchRow] = []
    ratios = {}
    for mode in MODES:
        model = bench_model(mode, max(lengths), d_model, n_heads, chunk_size, precision, seed)
        mode_rows = [time_attention(model, n, repeats, seed) for n in lengths]
        rows += mode_rows
        ratios[mode] = mode_rows[-1].median_s / mode_rows[0].median_s
    return {"rows": rows, "ratios": ratios,
            "pass": ratios["chunk_only"] <= LINEAR_MAX and ratios["full_only"] >= QUADRATIC_MIN}
