"""Pre-LN hybrid-attention language model with per-layer memory banks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .attention import (
    PATHS,
    ProjectionParams,
    build_causal_mask,
    chunked_attention,
    hybrid_fuse,
    lambda_values,
    memory_cross_attention,
    multi_head_attention,
)
from .memory import WRITE_POLICIES, MemoryBank, MemoryParams, write
from .rope import RopeTable, build_rope_table
from .tensor import ShapeError, Tensor

PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    chunk_size: int = 32
    memory_slots: int = 8
    ffn_multiplier: int = 4
    max_positions: int = 4096
    rope_base: float = 10000.0
    rope_per_head_spread: float = 16.0
    write_policy: str = "gru_fifo"
    precision: str = "f64"
    disabled_paths: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "disabled_paths", tuple(sorted(set(self.disabled_paths))))
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "chunk_size",
                     "memory_slots", "ffn_multiplier", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")
        if self.write_policy not in WRITE_POLICIES:
            raise ValueError(f"write_policy must be one of {WRITE_POLICIES}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {tuple(PRECISIONS)}")
        bad = set(self.disabled_paths) - set(PATHS)
        if bad:
            raise ValueError(f"unknown attention paths {sorted(bad)}")
        if len(self.disabled_paths) == len(PATHS):
            raise ValueError("cannot disable every attention path")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def enabled(self) -> tuple[bool, bool, bool]:
        return tuple(p not in self.disabled_paths for p in PATHS)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disabled_paths"] = list(self.disabled_paths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["disabled_paths"] = tuple(d.get("disabled_paths", ()))
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in a fixed order."""
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_multiplier
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        pre = f"layer{i}"
        shapes[f"{pre}.ln1.gain"] = (d,)
        shapes[f"{pre}.ln1.bias"] = (d,)
        for path in PATHS:
            for m in ("q", "k", "v", "o"):
                shapes[f"{pre}.{path}.w{m}"] = (d, d)
                shapes[f"{pre}.{path}.b{m}"] = (d,)
        shapes[f"{pre}.fusion"] = (3,)
        for n in MemoryParams.NAMES:
            shapes[f"{pre}.memory.{n}"] = (d, d) if n.startswith("w") else (d,)
        shapes[f"{pre}.ln2.gain"] = (d,)
        shapes[f"{pre}.ln2.bias"] = (d,)
        shapes[f"{pre}.ffn.w1"] = (d, f)
        shapes[f"{pre}.ffn.b1"] = (f,)
        shapes[f"{pre}.ffn.w2"] = (f, d)
        shapes[f"{pre}.ffn.b2"] = (d,)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    return shapes


def _is_exit(name: str) -> bool:
    return name.endswith((".wo", ".bo", "ffn.w2", "ffn.b2"))


def init_params(cfg: ModelConfig, seed: int = 0, std: float = 0.02,
                zero_exits: bool = True) -> dict[str, Tensor]:
    """N(0, std) matrices and embeddings, zero biases and fusion logits, unit LN gains.

    With ``zero_exits`` the residual-exit projections (every path's output
    projection and the FFN's second matrix) start at zero, so each block is
    the identity map at initialization.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif len(shape) == 2 and not (zero_exits and _is_exit(name)):
            arr = rng.normal(0.0, std, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, dtype=cfg.dtype, requires_grad=True, name=name)
    return params


def _rows(t: Tensor | None, start: int, stop: int) -> Tensor | None:
    if t is None or (start == 0 and stop == t.shape[-2]):
        return t
    return T.slice_axis(t, -2, start, stop)


class HybridLM:
    """Decoder-only model: embed, hybrid blocks threading memory banks, tied unembedding."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        expected = param_shapes(config)
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                got = self.params[name].shape if name in self.params else None
                raise ShapeError(f"parameter {name}: expected {shape}, got {got}")
        self.rope: RopeTable = build_rope_table(
            config.n_heads, config.head_dim, config.max_positions,
            config.rope_base, config.rope_per_head_spread)

    def init_banks(self, batch: tuple[int, ...] = ()) -> list[MemoryBank]:
        c = self.config
        return [MemoryBank.empty(c.memory_slots, c.d_model, batch, c.dtype) for _ in range(c.n_layers)]

    def trainable_names(self) -> list[str]:
        """Parameters that can influence the output under the enabled paths."""
        off = set(self.config.disabled_paths)
        names = []
        for name in self.params:
            parts = name.split(".")
            if len(parts) > 1 and parts[1] in off:
                continue
            if "mem" in off and parts[1:2] == ["memory"]:
                continue
            names.append(name)
        return names

    def lambdas(self) -> np.ndarray:
        """``[n_layers, 3]`` fusion weights (0 for disabled paths)."""
        return np.stack([lambda_values(self.params[f"layer{i}.fusion"], self.config.enabled)
                         for i in range(self.config.n_layers)])

    # ---------------------------------------------------------- forward

    def attention_sublayer(self, x: Tensor, bank: MemoryBank, layer: int,
                           position_offset: int = 0) -> tuple[Tensor, MemoryBank]:
        """``h = x + hybrid_fuse(A_full, A_chunk, A_mem)`` and the bank after this window's writes.

        The memory path runs chunk by chunk: chunk c reads the bank as left
        by chunk c-1's write, then its fused residual stream is written back.
        With the memory path disabled nothing is read or written.
        """
        cfg, p = self.config, self.params
        pre = f"layer{layer}"
        use_full, use_chunk, use_mem = cfg.enabled
        n = x.shape[-2]

        a = T.layer_norm(x, p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"])
        a_full = a_chunk = None
        if use_full:
            a_full = multi_head_attention(a, ProjectionParams.from_params(p, f"{pre}.full"),
                                          cfg.n_heads, build_causal_mask(n), self.rope, position_offset)
        if use_chunk:
            a_chunk = chunked_attention(a, ProjectionParams.from_params(p, f"{pre}.chunk"),
                                        cfg.n_heads, cfg.chunk_size, self.rope, position_offset)
        w = p[f"{pre}.fusion"]
        if not use_mem:
            return T.add(x, hybrid_fuse(a_full, a_chunk, None, w)), bank

        mem_proj = ProjectionParams.from_params(p, f"{pre}.mem")
        mem_params = MemoryParams.from_params(p, f"{pre}.memory")
        pieces = []
        for start in range(0, n, cfg.chunk_size):
            stop = min(start + cfg.chunk_size, n)
            a_mem = memory_cross_attention(_rows(a, start, stop), bank.slots, bank.occupancy,
                                           mem_proj, cfg.n_heads)
            h_c = T.add(_rows(x, start, stop),
                        hybrid_fuse(_rows(a_full, start, stop), _rows(a_chunk, start, stop), a_mem, w))
            bank = write(bank, h_c, mem_params, cfg.write_policy)
            pieces.append(h_c)
        return (pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=-2)), bank

    def block_forward(self, x: Tensor, bank: MemoryBank, layer: int,
                      position_offset: int = 0) -> tuple[Tensor, MemoryBank]:
        """Pre-LN block: hybrid attention sublayer, then ``h + FFN(LN(h))``."""
        p, pre = self.params, f"layer{layer}"
        h, bank = self.attention_sublayer(x, bank, layer, position_offset)
        b = T.layer_norm(h, p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"])
        ffn = T.linear(T.gelu(T.linear(b, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"])),
                       p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"])
        return T.add(h, ffn), bank

    def embed(self, tokens) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim < 1 or tokens.size == 0:
            raise ShapeError("tokens must be a non-empty [..., T] integer array")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise IndexError(f"token id outside [0, {self.config.vocab_size})")
        return T.embedding(self.params["embed"], tokens)

    def unembed(self, x: Tensor) -> Tensor:
        p = self.params
        x = T.layer_norm(x, p["final_ln.gain"], p["final_ln.bias"])
        return T.linear(x, T.swap_last(p["embed"]))

    def forward(self, tokens, banks: list[MemoryBank] | None = None,
                position_offset: int = 0) -> tuple[Tensor, list[MemoryBank]]:
        """Logits ``[..., T, V]`` and the updated per-layer banks."""
        tokens = np.asarray(tokens)
        if banks is None:
            banks = self.init_banks(tokens.shape[:-1])
        if len(banks) != self.config.n_layers:
            raise ValueError(f"expected {self.config.n_layers} memory banks, got {len(banks)}")
        x = self.embed(tokens)
        new_banks = []
        for i, bank in enumerate(banks):
            x, bank = self.block_forward(x, bank, i, position_offset)
            new_banks.append(bank)
        return self.unembed(x), new_banks

    def forward_windows(self, tokens, window: int | None = None,
                        banks: list[MemoryBank] | None = None,
                        detach: bool = True) -> tuple[Tensor, list[MemoryBank]]:
        """Run a long sequence as consecutive forward windows of ``window`` tokens.

        Banks are threaded from one window to the next; with ``detach`` the
        carried banks are cut from the tape so backpropagation stops at each
        window boundary. ``window=None`` processes the whole sequence at once.
        """
        tokens = np.asarray(tokens)
        n = tokens.shape[-1]
        if window is None or window >= n:
            return self.forward(tokens, banks)
        if window < 1:
            raise ValueError("window must be positive")
        outs = []
        for start in range(0, n, window):
            if banks is not None and detach:
                banks = [b.detach() for b in banks]
            logits, banks = self.forward(tokens[..., start:start + window], banks, start)
            outs.append(logits)
        return T.concat(outs, axis=-2), banks


def lm_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean next-token negative log-likelihood over the positions where ``mask`` is true."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} vs logits {logits.shape}")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != targets.shape:
        raise ShapeError(f"mask {mask.shape} vs targets {targets.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("lm_loss: every position is masked out")
    nll = T.pick(T.log_softmax(logits, axis=-1), targets)
    weights = Tensor(mask / count, dtype=logits.dtype)
    return T.scale(T.sum(T.mul(nll, weights)), -1.0)
