"""Full, chunked and memory attention paths plus their softmax-weighted fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .rope import RopeTable, apply_rope
from .tensor import ShapeError, Tensor

PATHS = ("full", "chunk", "mem")


# ------------------------------------------------------------------- masks

def build_causal_mask(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("mask size must be >= 1")
    return np.tril(np.ones((n, n), dtype=bool))


def build_chunk_mask(n: int, chunk_size: int) -> np.ndarray:
    """Causal mask restricted to same-chunk pairs: ``i//C == j//C and j <= i``."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    block = np.arange(n) // chunk_size
    return build_causal_mask(n) & (block[:, None] == block[None, :])


def check_mask(mask: np.ndarray) -> None:
    if mask.dtype != bool or mask.ndim != 2:
        raise ShapeError(f"attention mask must be a 2-d boolean array, got {mask.dtype} {mask.shape}")
    if not mask.any(axis=1).all():
        row = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise ValueError(f"attention mask row {row} has no attendable key")


# ------------------------------------------------------------ core attention

def attention_weights(q: Tensor, k: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d_k) + mask bias) over the key axis."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query width {q.shape[-1]} != key width {k.shape[-1]}")
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        check_mask(mask)
        scores = T.add_mask_bias(scores, mask)
    return T.softmax(scores, axis=-1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Q ``[..., T, d_k]``, K ``[..., T_kv, d_k]``, V ``[..., T_kv, d_v]`` -> ``[..., T, d_v]``."""
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    return T.matmul(attention_weights(q, k, mask), v)


# ------------------------------------------------------------- projections

@dataclass(frozen=True)
class ProjectionParams:
    """Q/K/V/O projection matrices (``[d, d]``) and biases (``[d]``) of one path."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str) -> "ProjectionParams":
        return cls(*(params[f"{prefix}.{n}"] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    d = x.shape[-1]
    if d % n_heads:
        raise ShapeError(f"width {d} is not divisible by {n_heads} heads")
    return T.reshape(x, x.shape[:-1] + (n_heads, d // n_heads))


def _heads_first(x: Tensor) -> Tensor:
    # [..., T, H, hd] -> [..., H, T, hd]
    lead = x.ndim - 3
    return T.transpose(x, tuple(range(lead)) + (lead + 1, lead, lead + 2))


def _merge_heads(x: Tensor) -> Tensor:
    # [..., H, T, hd] -> [..., T, H*hd]
    lead = x.ndim - 3
    x = T.transpose(x, tuple(range(lead)) + (lead + 1, lead, lead + 2))
    return T.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _qkv(x: Tensor, p: ProjectionParams, n_heads: int, rope: RopeTable | None, offset: int):
    q = _split_heads(T.linear(x, p.wq, p.bq), n_heads)
    k = _split_heads(T.linear(x, p.wk, p.bk), n_heads)
    v = _split_heads(T.linear(x, p.wv, p.bv), n_heads)
    if rope is not None:
        q = apply_rope(q, rope, offset)
        k = apply_rope(k, rope, offset)
    return _heads_first(q), _heads_first(k), _heads_first(v)


def multi_head_attention(x: Tensor, p: ProjectionParams, n_heads: int, mask: np.ndarray,
                         rope: RopeTable | None = None, position_offset: int = 0) -> Tensor:
    """Self-attention over ``x`` of shape ``[..., T, d]`` under one mask.

    Each head projects, rotates its queries and keys with its own RoPE
    frequencies, attends, and the concatenated heads go through ``wo``.
    """
    n = x.shape[-2]
    if mask.shape != (n, n):
        raise ShapeError(f"mask {mask.shape} does not match sequence length {n}")
    q, k, v = _qkv(x, p, n_heads, rope, position_offset)
    return T.linear(_merge_heads(scaled_dot_attention(q, k, v, mask)), p.wo, p.bo)


def chunked_attention(x: Tensor, p: ProjectionParams, n_heads: int, chunk_size: int,
                      rope: RopeTable | None = None, position_offset: int = 0) -> Tensor:
    """Same result as ``multi_head_attention`` with ``build_chunk_mask``.

    Scores are only formed inside each chunk, so cost is linear in T for a
    fixed chunk size.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    n = x.shape[-2]
    q, k, v = _qkv(x, p, n_heads, rope, position_offset)
    outs = []
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        qs, ks, vs = (T.slice_axis(t, -2, start, stop) for t in (q, k, v))
        outs.append(scaled_dot_attention(qs, ks, vs, build_causal_mask(stop - start)))
    heads = outs[0] if len(outs) == 1 else T.concat(outs, axis=-2)
    return T.linear(_merge_heads(heads), p.wo, p.bo)


def memory_cross_attention(x: Tensor, slots: Tensor, occupancy: int, p: ProjectionParams,
                           n_heads: int) -> Tensor:
    """Queries from ``x`` ``[..., T, d]``, keys and values from memory slots ``[..., K, d]``.

    All K slots are visible and no rotary encoding is applied to them. An
    empty bank (``occupancy == 0``) yields zeros.
    """
    if slots.shape[:-2] != x.shape[:-2] or slots.shape[-1] != x.shape[-1]:
        raise ShapeError(f"memory slots {slots.shape} incompatible with input {x.shape}")
    if occupancy == 0:
        return Tensor.zeros(x.shape, dtype=x.dtype)
    q = _heads_first(_split_heads(T.linear(x, p.wq, p.bq), n_heads))
    k = _heads_first(_split_heads(T.linear(slots, p.wk, p.bk), n_heads))
    v = _heads_first(_split_heads(T.linear(slots, p.wv, p.bv), n_heads))
    return T.linear(_merge_heads(scaled_dot_attention(q, k, v)), p.wo, p.bo)


# ------------------------------------------------------------------ fusion

def fusion_lambdas(w: Tensor, enabled: Sequence[bool] = (True, True, True)) -> Tensor:
    """λ = softmax over the logits of the enabled paths (disabled paths omitted)."""
    if w.shape != (3,):
        raise ShapeError(f"fusion logits must have shape (3,), got {w.shape}")
    idx = [i for i, on in enumerate(enabled) if on]
    if not idx:
        raise ValueError("at least one attention path must be enabled")
    return T.softmax(w if len(idx) == 3 else T.take(w, idx), axis=0)


def lambda_values(w: Tensor, enabled: Sequence[bool] = (True, True, True)) -> np.ndarray:
    """All three λ as floats, with 0 for disabled paths."""
    lam = np.zeros(3)
    lam[[i for i, on in enumerate(enabled) if on]] = fusion_lambdas(w.detach(), enabled).values
    return lam


def hybrid_fuse(a_full: Tensor | None, a_chunk: Tensor | None, a_mem: Tensor | None,
                w: Tensor) -> Tensor:
    """H = λ₁·A_full + λ₂·A_chunk + λ₃·A_mem with λ = softmax(w).

    Passing ``None`` for a path disables it: its logit is dropped from the
    softmax, which is the limit w_i -> -inf.
    """
    outs = (a_full, a_chunk, a_mem)
    enabled = [o is not None for o in outs]
    present = [o for o in outs if o is not None]
    for o in present[1:]:
        if o.shape != present[0].shape:
            raise ShapeError(f"hybrid_fuse: path outputs {present[0].shape} and {o.shape} differ")
    lam = fusion_lambdas(w, enabled)
    h = None
    for j, o in enumerate(present):
        term = T.scale(o, T.index(lam, j))
        h = term if h is None else T.add(h, term)
    return h
