"""Rotary position encoding with a separate frequency basis per head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, record_op


@dataclass(frozen=True)
class RopeTable:
    """Precomputed rotation angles, cosines and sines for every head.

    ``cos`` and ``sin`` have shape ``[n_heads, max_positions, head_dim // 2]``.
    Tables are fixed buffers and are shared by every layer of a model.
    """

    n_heads: int
    head_dim: int
    max_positions: int
    bases: np.ndarray      # [n_heads]
    freqs: np.ndarray      # [n_heads, head_dim // 2]
    cos: np.ndarray
    sin: np.ndarray


def head_bases(n_heads: int, base: float, per_head_spread: float) -> np.ndarray:
    """Geometric interpolation ``base * spread**(i / (n_heads - 1))``."""
    if n_heads == 1:
        return np.array([float(base)])
    i = np.arange(n_heads, dtype=np.float64)
    return base * per_head_spread ** (i / (n_heads - 1))


def build_rope_table(n_heads: int, head_dim: int, max_positions: int,
                     base: float = 10000.0, per_head_spread: float = 1.0) -> RopeTable:
    if head_dim % 2:
        raise ValueError(f"head_dim must be even for pairwise rotation, got {head_dim}")
    if n_heads < 1 or max_positions < 1:
        raise ValueError("n_heads and max_positions must be positive")
    if base <= 1:
        raise ValueError(f"rope base must exceed 1, got {base}")
    if per_head_spread < 1:
        raise ValueError(f"per_head_spread must be >= 1, got {per_head_spread}")

    bases = head_bases(n_heads, base, per_head_spread)
    k = np.arange(head_dim // 2, dtype=np.float64)
    freqs = bases[:, None] ** (-2.0 * k[None, :] / head_dim)
    pos = np.arange(max_positions, dtype=np.float64)
    angles = pos[None, :, None] * freqs[:, None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    for arr in (bases, freqs, cos, sin):
        arr.flags.writeable = False
    return RopeTable(n_heads, head_dim, max_positions, bases, freqs, cos, sin)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate each (even, odd) coordinate pair of the last axis.

    ``cos``/``sin`` carry one angle per pair and must match ``x.shape`` with
    the last axis halved (leading axes of x beyond their rank are shared).
    """
    half = x.shape[-1] // 2
    if x.shape[-1] % 2 or cos.shape[-1] != half or cos.shape != sin.shape:
        raise ShapeError(f"rotate_pairs: angles {cos.shape} do not fit input {x.shape}")
    cos = cos.astype(x.dtype, copy=False)
    sin = sin.astype(x.dtype, copy=False)
    xv = x.values
    even, odd = xv[..., 0::2], xv[..., 1::2]
    out = np.empty_like(xv)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def vjp(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        return (gx,)

    return record_op("rope", out, (x,), vjp)


def apply_rope(x: Tensor, table: RopeTable, position_offset: int = 0) -> Tensor:
    """Rotate ``x`` of shape ``[..., T, n_heads, head_dim]`` to absolute positions.

    Token ``t`` of the input is encoded at position ``position_offset + t``.
    """
    if x.ndim < 3 or x.shape[-2:] != (table.n_heads, table.head_dim):
        raise ShapeError(f"apply_rope: input {x.shape} vs table heads={table.n_heads} "
                         f"head_dim={table.head_dim}")
    T = x.shape[-3]
    if position_offset < 0 or position_offset + T > table.max_positions:
        raise IndexError(f"positions [{position_offset}, {position_offset + T}) exceed "
                         f"max_positions={table.max_positions}")
    sl = slice(position_offset, position_offset + T)
    cos = table.cos[:, sl].transpose(1, 0, 2)
    sin = table.sin[:, sl].transpose(1, 0, 2)
    return rotate_pairs(x, cos, sin)
