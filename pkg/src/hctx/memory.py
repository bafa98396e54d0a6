"""Fixed-capacity recurrent memory bank: pooled, gated writes and a FIFO roll."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

WRITE_POLICIES = ("gated_fifo", "gru_fifo")


@dataclass(frozen=True)
class MemoryBank:
    """K slot vectors of width d, slot 0 newest.

    ``slots`` may carry leading batch axes (``[..., K, d]``); every sequence
    in a batch is written in lockstep so one ``occupancy`` count covers all.
    Unoccupied slots are exact zeros.
    """

    slots: Tensor
    occupancy: int = 0

    def __post_init__(self):
        if self.slots.ndim < 2:
            raise ShapeError(f"memory slots need shape [..., K, d], got {self.slots.shape}")
        if not 0 <= self.occupancy <= self.capacity:
            raise ValueError(f"occupancy {self.occupancy} outside [0, {self.capacity}]")

    @classmethod
    def empty(cls, capacity: int, width: int, batch: tuple[int, ...] = (), dtype=np.float64) -> "MemoryBank":
        if capacity < 1 or width < 1:
            raise ValueError("memory capacity and width must be positive")
        return cls(Tensor.zeros(tuple(batch) + (capacity, width), dtype=dtype), 0)

    @property
    def capacity(self) -> int:
        return self.slots.shape[-2]

    @property
    def width(self) -> int:
        return self.slots.shape[-1]

    def detach(self) -> "MemoryBank":
        return MemoryBank(self.slots.detach(), self.occupancy)

    def slot(self, i: int) -> Tensor:
        """Slot ``i`` with the slot axis removed, ``[..., d]``."""
        s = T.slice_axis(self.slots, -2, i, i + 1)
        return T.reshape(s, s.shape[:-2] + (s.shape[-1],))


@dataclass(frozen=True)
class MemoryParams:
    """Update gate (w_u, b_u), candidate (w_m, b_m) and write gate (w_gate, b_gate)."""

    w_u: Tensor
    b_u: Tensor
    w_m: Tensor
    b_m: Tensor
    w_gate: Tensor
    b_gate: Tensor

    NAMES = ("w_u", "b_u", "w_m", "b_m", "w_gate", "b_gate")

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str) -> "MemoryParams":
        return cls(*(params[f"{prefix}.{n}"] for n in cls.NAMES))


def pool_chunk(h_chunk: Tensor) -> Tensor:
    """Mean over the token axis: ``[..., C, d] -> [..., d]``."""
    if h_chunk.ndim < 2:
        raise ShapeError(f"pool_chunk expects [..., C, d], got {h_chunk.shape}")
    return T.mean(h_chunk, axis=-2)


def gate_write(x_bar: Tensor, p: MemoryParams) -> Tensor:
    """g = σ(W x̄ + b); returns g ⊙ x̄."""
    g = T.sigmoid(T.linear(x_bar, p.w_gate, p.b_gate))
    return T.mul(g, x_bar)


def gru_blend(h: Tensor, m_prev: Tensor, p: MemoryParams) -> Tensor:
    """u ⊙ tanh(W_m h + b_m) + (1 - u) ⊙ m_prev with u = σ(W_u h + b_u)."""
    if h.shape != m_prev.shape:
        raise ShapeError(f"gru_blend: hidden {h.shape} vs memory {m_prev.shape}")
    u = T.sigmoid(T.linear(h, p.w_u, p.b_u))
    cand = T.tanh(T.linear(h, p.w_m, p.b_m))
    keep = T.sub(Tensor(np.ones(u.shape, dtype=u.dtype)), u)
    return T.add(T.mul(u, cand), T.mul(keep, m_prev))


def fifo_insert(bank: MemoryBank, v: Tensor) -> MemoryBank:
    """Shift every slot down one index, drop slot K-1, put ``v`` at slot 0."""
    lead = bank.slots.shape[:-2]
    if v.shape != lead + (bank.width,):
        raise ShapeError(f"fifo_insert: vector {v.shape} does not fit bank {bank.slots.shape}")
    new = T.reshape(v, lead + (1, bank.width))
    K = bank.capacity
    slots = new if K == 1 else T.concat([new, T.slice_axis(bank.slots, -2, 0, K - 1)], axis=-2)
    return MemoryBank(slots, min(bank.occupancy + 1, K))


def write(bank: MemoryBank, h_chunk: Tensor, p: MemoryParams, policy: str = "gru_fifo") -> MemoryBank:
    """Summarize one chunk of hidden states and push it onto the bank.

    ``gated_fifo`` inserts the write-gated mean; ``gru_fifo`` inserts the
    GRU-style blend of the mean with the current newest slot.
    """
    x_bar = pool_chunk(h_chunk)
    if policy == "gated_fifo":
        return fifo_insert(bank, gate_write(x_bar, p))
    if policy == "gru_fifo":
        return fifo_insert(bank, gru_blend(x_bar, bank.slot(0), p))
    raise ValueError(f"unknown write policy {policy!r}; expected one of {WRITE_POLICIES}")


def memory_read(q: Tensor, bank: MemoryBank) -> Tensor:
    """Dot-product read r = Σ softmax(qᵀM_i) M_i over the occupied slots.

    ``q`` has shape ``[..., d]`` matching the bank's leading axes. With an
    empty bank the read is the zero vector.
    """
    lead = bank.slots.shape[:-2]
    if q.shape != lead + (bank.width,):
        raise ShapeError(f"memory_read: query {q.shape} does not fit bank {bank.slots.shape}")
    if bank.occupancy == 0:
        return Tensor.zeros(q.shape, dtype=q.dtype)
    occupied = T.slice_axis(bank.slots, -2, 0, bank.occupancy)
    q_row = T.reshape(q, lead + (1, bank.width))
    alpha = T.softmax(T.matmul(q_row, T.swap_last(occupied)), axis=-1)
    return T.reshape(T.matmul(alpha, occupied), q.shape)
