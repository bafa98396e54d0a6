"""Adam, global-norm clipping and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from ..tensor import Tensor


@dataclass
class TrainState:
    """Adam moments per parameter name, plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    @classmethod
    def create(cls, params: Mapping[str, Tensor], names: Iterable[str] | None = None,
               seed: int = 0) -> "TrainState":
        names = list(params) if names is None else list(names)
        return cls({n: np.zeros_like(params[n].values) for n in names},
                   {n: np.zeros_like(params[n].values) for n in names}, 0, seed)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: TrainState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, Tensor], TrainState]:
    """One bias-corrected Adam update of every parameter tracked by ``state``.

    Returns new parameter tensors (untracked names pass through unchanged)
    and a new state; nothing is modified in place.
    """
    missing = [n for n in state.m if n not in grads]
    if missing:
        raise KeyError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    out = dict(params)
    m_new, v_new = {}, {}
    for name in state.m:
        p = params[name]
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        out[name] = Tensor((p.values - upd).astype(p.dtype), requires_grad=True, name=p.name)
        m_new[name], v_new[name] = m.astype(p.dtype), v.astype(p.dtype)
    return out, TrainState(m_new, v_new, t, state.seed)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients together when their joint L2 norm exceeds ``max_norm``.

    Returns the (possibly rescaled) gradients and the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    k = max_norm / norm
    return {n: (g * k).astype(g.dtype) for n, g in grads.items()}, norm


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int,
          floor_ratio: float = 0.1) -> float:
    """Linear warmup to ``peak_lr``, then cosine decay to ``floor_ratio * peak_lr``."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be >= 1")
    if step <= warmup_steps:
        return peak_lr * step / warmup_steps
    floor = floor_ratio * peak_lr
    if step >= total_steps:
        return floor
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor + 0.5 * (peak_lr - floor) * (1.0 + math.cos(math.pi * frac))
