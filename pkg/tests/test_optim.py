import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hctx.harness.optim import TrainState, adam_step, clip_global_norm, global_norm, lr_at
from hctx.tensor import Tensor

# 200 Adam steps on (x - 3)^2 from x = 0 at lr 0.1, run once as a plain-float
# scalar recurrence and frozen here
ADAM_200_ORACLE = 3.0000530297387056


def run_adam(x0, grad_fn, steps, lr):
    params = {"x": Tensor(np.array([x0]), requires_grad=True)}
    state = TrainState.create(params)
    for _ in range(steps):
        params, state = adam_step(params, {"x": grad_fn(params["x"].values)}, state, lr)
    return params["x"].values[0], state


def test_first_step_moves_by_lr():
    x, state = run_adam(1.0, lambda x: 2 * x, 1, 0.1)
    assert abs(x - 0.9) < 1e-8
    assert state.step == 1


def test_zero_gradient_leaves_parameters():
    x, _ = run_adam(1.25, lambda x: np.zeros_like(x), 5, 0.1)
    assert x == 1.25


def test_quadratic_matches_frozen_oracle():
    x, state = run_adam(0.0, lambda x: 2 * (x - 3), 200, 0.1)
    assert abs(x - 3) < 0.05
    assert abs(x - ADAM_200_ORACLE) < 1e-12
    assert state.step == 200


def test_adam_is_functional_and_checks_grads():
    p = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(3), requires_grad=True)}
    state = TrainState.create(p, ["a"])
    new, new_state = adam_step(p, {"a": np.ones(2)}, state, 0.1)
    assert (p["a"].values == 1).all() and state.step == 0
    assert new["b"] is p["b"] and new_state.step == 1
    with pytest.raises(KeyError):
        adam_step(p, {}, state, 0.1)
    with pytest.raises(ValueError):
        adam_step(p, {"a": np.ones(3)}, state, 0.1)


def test_clip_examples():
    g = {"a": np.array([2.0, 0.0]), "b": np.array([0.0])}
    out, norm = clip_global_norm(g, 1.0)
    assert norm == 2.0
    np.testing.assert_array_equal(out["a"], [1.0, 0.0])
    g = {"a": np.array([0.3, 0.4])}
    out, norm = clip_global_norm(g, 1.0)
    np.testing.assert_array_equal(out["a"], g["a"])
    with pytest.raises(ValueError):
        clip_global_norm(g, 0.0)


@given(st.integers(0, 2**31), st.floats(1e-3, 10.0))
def test_clip_post_norm(seed, max_norm):
    rng = np.random.default_rng(seed)
    g = {f"p{i}": rng.normal(size=rng.integers(1, 6)) * rng.uniform(0, 5) for i in range(4)}
    out, norm = clip_global_norm(g, max_norm)
    assert abs(global_norm(out) - min(norm, max_norm)) < 1e-12 * max(1.0, norm)


def test_schedule_examples():
    assert lr_at(100, 3e-3, 100, 3000) == 3e-3
    assert lr_at(50, 3e-3, 100, 3000) == pytest.approx(1.5e-3, rel=1e-15)
    assert lr_at(3000, 3e-3, 100, 3000) == pytest.approx(3e-4, rel=1e-15)
    mid = lr_at(1550, 3e-3, 100, 3000)
    assert mid == pytest.approx(3e-4 + 0.5 * 2.7e-3, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(0, 1.0, 10, 100)


@given(st.integers(1, 50), st.integers(60, 400))
def test_schedule_monotone_after_warmup(warmup, total):
    lrs = [lr_at(s, 1.0, warmup, total) for s in range(1, total + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(lrs[warmup - 1:], lrs[warmup:]))
    assert all(b >= a for a, b in zip(lrs[:warmup], lrs[1:warmup]))
    assert min(lrs) >= 0.1 - 1e-15 or min(lrs) == lrs[0]
    assert math.isclose(lrs[-1], 0.1)
