import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hctx.harness.tasks import (COPY, QUERY, TaskSpec, gen_copy_task, gen_kv_recall, sample_seed,
                                vocab_ranges)


def test_same_seed_same_sample():
    for make in (lambda s: gen_copy_task(s, 40, 64, 5), lambda s: gen_kv_recall(s, 160, 32, 2, 3)):
        a, b = make(11), make(11)
        for f in ("inputs", "targets", "mask"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_copy_layout():
    s = gen_copy_task(0, 40, 64, 5)
    assert s.mask.sum() == 5
    assert s.inputs[40 - 5] == COPY
    np.testing.assert_array_equal(s.targets[s.mask], s.inputs[:5])


def test_kv_recall_default_seed0_answer_is_paired_value():
    spec = TaskSpec()
    s = spec.sample(0)
    (pos,) = np.flatnonzero(s.mask)
    key = s.inputs[pos]
    assert s.inputs[pos - 1] == QUERY
    pairs = dict(zip(s.inputs[0:2 * spec.n_pairs:2], s.inputs[1:2 * spec.n_pairs:2]))
    assert s.targets[pos] == pairs[key]
    assert (spec.gap_chunks + 1) * spec.chunk_size <= pos - 1 < (spec.gap_chunks + 2) * spec.chunk_size


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(2, 3))
def test_kv_recall_invariants(seed, n_pairs, gap):
    s = gen_kv_recall(seed, 160, 32, n_pairs, gap)
    assert s.mask.sum() == 1
    r = vocab_ranges(64)
    keys = s.inputs[0:2 * n_pairs:2]
    assert len(set(keys.tolist())) == n_pairs and all(k in r["key"] for k in keys)
    (pos,) = np.flatnonzero(s.mask)
    assert pos // 32 >= gap + 1  # the query sits after the gap chunks
    assert s.targets[pos] in r["value"]
    np.testing.assert_array_equal(s.inputs[1:], s.targets[:-1])


def test_infeasible_geometry():
    with pytest.raises(ValueError):
        gen_copy_task(0, 10, 64, 5)
    with pytest.raises(ValueError):
        gen_kv_recall(0, 160, 32, 1, 5)
    with pytest.raises(ValueError):
        gen_kv_recall(0, 160, 4, 3, 1)
    with pytest.raises(ValueError):
        TaskSpec(name="sort").sample(0)


def test_batch_and_seed_streams():
    spec = TaskSpec()
    x, y, m = spec.batch([1, 2, 3])
    assert x.shape == y.shape == m.shape == (3, 160)
    assert sample_seed(0, 0, 1, 0) != sample_seed(0, 1, 1, 0)
    assert sample_seed(0, 0, 1, 0) == sample_seed(0, 0, 1, 0)
