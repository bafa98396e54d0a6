"""Synthetic long-context tasks: span copy and key-value recall across chunks.

Both generators are pure functions of their seed. Each sample is built as
a token stream of length T + 1; ``inputs`` is the first T tokens and
``targets`` the stream shifted by one, so ``mask`` marks the positions
whose next token is scored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAD = 0
QUERY = 1
COPY = 2
N_SPECIAL = 3


@dataclass(frozen=True)
class TaskSample:
    inputs: np.ndarray   # [T] int64
    targets: np.ndarray  # [T] int64
    mask: np.ndarray     # [T] bool

    def __post_init__(self):
        if not (self.inputs.shape == self.targets.shape == self.mask.shape):
            raise ValueError("inputs, targets and mask must have equal length")


def _split(stream: np.ndarray, mask: np.ndarray) -> TaskSample:
    return TaskSample(stream[:-1].copy(), stream[1:].copy(), mask)


def vocab_ranges(vocab: int) -> dict[str, range]:
    """Disjoint id ranges for keys, values and filler after the special ids."""
    usable = vocab - N_SPECIAL
    if usable < 3:
        raise ValueError(f"vocab {vocab} too small for the synthetic tasks")
    third = usable // 3
    k0 = N_SPECIAL
    return {"key": range(k0, k0 + third),
            "value": range(k0 + third, k0 + 2 * third),
            "filler": range(k0 + 2 * third, vocab)}


def gen_copy_task(seed: int, T: int, vocab: int, span: int) -> TaskSample:
    """Random span at the start, filler, a COPY marker, then the span again.

    Only the repeated span is scored (``span`` masked positions).
    """
    if span < 1 or 2 * span + 1 > T:
        raise ValueError(f"span {span} does not fit twice in T={T}")
    rng = np.random.default_rng(seed)
    content_ids = np.arange(N_SPECIAL, vocab)
    filler = vocab_ranges(vocab)["filler"]
    stream = rng.integers(filler.start, filler.stop, size=T + 1)
    content = rng.choice(content_ids, size=span)
    stream[:span] = content
    stream[T - span] = COPY
    stream[T + 1 - span:] = content
    mask = np.zeros(T, dtype=bool)
    mask[T - span:] = True
    return _split(stream.astype(np.int64), mask)


def gen_kv_recall(seed: int, T: int, C: int, n_pairs: int, gap_chunks: int,
                  vocab: int = 64) -> TaskSample:
    """Key-value pairs in chunk 0, ``gap_chunks`` chunks of filler, then one query.

    The query (QUERY marker followed by one of the stored keys) sits in
    chunk ``gap_chunks + 1``; the scored position is the queried key, whose
    target is its paired value.
    """
    ranges = vocab_ranges(vocab)
    keys, values, filler = ranges["key"], ranges["value"], ranges["filler"]
    if n_pairs < 1 or 2 * n_pairs > C:
        raise ValueError(f"{n_pairs} pairs do not fit in a chunk of {C}")
    if n_pairs > len(keys):
        raise ValueError(f"{n_pairs} distinct keys requested, vocab offers {len(keys)}")
    if gap_chunks < 0 or gap_chunks * C >= T:
        raise ValueError(f"gap of {gap_chunks} chunks of {C} does not fit T={T}")
    q_start = (gap_chunks + 1) * C
    q_stop = min(q_start + C, T - 1)
    if q_start >= q_stop:
        raise ValueError(f"no room for a query after {gap_chunks} gap chunks in T={T}")

    rng = np.random.default_rng(seed)
    stream = rng.integers(filler.start, filler.stop, size=T + 1)
    ks = rng.choice(np.arange(keys.start, keys.stop), size=n_pairs, replace=False)
    vs = rng.integers(values.start, values.stop, size=n_pairs)
    stream[0:2 * n_pairs:2] = ks
    stream[1:2 * n_pairs:2] = vs
    which = int(rng.integers(n_pairs))
    pos = int(rng.integers(q_start, q_stop))
    stream[pos] = QUERY
    stream[pos + 1] = ks[which]
    stream[pos + 2] = vs[which]
    mask = np.zeros(T, dtype=bool)
    mask[pos + 1] = True
    return _split(stream.astype(np.int64), mask)


@dataclass(frozen=True)
class TaskSpec:
    """Which generator to call and with what geometry."""

    name: str = "kv_recall"
    seq_len: int = 160
    vocab: int = 64
    chunk_size: int = 32
    span: int = 8
    n_pairs: int = 1
    gap_chunks: int = 3

    def sample(self, seed: int) -> TaskSample:
        if self.name == "copy":
            return gen_copy_task(seed, self.seq_len, self.vocab, self.span)
        if self.name == "kv_recall":
            return gen_kv_recall(seed, self.seq_len, self.chunk_size, self.n_pairs,
                                 self.gap_chunks, self.vocab)
        raise ValueError(f"unknown task {self.name!r}")

    def batch(self, seeds) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        samples = [self.sample(int(s)) for s in seeds]
        return (np.stack([s.inputs for s in samples]),
                np.stack([s.targets for s in samples]),
                np.stack([s.mask for s in samples]))


def sample_seed(seed: int, stream: int, step: int, index: int) -> int:
    """Deterministic per-sample seed; ``stream`` separates train from eval data."""
    return int(np.random.SeedSequence([seed, stream, step, index]).generate_state(1)[0])
