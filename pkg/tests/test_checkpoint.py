import struct

import numpy as np
import pytest

from hctx.harness.checkpoint import (MAGIC, CheckpointError, load_checkpoint, read_checkpoint,
                                     save_checkpoint, write_checkpoint)
from hctx.harness.optim import TrainState
from hctx.model import HybridLM
from hctx.verify import random_model, tiny_config


def test_record_layout(tmp_path):
    path = tmp_path / "t.hctx"
    write_checkpoint(path, {"b": 1, "a": [2]}, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    version, n = struct.unpack("<II", raw[4:12])
    assert version == 1 and raw[12:12 + n] == b'{"a":[2],"b":1}'
    rec = raw[12 + n:]
    (name_len,) = struct.unpack("<I", rec[:4])
    assert rec[4:4 + name_len] == b"w"
    tag, rank = struct.unpack("<BI", rec[5:10])
    assert (tag, rank) == (1, 2)
    assert struct.unpack("<2Q", rec[10:26]) == (2, 3)
    np.testing.assert_array_equal(np.frombuffer(rec[26:], "<f4"), np.arange(6))


def test_roundtrip_bitwise_logits_with_warm_banks(tmp_path):
    cfg = tiny_config()
    model = random_model(cfg, 0)
    tokens = np.random.default_rng(0).integers(0, cfg.vocab_size, size=8)
    _, banks = model.forward(tokens)
    nxt = np.random.default_rng(1).integers(0, cfg.vocab_size, size=8)
    before, _ = model.forward(nxt, banks, position_offset=8)

    state = TrainState.create(model.params)
    save_checkpoint(tmp_path / "c.hctx", model, banks, state)
    ck = load_checkpoint(tmp_path / "c.hctx")
    assert ck.model.config == cfg
    assert [b.occupancy for b in ck.banks] == [b.occupancy for b in banks]
    after, _ = ck.model.forward(nxt, ck.banks, position_offset=8)
    assert before.values.tobytes() == after.values.tobytes()
    assert set(ck.state.m) == set(model.params)


def test_f32_roundtrip(tmp_path):
    cfg = tiny_config(precision="f32")
    model = HybridLM(cfg, seed=2)
    save_checkpoint(tmp_path / "c.hctx", model)
    ck = load_checkpoint(tmp_path / "c.hctx")
    for n, p in model.params.items():
        assert ck.model.params[n].dtype == np.float32
        assert ck.model.params[n].values.tobytes() == p.values.tobytes()
    assert ck.banks is None and ck.state is None


def test_bad_files(tmp_path):
    bad = tmp_path / "bad.hctx"
    bad.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(CheckpointError):
        read_checkpoint(bad)
    good = tmp_path / "g.hctx"
    write_checkpoint(good, {}, {"w": np.ones(4)})
    (tmp_path / "trunc.hctx").write_bytes(good.read_bytes()[:-3])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "trunc.hctx")
    raw = bytearray(good.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    (tmp_path / "v.hctx").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "v.hctx")
