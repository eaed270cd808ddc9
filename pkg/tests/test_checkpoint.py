import struct

import numpy as np
import pytest

from deltalora import checkpoint
from deltalora.trainer import train
from deltalora.verify import small_config, small_task, state_bytes


def test_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 5)), "b": rng.normal(size=7), "c": np.zeros((1, 1))}
    p = tmp_path / "x.bin"
    checkpoint.save(p, tensors, {"note": "hi"})
    loaded, meta = checkpoint.load(p)
    assert meta == {"note": "hi"}
    assert list(loaded) == ["a", "b", "c"]
    assert loaded["b"].shape == (1, 7)
    for k, v in tensors.items():
        assert loaded[k].reshape(v.shape).tobytes() == v.tobytes()
    p2 = tmp_path / "y.bin"
    checkpoint.save(p2, loaded, meta)
    assert p.read_bytes() == p2.read_bytes()


def test_payload_starts_on_64_byte_boundary():
    for n in range(10):
        data = checkpoint.encode({"t" * n: np.ones((2, 2))}, {"k": "v" * n})
        (hlen,) = struct.unpack("<Q", data[:8])
        assert (8 + hlen) % 64 == 0
        assert np.frombuffer(data[8 + hlen:], dtype="<f8").tolist() == [1.0] * 4


def test_corrupt_files_are_rejected(tmp_path):
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(b"abc")
    good = checkpoint.encode({"a": np.ones((2, 2))}, {})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(good[:-8])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(struct.pack("<Q", 10**6) + good[8:])


def test_digest_ignores_meta(tmp_path):
    t = {"a": np.arange(4.0).reshape(2, 2)}
    checkpoint.save(tmp_path / "1.bin", t, {"mode": "lora"})
    checkpoint.save(tmp_path / "2.bin", t, {"mode": "delta_lora"})
    checkpoint.save(tmp_path / "3.bin", {"a": t["a"] + 1}, {"mode": "lora"})
    d = [checkpoint.tensor_digest(tmp_path / f"{i}.bin") for i in (1, 2, 3)]
    assert d[0] == d[1] != d[2]


def test_resume_matches_uninterrupted_run(tmp_path):
    task = small_task(1)
    cfg = small_config(1, T=30)
    full = train(task, cfg)
    part = train(task, cfg, stop_at=13)
    p = tmp_path / "ckpt.bin"
    checkpoint.save_state(p, part.state, cfg.to_dict())
    state = checkpoint.restore_state(p, task, cfg)
    assert state.t == 13
    rest = train(task, cfg, state=state)
    assert state_bytes(rest) == state_bytes(full)
    assert part.loss_trace + rest.loss_trace == full.loss_trace


def test_restore_with_wrong_mode_fails(tmp_path):
    task = small_task(1)
    res = train(task, small_config(1, T=3, mode="full_ft"))
    p = tmp_path / "ckpt.bin"
    checkpoint.save_state(p, res.state, {})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.restore_state(p, task, small_config(1, T=3, mode="lora"))
