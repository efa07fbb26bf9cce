import numpy as np
import pytest

from mow import DataQueue, MowConfig, NetSpec, make_synthetic
from mow.checkpoint import (MAGIC, CheckpointError, atomic_write, decode_checkpoint, encode_checkpoint,
                            load_checkpoint, save_checkpoint)
from mow.optimizer import mow_step, run_training

SPEC = NetSpec(2, 1, ((4, "relu"),), ((4, "relu"),), "linear")
DATA = make_synthetic("gauss_mix", 32, seed=0)


@pytest.fixture(params=["sgd", "adam"])
def trained(request):
    cfg = MowConfig(n=6, k=2, eta=1e-3, steps=7, seed=1, update_rule=request.param)
    return cfg, run_training(cfg, SPEC, DATA)


def test_round_trip_preserves_state(trained, tmp_path):
    cfg, res = trained
    save_checkpoint(tmp_path / "c.mow", SPEC, res.state, res.queue, "ab" * 32)
    ck = load_checkpoint(tmp_path / "c.mow")
    assert ck.spec == SPEC and ck.digest == "ab" * 32
    assert np.array_equal(ck.state.theta.values, res.state.theta.values)
    assert ck.state.theta.segments == res.state.theta.segments
    assert np.array_equal(ck.state.buffer.vectors, res.state.buffer.vectors)
    assert np.array_equal(ck.state.buffer.sources, res.state.buffer.sources)
    assert np.array_equal(ck.state.buffer.generations, res.state.buffer.generations)
    assert ck.state.l == 7
    if cfg.update_rule == "adam":
        assert ck.state.moments.t == 7
        assert np.array_equal(ck.state.moments.v, res.state.moments.v)
    else:
        assert ck.state.moments is None

    queue = ck.restore_queue(DataQueue(DATA, 0))
    a, _ = mow_step(ck.state, queue, cfg, SPEC)
    b, _ = mow_step(res.state, res.queue, cfg, SPEC)
    assert np.array_equal(a.theta.values, b.theta.values)


def test_encoding_is_little_endian_and_self_describing(trained):
    _, res = trained
    raw = encode_checkpoint(SPEC, res.state, res.queue, "00" * 32)
    assert raw[:4] == MAGIC and raw[4:8] == b"\x01\x00\x00\x00"
    assert raw[8:12] == b"SPEC"


@pytest.mark.parametrize("mutate, message", [
    (lambda r: b"XXXX" + r[4:], "magic"),
    (lambda r: r[:4] + b"\x02\x00\x00\x00" + r[8:], "version"),
    (lambda r: r[:-5], "remain"),
    (lambda r: r[:20], "remain|truncated|lacks"),
])
def test_corrupt_checkpoints_are_rejected(trained, mutate, message):
    _, res = trained
    raw = encode_checkpoint(SPEC, res.state, res.queue, "00" * 32)
    with pytest.raises(CheckpointError, match=message):
        decode_checkpoint(mutate(raw))


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "out.bin"
    atomic_write(target, b"old")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr("os.replace", boom)
    with pytest.raises(OSError):
        atomic_write(target, b"new contents")
    assert target.read_bytes() == b"old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.bin"]
