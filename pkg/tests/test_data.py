import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mow.data import DataQueue, Dataset, IdxError, load_idx, load_idx_labels, make_synthetic, philox, write_idx


def test_philox_streams_are_independent_and_reproducible():
    a = philox(5, 1).random(4)
    assert np.array_equal(a, philox(5, 1).random(4))
    assert not np.array_equal(a, philox(5, 2).random(4))
    assert not np.array_equal(a, philox(6, 1).random(4))


def test_gauss_mix_has_two_centres_on_the_axis():
    ds = make_synthetic("gauss_mix", 4000, {"components": 2, "radius": 3.0, "variance": 0.01}, seed=1)
    assert ds.examples.shape == (4000, 2)
    right = ds.examples[ds.examples[:, 0] > 0]
    left = ds.examples[ds.examples[:, 0] < 0]
    np.testing.assert_allclose(right.mean(axis=0), [3.0, 0.0], atol=0.02)
    np.testing.assert_allclose(left.mean(axis=0), [-3.0, 0.0], atol=0.02)
    assert 1800 < len(right) < 2200


def test_ring_and_grid_images():
    ring = make_synthetic("ring", 500, {"noise": 0.0}, seed=2)
    np.testing.assert_allclose(np.linalg.norm(ring.examples, axis=1), 1.0, rtol=1e-12)
    imgs = make_synthetic("grid_images", 10, seed=3)
    assert imgs.dim == 64
    assert imgs.examples.min() >= 0.0 and imgs.examples.max() <= 1.0


def test_synthetic_rejects_unknown_kind_and_parameters():
    with pytest.raises(ValueError):
        make_synthetic("spiral", 10)
    with pytest.raises(ValueError):
        make_synthetic("ring", 10, {"radius": 2.0})


def test_dataset_checks_declared_range():
    with pytest.raises(ValueError):
        Dataset(np.array([[0.0, 2.0]]), value_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 2)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 7), min_size=1, max_size=6), st.integers(0, 1000))
def test_queue_draws_are_split_invariant(chunks, seed):
    ds = Dataset(np.arange(20.0).reshape(10, 2))
    q1, q2 = DataQueue(ds, seed), DataQueue(ds, seed)
    pieces = np.concatenate([q1.indices(c) for c in chunks])
    assert np.array_equal(pieces, q2.indices(sum(chunks)))
    assert q1.draws_served == sum(chunks)
    assert pieces.min() >= 0 and pieces.max() < 10


def test_queue_state_round_trip():
    ds = Dataset(np.arange(12.0).reshape(6, 2))
    q = DataQueue(ds, 1)
    q.next(5)
    saved = q.state()
    ahead = q.next(4)[1]
    q2 = DataQueue(ds, 99)
    q2.restore(saved)
    assert np.array_equal(q2.next(4)[1], ahead)
    assert q2.draws_served == 9


def test_queue_samples_uniformly():
    q = DataQueue(Dataset(np.zeros((4, 1))), 0)
    counts = np.bincount(q.indices(40_000), minlength=4)
    assert np.all(np.abs(counts - 10_000) < 400)


def _idx_bytes(images):
    return struct.pack(">I", 0x803) + struct.pack(">3I", *images.shape) + images.astype(np.uint8).tobytes()


def test_idx_round_trip(tmp_path):
    imgs = np.random.default_rng(0).random((3, 4, 5))
    write_idx(tmp_path / "a.idx", imgs)
    ds = load_idx(tmp_path / "a.idx")
    assert ds.examples.shape == (3, 20)
    np.testing.assert_allclose(ds.examples, np.rint(imgs.reshape(3, 20) * 255) / 255, atol=1e-15)


def test_idx_reads_gzip(tmp_path):
    raw = _idx_bytes(np.full((2, 2, 2), 255))
    (tmp_path / "a.gz").write_bytes(gzip.compress(raw))
    assert load_idx(tmp_path / "a.gz").examples.tolist() == [[1.0] * 4] * 2


def test_idx_errors(tmp_path):
    raw = _idx_bytes(np.zeros((2, 3, 3)))
    cases = {
        "magic": b"\x00\x00\x09\x99" + raw[4:],
        "short": raw[:10],
        "payload": raw[:-1],
        "trailing": raw + b"\x00",
    }
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(IdxError):
            load_idx(tmp_path / name)
    with pytest.raises(IdxError, match="expected 34 bytes, got 33"):
        load_idx(tmp_path / "payload")


def test_idx_labels(tmp_path):
    raw = struct.pack(">II", 0x801, 3) + bytes([1, 7, 9])
    (tmp_path / "l").write_bytes(raw)
    assert load_idx_labels(tmp_path / "l").tolist() == [1, 7, 9]
    with pytest.raises(IdxError):
        load_idx(tmp_path / "l")
