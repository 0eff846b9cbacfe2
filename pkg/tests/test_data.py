import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from ibpcl import data
from ibpcl.data import Dataset, IdxFormatError


def idx_bytes(payload, shape):
    head = bytes([0, 0, 0x08, len(shape)]) + b"".join(int(s).to_bytes(4, "big") for s in shape)
    return head + bytes(int(v) for v in payload)


def test_read_idx_example(tmp_path):
    f = tmp_path / "a.idx"
    f.write_bytes(idx_bytes([0, 128, 255], [3]))
    np.testing.assert_array_equal(data.read_idx(f), [0.0, 128 / 255, 1.0])
    assert data.read_idx(f)[1] == pytest.approx(0.50196, abs=1e-5)


def test_read_idx_errors(tmp_path):
    f = tmp_path / "bad"
    f.write_bytes(idx_bytes([1, 2], [3]))
    with pytest.raises(IdxFormatError, match="expected 3 payload bytes, found 2"):
        data.read_idx(f)
    f.write_bytes(b"\x01\x00\x08\x01" + (1).to_bytes(4, "big") + b"\x00")
    with pytest.raises(IdxFormatError, match="bad magic"):
        data.read_idx(f)
    f.write_bytes(b"\x00\x00\x0d\x01" + (1).to_bytes(4, "big") + b"\x00" * 4)
    with pytest.raises(IdxFormatError, match="unsupported"):
        data.read_idx(f)
    f.write_bytes(b"\x00\x00\x08\x02\x00")
    with pytest.raises(IdxFormatError, match="truncated header"):
        data.read_idx(f)


def test_idx_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(7,), (3, 4), (2, 5, 6)]:
        f, g = tmp_path / "f.idx", tmp_path / "g.idx"
        f.write_bytes(idx_bytes(rng.integers(0, 256, int(np.prod(shape))), shape))
        data.write_idx(g, data.read_idx(f))
        assert g.read_bytes() == f.read_bytes()


def test_load_idx_dataset(tmp_path):
    rng = np.random.default_rng(1)
    imgs = rng.integers(0, 256, (6, 4, 4))
    labels = np.array([0, 1, 2, 0, 1, 2])
    data.write_idx(tmp_path / "x", imgs)
    data.write_idx(tmp_path / "y", labels)
    d = data.load_idx_dataset(tmp_path / "x", tmp_path / "y", 3)
    assert d.inputs.shape == (6, 16)
    np.testing.assert_array_equal(d.labels, labels)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((2, 2), 1.5), np.zeros(2, int), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(2, int), 2)


def test_downsample_block_mean():
    assert data.block_edges(28, 8).tolist() == [0, 4, 7, 10, 14, 18, 21, 24, 28]
    img = np.arange(28 * 28, dtype=float).reshape(1, 28, 28)
    out = data.downsample(img, 8)
    assert out.shape == (1, 8, 8)
    assert out[0, 0, 0] == img[0, :4, :4].mean()
    assert out[0, 1, 2] == img[0, 4:7, 7:10].mean()
    np.testing.assert_allclose(data.downsample(np.ones((2, 28, 28))), 1.0)


def toy10(n=20, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(10), n)
    return Dataset(rng.random((labels.size, 5)), labels, 10)


def test_split_stream():
    train, test = toy10(), toy10(5, 1)
    stream = data.make_split_stream(train, test, [(0, 1), (2, 3)])
    assert len(stream) == 2
    for task, pair in zip(stream, [(0, 1), (2, 3)]):
        assert task.n_classes == 2 and task.class_map == pair
        assert set(task.train.labels) == {0, 1}
        np.testing.assert_array_equal(np.unique(task.original_labels(task.train.labels)), pair)
    assert sum(len(t.train) for t in stream) == np.isin(train.labels, [0, 1, 2, 3]).sum()
    # order preserved: reversing the pairs reverses the tasks
    rev = data.make_split_stream(train, test, [(2, 3), (0, 1)])
    np.testing.assert_array_equal(rev[0].train.inputs, stream[1].train.inputs)


def test_split_stream_errors():
    train = toy10()
    with pytest.raises(ValueError, match="missing"):
        data.make_split_stream(train.subset(np.flatnonzero(train.labels < 5)), train, [(4, 5)])
    with pytest.raises(ValueError, match="more than one pair"):
        data.make_split_stream(train, train, [(0, 1), (1, 2)])


def test_permuted_stream():
    train, test = toy10(), toy10(5, 1)
    one = data.make_permuted_stream(train, test, 1, 0)
    np.testing.assert_array_equal(one[0].train.inputs, train.inputs)
    stream = data.make_permuted_stream(train, test, 4, 3)
    for task in stream:
        assert task.n_classes == 10
        np.testing.assert_array_equal(np.sort(task.train.inputs, axis=1), np.sort(train.inputs, axis=1))
        # the same permutation on train and test: recover it from train, apply to test
        perm = [int(np.flatnonzero(np.all(train.inputs == task.train.inputs[:, [j]], axis=0))[0])
                for j in range(5)]
        np.testing.assert_array_equal(task.test.inputs, test.inputs[:, perm])
        assert sorted(perm) == list(range(5))
    again = data.make_permuted_stream(train, test, 4, 3)
    for a, b in zip(stream, again):
        assert a.train.inputs.tobytes() == b.train.inputs.tobytes()
    with pytest.raises(ValueError):
        data.make_permuted_stream(train, test, 0, 0)


def test_synthetic_generators():
    blobs = data.make_synthetic("gauss-blobs", 200, 2, 5, separation=10.0, seed=4)
    clf = LogisticRegression().fit(blobs.inputs, blobs.labels)
    assert clf.score(blobs.inputs, blobs.labels) >= 0.99
    again = data.make_synthetic("gauss-blobs", 200, 2, 5, separation=10.0, seed=4)
    assert again.inputs.tobytes() == blobs.inputs.tobytes()
    imgs = data.make_synthetic("cluster-images", 30, 3, noise=0.5, seed=1)
    assert imgs.inputs.shape == (90, 64) and imgs.inputs.min() >= 0 and imgs.inputs.max() <= 1
    moons = data.make_synthetic("two-moons", 50, 2, seed=2)
    assert moons.inputs.shape == (100, 2)
    with pytest.raises(ValueError):
        data.make_synthetic("spirals")
    with pytest.raises(ValueError):
        data.make_synthetic("gauss-blobs", spread=0.0)


def test_train_test_split_is_disjoint():
    # the first feature carries the example index, so overlap is detectable exactly
    n = 300
    labels = np.arange(n) % 10
    inputs = np.column_stack([np.arange(n) / n, np.zeros(n)])
    train, test = data.train_test_split(Dataset(inputs, labels, 10), 1 / 3, np.random.default_rng(0))
    a, b = set(train.inputs[:, 0]), set(test.inputs[:, 0])
    assert not a & b and len(a) + len(b) == n
    assert np.all(np.bincount(test.labels) == 10)


def test_digits_loader_capped_and_deterministic():
    train, test = data.load_digits_8x8(seed=0, train_cap=50, test_cap=20)
    assert train.inputs.shape[1] == 64
    assert np.bincount(train.labels).max() == 50 and np.bincount(test.labels).max() == 20
    a, b = data.load_digits_8x8(seed=0, train_cap=50, test_cap=20)
    assert a.inputs.tobytes() == train.inputs.tobytes() and b.labels.tobytes() == test.labels.tobytes()


def test_by_class_stream():
    train, test = toy10(), toy10(5, 1)
    stream = data.split_tasks_by_class(train, test)
    assert len(stream) == 10
    assert all(set(t.train.labels) == {c} for c, t in enumerate(stream))
