import numpy as np
import pytest

from lesa.data import generate_dataset, generate_splits, load_dataset_dir, save_split


def test_same_seed_bitwise_identical(tmp_path):
    for name in ("a", "b"):
        save_split(str(tmp_path / name), generate_dataset(count=50, seed=7))
    for fname in ("images.lten", "labels.csv"):
        assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()


def test_different_seeds_differ():
    a, b = generate_dataset(count=20, seed=1), generate_dataset(count=20, seed=2)
    assert not np.array_equal(a.images, b.images)


def test_balanced_labels():
    d = generate_dataset(num_classes=10, count=5000, size=16, seed=0)
    counts = np.bincount(d.labels, minlength=10)
    assert len(d) == 5000
    assert counts.max() - counts.min() <= 1


def test_minimum_size():
    with pytest.raises(ValueError):
        generate_dataset(size=15)


def test_nearest_centroid_beats_chance():
    train, evals = generate_splits(10, 1000, 500, 32, seed=0)
    x_tr = train.images.reshape(len(train), -1)
    x_ev = evals.images.reshape(len(evals), -1)
    centroids = np.stack([x_tr[train.labels == c].mean(axis=0) for c in range(10)])
    d2 = ((x_ev[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    acc = np.mean(d2.argmin(axis=1) == evals.labels)
    assert acc > 0.1 + 3 * np.sqrt(0.1 * 0.9 / len(evals))


def test_splits_independent_and_loadable(tmp_path):
    train, evals = generate_splits(4, 40, 12, 16, seed=3)
    assert not np.array_equal(train.images[:12], evals.images)
    save_split(str(tmp_path / "train"), train)
    save_split(str(tmp_path / "eval"), evals)
    tr2, ev2 = load_dataset_dir(str(tmp_path))
    np.testing.assert_array_equal(tr2.images, train.images)
    np.testing.assert_array_equal(ev2.labels, evals.labels)
