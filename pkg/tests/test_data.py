"""Loaders against hand-built binary fixtures, batching, and the
expanded-placement protocol."""

import struct

import numpy as np
import pytest

from cfccaps.data import (
    DataFormatError, Dataset, batch_iter, expand_dataset, expanded_mnist_sample,
    load_cifar_binary, load_idx, num_batches, save_idx_images, save_idx_labels,
)


def write_idx_pair(tmp_path, images_u8, labels_u8, stem="train"):
    n, h, w = images_u8.shape
    img_path = tmp_path / f"{stem}-images"
    lab_path = tmp_path / f"{stem}-labels"
    img_path.write_bytes(struct.pack(">IIII", 0x803, n, h, w) + images_u8.tobytes())
    lab_path.write_bytes(struct.pack(">II", 0x801, n) + labels_u8.tobytes())
    return img_path, lab_path


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (20, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, 20, dtype=np.uint8)
    return write_idx_pair(tmp_path, images, labels), (images, labels)


# -- IDX -----------------------------------------------------------------------


def test_load_idx_scales_to_unit_interval(idx_pair):
    (img_path, lab_path), (images, labels) = idx_pair
    ds = load_idx(img_path, lab_path)
    assert len(ds) == 20
    assert ds.images.shape == (20, 1, 28, 28)
    np.testing.assert_allclose(ds.images[:, 0], images / 255.0, rtol=1e-6)
    np.testing.assert_array_equal(ds.labels, labels)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_load_idx_bad_magic_names_bytes(tmp_path):
    img = tmp_path / "bad-images"
    img.write_bytes(struct.pack(">IIII", 0x1234, 1, 2, 2) + b"\x00" * 4)
    lab = tmp_path / "labels"
    lab.write_bytes(struct.pack(">II", 0x801, 1) + b"\x00")
    with pytest.raises(DataFormatError, match="00001234"):
        load_idx(img, lab)


def test_load_idx_truncated_payload(tmp_path):
    img = tmp_path / "short-images"
    img.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + b"\x00" * 5)
    lab = tmp_path / "labels"
    lab.write_bytes(struct.pack(">II", 0x801, 2) + b"\x00\x01")
    with pytest.raises(DataFormatError, match="payload"):
        load_idx(img, lab)


def test_load_idx_count_mismatch(tmp_path):
    images = np.zeros((3, 2, 2), dtype=np.uint8)
    labels = np.zeros(2, dtype=np.uint8)
    img = tmp_path / "i"
    lab = tmp_path / "l"
    img.write_bytes(struct.pack(">IIII", 0x803, 3, 2, 2) + images.tobytes())
    lab.write_bytes(struct.pack(">II", 0x801, 2) + labels.tobytes())
    with pytest.raises(DataFormatError, match="mismatch"):
        load_idx(img, lab)


def test_idx_roundtrip_reproduces_source_bytes(idx_pair, tmp_path):
    (img_path, lab_path), _ = idx_pair
    ds = load_idx(img_path, lab_path)
    out_img = tmp_path / "roundtrip-images"
    out_lab = tmp_path / "roundtrip-labels"
    save_idx_images(out_img, ds.images)
    save_idx_labels(out_lab, ds.labels)
    assert out_img.read_bytes() == img_path.read_bytes()
    assert out_lab.read_bytes() == lab_path.read_bytes()


# -- CIFAR binary -----------------------------------------------------------------


def make_cifar_batch(tmp_path, n, seed, name="batch.bin"):
    rng = np.random.default_rng(seed)
    records = np.empty((n, 3073), dtype=np.uint8)
    records[:, 0] = rng.integers(0, 10, n)
    records[:, 1:] = rng.integers(0, 256, (n, 3072))
    path = tmp_path / name
    path.write_bytes(records.tobytes())
    return path, records


def test_load_cifar_shapes_and_scaling(tmp_path):
    path, records = make_cifar_batch(tmp_path, 7, 1)
    ds = load_cifar_binary([path])
    assert ds.images.shape == (7, 3, 32, 32)
    np.testing.assert_array_equal(ds.labels, records[:, 0])
    np.testing.assert_allclose(
        ds.images[0].reshape(-1), records[0, 1:] / 255.0, rtol=1e-6
    )
    assert 0 <= ds.labels.min() and ds.labels.max() <= 9


def test_load_cifar_multiple_batches_concatenate(tmp_path):
    paths = [make_cifar_batch(tmp_path, 5, s, f"b{s}.bin")[0] for s in range(3)]
    ds = load_cifar_binary(paths)
    assert len(ds) == 15


def test_load_cifar_rejects_partial_record(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 3072)  # one byte short
    with pytest.raises(DataFormatError, match="multiple"):
        load_cifar_binary([path])


def test_cifar_pixel_255_maps_to_one(tmp_path):
    records = np.zeros((1, 3073), dtype=np.uint8)
    records[0, 1] = 255
    path = tmp_path / "p.bin"
    path.write_bytes(records.tobytes())
    ds = load_cifar_binary([path])
    assert ds.images[0, 0, 0, 0] == 1.0


# -- dataset / batching -------------------------------------------------------------


def synthetic_dataset(n=100, shape=(1, 6, 6), seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, *shape), dtype=np.float32),
                   rng.integers(0, 10, n), "train", "synthetic")


def test_dataset_validates_ranges():
    with pytest.raises(ValueError):
        Dataset(np.full((2, 1, 2, 2), 1.5, dtype=np.float32), np.zeros(2, dtype=np.int64),
                "train", "bad")
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2), dtype=np.float32), np.array([0, 11]), "train", "bad")


def test_batch_iter_covers_every_sample_once():
    ds = synthetic_dataset(100)
    seen = []
    for images, labels in batch_iter(ds, 16, shuffle=True, seed=3, epoch=2):
        seen.append(images)
    sizes = [len(b) for b in seen]
    assert sizes == [16] * 6 + [4]
    stacked = np.concatenate(seen)
    assert stacked.shape[0] == 100
    # every sample appears exactly once
    np.testing.assert_allclose(np.sort(stacked.sum(axis=(1, 2, 3))),
                               np.sort(ds.images.sum(axis=(1, 2, 3))), rtol=1e-6)


def test_batch_count_matches_ceil_division():
    assert num_batches(10_000, 128) == 79
    ds = synthetic_dataset(100)
    assert sum(1 for _ in batch_iter(ds, 128)) == 1


def test_batch_iter_no_shuffle_is_identity_order():
    ds = synthetic_dataset(10)
    images, labels = next(iter(batch_iter(ds, 10, shuffle=False)))
    np.testing.assert_array_equal(images, ds.images)
    np.testing.assert_array_equal(labels, ds.labels)


def test_batch_iter_same_seed_same_permutation():
    ds = synthetic_dataset(50)
    a = [lab for _, lab in batch_iter(ds, 8, shuffle=True, seed=5, epoch=1)]
    b = [lab for _, lab in batch_iter(ds, 8, shuffle=True, seed=5, epoch=1)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    c = [lab for _, lab in batch_iter(ds, 8, shuffle=True, seed=5, epoch=2)]
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))


def test_batch_iter_rejects_zero_batch():
    with pytest.raises(ValueError):
        next(batch_iter(synthetic_dataset(4), 0))


# -- expanded placement ---------------------------------------------------------------


def test_expanded_sample_corner_offsets():
    img = np.random.default_rng(1).random((28, 28)).astype(np.float32)

    class FixedRng:
        def __init__(self, dy, dx):
            self.v = (dy, dx)

        def integers(self, lo, hi, size=None):
            return np.array(self.v)

    top_left = expanded_mnist_sample(img, FixedRng(0, 0))
    assert top_left.shape == (40, 40)
    np.testing.assert_array_equal(top_left[:28, :28], img)
    assert top_left[28:, :].sum() == 0 and top_left[:, 28:].sum() == 0

    bottom_right = expanded_mnist_sample(img, FixedRng(12, 12))
    np.testing.assert_array_equal(bottom_right[12:, 12:], img)
    assert bottom_right.sum() == pytest.approx(img.sum(), rel=1e-6)


def test_expanded_sample_preserves_pixel_mass():
    rng = np.random.default_rng(2)
    img = rng.random((1, 28, 28))
    out = expanded_mnist_sample(img, rng)
    assert out.shape == (1, 40, 40)
    assert out.sum() == pytest.approx(img.sum(), rel=1e-12)


def test_expanded_sample_rejects_wrong_size():
    with pytest.raises(ValueError):
        expanded_mnist_sample(np.zeros((32, 32)), np.random.default_rng(0))


def test_all_169_offsets_occur():
    rng = np.random.default_rng(3)
    marker = np.zeros((28, 28), dtype=np.float32)
    marker[0, 0] = 1.0
    seen = set()
    for _ in range(20_000):
        out = expanded_mnist_sample(marker, rng)
        dy, dx = np.argwhere(out == 1.0)[0]
        seen.add((int(dy), int(dx)))
    assert len(seen) == 169


def test_expand_dataset_wraps_whole_set():
    ds = synthetic_dataset(6, shape=(1, 28, 28))
    out = expand_dataset(ds, seed=4)
    assert out.images.shape == (6, 1, 40, 40)
    assert out.name == "expanded-synthetic"
    np.testing.assert_array_equal(out.labels, ds.labels)
