import gzip
import struct

import numpy as np
import pytest

from ckdsnn.data import (
    AugmentConfig,
    BatchIterator,
    Dataset,
    DatasetError,
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    augment,
    channel_stats,
    load_cifar10_bin,
    load_mnist_idx,
    normalize,
    synth_shapes,
    write_cifar10_bin,
    write_mnist_idx,
)


def make_idx_fixture(tmp_path, pixels, labels):
    """Author IDX bytes by hand (big-endian header + raw payload)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = pixels.shape
    img_path = tmp_path / "images.idx"
    lbl_path = tmp_path / "labels.idx"
    img_path.write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    lbl_path.write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())
    return img_path, lbl_path


class TestMnistIdx:
    def test_hand_built_fixture_exact_recovery(self, tmp_path):
        pixels = np.array(
            [[[0, 51], [102, 255]], [[255, 204], [153, 0]]], dtype=np.uint8
        )
        img_path, lbl_path = make_idx_fixture(tmp_path, pixels, [3, 7])
        ds = load_mnist_idx(img_path, lbl_path)
        assert ds.images.shape == (2, 1, 2, 2)
        assert np.array_equal(ds.labels, [3, 7])
        assert np.allclose(ds.images[0, 0], pixels[0] / 255.0)
        assert np.allclose(ds.images[1, 0], pixels[1] / 255.0)

    def test_wrong_magic_rejected(self, tmp_path):
        img_path, lbl_path = make_idx_fixture(tmp_path, np.zeros((1, 2, 2), np.uint8), [0])
        blob = bytearray(img_path.read_bytes())
        blob[3] = 0x99
        img_path.write_bytes(bytes(blob))
        with pytest.raises(DatasetError, match="magic"):
            load_mnist_idx(img_path, lbl_path)

    def test_truncated_payload_rejected(self, tmp_path):
        img_path, lbl_path = make_idx_fixture(tmp_path, np.zeros((2, 2, 2), np.uint8), [0, 1])
        img_path.write_bytes(img_path.read_bytes()[:-3])
        with pytest.raises(DatasetError, match="truncated"):
            load_mnist_idx(img_path, lbl_path)

    def test_count_mismatch_rejected(self, tmp_path):
        img_path, lbl_path = make_idx_fixture(tmp_path, np.zeros((2, 2, 2), np.uint8), [0, 1, 2])
        with pytest.raises(DatasetError, match="count mismatch"):
            load_mnist_idx(img_path, lbl_path)

    def test_out_of_range_label_rejected(self, tmp_path):
        img_path, lbl_path = make_idx_fixture(tmp_path, np.zeros((1, 2, 2), np.uint8), [255])
        with pytest.raises(DatasetError, match="class range"):
            load_mnist_idx(img_path, lbl_path)

    def test_gzip_transparent(self, tmp_path):
        img_path, lbl_path = make_idx_fixture(tmp_path, np.full((1, 2, 2), 128, np.uint8), [5])
        gz_img = tmp_path / "images.idx.gz"
        gz_img.write_bytes(gzip.compress(img_path.read_bytes()))
        ds = load_mnist_idx(gz_img, lbl_path)
        assert ds.labels[0] == 5

    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(5, 4, 4)).astype(np.uint8)
        img_path, lbl_path = make_idx_fixture(tmp_path, pixels, rng.integers(0, 10, 5))
        ds = load_mnist_idx(img_path, lbl_path)
        write_mnist_idx(ds, tmp_path / "im2.idx", tmp_path / "lb2.idx")
        ds2 = load_mnist_idx(tmp_path / "im2.idx", tmp_path / "lb2.idx")
        assert ds.images.tobytes() == ds2.images.tobytes()
        assert np.array_equal(ds.labels, ds2.labels)


class TestCifarBin:
    def make_fixture(self, tmp_path, n=4, seed=1, name="data_batch_1.bin"):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 10, size=n).astype(np.uint8)
        pixels = rng.integers(0, 256, size=(n, 3072)).astype(np.uint8)
        records = np.concatenate([labels[:, None], pixels], axis=1)
        (tmp_path / name).write_bytes(records.tobytes())
        return labels, pixels

    def test_known_first_record_recovered(self, tmp_path):
        labels, pixels = self.make_fixture(tmp_path)
        ds = load_cifar10_bin(tmp_path, "train")
        assert len(ds) == 4
        assert ds.labels[0] == labels[0]
        assert np.allclose(ds.images[0], pixels[0].reshape(3, 32, 32) / 255.0)

    def test_bad_record_size_rejected(self, tmp_path):
        (tmp_path / "data_batch_1.bin").write_bytes(b"\x00" * 3072)  # one byte short
        with pytest.raises(DatasetError, match="multiple"):
            load_cifar10_bin(tmp_path, "train")

    def test_label_ten_rejected(self, tmp_path):
        record = bytes([10]) + b"\x00" * 3072
        (tmp_path / "data_batch_1.bin").write_bytes(record)
        with pytest.raises(DatasetError, match="out of range"):
            load_cifar10_bin(tmp_path, "train")

    def test_missing_files_rejected(self, tmp_path):
        with pytest.raises(DatasetError):
            load_cifar10_bin(tmp_path, "train")
        with pytest.raises(DatasetError):
            load_cifar10_bin(tmp_path, "test")

    def test_round_trip_bitwise(self, tmp_path):
        self.make_fixture(tmp_path, n=6)
        ds = load_cifar10_bin(tmp_path, "train")
        out_dir = tmp_path / "out"
        out_dir.mkdir()
        write_cifar10_bin(ds, out_dir / "data_batch_1.bin")
        ds2 = load_cifar10_bin(out_dir, "train")
        assert ds.images.tobytes() == ds2.images.tobytes()
        assert np.array_equal(ds.labels, ds2.labels)


class TestSynthShapes:
    def test_seed_determinism(self):
        a = synth_shapes(32, seed=5)
        b = synth_shapes(32, seed=5)
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_different_seed_differs(self):
        a = synth_shapes(32, seed=5)
        b = synth_shapes(32, seed=6)
        assert a.images.tobytes() != b.images.tobytes()

    def test_n4_one_of_each_class(self):
        ds = synth_shapes(4)
        assert sorted(ds.labels.tolist()) == [0, 1, 2, 3]

    def test_class_balance(self):
        ds = synth_shapes(400, classes=4)
        counts = np.bincount(ds.labels)
        assert np.all(counts == 100)

    def test_value_range_and_shape(self):
        ds = synth_shapes(8, size=20)
        assert ds.images.shape == (8, 3, 20, 20)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_too_few_samples_rejected(self):
        with pytest.raises(DatasetError):
            synth_shapes(2, classes=4)


class TestAugment:
    def test_identity_when_disabled(self):
        images = np.random.default_rng(1).random((3, 3, 8, 8), dtype=np.float32)
        out = augment(images, AugmentConfig(crop_pad=0, hflip=False), np.random.default_rng(0))
        assert out is images

    def test_double_flip_identity(self):
        images = np.random.default_rng(2).random((4, 3, 8, 8), dtype=np.float32)
        flipped = images[:, :, :, ::-1]
        assert np.array_equal(flipped[:, :, :, ::-1], images)

    def test_deterministic_under_seed(self):
        images = np.random.default_rng(3).random((5, 3, 12, 12), dtype=np.float32)
        cfg = AugmentConfig(crop_pad=2, hflip=True)
        a = augment(images, cfg, np.random.default_rng(77))
        b = augment(images, cfg, np.random.default_rng(77))
        assert np.array_equal(a, b)

    def test_preserves_shape(self):
        images = np.random.default_rng(4).random((5, 1, 12, 12), dtype=np.float32)
        out = augment(images, AugmentConfig(crop_pad=3, hflip=True), np.random.default_rng(0))
        assert out.shape == images.shape

    def test_too_small_for_pad_rejected(self):
        images = np.zeros((1, 1, 4, 4), dtype=np.float32)
        with pytest.raises(DatasetError):
            augment(images, AugmentConfig(crop_pad=4, hflip=False), np.random.default_rng(0))


class TestBatchIterator:
    def test_every_epoch_is_a_permutation(self):
        ds = synth_shapes(37, seed=1)
        it = BatchIterator(ds, batch_size=8, seed=3)
        for epoch in range(3):
            order = it.order(epoch)
            assert np.array_equal(np.sort(order), np.arange(37))

    def test_order_pure_function_of_seed_epoch(self):
        ds = synth_shapes(16, seed=1)
        a = BatchIterator(ds, 4, seed=9).order(2)
        b = BatchIterator(ds, 4, seed=9).order(2)
        assert np.array_equal(a, b)
        assert not np.array_equal(BatchIterator(ds, 4, seed=9).order(0), a)

    def test_iteration_covers_dataset(self):
        ds = synth_shapes(20, seed=2)
        it = BatchIterator(ds, batch_size=6, seed=0)
        seen = sum((labels.shape[0] for _, labels in it), 0)
        assert seen == 20
        assert it.epoch == 1

    def test_stats_and_normalize(self):
        ds = synth_shapes(64, seed=4)
        mean, std = channel_stats(ds.images)
        normed = normalize(ds.images, mean, std)
        assert np.allclose(normed.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
        assert np.allclose(normed.std(axis=(0, 2, 3)), 1.0, atol=1e-3)


class TestDatasetType:
    def test_label_range_validated(self):
        with pytest.raises(DatasetError):
            Dataset(np.zeros((2, 1, 2, 2), np.float32), np.array([0, 9]), num_classes=4)

    def test_subset(self):
        ds = synth_shapes(10, seed=0)
        sub = ds.subset([0, 2, 4])
        assert len(sub) == 3
        assert np.array_equal(sub.labels, ds.labels[[0, 2, 4]])
