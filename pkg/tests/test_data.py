import numpy as np
import pytest

from signsal.data import (RECORD_BYTES, NormalizationStats, compute_stats, export_image, load_cifar10, normalize,
                          read_cifar_batch, read_pnm, synthetic_dataset)
from signsal.errors import ConfigError, FormatError


def fake_records(labels, seed=0):
    rng = np.random.default_rng(seed)
    recs = rng.integers(0, 256, size=(len(labels), RECORD_BYTES), dtype=np.uint8)
    recs[:, 0] = labels
    return recs


@pytest.fixture
def cifar_dir(tmp_path):
    for i in range(1, 6):
        fake_records([i % 10, (i + 3) % 10], seed=i).tofile(tmp_path / f"data_batch_{i}.bin")
    fake_records([7, 1, 2], seed=9).tofile(tmp_path / "test_batch.bin")
    return tmp_path


class TestCifar:
    def test_record_framing(self, tmp_path):
        path = tmp_path / "b.bin"
        fake_records(list(range(10))).tofile(path)
        assert path.stat().st_size == 30730
        split = read_cifar_batch(path)
        assert len(split) == 10
        assert split.images.shape == (10, 3, 32, 32)

    def test_label_and_pixel_scaling(self, tmp_path):
        rec = np.zeros(RECORD_BYTES, dtype=np.uint8)
        rec[0] = 7
        rec[1] = 255           # red plane, pixel (0, 0)
        rec[1 + 1024 + 33] = 255  # green plane, pixel (1, 1)
        rec.tofile(tmp_path / "b.bin")
        split = read_cifar_batch(tmp_path / "b.bin")
        assert split.labels[0] == 7
        assert split.images[0, 0, 0, 0] == 1.0
        assert split.images[0, 1, 1, 1] == 1.0
        assert split.images[0, 2].max() == 0.0
        assert split.images[0].sum() == 2.0

    def test_bad_size(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(b"\0" * (RECORD_BYTES + 1))
        with pytest.raises(FormatError, match="multiple"):
            read_cifar_batch(tmp_path / "b.bin")

    def test_bad_label(self, tmp_path):
        fake_records([3, 10]).tofile(tmp_path / "b.bin")
        with pytest.raises(FormatError, match="label"):
            read_cifar_batch(tmp_path / "b.bin")

    def test_load_directory(self, cifar_dir):
        train, test = load_cifar10(cifar_dir)
        assert len(train) == 10 and len(test) == 3
        assert train.ids.tolist() == list(range(10))
        assert test.labels.tolist() == [7, 1, 2]
        again, = load_cifar10(cifar_dir, ("train",))
        np.testing.assert_array_equal(again.ids, train.ids)

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cifar10(tmp_path)

    def test_ppm_round_trip(self, cifar_dir, tmp_path):
        _, test = load_cifar10(cifar_dir)
        raw = np.fromfile(cifar_dir / "test_batch.bin", dtype=np.uint8).reshape(-1, RECORD_BYTES)
        for i in range(len(test)):
            path = export_image(test.images[i], tmp_path / f"{i}.ppm")
            pixels = read_pnm(path)
            np.testing.assert_array_equal(pixels.transpose(2, 0, 1).ravel(), raw[i, 1:])


class TestSynthetic:
    def test_deterministic(self):
        a = synthetic_dataset(10, 3, 5)
        b = synthetic_dataset(10, 3, 5)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels.tolist() == b.labels.tolist()

    def test_balanced(self):
        data = synthetic_dataset(8, 2, 0)
        assert np.bincount(data.labels).tolist() == [4, 4]
        assert data.labels.tolist() == [0, 1] * 4

    def test_range_and_ids(self):
        data = synthetic_dataset(12, 10, 1, (3, 32, 32))
        assert data.images.min() >= 0 and data.images.max() <= 1
        assert len(set(data.ids.tolist())) == 12


class TestNormalization:
    def test_mean_maps_to_zero(self):
        images = np.full((2, 1, 2, 2), 0.5, dtype=np.float32)
        stats = NormalizationStats(np.float32([0.5]), np.float32([0.2]))
        assert not normalize(images, stats).any()

    def test_two_image_stats(self):
        # channel 0: values 0 and 1 -> mean 0.5, std 0.5; channel 1: 0.2 and 0.6 -> mean 0.4, std 0.2
        images = np.zeros((2, 2, 1, 1), dtype=np.float32)
        images[:, 0, 0, 0] = [0.0, 1.0]
        images[:, 1, 0, 0] = [0.2, 0.6]
        stats = compute_stats(images)
        np.testing.assert_allclose(stats.mean, [0.5, 0.4], rtol=1e-6)
        np.testing.assert_allclose(stats.std, [0.5, 0.2], rtol=1e-6)

    def test_zero_std_rejected(self):
        with pytest.raises(ConfigError):
            compute_stats(np.full((3, 2, 2, 2), 0.3, dtype=np.float32))
        with pytest.raises(ConfigError):
            NormalizationStats(np.zeros(1, np.float32), np.zeros(1, np.float32))

    def test_permutation_invariant(self):
        data = synthetic_dataset(20, 4, 3)
        a = compute_stats(data.images)
        b = compute_stats(data.images[np.random.default_rng(0).permutation(20)])
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-6)
        np.testing.assert_allclose(a.std, b.std, rtol=1e-6)


class TestExport:
    def test_pgm_golden_bytes(self, tmp_path):
        path = export_image(np.array([[0, 1], [0.5, 0.25]]), tmp_path / "m.pgm")
        assert path.read_bytes() == b"P5 2 2 255\n" + bytes([0, 255, 127, 63])

    def test_black_ppm(self, tmp_path):
        path = export_image(np.zeros((3, 2, 3)), tmp_path / "b.ppm")
        data = path.read_bytes()
        assert data.startswith(b"P6 3 2 255\n")
        assert data[len(b"P6 3 2 255\n"):] == bytes(18)

    def test_reexport_identical(self, tmp_path):
        img = synthetic_dataset(1, 1, 0).images[0]
        a = export_image(img, tmp_path / "a.ppm").read_bytes()
        b = export_image(img, tmp_path / "b.ppm").read_bytes()
        assert a == b

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            export_image(np.zeros((2, 2)), tmp_path / "missing" / "x.pgm")
