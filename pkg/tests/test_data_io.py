import numpy as np
import pytest

from data_io import (
    CIFAR_RECORD,
    CIFAR_TEST_FILES,
    CIFAR_TRAIN_FILES,
    PERCENT_GRID,
    Dataset,
    PerturbSpec,
    apply_perturbation,
    denormalize,
    load_cifar10,
    normalize,
    read_cifar_batch,
    scale_transform,
    shift_pixels,
    shift_transform,
    synthetic_dataset,
    write_cifar_batch,
)
from shared import DataFormatError, DatasetIOError, TruncatedFileError, ValidationError


def _cifar_like(n, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, 3, 32, 32)).astype(np.float32) / 255.0
    labels = rng.integers(0, 10, size=n)
    return images, labels


class TestCifarFormat:
    def test_full_batch(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        np.zeros(10000 * CIFAR_RECORD, dtype=np.uint8).tofile(path)
        images, labels = read_cifar_batch(path)
        assert images.shape == (10000, 3, 32, 32)
        assert labels.shape == (10000,)

    def test_write_then_read_is_exact(self, tmp_path):
        images, labels = _cifar_like(5)
        path = write_cifar_batch(tmp_path / "b.bin", images, labels)
        got_images, got_labels = read_cifar_batch(path)
        np.testing.assert_array_equal(got_images, images)
        np.testing.assert_array_equal(got_labels, labels)

    def test_record_layout(self, tmp_path):
        images, labels = _cifar_like(2)
        path = write_cifar_batch(tmp_path / "b.bin", images, labels)
        raw = path.read_bytes()
        assert len(raw) == 2 * CIFAR_RECORD
        assert raw[0] == labels[0]
        assert raw[CIFAR_RECORD] == labels[1]
        # red plane first, row-major
        assert raw[1] == round(images[0, 0, 0, 0] * 255)
        assert raw[1 + 1024] == round(images[0, 1, 0, 0] * 255)

    def test_length_not_a_multiple(self, tmp_path):
        path = tmp_path / "bad.bin"
        np.zeros(CIFAR_RECORD + 7, dtype=np.uint8).tofile(path)
        with pytest.raises(DataFormatError, match="bad.bin") as info:
            read_cifar_batch(path)
        assert isinstance(info.value, TruncatedFileError)
        assert isinstance(info.value, DatasetIOError)

    def test_missing_file_names_it(self, tmp_path):
        with pytest.raises(DatasetIOError, match="nope.bin"):
            read_cifar_batch(tmp_path / "nope.bin")

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "b.bin"
        record = np.zeros(CIFAR_RECORD, dtype=np.uint8)
        record[0] = 12
        record.tofile(path)
        with pytest.raises(DataFormatError):
            read_cifar_batch(path)

    def test_load_directory(self, tmp_path):
        for i, name in enumerate(CIFAR_TRAIN_FILES + CIFAR_TEST_FILES):
            write_cifar_batch(tmp_path / name, *_cifar_like(2, seed=i))
        train, test = load_cifar10(tmp_path, expected_counts=(10, 2))
        assert (len(train), len(test)) == (10, 2)
        assert train.labels[0] == _cifar_like(2, seed=0)[1][0]
        again, _ = load_cifar10(tmp_path, expected_counts=(10, 2))
        assert again.images.tobytes() == train.images.tobytes()

    def test_record_count_mismatch(self, tmp_path):
        for name in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES:
            write_cifar_batch(tmp_path / name, *_cifar_like(2))
        with pytest.raises(DataFormatError, match="expected"):
            load_cifar10(tmp_path)

    def test_missing_batch(self, tmp_path):
        write_cifar_batch(tmp_path / CIFAR_TRAIN_FILES[0], *_cifar_like(2))
        with pytest.raises(DatasetIOError, match="data_batch_2.bin"):
            load_cifar10(tmp_path, expected_counts=None)


class TestSynthetic:
    def test_round_robin_balance(self):
        ds = synthetic_dataset(seed=0, n=100, classes=2, grid=4)
        assert np.bincount(ds.labels).tolist() == [50, 50]

    def test_deterministic(self):
        a = synthetic_dataset(seed=3, n=20, classes=4, grid=4, image_size=16)
        b = synthetic_dataset(seed=3, n=20, classes=4, grid=4, image_size=16)
        assert a.images.tobytes() == b.images.tobytes()

    def test_square_marks_class_cell(self):
        ds = synthetic_dataset(seed=0, n=8, classes=4, grid=2, image_size=8, channels=1)
        for img, label in zip(ds.images, ds.labels):
            r, c = divmod(int(label), 2)
            assert (img[0, r * 4 : r * 4 + 4, c * 4 : c * 4 + 4] == 1.0).all()
            assert img.max() == 1.0 and np.sort(img.ravel())[-17] <= 0.25

    def test_too_many_classes(self):
        with pytest.raises(ValidationError):
            synthetic_dataset(seed=0, n=10, classes=5, grid=2)

    def test_batches_cover_every_image(self):
        ds = synthetic_dataset(seed=0, n=10, classes=2, grid=2, image_size=4)
        seen = np.concatenate([labels for _, labels in ds.batches(3, np.random.default_rng(0))])
        assert sorted(seen.tolist()) == sorted(ds.labels.tolist())


class TestShift:
    def test_zero_percent_identity(self):
        img = np.random.default_rng(0).uniform(size=(3, 8, 8))
        np.testing.assert_array_equal(shift_transform(img, 0, "horizontal"), img)

    def test_full_shift_zeroes(self):
        img = np.ones((3, 8, 8))
        assert not shift_transform(img, 100, "vertical").any()

    def test_two_pixel_trace(self):
        img = np.array([[[1.0, 2.0]]])
        np.testing.assert_array_equal(shift_transform(img, 50, "horizontal"), [[[0.0, 1.0]]])

    def test_vertical_moves_rows_down(self):
        img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        out = shift_transform(img, 25, "vertical")
        np.testing.assert_array_equal(out[0, 0], 0.0)
        np.testing.assert_array_equal(out[0, 1:], img[0, :3])

    def test_pixel_count_rounds(self):
        img = np.ones((1, 32, 32))
        out = shift_transform(img, 15, "horizontal")
        assert int((out[0, 0] == 0).sum()) == 5

    def test_shift_back_recovers_interior(self):
        img = np.random.default_rng(1).uniform(size=(2, 3, 10, 10))
        back = shift_pixels(shift_pixels(img, 3, "horizontal"), -3, "horizontal")
        np.testing.assert_array_equal(back[..., :7], img[..., :7])
        assert not back[..., 7:].any()

    def test_extents_preserved(self):
        img = np.zeros((4, 3, 32, 32))
        for spec in PerturbSpec.parse_sweep("hshift:all") + PerturbSpec.parse_sweep("scale:all"):
            assert apply_perturbation(img, spec).shape == img.shape


class TestScale:
    def test_zero_percent_identity(self):
        img = np.random.default_rng(2).uniform(size=(3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(scale_transform(img, 0), img)

    def test_half_size_region(self):
        img = np.random.default_rng(3).uniform(0.1, 1.0, size=(3, 32, 32))
        out = scale_transform(img, 50)
        assert (out[:, :16, :16] > 0).all()
        assert not out[:, 16:, :].any() and not out[:, :, 16:].any()

    def test_constant_image_stays_constant(self):
        img = np.full((3, 32, 32), 0.6)
        out = scale_transform(img, 30)
        np.testing.assert_allclose(out[:, :22, :22], 0.6, rtol=1e-6)
        assert not out[:, 22:].any()

    @pytest.mark.parametrize("anchor, corner", [
        ("top_right", (slice(0, 16), slice(16, 32))),
        ("bottom_left", (slice(16, 32), slice(0, 16))),
        ("bottom_right", (slice(16, 32), slice(16, 32))),
        ("center", (slice(8, 24), slice(8, 24))),
    ])
    def test_anchor_placement(self, anchor, corner):
        out = scale_transform(np.ones((1, 32, 32)), 50, anchor)
        np.testing.assert_allclose(out[0][corner], 1.0)
        assert out.sum() == pytest.approx(256.0)

    def test_too_small_result(self):
        with pytest.raises(ValidationError):
            scale_transform(np.ones((1, 2, 2)), 80)

    def test_percent_out_of_range(self):
        with pytest.raises(ValidationError):
            scale_transform(np.ones((1, 4, 4)), 100)


class TestPerturbSpec:
    def test_all_expands_grid(self):
        specs = PerturbSpec.parse_sweep("scale:all")
        assert [s.percent for s in specs] == list(PERCENT_GRID)
        assert {s.mode for s in specs} == {"scale"}

    @pytest.mark.parametrize("text", ["zoom:15", "hshift:20", "hshift", "vshift:lots"])
    def test_rejects(self, text):
        with pytest.raises(ValidationError):
            PerturbSpec.parse_sweep(text)

    def test_zero_is_identity(self):
        img = np.random.default_rng(4).uniform(size=(2, 3, 8, 8))
        for mode in ("hshift", "vshift", "scale"):
            np.testing.assert_array_equal(apply_perturbation(img, PerturbSpec(mode, 0)), img)


class TestNormalize:
    def _dataset(self):
        return synthetic_dataset(seed=0, n=6, classes=2, grid=2, image_size=8)

    def test_unit_stats_identity(self):
        ds = self._dataset()
        out = normalize(ds, [0, 0, 0], [1, 1, 1])
        np.testing.assert_array_equal(out.images, ds.images)

    def test_image_equal_to_mean_gives_zeros(self):
        ds = Dataset(np.full((1, 3, 4, 4), 0.5), [0], 1)
        np.testing.assert_allclose(normalize(ds, [0.5] * 3, [0.2] * 3).images, 0.0)

    def test_round_trip(self):
        ds = self._dataset()
        mean, std = [0.49, 0.48, 0.45], [0.25, 0.24, 0.26]
        back = denormalize(normalize(ds, mean, std), mean, std)
        np.testing.assert_allclose(back.images, ds.images, atol=1e-6)

    def test_zero_std(self):
        with pytest.raises(ValidationError):
            normalize(self._dataset(), [0, 0, 0], [1, 0, 1])
