import struct

import numpy as np
import pytest

from ebmkit.datasets import (
    Dataset,
    GRID_MAGIC,
    augment,
    hflip,
    load_grid,
    save_grid,
    synth_2d,
    translate,
)
from ebmkit.errors import DataError


class TestSynth2d:
    def test_eight_gaussians_mode_centers(self):
        ds = synth_2d("eight_gaussians", 1600, seed=0)
        assert ds.num_classes == 8
        assert len(ds) == 1600
        for k in range(8):
            center = 0.7 * np.array([np.cos(k * np.pi / 4), np.sin(k * np.pi / 4)])
            got = ds.samples[ds.labels == k].mean(axis=0)
            assert np.linalg.norm(got - center) < 0.04

    def test_eight_gaussians_zero_noise_hits_centers_exactly(self):
        ds = synth_2d("eight_gaussians", 16, seed=1, noise=0.0)
        for k in range(8):
            center = 0.7 * np.array([np.cos(k * np.pi / 4), np.sin(k * np.pi / 4)])
            block = ds.samples[ds.labels == k]
            np.testing.assert_allclose(block, np.tile(center, (len(block), 1)),
                                       rtol=0, atol=1e-12)

    def test_uneven_count_split(self):
        ds = synth_2d("eight_gaussians", 1001, seed=2)
        counts = np.bincount(ds.labels, minlength=8)
        assert counts.tolist() == [126, 125, 125, 125, 125, 125, 125, 125]

    def test_two_rings_radii(self):
        ds = synth_2d("two_rings", 2000, seed=3)
        radii = np.linalg.norm(ds.samples, axis=1)
        assert abs(radii[ds.labels == 0].mean() - 0.40) < 0.01
        assert abs(radii[ds.labels == 1].mean() - 0.85) < 0.01

    def test_checkerboard_parity_matches_label(self):
        ds = synth_2d("checkerboard", 5000, seed=4)
        i = np.floor((ds.samples[:, 0] + 1.0) * 2.0).astype(int)
        j = np.floor((ds.samples[:, 1] + 1.0) * 2.0).astype(int)
        np.testing.assert_array_equal((i + j) % 2, ds.labels)

    def test_two_moons_class_means_are_antisymmetric(self):
        ds = synth_2d("two_moons", 4000, seed=5)
        m0 = ds.samples[ds.labels == 0].mean(axis=0)
        m1 = ds.samples[ds.labels == 1].mean(axis=0)
        expected = np.array([-1.0 / 3.0, (2.0 / np.pi - 0.25) / 1.5])
        assert np.linalg.norm(m0 - expected) < 0.05
        assert np.linalg.norm(m0 + m1) < 0.05

    def test_all_kinds_stay_in_unit_square(self):
        for kind in ("eight_gaussians", "two_rings", "checkerboard", "two_moons"):
            ds = synth_2d(kind, 500, seed=6)
            assert ds.samples.min() >= -1.0
            assert ds.samples.max() <= 1.0
            assert ds.range == (-1.0, 1.0)
            assert ds.raster_shape is None

    def test_deterministic_under_seed(self):
        a = synth_2d("two_moons", 100, seed=7)
        b = synth_2d("two_moons", 100, seed=7)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.labels, b.labels)
        c = synth_2d("two_moons", 100, seed=8)
        assert not np.array_equal(a.samples, c.samples)

    def test_unknown_kind_rejected(self):
        with pytest.raises(DataError, match="kind"):
            synth_2d("spiral", 10, seed=0)


def write_grid_bytes(path, count, h, w, c, num_classes, pixels, labels=b""):
    blob = GRID_MAGIC + struct.pack("<IIIII", count, h, w, c, num_classes)
    path.write_bytes(blob + pixels + labels)


class TestGridIO:
    def test_byte_mapping(self, tmp_path):
        path = tmp_path / "tiny.ebmg"
        pixels = bytes([0, 255, 128, 64, 10, 20, 30, 40])
        labels = struct.pack("<HH", 0, 1)
        write_grid_bytes(path, 2, 2, 2, 1, 2, pixels, labels)
        ds = load_grid(path)
        assert ds.samples.shape == (2, 4)
        assert ds.raster_shape == (2, 2, 1)
        assert ds.num_classes == 2
        assert ds.samples[0, 0] == -1.0
        assert ds.samples[0, 1] == 1.0
        np.testing.assert_allclose(ds.samples[0, 2], 128 / 127.5 - 1.0,
                                   rtol=0, atol=0)
        np.testing.assert_array_equal(ds.labels, [0, 1])

    def test_unlabeled_when_zero_classes(self, tmp_path):
        path = tmp_path / "u.ebmg"
        write_grid_bytes(path, 1, 1, 2, 1, 0, bytes([100, 200]))
        ds = load_grid(path)
        assert ds.labels is None
        assert ds.num_classes == 0

    def test_round_trip_is_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=3 * 4 * 4 * 2, dtype=np.uint8)
        labels = struct.pack("<HHH", 2, 0, 1)
        src = tmp_path / "src.ebmg"
        write_grid_bytes(src, 3, 4, 4, 2, 3, pixels.tobytes(), labels)
        ds = load_grid(src)
        dst = tmp_path / "dst.ebmg"
        save_grid(ds, dst)
        assert dst.read_bytes() == src.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ebmg"
        path.write_bytes(b"JUNK" + b"\x00" * 40)
        with pytest.raises(DataError, match="magic"):
            load_grid(path)

    def test_truncated_pixels(self, tmp_path):
        path = tmp_path / "short.ebmg"
        write_grid_bytes(path, 2, 2, 2, 1, 0, bytes([1, 2, 3]))
        with pytest.raises(DataError, match="pixel payload"):
            load_grid(path)

    def test_truncated_labels(self, tmp_path):
        path = tmp_path / "short2.ebmg"
        write_grid_bytes(path, 1, 1, 1, 1, 2, bytes([7]), b"\x00")
        with pytest.raises(DataError, match="label payload"):
            load_grid(path)

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "range.ebmg"
        write_grid_bytes(path, 1, 1, 1, 1, 2, bytes([7]), struct.pack("<H", 5))
        with pytest.raises(DataError, match="out of range"):
            load_grid(path)

    def test_empty_dims_rejected(self, tmp_path):
        path = tmp_path / "empty.ebmg"
        write_grid_bytes(path, 0, 2, 2, 1, 0, b"")
        with pytest.raises(DataError, match="empty"):
            load_grid(path)

    def test_save_requires_raster(self, tmp_path):
        ds = synth_2d("two_rings", 10, seed=0)
        with pytest.raises(DataError, match="raster"):
            save_grid(ds, tmp_path / "no.ebmg")


class TestAugment:
    def make_raster(self, n=6, h=8, w=8, c=1, seed=0):
        rng = np.random.default_rng(seed)
        samples = rng.uniform(-1.0, 1.0, size=(n, h * w * c))
        return Dataset(samples=samples, labels=np.zeros(n, dtype=np.int64),
                       range=(-1.0, 1.0), name="raster", num_classes=1,
                       raster_shape=(h, w, c))

    def test_disabled_returns_input(self):
        ds = synth_2d("two_moons", 20, seed=0)
        batch = ds.samples[:8]
        assert augment(batch, ds, np.random.default_rng(0), enabled=False) is batch

    def test_2d_jitter_is_small_and_clamped(self):
        ds = synth_2d("two_moons", 200, seed=1)
        batch = ds.samples[:64]
        out = augment(batch, ds, np.random.default_rng(2))
        assert out.shape == batch.shape
        assert not np.array_equal(out, batch)
        assert np.abs(out - batch).max() < 0.06
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_hflip_is_involution(self):
        img = np.random.default_rng(3).normal(size=(5, 7, 2))
        np.testing.assert_array_equal(hflip(hflip(img)), img)

    def test_translate_identity_and_fill(self):
        img = np.ones((4, 4, 1))
        np.testing.assert_array_equal(translate(img, 0, 0), img)
        shifted = translate(img, 2, 0, fill=-1.0)
        np.testing.assert_array_equal(shifted[:, :2], -np.ones((4, 2, 1)))
        np.testing.assert_array_equal(shifted[:, 2:], np.ones((4, 2, 1)))
        down = translate(img, 0, -1, fill=0.0)
        np.testing.assert_array_equal(down[-1:], np.zeros((1, 4, 1)))

    def test_raster_augment_shape_range_and_determinism(self):
        ds = self.make_raster()
        batch = ds.samples[:4]
        a = augment(batch, ds, np.random.default_rng(4))
        b = augment(batch, ds, np.random.default_rng(4))
        np.testing.assert_array_equal(a, b)
        assert a.shape == batch.shape
        assert a.min() >= -1.0 and a.max() <= 1.0

    def test_raster_dequantization_bounded(self):
        # With flips and shifts forced off (lone pixel can't move visibly on
        # a constant image), the only change is the sub-byte noise floor.
        ds = self.make_raster(n=8, h=3, w=3)
        batch = np.full((8, 9), -0.5)
        out = augment(batch, ds, np.random.default_rng(5))
        deltas = out - batch
        # Translation pulls in fill pixels (delta -0.5); everything else must
        # be dequantization noise in [0, 2/255).
        moved = deltas < 0
        assert (deltas[~moved] < 2.0 / 255.0).all()
        assert (deltas[~moved] >= 0.0).all()
