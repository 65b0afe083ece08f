import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from lbnet.data import (
    DatasetIndex, ImageRGB, augment, bicubic_resize, cubic_kernel, inverse_augment, load_png,
    modcrop, rgb_to_y, sample_batch, sample_patch_pair, save_png,
)
from lbnet.engine import Tensor
from lbnet.errors import DatasetError, ImageIOError, UsageError
from oracles import bicubic_oracle


@pytest.fixture
def rng():
    return np.random.default_rng(99)


def write_png(path, arr, mode=None):
    Image.fromarray(arr, mode=mode).save(path)
    return path


class TestPngIO:
    def test_roundtrip(self, tmp_path, rng):
        img = ImageRGB(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
        save_png(img, tmp_path / "a.png")
        np.testing.assert_array_equal(load_png(tmp_path / "a.png").samples, img.samples)

    def test_single_pixel(self, tmp_path):
        img = ImageRGB(np.array([[[1, 2, 3]]], dtype=np.uint8))
        save_png(img, tmp_path / "p.png")
        back = load_png(tmp_path / "p.png")
        assert (back.height, back.width) == (1, 1)
        np.testing.assert_array_equal(back.samples, img.samples)

    def test_gray_expands(self, tmp_path, rng):
        g = rng.integers(0, 256, (5, 7), dtype=np.uint8)
        img = load_png(write_png(tmp_path / "g.png", g))
        assert img.samples.shape == (5, 7, 3)
        for c in range(3):
            np.testing.assert_array_equal(img.samples[..., c], g)

    def test_palette_expands(self, tmp_path):
        im = Image.new("P", (3, 2))
        im.putpalette([10, 20, 30, 200, 100, 0] + [0] * 762)
        im.putpixel((1, 1), 1)
        im.save(tmp_path / "pal.png")
        img = load_png(tmp_path / "pal.png")
        assert tuple(img.samples[1, 1]) == (200, 100, 0)
        assert tuple(img.samples[0, 0]) == (10, 20, 30)

    def test_alpha_dropped(self, tmp_path, rng):
        rgba = rng.integers(0, 256, (4, 4, 4), dtype=np.uint8)
        img = load_png(write_png(tmp_path / "a.png", rgba, "RGBA"))
        np.testing.assert_array_equal(img.samples, rgba[..., :3])

    def test_sixteen_bit_rejected(self, tmp_path):
        Image.fromarray(np.full((4, 4), 40000, dtype=np.uint16)).save(tmp_path / "deep.png")
        with pytest.raises(ImageIOError, match="8-bit"):
            load_png(tmp_path / "deep.png")

    def test_truncated_rejected(self, tmp_path, rng):
        save_png(ImageRGB(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)), tmp_path / "t.png")
        raw = (tmp_path / "t.png").read_bytes()
        (tmp_path / "t.png").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ImageIOError) as info:
            load_png(tmp_path / "t.png")
        assert "t.png" in str(info.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageIOError):
            load_png(tmp_path / "nope.png")

    def test_garbage_file(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"not an image at all")
        with pytest.raises(ImageIOError):
            load_png(tmp_path / "x.png")

    def test_save_missing_parent(self, tmp_path):
        with pytest.raises(ImageIOError):
            save_png(np.zeros((3, 2, 2)), tmp_path / "no" / "x.png")

    def test_float_save_clamps(self, tmp_path):
        arr = np.array([-0.5, 0.5, 1.5]).reshape(3, 1, 1)
        save_png(arr, tmp_path / "f.png")
        assert tuple(load_png(tmp_path / "f.png").samples[0, 0]) == (0, 128, 255)


class TestBicubic:
    def test_kernel_partition_of_unity(self):
        t = np.linspace(0, 1, 11)
        total = sum(cubic_kernel(t - j) for j in range(-2, 3))
        np.testing.assert_allclose(total, 1.0, atol=1e-12)

    def test_constant_image(self):
        out = bicubic_resize(np.full((3, 10, 14), 0.37), 4, 9)
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_same_size_identity(self, rng):
        x = rng.random((3, 9, 7))
        np.testing.assert_allclose(bicubic_resize(x, 9, 7), x, atol=1e-6)

    @pytest.mark.parametrize("shape,out", [((8, 8), (4, 4)), ((11, 7), (5, 3)), ((5, 6), (12, 9))])
    def test_direct_sum_oracle(self, shape, out, rng):
        x = rng.random(shape)
        np.testing.assert_allclose(bicubic_resize(x, *out), bicubic_oracle(x, *out), atol=1e-6, rtol=0)

    @pytest.mark.parametrize("shape,out,margin", [((48, 48), (12, 12), 2), ((20, 20), (50, 50), 6)])
    def test_matches_pillow_away_from_border(self, shape, out, margin, rng):
        # Pillow truncates the kernel at the border instead of clamping, so compare the interior.
        x = rng.random(shape)
        ref = np.array(Image.fromarray(x.astype(np.float32), mode="F").resize(out[::-1], Image.BICUBIC))
        ours = bicubic_resize(x, *out)
        inner = (slice(margin, -margin),) * 2
        np.testing.assert_allclose(ours[inner], np.clip(ref, 0, 1)[inner], atol=1e-6)

    def test_tensor_in_tensor_out(self, rng):
        out = bicubic_resize(Tensor(rng.random((1, 3, 8, 8))), 4, 4)
        assert isinstance(out, Tensor) and out.shape == (1, 3, 4, 4)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 12), st.integers(2, 12), st.integers(1, 15), st.integers(1, 15), st.integers(0, 10**6))
    def test_stays_in_range(self, h, w, oh, ow, seed):
        x = np.random.default_rng(seed).random((h, w))
        out = bicubic_resize(x, oh, ow)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_zero_extent_rejected(self):
        with pytest.raises(UsageError):
            bicubic_resize(np.zeros((4, 4)), 0, 2)


class TestModcropAndLuma:
    def test_modcrop_arithmetic(self):
        assert modcrop(np.zeros((3, 101, 99)), 4).shape == (3, 100, 96)

    def test_modcrop_divisible_and_unit(self, rng):
        x = rng.random((3, 12, 8))
        np.testing.assert_array_equal(modcrop(x, 4), x)
        np.testing.assert_array_equal(modcrop(x, 1), x)

    def test_modcrop_too_small(self):
        with pytest.raises(UsageError):
            modcrop(np.zeros((3, 3, 8)), 4)

    @pytest.mark.parametrize("rgb,y", [((0, 0, 0), 16.0), ((1, 1, 1), 235.0), ((0, 1, 0), 144.553)])
    def test_luma_values(self, rgb, y):
        out = rgb_to_y(np.array(rgb, dtype=float).reshape(3, 1, 1))
        assert out.shape == (1, 1, 1)
        assert abs(out.item() - y) < 1e-9

    def test_luma_affine(self, rng):
        a, b = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
        alpha = 0.3
        np.testing.assert_allclose(rgb_to_y(alpha * a + (1 - alpha) * b),
                                   alpha * rgb_to_y(a) + (1 - alpha) * rgb_to_y(b), atol=1e-10)

    def test_luma_channel_check(self):
        with pytest.raises(UsageError):
            rgb_to_y(np.zeros((4, 4, 4)))


class TestAugment:
    @pytest.mark.parametrize("code", range(8))
    def test_inverse(self, code, rng):
        x = rng.random((2, 3, 5, 7))
        np.testing.assert_array_equal(inverse_augment(augment(x, code), code), x)

    def test_eight_distinct(self, rng):
        x = rng.random((4, 4))
        outs = {augment(x, c).tobytes() for c in range(8)}
        assert len(outs) == 8

    def test_identity_code(self, rng):
        x = rng.random((3, 4, 4))
        np.testing.assert_array_equal(augment(x, 0), x)

    def test_bad_code(self):
        with pytest.raises(UsageError):
            augment(np.zeros((2, 2)), 8)


@pytest.fixture
def hr_dir(tmp_path, rng):
    for name, size in [("b.png", (40, 36)), ("a.png", (30, 33)), ("tiny.png", (6, 6))]:
        save_png(ImageRGB(rng.integers(0, 256, size + (3,), dtype=np.uint8)), tmp_path / name)
    (tmp_path / "notes.txt").write_text("ignored")
    return tmp_path


class TestDatasetSampling:
    def test_index_sorted_with_sizes(self, hr_dir):
        idx = DatasetIndex.from_dir(hr_dir)
        assert [p.name for p in idx.paths] == ["a.png", "b.png", "tiny.png"]
        assert idx.sizes == ((30, 33), (40, 36), (6, 6))

    def test_patch_shapes(self, hr_dir, rng):
        pair = sample_patch_pair(DatasetIndex.from_dir(hr_dir), 4, 6, rng)
        assert pair.hr_patch.shape == (1, 3, 24, 24)
        assert pair.lr_patch.shape == (1, 3, 6, 6)

    def test_paper_patch_size(self, tmp_path, rng):
        save_png(ImageRGB(rng.integers(0, 256, (200, 196, 3), dtype=np.uint8)), tmp_path / "big.png")
        pair = sample_patch_pair(DatasetIndex.from_dir(tmp_path), 4, 48, rng)
        assert pair.hr_patch.shape[-2:] == (192, 192) and pair.lr_patch.shape[-2:] == (48, 48)

    def test_alignment_and_provenance(self, hr_dir):
        idx = DatasetIndex.from_dir(hr_dir)
        for seed in range(12):
            pair = sample_patch_pair(idx, 3, 5, np.random.default_rng(seed))
            top, left = pair.offset
            assert top % 3 == 0 and left % 3 == 0
            np.testing.assert_array_equal(bicubic_resize(pair.hr_patch.data, 5, 5), pair.lr_patch.data)
            src = idx.image(idx.paths.index(pair.path))[:, top:top + 15, left:left + 15]
            np.testing.assert_array_equal(inverse_augment(pair.hr_patch.data[0], pair.code), src)

    def test_code_zero_is_raw_crop(self, hr_dir):
        idx = DatasetIndex.from_dir(hr_dir)
        pair = next(p for p in (sample_patch_pair(idx, 2, 6, np.random.default_rng(s)) for s in range(100))
                    if p.code == 0)
        top, left = pair.offset
        raw = idx.image(idx.paths.index(pair.path))[:, top:top + 12, left:left + 12]
        np.testing.assert_array_equal(pair.hr_patch.data[0], raw)
        np.testing.assert_array_equal(pair.lr_patch.data[0], bicubic_resize(raw, 6, 6))

    def test_seed_determinism(self, hr_dir):
        idx = DatasetIndex.from_dir(hr_dir)
        a = sample_batch(idx, 2, 8, 4, np.random.default_rng(5))
        b = sample_batch(idx, 2, 8, 4, np.random.default_rng(5))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_small_images_skipped_with_warning(self, hr_dir, rng, caplog):
        idx = DatasetIndex.from_dir(hr_dir)
        with caplog.at_level(logging.WARNING, logger="lbnet.data"):
            paths = {sample_patch_pair(idx, 4, 6, rng).path.name for _ in range(30)}
        assert "tiny.png" not in paths
        assert "skipping 1 image" in caplog.text

    def test_all_too_small(self, hr_dir, rng):
        with pytest.raises(DatasetError):
            sample_patch_pair(DatasetIndex.from_dir(hr_dir), 4, 48, rng)

    def test_batch_shapes(self, hr_dir, rng):
        lr, hr = sample_batch(DatasetIndex.from_dir(hr_dir), 4, 6, 3, rng)
        assert lr.shape == (3, 3, 6, 6) and hr.shape == (3, 3, 24, 24)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DatasetError):
            DatasetIndex.from_dir(tmp_path / "absent")
