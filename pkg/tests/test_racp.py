import hashlib

import numpy as np
import pytest

from bgad.racp import (
    TRANSFORMS, AnomalyRegion, AugmentError, RasterImage, TransformSpec, apply_transform, paste,
    racp_generate,
)
from conftest import mask_fidelity_holds, racp_inputs


def _dot_image():
    px = np.zeros((20, 20, 1), np.uint8)
    px[5, 7] = 255
    m = np.zeros((20, 20), bool)
    m[5, 7] = True
    return RasterImage(px), AnomalyRegion(m)


class TestApplyTransform:
    def test_rotate_zero(self):
        img, reg = racp_inputs(0)[1:]
        out, m = apply_transform(img, reg, TransformSpec("Rotate", 0.0))
        np.testing.assert_array_equal(out.pixels, img.pixels)
        np.testing.assert_array_equal(m.mask, reg.mask)

    def test_translate_moves_pixel_and_mask(self):
        img, reg = _dot_image()
        out, m = apply_transform(img, reg, TransformSpec("Translate", (0.1, 0.0)))
        assert out.pixels[7, 7, 0] == 255 and out.pixels.sum() == 255
        assert m.mask[7, 7] and m.mask.sum() == 1

    def test_translate_columns(self):
        img, reg = _dot_image()
        out, m = apply_transform(img, reg, TransformSpec("Translate", (0.0, -0.1)))
        assert out.pixels[5, 5, 0] == 255 and m.mask[5, 5] and m.mask.sum() == 1

    @pytest.mark.parametrize("name", ["AutoContrast", "Equalize", "Posterize", "Solarize",
                                      "Brightness", "Sharpness"])
    def test_photometric_leaves_mask(self, name):
        img, reg = racp_inputs(1)[1:]
        mag = {"Posterize": 4.0, "Solarize": 100.0, "Brightness": 1.5, "Sharpness": 0.3}.get(name, 0.0)
        out, m = apply_transform(img, reg, TransformSpec(name, mag))
        np.testing.assert_array_equal(m.mask, reg.mask)
        assert out.pixels.shape == img.pixels.shape and out.pixels.dtype == np.uint8

    def test_solarize_inverts_above_threshold(self):
        img = RasterImage(np.array([[[10], [200]]], np.uint8))
        out, _ = apply_transform(img, AnomalyRegion(np.ones((1, 2))), TransformSpec("Solarize", 128.0))
        np.testing.assert_array_equal(out.pixels[..., 0], [[10, 55]])

    @pytest.mark.parametrize("spec", [TransformSpec("Rotate", 25.0), TransformSpec("Shear", -0.3),
                                      TransformSpec("Translate", (-0.1, 0.07))])
    def test_geometric_keeps_dims_and_binary_mask(self, spec):
        img, reg = racp_inputs(2)[1:]
        out, m = apply_transform(img, reg, spec)
        assert out.pixels.shape == img.pixels.shape
        assert m.mask.dtype == bool and m.mask.shape == reg.mask.shape

    def test_magnitude_out_of_range(self):
        with pytest.raises(ValueError):
            TransformSpec("Rotate", 45.0)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            TransformSpec("Blur", 1.0)


class TestPaste:
    def test_s0_paste_at_origin(self):
        normal, abnormal, reg = racp_inputs(3)
        comp, m = racp_generate(normal, abnormal, reg, S=0, seed=0, paste_at=(0, 0))
        rows = np.flatnonzero(reg.mask.any(axis=1))
        cols = np.flatnonzero(reg.mask.any(axis=0))
        h, w = rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1
        src_mask = reg.mask[rows[0]:rows[0] + h, cols[0]:cols[0] + w]
        np.testing.assert_array_equal(m.mask[:h, :w], src_mask)
        assert m.mask.sum() == reg.mask.sum()
        inside = comp.pixels[:h, :w][src_mask]
        np.testing.assert_array_equal(inside, abnormal.pixels[rows[0]:rows[0] + h, cols[0]:cols[0] + w][src_mask])
        np.testing.assert_array_equal(comp.pixels[~m.mask], normal.pixels[~m.mask])

    def test_out_of_bounds(self):
        normal, abnormal, reg = racp_inputs(4)
        with pytest.raises(AugmentError):
            paste(normal, abnormal, reg, (31, 31))

    def test_boxes_cover_components(self):
        m = np.zeros((6, 6), bool)
        m[0, 0] = m[1, 1] = True
        m[4:6, 3:5] = True
        assert sorted(AnomalyRegion(m).boxes) == [(0, 0, 2, 2), (4, 3, 6, 5)]


class TestGenerate:
    def test_deterministic_hash(self):
        normal, abnormal, reg = racp_inputs(5)
        digests = []
        for _ in range(2):
            comp, m = racp_generate(normal, abnormal, reg, S=3, seed=11)
            digests.append(hashlib.sha256(comp.pixels.tobytes() + m.mask.tobytes()).hexdigest())
        assert digests[0] == digests[1]

    def test_seeds_differ(self):
        normal, abnormal, reg = racp_inputs(5)
        a = racp_generate(normal, abnormal, reg, seed=1)[0].pixels
        b = racp_generate(normal, abnormal, reg, seed=2)[0].pixels
        assert not np.array_equal(a, b)

    @pytest.mark.parametrize("seed", range(20))
    def test_mask_fidelity(self, seed):
        normal, abnormal, reg = racp_inputs(seed, C=1 if seed % 2 else 3)
        trace = {}
        comp, m = racp_generate(normal, abnormal, reg, S=seed % 10, seed=seed, trace=trace)
        assert mask_fidelity_holds(normal, comp, m, trace)

    def test_subset_size(self):
        normal, abnormal, reg = racp_inputs(6)
        trace = {}
        racp_generate(normal, abnormal, reg, S=len(TRANSFORMS), seed=3, trace=trace)
        assert sorted(t.name for t in trace["transforms"]) == sorted(TRANSFORMS)

    def test_zero_probability_skips(self):
        normal, abnormal, reg = racp_inputs(7)
        trace = {}
        racp_generate(normal, abnormal, reg, S=9, seed=0, trace=trace,
                      probabilities={t: 0.0 for t in TRANSFORMS})
        assert trace["transforms"] == []

    def test_shape_mismatch(self):
        normal, abnormal, reg = racp_inputs(8)
        small = RasterImage(normal.pixels[:10])
        with pytest.raises(ValueError):
            racp_generate(small, abnormal, reg)

    def test_empty_region(self):
        normal, abnormal, _ = racp_inputs(8)
        with pytest.raises(ValueError):
            racp_generate(normal, abnormal, AnomalyRegion(np.zeros((32, 32), bool)))
