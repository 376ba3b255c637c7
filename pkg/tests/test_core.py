"""Core types, sampling, resizing and file formats."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrverify.core import (
    CorrespondenceMap,
    GlobalDescriptor,
    FeatureMap,
    Image,
    InvalidSampleError,
    Mask,
    ParseError,
    bilinear_sample,
    bilinear_sample_grid,
    identity_map,
    load_image,
    read_cmap,
    read_fmap,
    read_gdsc,
    resize_image,
    sample_map,
    save_image,
    to_grayscale,
    write_cmap,
    write_fmap,
    write_gdsc,
)


def naive_bilinear(values, x, y):
    """Independent 4-term bilinear formula."""
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x0 = min(x0, values.shape[1] - 2)
    y0 = min(y0, values.shape[0] - 2)
    fx, fy = x - x0, y - y0
    return (
        values[y0, x0] * (1 - fx) * (1 - fy)
        + values[y0, x0 + 1] * fx * (1 - fy)
        + values[y0 + 1, x0] * (1 - fx) * fy
        + values[y0 + 1, x0 + 1] * fx * fy
    )


class TestBilinearSample:
    def test_integer_coordinate_is_identity(self):
        rng = np.random.default_rng(0)
        grid = rng.random((8, 8))
        assert bilinear_sample(grid, 3, 5) == grid[5, 3]

    def test_corner_midpoint_symmetry(self):
        grid = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert bilinear_sample(grid, 0.5, 0.5) == pytest.approx(0.5)

    def test_matches_hand_computed_weighted_sum(self):
        rng = np.random.default_rng(7)
        grid = rng.random((4, 4))
        got = bilinear_sample(grid, 1.25, 2.75)
        assert got == pytest.approx(naive_bilinear(grid, 1.25, 2.75), abs=1e-12)

    def test_out_of_bounds_raises(self):
        grid = np.zeros((4, 4))
        for x, y in [(-0.01, 0), (0, -0.01), (3.01, 0), (0, 3.01)]:
            with pytest.raises(InvalidSampleError):
                bilinear_sample(grid, x, y)

    def test_linear_along_axis(self):
        rng = np.random.default_rng(3)
        grid = rng.random((5, 5))
        y = 2
        v0 = bilinear_sample(grid, 1.0, y)
        v1 = bilinear_sample(grid, 2.0, y)
        for t in (0.2, 0.5, 0.9):
            assert bilinear_sample(grid, 1.0 + t, y) == pytest.approx(v0 + t * (v1 - v0))

    def test_grid_variant_matches_scalar_and_flags_oob(self):
        rng = np.random.default_rng(11)
        grid = rng.random((6, 7, 3))
        xs = np.array([0.0, 5.9, -1.0, 3.25])
        ys = np.array([0.0, 4.9, 2.0, 1.5])
        out, ok = bilinear_sample_grid(grid, xs, ys)
        assert ok.tolist() == [True, True, False, True]
        assert np.allclose(out[3], bilinear_sample(grid, 3.25, 1.5))
        assert np.all(out[2] == 0.0)

    @given(st.integers(0, 6), st.integers(0, 6))
    @settings(max_examples=25, deadline=None)
    def test_exact_at_grid_points(self, ix, iy):
        rng = np.random.default_rng(ix * 31 + iy)
        grid = rng.random((7, 7))
        assert bilinear_sample(grid, ix, iy) == grid[iy, ix]


class TestImageType:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            Image(np.full((8, 8), 1.5))
        with pytest.raises(ValueError):
            Image(np.full((8, 8), np.nan))

    def test_grayscale_weights(self):
        px = np.zeros((8, 8, 3))
        px[..., 0] = 1.0
        assert to_grayscale(Image(px)).pixels[0, 0] == pytest.approx(0.299)


class TestPnmIO:
    def test_p5_scaling(self, tmp_path):
        p = tmp_path / "t.pgm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
        img = load_image(p)
        assert img.pixels.tolist() == [[0.0, 1.0], [128 / 255, 64 / 255]]

    def test_round_trip_bit_exact_after_quantization(self, tmp_path):
        rng = np.random.default_rng(5)
        img = Image(rng.random((9, 12)))
        p = tmp_path / "r.pgm"
        save_image(img, p)
        back = load_image(p)
        save_image(back, tmp_path / "r2.pgm")
        assert (tmp_path / "r.pgm").read_bytes() == (tmp_path / "r2.pgm").read_bytes()
        assert np.abs(back.pixels - img.pixels).max() <= 0.5 / 255 + 1e-12

    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        img = Image(rng.random((8, 8, 3)))
        p = tmp_path / "c.ppm"
        save_image(img, p)
        back = load_image(p)
        assert back.channels == 3
        assert np.abs(back.pixels - img.pixels).max() <= 0.5 / 255 + 1e-12

    def test_maxval_rejected(self, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"P6\n2 2\n65535\n" + bytes(24))
        with pytest.raises(ParseError, match="maxval"):
            load_image(p)

    def test_truncated_payload_reports_offset(self, tmp_path):
        p = tmp_path / "short.pgm"
        p.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
        with pytest.raises(ParseError, match="byte"):
            load_image(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.pgm"
        p.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
        with pytest.raises(ParseError):
            load_image(p)

    def test_header_comments_skipped(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# a comment\n2 1 # inline\n255\n" + bytes([10, 20]))
        img = load_image(p)
        assert img.width == 2 and img.height == 1


class TestCmapIO:
    def test_identity_round_trip(self, tmp_path):
        m = identity_map(4, 4)
        p = tmp_path / "m.cmap"
        write_cmap(m, p)
        back = read_cmap(p)
        assert np.array_equal(back.coords, m.coords)
        assert np.array_equal(back.valid, m.valid)

    def test_invalid_pixels_preserved(self, tmp_path):
        m = identity_map(5, 3)
        valid = m.valid.copy()
        valid[0, 0] = valid[2, 1] = valid[4, 2] = False
        m = CorrespondenceMap(m.coords, valid)
        p = tmp_path / "m.cmap"
        write_cmap(m, p)
        back = read_cmap(p)
        assert back.valid.sum() == m.valid.sum() == 12
        assert np.array_equal(back.valid, valid)

    def test_wrong_magic_rejected(self, tmp_path):
        p = tmp_path / "x.cmap"
        import struct

        p.write_bytes(b"XMAP" + struct.pack("<III", 1, 2, 2) + bytes(2 * 2 * 8 + 4))
        with pytest.raises(ParseError, match="magic"):
            read_cmap(p)

    def test_short_read_rejected(self, tmp_path):
        import struct

        p = tmp_path / "x.cmap"
        p.write_bytes(b"CMAP" + struct.pack("<III", 1, 4, 4) + bytes(10))
        with pytest.raises(ParseError):
            read_cmap(p)

    @pytest.mark.parametrize("seed", range(12))
    def test_round_trip_random_tensors(self, seed, tmp_path):
        rng = np.random.default_rng(seed)
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        coords = rng.random((h, w, 2), dtype=np.float32).astype(np.float64) * 100
        coords = coords.astype(np.float32).astype(np.float64)  # f32-representable
        valid = rng.random((h, w)) < 0.8
        m = CorrespondenceMap(np.where(valid[..., None], coords, 0.0), valid)
        p = tmp_path / "r.cmap"
        write_cmap(m, p)
        back = read_cmap(p)
        assert np.array_equal(back.coords[back.valid], m.coords[m.valid])
        assert np.array_equal(back.valid, m.valid)


class TestFmapGdscIO:
    def test_fmap_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        fm = FeatureMap(rng.standard_normal((5, 6, 7), dtype=np.float32))
        p = tmp_path / "f.fmap"
        write_fmap(fm, p)
        back = read_fmap(p)
        assert np.array_equal(back.values, fm.values)

    def test_gdsc_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        v = rng.standard_normal(16)
        v = (v / np.linalg.norm(v)).astype(np.float32).astype(np.float64)
        d = GlobalDescriptor(v / np.linalg.norm(v))
        p = tmp_path / "g.gdsc"
        write_gdsc(d, p)
        back = read_gdsc(p)
        write_gdsc(back, tmp_path / "g2.gdsc")
        assert (tmp_path / "g.gdsc").read_bytes() == (tmp_path / "g2.gdsc").read_bytes()
        assert np.allclose(back.values, d.values, atol=1e-6)

    def test_fmap_wrong_magic(self, tmp_path):
        p = tmp_path / "bad.fmap"
        p.write_bytes(b"GARB" + bytes(32))
        with pytest.raises(ParseError):
            read_fmap(p)


def naive_resize(px, new_h, new_w):
    """Brute-force per-pixel half-pixel bilinear resampler."""
    h, w = px.shape
    out = np.empty((new_h, new_w))
    for i in range(new_h):
        for j in range(new_w):
            y = min(max((i + 0.5) * h / new_h - 0.5, 0.0), h - 1.0)
            x = min(max((j + 0.5) * w / new_w - 0.5, 0.0), w - 1.0)
            out[i, j] = naive_bilinear(px, x, y)
    return out


class TestResize:
    def test_constant_stays_constant(self):
        img = Image(np.full((11, 17), 0.5))
        out = resize_image(img, 240, 240)
        assert np.all(out.pixels == 0.5)

    def test_halving_block_constant_preserves_blocks(self):
        rng = np.random.default_rng(12)
        blocks = rng.random((8, 8))
        img = Image(np.kron(blocks, np.ones((2, 2))))
        out = resize_image(img, 8, 8)
        assert np.allclose(out.pixels, blocks, atol=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(13)
        img = Image(rng.random((17, 13)))
        out = resize_image(img, 240, 240)
        oracle = naive_resize(img.pixels, 240, 240)
        assert np.allclose(out.pixels, oracle, atol=1e-12)

    def test_small_target_rejected(self):
        img = Image(np.zeros((16, 16)))
        with pytest.raises(ValueError):
            resize_image(img, 7, 16)


class TestMapComposition:
    def test_identity_composition_returns_own_coordinates(self):
        rng = np.random.default_rng(14)
        h, w = 9, 11
        coords = np.stack(
            [rng.uniform(0, w - 1, (h, w)), rng.uniform(0, h - 1, (h, w))], axis=2
        )
        m = CorrespondenceMap.from_coords(coords, (h, w))
        ident = identity_map(h, w)
        got, ok = sample_map(ident, m.coords[..., 0], m.coords[..., 1])
        assert ok.all()
        assert np.abs(got - m.coords).max() < 1e-6

    def test_from_coords_marks_out_of_bounds_invalid(self):
        coords = np.zeros((4, 4, 2))
        coords[0, 0] = (-0.1, 0)
        coords[1, 1] = (3.0, 3.01)
        coords[2, 2] = (2.5, 2.5)
        m = CorrespondenceMap.from_coords(coords, (4, 4))
        assert not m.valid[0, 0]
        assert not m.valid[1, 1]
        assert m.valid[2, 2]


class TestMask:
    def test_count(self):
        m = Mask(np.eye(5, dtype=bool))
        assert m.count() == 5
