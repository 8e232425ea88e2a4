import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lungcad.dataio import AnnotationSet, Polygon, SlideRaster
from lungcad.heatmap import (
    colorize,
    colorize_value,
    draw_polygon,
    grayscale,
    render_overlay,
    save_field,
    save_png,
    stitch,
)
from lungcad.tiling import TilingConfig

CFG = TilingConfig()


def grid_scores(values):
    values = np.asarray(values, dtype=float)
    return {(r, c): float(values[r, c]) for r in range(values.shape[0]) for c in range(values.shape[1])}


def covering(x, y, size=648, P=256, S=196):
    """Grid indices of the patches covering pixel (x, y), by enumeration."""
    n = (size - P) // S + 1
    return [(r, c) for r in range(n) for c in range(n) if c * S <= x < c * S + P and r * S <= y < r * S + P]


class TestStitch:
    @pytest.mark.parametrize("p", [0.0, 0.1, 0.3, 1 / 3, 0.7, 1.0])
    def test_constant_exact(self, p):
        _, f = stitch(grid_scores(np.full((3, 3), p)), CFG, 648, 648)
        assert np.all(f.values[f.covered] == p)

    def test_four_patch_overlap(self):
        center = np.zeros((3, 3))
        center[1, 1] = 1.0
        _, f = stitch(grid_scores(center), CFG, 648, 648)
        assert len(covering(200, 200)) == 4
        assert f.values[200, 200] == 0.25
        # the exact slide centre lies in a single-patch region
        assert covering(324, 324) == [(1, 1)] and f.values[324, 324] == 1.0

    def test_against_enumeration(self, rng):
        g = rng.random((3, 3))
        _, f = stitch(grid_scores(g), CFG, 648, 648)
        for _ in range(300):
            x, y = rng.integers(0, 648, 2)
            cov = covering(x, y)
            assert f.values[y, x] == pytest.approx(np.mean([g[r, c] for r, c in cov]), abs=1e-15)

    def test_margin_uncovered(self):
        _, f = stitch(grid_scores(np.full((3, 3), 0.5)), CFG, 651, 650)
        assert f.values.shape == (650, 651)
        assert not f.covered[:, 648:].any() and not f.covered[648:, :].any()
        assert np.isnan(f.values[649, 650])
        assert f.covered[:648, :648].all()

    def test_convex(self, rng):
        for _ in range(10):
            g = rng.random((3, 3))
            _, f = stitch(grid_scores(g), CFG, 648, 648)
            v = f.values[f.covered]
            assert v.min() >= g.min() and v.max() <= g.max()

    def test_swap_mirrors(self, rng):
        g = rng.random((3, 3))
        _, a = stitch(grid_scores(g), CFG, 648, 648)
        _, b = stitch(grid_scores(g[:, ::-1]), CFG, 648, 648)
        np.testing.assert_allclose(b.values, a.values[:, ::-1], atol=1e-15)

    def test_grid(self):
        g = np.arange(9).reshape(3, 3) / 8
        grid, _ = stitch(grid_scores(g), CFG, 648, 648, "s")
        np.testing.assert_array_equal(grid.values, g)
        assert (grid.patch_size, grid.stride, grid.slide_id) == (256, 196, "s")

    def test_missing_and_extra(self):
        s = grid_scores(np.zeros((3, 3)))
        del s[(2, 2)]
        with pytest.raises(ValueError, match="missing"):
            stitch(s, CFG, 648, 648)
        s[(2, 2)] = 0.0
        s[(3, 0)] = 0.0
        with pytest.raises(ValueError, match="extra"):
            stitch(s, CFG, 648, 648)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            stitch(grid_scores(np.full((3, 3), 1.5)), CFG, 648, 648)

    def test_max_and_nearest_rules(self):
        center = np.zeros((3, 3))
        center[1, 1] = 1.0
        _, fm = stitch(grid_scores(center), CFG, 648, 648, rule="max")
        assert fm.values[200, 200] == 1.0
        _, fn = stitch(grid_scores(center), CFG, 648, 648, rule="nearest")
        assert fn.values[200, 200] == 0.0 and fn.values[320, 320] == 1.0
        with pytest.raises(ValueError):
            stitch(grid_scores(center), CFG, 648, 648, rule="median")


class TestColor:
    def test_values(self):
        assert colorize_value(1.0) == (255, 0, 0)
        assert colorize_value(0.0) == (0, 0, 255)
        assert colorize_value(0.5) == (128, 0, 128)

    @given(a=st.floats(0, 1), b=st.floats(0, 1))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        (r1, _, b1), (r2, _, b2) = colorize_value(lo), colorize_value(hi)
        assert r1 <= r2 and b1 >= b2

    def test_field_matches_scalar(self):
        _, f = stitch(grid_scores(np.full((3, 3), 0.5)), CFG, 650, 650)
        img = colorize(f, background=np.full((650, 650), 10.0))
        assert tuple(img[0, 0]) == (128, 0, 128)
        assert tuple(img[649, 649]) == (10, 10, 10)


def _slide(rng, size=648):
    return SlideRaster("s", rng.integers(0, 256, (size, size, 3), dtype=np.uint8))


class TestOverlay:
    def test_alpha_zero_is_grayscale_plus_outline(self, rng):
        slide = _slide(rng)
        _, f = stitch(grid_scores(rng.random((3, 3))), CFG, 648, 648)
        ann = AnnotationSet("s", [Polygon(np.array([[100, 100], [300, 100], [300, 300], [100, 300]], float))])
        img = render_overlay(slide, f, ann, alpha=0.0)
        gray = np.clip(np.floor(grayscale(slide) + 0.5), 0, 255).astype(np.uint8)
        outline = np.zeros((648, 648, 3), np.uint8)
        draw_polygon(outline, ann.polygons[0].vertices, (1, 1, 1))
        on_line = outline[..., 0] == 1
        assert np.all(img[on_line] == (0, 0, 255))
        np.testing.assert_array_equal(img[~on_line], np.repeat(gray[..., None], 3, axis=2)[~on_line])

    def test_alpha_one_pure_red(self, rng):
        slide = _slide(rng, 700)
        _, f = stitch(grid_scores(np.ones((3, 3))), CFG, 700, 700)
        img = render_overlay(slide, f, None, alpha=1.0)
        assert np.all(img[f.covered] == (255, 0, 0))
        assert np.all(img[~f.covered][:, 0] == img[~f.covered][:, 1])

    def test_outline_thickness(self):
        img = np.zeros((20, 20, 3), np.uint8)
        draw_polygon(img, [(5, 5), (15, 5), (15, 15), (5, 15)])
        blue = np.all(img == (0, 0, 255), axis=2)
        assert blue[5, 10] and blue[4, 10] and blue[6, 10] and not blue[3, 10] and not blue[10, 10]

    def test_outline_clipped_to_image(self):
        img = np.zeros((10, 10, 3), np.uint8)
        draw_polygon(img, [(-5, -5), (20, -5), (20, 5)])
        assert img.any()

    def test_byte_identical_png(self, tmp_path, rng):
        slide = _slide(rng)
        _, f = stitch(grid_scores(rng.random((3, 3))), CFG, 648, 648)
        ann = AnnotationSet("s", [Polygon(np.array([[10, 10], [600, 40], [300, 500]], float))])
        save_png(render_overlay(slide, f, ann), tmp_path / "a.png")
        save_png(render_overlay(slide, f, ann), tmp_path / "b.png")
        digest = [hashlib.sha256((tmp_path / n).read_bytes()).hexdigest() for n in ("a.png", "b.png")]
        assert digest[0] == digest[1]

    def test_dimension_mismatch(self, rng):
        _, f = stitch(grid_scores(np.ones((3, 3))), CFG, 648, 648)
        with pytest.raises(ValueError):
            render_overlay(_slide(rng, 700), f)


def test_field_dump(tmp_path):
    import json

    _, f = stitch(grid_scores(np.full((3, 3), 0.25)), CFG, 650, 649)
    side = save_field(f, tmp_path / "f.bin")
    raw = np.fromfile(tmp_path / "f.bin", dtype="<f4").reshape(649, 650)
    assert raw[0, 0] == 0.25 and np.isnan(raw[648, 649])
    meta = json.loads(side.read_text())
    assert (meta["width"], meta["height"], meta["coverage_offset"]) == (650, 649, [0, 0])
