import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import naive_features, naive_glcm

from lungcad.texture import (
    FEATURE_NAMES,
    TextureConfig,
    compute_glcm,
    glcm_features,
    normalize_patch,
    patch_feature_vector,
    quantile,
    read_features,
    segment_grid,
    to_gray_quantized,
    write_features,
)


class TestQuantile:
    def test_median(self):
        assert quantile([1, 2, 3, 4, 5], 0.5) == 3

    def test_upper_quartile(self):
        assert quantile([5, 1, 4, 2, 3], 0.75) == 4

    def test_interpolates(self):
        # h = 3 * 0.5 = 1.5 -> 2 + 0.5 * (3 - 2)
        assert quantile([1, 2, 3, 4], 0.5) == 2.5

    @given(x=st.floats(-1e6, 1e6), q=st.floats(0, 1))
    def test_single_element(self, x, q):
        assert quantile([x], q) == x

    def test_empty(self):
        with pytest.raises(ValueError):
            quantile([], 0.5)

    def test_matches_numpy_linear(self, rng):
        for _ in range(50):
            v = rng.normal(size=rng.integers(1, 100))
            q = rng.uniform(size=5)
            np.testing.assert_allclose(quantile(v, q), np.quantile(v, q, method="linear"), rtol=0, atol=1e-12)


class TestNormalize:
    def test_hand_case(self):
        out = normalize_patch(np.array([1, 2, 3, 4, 5], float).reshape(1, 5, 1))
        np.testing.assert_array_equal(out.ravel(), [-2, -1, 0, 1, 2])

    def test_constant_channel(self):
        out = normalize_patch(np.full((4, 4, 3), 9.0))
        assert np.all(out == 0)

    def test_median_zero_iqr_two(self, rng):
        for _ in range(20):
            px = rng.integers(0, 256, (32, 32, 3))
            out = normalize_patch(px)
            for c in range(3):
                q25, q50, q75 = quantile(out[..., c], [0.25, 0.5, 0.75])
                assert abs(q50) < 1e-9
                assert abs((q75 - q25) - 2) < 1e-9

    @given(a=st.floats(0.01, 100), b=st.floats(-1000, 1000))
    @settings(max_examples=50, deadline=None)
    def test_affine_invariance(self, a, b):
        px = np.random.default_rng(3).integers(0, 256, (16, 16, 3)).astype(float)
        np.testing.assert_allclose(normalize_patch(a * px + b), normalize_patch(px), atol=1e-9, rtol=0)

    def test_idempotent(self):
        # output already has median 0 and IQR 2, so a second pass is the identity
        px = np.arange(16, dtype=float).reshape(4, 4, 1) ** 2
        once = normalize_patch(px)
        np.testing.assert_allclose(normalize_patch(once), once, atol=1e-12)


class TestQuantize:
    def test_zero_maps_to_mid_level(self):
        assert np.all(to_gray_quantized(np.zeros((3, 3, 3)), 8) == 4)

    def test_endpoints(self):
        g = to_gray_quantized(np.array([[-3.0, 3.0, -10.0, 10.0]]), 8)
        np.testing.assert_array_equal(g, [[0, 7, 0, 7]])

    def test_luminance_weights(self):
        norm = np.zeros((1, 1, 3))
        norm[..., 1] = 1.0  # L = 0.587 -> floor(3.587 / 6 * 8) = 4
        assert to_gray_quantized(norm, 8)[0, 0] == 4

    @given(a=st.floats(-5, 5), b=st.floats(-5, 5), g=st.integers(2, 32))
    def test_monotone(self, a, b, g):
        lo, hi = sorted((a, b))
        q = to_gray_quantized(np.array([[lo, hi]]), g)
        assert q[0, 0] <= q[0, 1]
        assert 0 <= q.min() and q.max() < g

    def test_too_few_levels(self):
        with pytest.raises(ValueError):
            to_gray_quantized(np.zeros((2, 2)), 1)


class TestGlcm:
    def test_hand_case(self):
        P = compute_glcm(np.array([[0, 0], [1, 1]]), (1, 0), symmetric=False, levels=2)
        np.testing.assert_array_equal(P, [[0.5, 0], [0, 0.5]])

    def test_constant(self):
        P = compute_glcm(np.full((7, 7), 3), (1, 1), symmetric=True, levels=8)
        assert P[3, 3] == 1.0 and P.sum() == 1.0

    def test_no_pairs(self):
        with pytest.raises(ValueError):
            compute_glcm(np.zeros((7, 7), int), (7, 0))

    @given(seg=arrays(np.int64, (7, 7), elements=st.integers(0, 7)),
           dx=st.integers(-6, 6), dy=st.integers(-6, 6), sym=st.booleans())
    @settings(max_examples=200, deadline=None)
    def test_against_naive(self, seg, dx, dy, sym):
        P = compute_glcm(seg, (dx, dy), sym, levels=8)
        ref = np.array(naive_glcm(seg.tolist(), dx, dy, sym, 8))
        np.testing.assert_allclose(P, ref, atol=1e-15)
        assert abs(P.sum() - 1) < 1e-12
        if sym:
            np.testing.assert_array_equal(P, P.T)

    def test_contrast_zero_iff_equal_pairs(self, rng):
        for _ in range(100):
            seg = rng.integers(0, 3, (7, 7))
            P = compute_glcm(seg, (1, 0), True, 3)
            equal_pairs = np.all(seg[:, 1:] == seg[:, :-1])
            assert (glcm_features(P).contrast == 0) == equal_pairs


class TestFeatures:
    def test_two_entry_case(self):
        f = glcm_features(np.array([[0.5, 0], [0, 0.5]]))
        assert f.contrast == 0 and f.dissimilarity == 0 and f.homogeneity == 1
        assert f.second_moment == 0.5
        assert f.entropy == pytest.approx(math.log(2), abs=1e-15)
        assert f.mean == 0.5 and f.variance == 0.25
        assert f.correlation == pytest.approx(1.0, abs=1e-15)

    def test_single_entry(self):
        P = np.zeros((8, 8))
        P[5, 5] = 1
        f = glcm_features(P)
        assert (f.entropy, f.second_moment, f.variance, f.correlation) == (0, 1, 0, 0)

    def test_against_naive_random(self, rng):
        for _ in range(1000):
            G = rng.integers(2, 9)
            P = rng.random((G, G)) * (rng.random((G, G)) < 0.6)
            if P.sum() == 0:
                P[0, 0] = 1
            P /= P.sum()
            got = glcm_features(P).as_array()
            np.testing.assert_allclose(got, naive_features(P.tolist()), atol=1e-12, rtol=0)

    def test_invariant_ranges(self, rng):
        for _ in range(200):
            f = glcm_features(compute_glcm(rng.integers(0, 8, (7, 7)), (1, 0), True, 8))
            assert 0 < f.homogeneity <= 1 and 0 < f.second_moment <= 1
            assert f.contrast >= 0 and f.dissimilarity >= 0 and f.entropy >= 0
            assert -1 <= f.correlation <= 1


class TestPatchVector:
    def test_segment_count(self, rng):
        gray = to_gray_quantized(normalize_patch(rng.integers(0, 256, (256, 256, 3))))
        assert segment_grid(gray).shape == (1296, 7, 7)
        assert patch_feature_vector(rng.integers(0, 256, (256, 256, 3))).shape == (16,)

    def test_against_segment_loop(self, rng):
        px = rng.integers(0, 256, (50, 50, 3))
        gray = to_gray_quantized(normalize_patch(px), 8)
        feats = []
        for y in range(0, 50 - 6, 7):
            for x in range(0, 50 - 6, 7):
                seg = gray[y:y + 7, x:x + 7].tolist()
                feats.append(naive_features(naive_glcm(seg, 1, 0, True, 8)))
        feats = np.array(feats)
        assert len(feats) == 49
        expected = np.concatenate([feats.mean(0), feats.var(0)])
        np.testing.assert_allclose(patch_feature_vector(px), expected, atol=1e-12)

    def test_constant_patch(self):
        v = patch_feature_vector(np.full((64, 64, 3), 120, np.uint8))
        assert np.all(v[8:] == 0)

    def test_too_small(self):
        with pytest.raises(ValueError):
            patch_feature_vector(np.zeros((6, 6, 3)))

    def test_mean_variance_only(self, rng):
        px = rng.integers(0, 256, (64, 64, 3))
        full = patch_feature_vector(px)
        short = patch_feature_vector(px, TextureConfig(aggregate="mean_variance"))
        np.testing.assert_array_equal(short, full[[0, 1, 8, 9]])

    def test_order_independent(self, rng):
        # reversing the segment order must not change the aggregate
        px = rng.integers(0, 256, (70, 70, 3))
        a = patch_feature_vector(px)
        b = patch_feature_vector(px[::-1, ::-1])  # reversed grid, offset flips sign
        c = patch_feature_vector(px[::-1, ::-1], TextureConfig(offset=(-1, 0)))
        np.testing.assert_allclose(a, c, atol=1e-12)
        assert b.shape == a.shape

    def test_cancer_contrast_higher(self, tmp_path):
        from lungcad.dataio import SynthConfig, synth_slide

        cfg = SynthConfig(1, 1024, 1024, 1, seed=11)
        cancer, normal = [], []
        i = 0
        while len(cancer) < 100 or len(normal) < 100:
            slide, ann = synth_slide(cfg, i)
            i += 1
            v = ann.polygons[0].vertices
            x0, y0 = v.min(0).astype(int)
            x1, y1 = v.max(0).astype(int)
            px = slide.pixels
            # 64x64 crops keep the run short; both textures are stationary
            for y in range(y0, y1 - 64, 64):
                for x in range(x0, x1 - 64, 64):
                    if len(cancer) < 100:
                        cancer.append(patch_feature_vector(px[y:y + 64, x:x + 64]))
            for y, x in ((0, 0), (0, 960), (960, 0), (960, 960)):
                crop = (x, y, x + 64, y + 64)
                if crop[2] <= x0 or crop[0] >= x1 or crop[3] <= y0 or crop[1] >= y1:
                    normal.append(patch_feature_vector(px[y:y + 64, x:x + 64]))
        contrast = FEATURE_NAMES.index("contrast")
        assert np.median([c[contrast] for c in cancer[:100]]) > np.median([n[contrast] for n in normal[:100]])


def test_feature_csv_round_trip(tmp_path, rng):
    rows = [(f"s_r0_c{i}", i % 2, rng.normal(size=16)) for i in range(5)]
    write_features(rows, tmp_path / "f.csv")
    ids, labels, X = read_features(tmp_path / "f.csv")
    assert ids == [r[0] for r in rows]
    np.testing.assert_array_equal(labels, [r[1] for r in rows])
    np.testing.assert_array_equal(X, np.array([r[2] for r in rows]))
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "patch_id,label," + ",".join(f"f{k}" for k in range(1, 17))
