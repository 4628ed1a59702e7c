import numpy as np
import pytest

from defectgen import (
    AlignmentError,
    AnomalyExemplar,
    ParameterError,
    align,
    constrained_center,
    extract_keypoints,
    foreground_mask,
    relocate_mask,
    similarity_map,
)
from defectgen.cama import PatchDescriptor, argmax_point, mask_centroid, rasterize_line, translate_mask
from defectgen.imgio import save_mask
from defectgen.synthetic import make_object_scene, make_texture


def shifted_pair(rng, dx, dy, size=24, margin=12):
    """Two crops of one non-repeating texture, offset by (dx, dy)."""
    big = make_texture(rng, size + 2 * margin, smooth=0.6)
    a = big[margin:margin + size, margin:margin + size]
    n = big[margin - dy:margin - dy + size, margin - dx:margin - dx + size]
    return a[None], n[None]


class TestExtractKeypoints:
    def test_centered_square(self):
        mask = np.zeros((5, 5))
        mask[1:4, 1:4] = 1.0
        kp = extract_keypoints(mask)
        assert kp.center == (2, 2)
        assert kp.upper == (2, 1)
        assert kp.lower == (2, 3)

    def test_single_pixel_degenerate(self):
        mask = np.zeros((6, 6))
        mask[4, 4] = 1.0
        with pytest.warns(UserWarning):
            kp = extract_keypoints(mask)
        assert kp.center == kp.upper == kp.lower == (4, 4)

    def test_empty_mask(self):
        with pytest.raises(ParameterError):
            extract_keypoints(np.zeros((4, 4)))

    def test_hollow_column_uses_nearest_filled_column(self):
        # two disjoint vertical bars: the centroid column between them
        # carries no mask pixel
        mask = np.zeros((9, 9))
        mask[2:8, 1:3] = 1.0
        mask[3:6, 6:8] = 1.0
        cx = int(np.rint(np.nonzero(mask)[1].mean()))
        assert not mask[:, cx].any()  # premise: hollow centroid column

        kp = extract_keypoints(mask)
        # exhaustive oracle over columns containing mask pixels
        cols = sorted(set(np.nonzero(mask)[1].tolist()))
        best = min(cols, key=lambda x: (abs(x - cx), x))
        assert kp.center[0] == best
        ys = np.nonzero(mask[:, best])[0]
        assert kp.upper == (best, ys.min())
        assert kp.lower == (best, ys.max())
        assert kp.center[1] == int(np.rint((ys.min() + ys.max()) / 2))

    @pytest.mark.filterwarnings("ignore:degenerate keypoint")
    def test_shared_x_invariant(self, rng):
        for _ in range(20):
            mask = np.zeros((16, 16))
            h, w = rng.integers(1, 6, size=2)
            y0, x0 = rng.integers(0, 10, size=2)
            mask[y0:y0 + h, x0:x0 + w] = 1.0
            kp = extract_keypoints(mask)
            assert kp.center[0] == kp.upper[0] == kp.lower[0]
            assert kp.upper[1] <= kp.center[1] <= kp.lower[1]


class TestSimilarityMap:
    def test_self_match_peaks_at_keypoint(self, rng):
        img = make_texture(rng, 20, smooth=0.5)[None]
        s = similarity_map((9, 11), img, img)
        assert argmax_point(s) == (9, 11)
        assert s[11, 9] == pytest.approx(1.0, abs=1e-12)

    def test_translation_moves_argmax(self, rng):
        dx, dy = 4, -3
        img_a, img_n = shifted_pair(rng, dx, dy)
        kp = (10, 12)
        s = similarity_map(kp, img_a, img_n)
        assert argmax_point(s) == (kp[0] + dx, kp[1] + dy)

    def test_constant_normal_image_rejected(self, rng):
        img_a = make_texture(rng, 16, smooth=0.5)[None]
        with pytest.raises(AlignmentError):
            similarity_map((8, 8), img_a, np.full((1, 16, 16), 0.5))

    def test_degenerate_keypoint_descriptor_rejected(self, rng):
        # flat region around the keypoint in the anomaly image
        img_a = make_texture(rng, 16, smooth=0.5)[None].copy()
        img_a[0, 4:13, 4:13] = 0.3
        img_n = make_texture(rng, 16, smooth=0.5)[None]
        with pytest.raises(AlignmentError, match=r"\(8, 8\)"):
            similarity_map((8, 8), img_a, img_n)

    def test_descriptor_must_fit(self):
        with pytest.raises(Exception):
            PatchDescriptor(k=7).at(np.zeros((1, 4, 4)), (1, 1))

    def test_patch_size_validation(self):
        with pytest.raises(ParameterError):
            PatchDescriptor(k=4)


class TestRasterizeLine:
    def test_inclusive_endpoints(self):
        px = rasterize_line((2, 3), (2, 3))
        assert px == [(2, 3)]

    def test_vertical(self):
        assert rasterize_line((1, 1), (1, 4)) == [(1, 1), (1, 2), (1, 3), (1, 4)]

    def test_connected_and_monotone(self, rng):
        for _ in range(50):
            p0 = tuple(rng.integers(0, 32, size=2))
            p1 = tuple(rng.integers(0, 32, size=2))
            px = rasterize_line(p0, p1)
            assert px[0] == tuple(int(v) for v in p0)
            assert px[-1] == tuple(int(v) for v in p1)
            steps = np.abs(np.diff(np.array(px), axis=0))
            assert steps.max(initial=0) <= 1  # 8-connected path


class TestConstrainedCenter:
    def test_vertical_line_increasing_scores(self):
        s = np.tile(np.arange(8.0)[:, None], (1, 8))  # grows downward
        fg = np.ones((8, 8))
        res = constrained_center(s, (3, 1), (3, 5), fg)
        assert res.point == (3, 5)
        assert not res.fallback

    def test_fallback_to_global_argmax(self):
        s = np.zeros((10, 10))
        s[3, 7] = 5.0
        fg = np.zeros((10, 10))
        fg[3, 7] = 1.0
        res = constrained_center(s, (0, 0), (0, 9), fg)  # line misses fg
        assert res.point == (7, 3)
        assert res.fallback

    def test_empty_foreground_rejected(self):
        with pytest.raises(AlignmentError):
            constrained_center(np.zeros((4, 4)), (0, 0), (3, 3), np.zeros((4, 4)))

    def test_matches_exhaustive_scan(self, rng):
        # oracle: scan the rasterized segment with explicit tie rules
        for trial in range(50):
            r = np.random.default_rng(trial)
            s = r.standard_normal((16, 16))
            fg = (r.random((16, 16)) < 0.6).astype(float)
            fg[0, 0] = 1.0  # never empty
            q_u = tuple(int(v) for v in r.integers(0, 16, size=2))
            q_l = tuple(int(v) for v in r.integers(0, 16, size=2))
            res = constrained_center(s, q_u, q_l, fg)
            cands = [(x, y) for x, y in rasterize_line(q_u, q_l) if fg[y, x] == 1.0]
            if cands:
                best = sorted(cands, key=lambda p: (-s[p[1], p[0]], p[1], p[0]))[0]
                assert not res.fallback
            else:
                onfg = [(x, y) for y, x in zip(*np.nonzero(fg == 1.0))]
                best = sorted(onfg, key=lambda p: (-s[p[1], p[0]], p[1], p[0]))[0]
                assert res.fallback
            assert res.point == best


class TestRelocateMask:
    def test_identity_translation(self):
        mask = np.zeros((8, 8))
        mask[2:5, 3:6] = 1.0
        cx, cy = mask_centroid(mask)
        res = relocate_mask(mask, (int(np.rint(cx)), int(np.rint(cy))), np.ones((8, 8)))
        np.testing.assert_array_equal(res, mask)

    def test_off_frame_rejected(self):
        mask = np.zeros((8, 8))
        mask[3:5, 3:5] = 1.0
        with pytest.raises(AlignmentError):
            relocate_mask(mask, (100, 100), np.ones((8, 8)))

    def test_hand_computed_shift_and_clip(self):
        # 4x4 block shifted by (+2, -1) against a half-frame foreground
        mask = np.zeros((8, 8))
        mask[2:6, 1:5] = 1.0  # centroid (2.5, 3.5) -> rounds to (2, 4)
        fg = np.zeros((8, 8))
        fg[:, :6] = 1.0
        res = relocate_mask(mask, (4, 3), fg)
        expected = np.zeros((8, 8))
        expected[1:5, 3:7] = 1.0   # shifted by (+2, -1)
        expected = expected * fg   # clipped by the foreground
        np.testing.assert_array_equal(res, expected)

    def test_never_grows_and_stays_inside_fg(self, rng):
        for _ in range(30):
            mask = np.zeros((12, 12))
            y0, x0 = rng.integers(0, 8, size=2)
            mask[y0:y0 + 4, x0:x0 + 4] = 1.0
            fg = (rng.random((12, 12)) < 0.7).astype(float)
            target = tuple(int(v) for v in rng.integers(0, 12, size=2))
            try:
                out = relocate_mask(mask, target, fg)
            except AlignmentError:
                continue
            assert out.sum() <= mask.sum()
            assert (out <= fg).all()


class TestForegroundMask:
    def test_bright_object_support(self, rng):
        img, support = make_object_scene(rng, 16)
        np.testing.assert_array_equal(foreground_mask(img), support)

    def test_uniform_image_low_confidence(self):
        with pytest.warns(UserWarning):
            fg = foreground_mask(np.full((1, 8, 8), 0.4))
        np.testing.assert_array_equal(fg, np.ones((8, 8)))

    def test_external_mask_verbatim(self, tmp_path):
        mask = np.zeros((6, 6))
        mask[2:4, 2:4] = 1.0
        path = tmp_path / "fg.png"
        save_mask(path, mask)
        np.testing.assert_array_equal(foreground_mask(None, mask_path=path), mask)

    def test_largest_component_kept(self):
        img = np.full((1, 12, 12), 0.05)
        img[0, 1:3, 1:3] = 0.9     # small blob
        img[0, 5:11, 5:11] = 0.9   # large blob wins
        fg = foreground_mask(img)
        expected = np.zeros((12, 12))
        expected[5:11, 5:11] = 1.0
        np.testing.assert_array_equal(fg, expected)


class TestAlign:
    def make_exemplar(self, rng, size=24):
        img = make_texture(rng, size, smooth=0.6)[None]
        mask = np.zeros((size, size))
        mask[8:13, 9:12] = 1.0
        return AnomalyExemplar(image=img, mask=mask)

    def test_self_alignment(self, rng):
        ex = self.make_exemplar(rng)
        fg = np.zeros((24, 24))
        fg[4:20, 4:20] = 1.0
        res = align(ex.mask, ex, ex.image, foreground=fg)
        np.testing.assert_array_equal(res.mask, ex.mask * fg)
        assert not res.fallback

    @pytest.mark.parametrize("shift", [(3, 2), (-4, 1), (0, -5), (6, 0)])
    def test_translation_recovery(self, shift):
        dx, dy = shift
        r = np.random.default_rng(dx * 19 + dy * 7 + 100)
        img_a, img_n = shifted_pair(r, dx, dy)
        mask = np.zeros((24, 24))
        mask[9:14, 10:13] = 1.0
        ex = AnomalyExemplar(image=img_a, mask=mask)
        res = align(mask, ex, img_n, foreground=np.ones((24, 24)))
        np.testing.assert_array_equal(res.mask, translate_mask(mask, (dx, dy)))

    def test_blank_normal_image_fails(self, rng):
        ex = self.make_exemplar(rng)
        with pytest.raises(AlignmentError):
            align(ex.mask, ex, np.full((1, 24, 24), 0.2))

    def test_result_inside_foreground(self, rng):
        for trial in range(10):
            r = np.random.default_rng(trial)
            img_a, img_n = shifted_pair(r, int(r.integers(-4, 5)), int(r.integers(-4, 5)))
            mask = np.zeros((24, 24))
            mask[10:14, 9:13] = 1.0
            ex = AnomalyExemplar(image=img_a, mask=mask)
            fg = np.zeros((24, 24))
            fg[3:21, 3:21] = 1.0
            try:
                res = align(mask, ex, img_n, foreground=fg)
            except AlignmentError:
                continue
            assert (res.mask <= fg).all()
            assert res.mask.sum() <= mask.sum()
