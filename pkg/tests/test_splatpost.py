import numpy as np
import pytest

from conftest import grid_splats, single_splat
from tileworld.imagedist import StructuralImageDistance
from tileworld.isorender import render_splats
from tileworld.splatpost import (
    CutSet,
    DegenerateTileError,
    GroundDetectionError,
    TileTransform,
    detect_cuts,
    ground_height,
    normalize_tile,
    reorient,
)
from tileworld.splats import SplatSet

GRAY = (0.5, 0.5, 0.5)
GREEN = (0.05, 0.85, 0.1)


def bordered_tile(margin_left=0.1, margin_right=None, margin_near=None, margin_far=None,
                  pitch=1 / 96, color=GREEN, z=0.0):
    """Analytic rebased tile: gray border strip around a colored interior,
    on a fine splat lattice spanning [0, 1]^2."""
    margin_right = margin_left if margin_right is None else margin_right
    margin_near = margin_left if margin_near is None else margin_near
    margin_far = margin_left if margin_far is None else margin_far
    n = int(round(1.0 / pitch))
    xs = (np.arange(n) + 0.5) * pitch
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel(), np.full(n * n, z)], axis=1)
    inside = ((centers[:, 0] >= margin_left) & (centers[:, 0] <= 1 - margin_right)
              & (centers[:, 1] >= margin_near) & (centers[:, 1] <= 1 - margin_far))
    colors = np.where(inside[:, None], np.float32(color), np.float32(GRAY))
    m = len(centers)
    rot = np.zeros((m, 4), dtype=np.float32)
    rot[:, 0] = 1.0
    return SplatSet(centers, np.full((m, 3), pitch * 0.4), rot, np.ones(m), colors)


class TestDetectCuts:
    def test_recovers_symmetric_margin(self):
        tile = bordered_tile(0.1)
        cuts = detect_cuts(tile, tau=0.15, delta=1 / 64)
        for value in cuts.as_tuple():
            edge = value if value < 0.5 else 1 - value
            assert abs(edge - 0.1) <= 1 / 64
        assert not cuts.fallback

    def test_uniform_gray_falls_back_flagged(self):
        tile = bordered_tile(0.1, color=GRAY)  # no transition anywhere
        cuts = detect_cuts(tile, tau=0.15, delta=1 / 64)
        assert cuts.fallback == frozenset({"left", "right", "near", "far"})
        assert cuts.x_left < cuts.x_right

    def test_asymmetric_margins(self):
        tile = bordered_tile(margin_left=0.1, margin_right=0.2)
        cuts = detect_cuts(tile, tau=0.15, delta=1 / 64)
        assert abs(cuts.x_left - 0.1) <= 1 / 64
        assert abs((1 - cuts.x_right) - 0.2) <= 1 / 64

    def test_translation_equivariance(self):
        tile = bordered_tile(0.12)
        cuts = detect_cuts(tile, tau=0.15, delta=1 / 64)
        shifted = detect_cuts(tile.translated((0.31, -0.17, 0.0)), tau=0.15, delta=1 / 64)
        assert abs((shifted.x_left - cuts.x_left) - 0.31) <= 1 / 64
        assert abs((shifted.y_near - cuts.y_near) - (-0.17)) <= 1 / 64

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            detect_cuts(SplatSet.empty())


class TestNormalize:
    def cuts(self, lo, hi):
        return CutSet(x_left=lo, x_right=hi, y_near=lo, y_far=hi, tau=0.15, delta=1 / 64)

    def test_scale_from_cut_rectangle(self):
        tile = bordered_tile(0.1)
        out, tf = normalize_tile(tile, self.cuts(0.1, 0.9))
        assert tf.scale == pytest.approx(1 / 0.8)
        lo, hi = out.centers[:, 0].min(), out.centers[:, 0].max()
        assert lo >= 0.0 - 1e-6 and hi <= 1.0 + 1e-6

    def test_full_square_identity_scale(self):
        tile = bordered_tile(0.1)
        out, tf = normalize_tile(tile, self.cuts(0.0, 1.0))
        assert tf.scale == pytest.approx(1.0)
        assert len(out) == len(tile)

    def test_boundary_rule_min_closed_max_open(self):
        centers = np.array([[0.2, 0.5, 0.0], [0.8, 0.5, 0.0], [0.5, 0.5, 0.0]])
        splats = SplatSet(centers, np.full((3, 3), 0.01),
                          np.tile([1, 0, 0, 0], (3, 1)), np.ones(3), np.ones((3, 3)) * 0.5)
        out, _ = normalize_tile(splats, self.cuts(0.2, 0.8))
        # min-side center retained, max-side center dropped
        assert len(out) == 2

    def test_empty_crop_raises(self):
        tile = bordered_tile(0.1)
        far = CutSet(x_left=5.0, x_right=6.0, y_near=5.0, y_far=6.0, tau=0.1, delta=0.01)
        with pytest.raises(DegenerateTileError):
            normalize_tile(tile, far)

    def test_idempotent_with_full_square_cuts(self):
        tile = bordered_tile(0.1)
        once, _ = normalize_tile(tile, self.cuts(0.1, 0.9))
        twice, tf2 = normalize_tile(once, self.cuts(0.0, 1.0))
        assert tf2.scale == pytest.approx(1.0)
        assert np.allclose(once.centers, twice.centers, atol=1e-9)


class TestGround:
    def corner_tile(self, heights):
        pieces = []
        for (cx, cy), h in zip(((0, 0), (1, 0), (0, 1), (1, 1)), heights):
            if h is None:
                continue
            pieces.append(single_splat((np.clip(cx, 0.02, 0.98),
                                        np.clip(cy, 0.02, 0.98), h), scale=0.01))
        return SplatSet.concat(pieces)

    def test_mean_of_four_corners(self):
        tile = self.corner_tile([0.1, 0.1, 0.12, 0.1])
        assert ground_height(tile) == pytest.approx(0.105)

    def test_flat_tile_zero(self):
        assert ground_height(grid_splats(10, 10, z=0.0)) == pytest.approx(0.0)

    def test_missing_corner_uses_remaining(self):
        tile = self.corner_tile([0.2, 0.2, None, 0.2])
        assert ground_height(tile) == pytest.approx(0.2)

    def test_no_corner_splats_raises(self):
        lonely = single_splat((0.5, 0.5, 0.3))
        with pytest.raises(GroundDetectionError):
            ground_height(lonely)


def landmark_tile():
    """Ground sheet plus an off-center colored block: unique under rotation."""
    ground = grid_splats(12, 12, z=0.0, color=(0.2, 0.6, 0.2))
    block = grid_splats(3, 3, pitch=1 / 12, origin=(1 / 12, 1 / 12), z=0.1,
                        color=(0.9, 0.1, 0.1))
    tall = grid_splats(2, 2, pitch=1 / 12, origin=(8 / 12, 2 / 12), z=0.2,
                       color=(0.1, 0.2, 0.9))
    return SplatSet.concat([ground, block, tall])


class TestReorient:
    def test_round_trip_inverse(self, mid_camera):
        tile = landmark_tile()
        target = render_splats(tile, mid_camera.aimed_at((0.5, 0.5, 0.0)))
        for k in range(4):
            rotated = tile.rotated_quarter(k, (0.5, 0.5))
            rec = reorient(rotated, target, mid_camera)
            assert rec == (4 - k) % 4

    def test_symmetric_tile_breaks_tie_to_zero(self, mid_camera):
        tile = grid_splats(10, 10, z=0.0, color=(0.3, 0.3, 0.8))
        target = render_splats(tile, mid_camera.aimed_at((0.5, 0.5, 0.0)))
        assert reorient(tile, target, mid_camera) == 0

    def test_identity_target(self, mid_camera):
        tile = landmark_tile()
        target = render_splats(tile, mid_camera.aimed_at((0.5, 0.5, 0.0)))
        assert reorient(tile, target, mid_camera) == 0

    def test_argmin_invariant_under_monotone_transform(self, mid_camera):
        tile = landmark_tile()
        target = render_splats(tile, mid_camera.aimed_at((0.5, 0.5, 0.0)))
        base = StructuralImageDistance().distance
        cubed = lambda a, b: base(a, b) ** 3
        for k in range(4):
            rotated = tile.rotated_quarter(k, (0.5, 0.5))
            assert (reorient(rotated, target, mid_camera, d_img=base)
                    == reorient(rotated, target, mid_camera, d_img=cubed))

    def test_empty_target_rejected(self, mid_camera):
        tile = landmark_tile()
        empty = np.zeros((32, 32, 4), dtype=np.float32)
        with pytest.raises(ValueError):
            reorient(tile, empty, mid_camera)


class TestTransform:
    def test_apply_points_round_trip_json(self):
        cuts = CutSet(x_left=0.1, x_right=0.9, y_near=0.2, y_far=1.0,
                      tau=0.15, delta=1 / 64, fallback=frozenset({"left"}))
        tf = TileTransform(crop=cuts, scale=1.25,
                           translation=np.array([0.1, -0.2, 0.05]),
                           rotation_k=3, ground_height=0.12)
        back = TileTransform.from_json(tf.to_json())
        pts = np.random.default_rng(0).random((20, 3))
        assert np.allclose(tf.apply_points(pts), back.apply_points(pts))
        assert back.crop.fallback == cuts.fallback

    def test_rotation_about_slot_center(self):
        tf = TileTransform(crop=CutSet(0, 1, 0, 1, 0.15, 1 / 64), scale=1.0,
                           translation=np.zeros(3), rotation_k=1)
        out = tf.apply_points(np.array([[1.0, 0.5, 0.0]]))
        assert np.allclose(out, [[0.5, 1.0, 0.0]])
