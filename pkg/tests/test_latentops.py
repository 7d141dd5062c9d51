import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import brute_stitch
from tileworld.genproto.mock import MockLatentDenoiser
from tileworld.isorender import FramedImage, IsometricCamera, render_splats
from tileworld.latentops import (
    DegenerateCropError,
    DenoiseNumericsError,
    LatentFormatError,
    NoiseSchedule,
    SparseLatentVolume,
    VolumeFrame,
    band_mask,
    blend_band,
    crop_latents,
    cuts_to_voxels,
    load_slat,
    mean_denoise_step,
    rotate_quarter_z,
    save_slat,
    stitch,
    upsample_latents,
    upsample_occupancy,
)
from tileworld.splatpost import CutSet


def dense_volume(r=4, d=1, value=None, seed=0, frame=None) -> SparseLatentVolume:
    occ = np.ones((r, r, r), dtype=bool)
    n = r ** 3
    if value is not None:
        feats = np.full((n, d), value, dtype=np.float32)
    else:
        feats = np.random.default_rng(seed).standard_normal((n, d)).astype(np.float32)
    return SparseLatentVolume.from_occupancy(occ, feats, frame=frame)


def sparse_volume(r=64, d=4, fill=0.01, seed=0) -> SparseLatentVolume:
    rng = np.random.default_rng(seed)
    occ = rng.random((r, r, r)) < fill
    occ[r // 2, r // 2, r // 2] = True
    n = int(occ.sum())
    feats = rng.standard_normal((n, d)).astype(np.float32)
    return SparseLatentVolume.from_occupancy(occ, feats)


def make_cuts(left, right, near=None, far=None):
    near = left if near is None else near
    far = right if far is None else far
    return CutSet(x_left=left, x_right=right, y_near=near, y_far=far,
                  tau=0.15, delta=1 / 64)


class IdentityTowardDenoiser:
    """Linear pull toward fixed targets (no view conditioning)."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float32)
        self.num_views = 1

    def step(self, feats, t, schedule, view):
        rate = 1.0 / (schedule.steps - t)
        return feats + rate * (self.target - feats)


class TestSchedule:
    def test_linear_schedule(self):
        s = NoiseSchedule.linear(4, seed=9)
        assert s.levels == (1.0, 0.75, 0.5, 0.25, 0.0)
        assert s.steps == 4

    def test_must_decrease(self):
        with pytest.raises(ValueError):
            NoiseSchedule(levels=(1.0, 1.0, 0.0))

    def test_must_end_clean(self):
        with pytest.raises(ValueError):
            NoiseSchedule(levels=(1.0, 0.5, 0.1))


class TestCrop:
    def test_example_box(self):
        vol = dense_volume(r=64, d=2, seed=1)
        out = crop_latents(vol, make_cuts(0.125, 0.875))
        assert out.shape == (48, 48, 64)
        assert out.cell_count == 48 * 48 * 64

    def test_full_extent_identity(self):
        vol = dense_volume(r=8, d=2, seed=2)
        out = crop_latents(vol, make_cuts(0.0, 1.0))
        assert out.shape == vol.shape
        assert np.array_equal(out.features, vol.features)

    def test_rounding_half_away(self):
        cuts = make_cuts(0.1, 0.9)
        assert cuts_to_voxels(cuts, 64) == (6, 58, 6, 58)
        assert cuts_to_voxels(make_cuts(0.1015625, 0.9), 64)[0] == 7  # 6.5 -> 7

    def test_idempotent(self):
        vol = dense_volume(r=16, d=2, seed=3)
        cuts = make_cuts(0.25, 0.75)
        once = crop_latents(vol, cuts)
        # same world cuts expressed in the cropped volume = full extent
        again = crop_latents(SparseLatentVolume.from_occupancy(
            np.ones((8, 8, 8), bool)[:, :, :], np.zeros((512, 2), np.float32)),
            make_cuts(0.0, 1.0))
        assert again.shape == (8, 8, 8)
        assert once.shape == (8, 8, 16)

    def test_empty_crop_raises(self):
        vol = sparse_volume(r=16, fill=0.002, seed=4)
        with pytest.raises(DegenerateCropError):
            crop_latents(vol, make_cuts(0.49, 0.5, 0.0, 0.01))

    def test_frame_tracks_world_box(self):
        vol = dense_volume(r=64, d=1, seed=5)
        out = crop_latents(vol, make_cuts(0.125, 0.875))
        # first cell center: world (8.5/64, 8.5/64, 0.5/64)
        c0 = out.frame.voxel_centers(np.array([[0, 0, 0]]), out.shape)[0]
        assert np.allclose(c0, [8.5 / 64, 8.5 / 64, 0.5 / 64])


class TestStitch:
    def test_dense_profile(self):
        g1 = dense_volume(4, 1, value=1.0)
        g2 = dense_volume(4, 1, value=2.0)
        out = stitch(g1, g2)
        profile = out.dense()[:, 0, 0, 0]
        assert profile.tolist() == [1, 1, 2, 2]

    def test_translation_symmetric_content_matches_at_seam(self):
        r = 8
        base = np.random.default_rng(7).standard_normal((r, r, 2)).astype(np.float32)
        feats4 = np.broadcast_to(base[None], (r, r, r, 2))  # x-invariant
        occ = np.ones((r, r, r), bool)
        vol = SparseLatentVolume.from_occupancy(occ, feats4.reshape(-1, 2))
        out = stitch(vol, vol)
        d = out.dense()
        assert np.array_equal(d[r // 2 - 1], d[r // 2])

    def test_ns_equals_ew_of_rotated_inputs(self):
        g1 = dense_volume(4, 2, seed=11)
        g2 = dense_volume(4, 2, seed=12)
        ns = stitch(g1, g2, orientation="ns")
        ew = stitch(rotate_quarter_z(g1, 3), rotate_quarter_z(g2, 3), orientation="ew")
        assert np.array_equal(ns.features, ew.features)
        assert np.array_equal(ns.coords, ew.coords)

    def test_cell_count_preserved(self):
        a = sparse_volume(r=16, d=2, fill=0.1, seed=13)
        b = sparse_volume(r=16, d=2, fill=0.1, seed=14)
        out = stitch(a, b)
        right = (a.coords[:, 0] >= 8).sum()
        left = (b.coords[:, 0] < 8).sum()
        assert out.cell_count == right + left

    @pytest.mark.parametrize("r", [4, 8, 16])
    def test_matches_brute_force(self, r):
        g1 = dense_volume(r, 3, seed=r)
        g2 = dense_volume(r, 3, seed=r + 100)
        out = stitch(g1, g2)
        assert np.array_equal(out.dense(), brute_stitch(g1.dense(), g2.dense()))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(Exception):
            stitch(dense_volume(4, 1), dense_volume(8, 1))


class TestBlendBand:
    def test_band_indices_r8(self):
        vol = sparse_volume(r=64, d=2, fill=0.02, seed=20)
        mask = band_mask(vol, 8)
        xs = np.unique(vol.coords[mask][:, 0])
        assert xs.min() >= 24 and xs.max() <= 40
        full = dense_volume(r=64, d=1, value=0.0)
        planes = np.unique(full.coords[band_mask(full, 8)][:, 0])
        assert len(planes) == 17

    def test_identity_toward_original_is_fixed_point(self):
        vol = sparse_volume(r=16, d=2, fill=0.2, seed=21)
        handle = IdentityTowardDenoiser(vol.features)
        out = blend_band(vol, 4, handle, NoiseSchedule.linear(8, seed=1))
        assert np.allclose(out.features, vol.features, atol=1e-6)

    def test_outside_band_bit_identical(self):
        vol = sparse_volume(r=64, d=3, fill=0.01, seed=22)
        target = np.random.default_rng(23).standard_normal(vol.features.shape)
        handle = IdentityTowardDenoiser(target)
        out = blend_band(vol, 8, handle, NoiseSchedule.linear(8, seed=2))
        outside = ~band_mask(vol, 8)
        assert np.array_equal(out.features[outside], vol.features[outside])
        assert np.array_equal(out.occupancy, vol.occupancy)
        inside = band_mask(vol, 8)
        assert np.isfinite(out.features[inside]).all()
        assert np.allclose(out.features[inside], target[inside], atol=1e-5)

    def test_r_zero_denoises_single_plane(self):
        vol = dense_volume(r=8, d=1, seed=24)
        target = np.zeros_like(vol.features)
        out = blend_band(vol, 0, IdentityTowardDenoiser(target),
                         NoiseSchedule.linear(6, seed=3))
        mid = vol.coords[:, 0] == 4
        assert np.allclose(out.features[mid], 0.0, atol=1e-6)
        assert np.array_equal(out.features[~mid], vol.features[~mid])

    def test_band_too_wide_rejected(self):
        vol = dense_volume(r=8, d=1)
        with pytest.raises(ValueError):
            blend_band(vol, 4, IdentityTowardDenoiser(vol.features),
                       NoiseSchedule.linear(4))

    def test_non_finite_output_raises_with_step(self):
        vol = dense_volume(r=8, d=1, seed=25)

        class BadDenoiser:
            num_views = 1

            def step(self, feats, t, schedule, view):
                return np.full_like(feats, np.nan)

        with pytest.raises(DenoiseNumericsError) as exc:
            blend_band(vol, 2, BadDenoiser(), NoiseSchedule.linear(4, seed=4))
        assert exc.value.step == 0


def tiny_view(color=(0.8, 0.2, 0.1), size=64):
    cam = IsometricCamera.default(image_size=size).aimed_at((0.5, 0.5, 0.5))
    pixels = np.zeros((size, size, 4), dtype=np.float32)
    pixels[:] = (*color, 1.0)
    return FramedImage(pixels=pixels, mask=np.zeros((size, size), bool), camera=cam)


class TestUpsample:
    @pytest.mark.parametrize("s", [32, 41, 48, 60])
    def test_solid_box_exact(self, s):
        occ = np.ones((s, s, s), dtype=bool)
        up = upsample_occupancy(occ, (64, 64, 64))
        assert up.all()

    def test_partial_box_nearest_neighbor(self):
        occ = np.zeros((4, 4, 4), dtype=bool)
        occ[:2] = True
        up = upsample_occupancy(occ, (8, 8, 8))
        assert up[:4].all() and not up[4:].any()

    def test_denoises_to_view_targets(self):
        vol = dense_volume(r=8, d=4, seed=30,
                           frame=VolumeFrame(origin=(0, 0, 0)))
        view = tiny_view()
        out = upsample_latents(vol, [view], MockLatentDenoiser(),
                               NoiseSchedule.linear(8, seed=5), out_resolution=16)
        assert out.shape == (16, 16, 16)
        # visible cells converged to the view color
        handle = MockLatentDenoiser().make_handle([view], out)
        vis = handle.visible[0]
        assert vis.any()
        assert np.allclose(out.features[vis, :3], (0.8, 0.2, 0.1), atol=1e-4)

    def test_two_identical_views_equal_one(self):
        vol = dense_volume(r=8, d=4, seed=31)
        view = tiny_view()
        one = upsample_latents(vol, [view], MockLatentDenoiser(),
                               NoiseSchedule.linear(6, seed=6), out_resolution=8)
        two = upsample_latents(vol, [view, view], MockLatentDenoiser(),
                               NoiseSchedule.linear(6, seed=6), out_resolution=8)
        assert np.allclose(one.features, two.features, atol=1e-5)

    def test_zero_views_rejected(self):
        vol = dense_volume(r=8, d=2)
        with pytest.raises(ValueError):
            upsample_latents(vol, [], MockLatentDenoiser(), NoiseSchedule.linear(4))


class TestFrames:
    def test_rotation_preserves_world_positions(self):
        vol = sparse_volume(r=8, d=2, fill=0.2, seed=40)
        world = vol.frame.voxel_centers(vol.coords, vol.shape)
        world_set = {tuple(np.round(p, 9)) for p in world}
        for k in (1, 2, 3):
            rot = rotate_quarter_z(vol, k)
            back = rot.frame.voxel_centers(rot.coords, rot.shape)
            assert {tuple(np.round(p, 9)) for p in back} == world_set

    def test_four_rotations_identity(self):
        vol = sparse_volume(r=8, d=2, fill=0.2, seed=41)
        out = rotate_quarter_z(vol, 4)
        assert np.array_equal(out.coords, vol.coords)
        assert np.array_equal(out.features, vol.features)
        assert np.allclose(out.frame.matrix(), vol.frame.matrix())

    def test_world_to_fraction_inverse(self):
        frame = VolumeFrame(origin=(2.0, 3.0, -0.5),
                            axes=((0.0, 1.5, 0.0), (-1.5, 0.0, 0.0), (0.0, 0.0, 2.0)))
        coords = np.array([[1, 2, 3], [0, 0, 0]])
        shape = (4, 4, 4)
        world = frame.voxel_centers(coords, shape)
        frac = frame.world_to_fraction(world)
        assert np.allclose(frac, (coords + 0.5) / np.array(shape))


class TestSlatFormat:
    def test_round_trip(self):
        vol = sparse_volume(r=16, d=5, fill=0.05, seed=50)
        buf = io.BytesIO()
        save_slat(vol, buf)
        buf.seek(0)
        back = load_slat(buf)
        assert back.shape == vol.shape
        assert np.array_equal(back.coords, vol.coords)
        assert np.array_equal(back.features, vol.features)
        assert np.array_equal(back.occupancy, vol.occupancy)

    def test_bad_magic(self):
        with pytest.raises(LatentFormatError):
            load_slat(io.BytesIO(b"XXXX" + b"\x00" * 40))

    def test_non_cubic_rejected(self):
        vol = crop_latents(dense_volume(r=8, d=1), make_cuts(0.25, 0.75))
        with pytest.raises(LatentFormatError):
            save_slat(vol, io.BytesIO())

    def test_cells_must_match_occupancy(self):
        occ = np.zeros((4, 4, 4), bool)
        occ[0, 0, 0] = True
        vol = SparseLatentVolume.from_occupancy(occ, np.zeros((1, 2), np.float32))
        vol.coords = np.array([[1, 1, 1]], dtype=np.int32)
        with pytest.raises(Exception):
            vol.check()
