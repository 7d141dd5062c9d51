"""Sparse latent volume operations: crop, seam stitch, band-masked denoising
and multi-view-conditioned upsampling.

Latents are D-channel features living on the active cells of a voxel grid.
Stitching concatenates the facing halves of two tiles' volumes so the seam
lies on the x = R/2 mid-plane; blending re-denoises only the band
|x - R/2| <= r while every step resets the outside region to a re-noised
copy of the original, which makes the outside bit-identical at the final
(clean) step.  Occupancy is held fixed throughout.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from tileworld.seeding import derive_seed
from tileworld.splatpost import CutSet

SLAT_MAGIC = b"SLAT"
SLAT_VERSION = 1


class LatentFormatError(ValueError):
    """Raised when a SLAT stream is malformed."""


class LatentShapeError(ValueError):
    """Mismatched grid resolutions or channel counts."""


class DenoiseNumericsError(RuntimeError):
    """Denoiser produced non-finite values; carries the step index."""

    def __init__(self, step: int):
        super().__init__(f"non-finite denoiser output at step {step}")
        self.step = step


class DegenerateCropError(RuntimeError):
    """Crop produced an empty volume."""


@dataclass(frozen=True)
class VolumeFrame:
    """Affine map from voxel index space to world space.

    A voxel (i, j, k) in a volume of a given shape has world center
    ``origin + axes @ ((i, j, k) + 0.5) / shape``.  Columns of ``axes`` are
    the world vectors spanned by each index axis, so rotated or cropped
    volumes keep an exact record of where their cells live.
    """

    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axes: tuple[tuple[float, float, float], ...] = (
        (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def matrix(self) -> np.ndarray:
        return np.asarray(self.axes, dtype=np.float64).T.copy()

    def voxel_centers(self, coords: np.ndarray, shape: Sequence[int]) -> np.ndarray:
        f = (np.asarray(coords, dtype=np.float64) + 0.5) / np.asarray(shape, dtype=np.float64)
        return np.asarray(self.origin, dtype=np.float64) + f @ self.matrix().T

    def voxel_size(self, shape: Sequence[int]) -> np.ndarray:
        m = self.matrix()
        return np.linalg.norm(m, axis=0) / np.asarray(shape, dtype=np.float64)

    def world_to_fraction(self, points: np.ndarray) -> np.ndarray:
        inv = np.linalg.inv(self.matrix())
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return (p - np.asarray(self.origin, dtype=np.float64)) @ inv.T

    def transformed(self, matrix: np.ndarray, translation) -> "VolumeFrame":
        """Compose a world-space affine map (p -> matrix @ p + translation)."""
        m = np.asarray(matrix, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        new_origin = m @ np.asarray(self.origin, dtype=np.float64) + t
        new_axes = m @ self.matrix()
        return VolumeFrame(origin=tuple(new_origin.tolist()),
                           axes=tuple(map(tuple, new_axes.T.tolist())))


@dataclass
class SparseLatentVolume:
    """Features on the active cells of a (possibly non-cubic) voxel grid."""

    shape: tuple[int, int, int]
    coords: np.ndarray        # (N, 3) int32, lexicographically sorted
    features: np.ndarray      # (N, D) float32, finite
    occupancy: np.ndarray     # bool grid of ``shape``
    frame: VolumeFrame = field(default_factory=VolumeFrame)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int32).reshape(-1, 3)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.occupancy = np.ascontiguousarray(self.occupancy, dtype=bool)
        if self.occupancy.shape != self.shape:
            raise LatentShapeError("occupancy shape mismatch")
        if self.features.ndim != 2 or len(self.features) != len(self.coords):
            raise LatentShapeError("features must be (N, D) aligned with coords")
        order = np.lexsort((self.coords[:, 2], self.coords[:, 1], self.coords[:, 0]))
        if not np.array_equal(order, np.arange(len(order))):
            self.coords = self.coords[order]
            self.features = self.features[order]

    def check(self) -> None:
        """Verify cells == active occupancy voxels exactly and finiteness."""
        active = np.argwhere(self.occupancy).astype(np.int32)
        if active.shape != self.coords.shape or not np.array_equal(active, self.coords):
            raise LatentShapeError("cells do not match occupancy active set")
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite feature values")

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def cell_count(self) -> int:
        return len(self.coords)

    @property
    def is_cubic(self) -> bool:
        return self.shape[0] == self.shape[1] == self.shape[2]

    @property
    def resolution(self) -> int:
        if not self.is_cubic:
            raise LatentShapeError(f"volume of shape {self.shape} is not cubic")
        return self.shape[0]

    @classmethod
    def from_occupancy(cls, occupancy: np.ndarray, features: np.ndarray,
                       frame: VolumeFrame | None = None) -> "SparseLatentVolume":
        occ = np.ascontiguousarray(occupancy, dtype=bool)
        coords = np.argwhere(occ).astype(np.int32)
        return cls(shape=occ.shape, coords=coords, features=features,
                   occupancy=occ, frame=frame or VolumeFrame())

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape + (self.channels,), dtype=np.float32)
        out[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = self.features
        return out

    def with_features(self, features: np.ndarray) -> "SparseLatentVolume":
        return SparseLatentVolume(shape=self.shape, coords=self.coords.copy(),
                                  features=np.ascontiguousarray(features, dtype=np.float32),
                                  occupancy=self.occupancy.copy(), frame=self.frame)

    def select(self, mask: np.ndarray) -> "SparseLatentVolume":
        """Sub-volume with only the masked cells active (same shape/frame)."""
        occ = np.zeros(self.shape, dtype=bool)
        kept = self.coords[mask]
        occ[kept[:, 0], kept[:, 1], kept[:, 2]] = True
        return SparseLatentVolume(shape=self.shape, coords=kept,
                                  features=self.features[mask], occupancy=occ,
                                  frame=self.frame)


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing noise levels over T steps; the final level is 0."""

    levels: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ValueError("schedule needs at least two levels")
        if any(b >= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must strictly decrease")
        if self.levels[-1] != 0.0:
            raise ValueError("final level must be 0 (clean)")

    @property
    def steps(self) -> int:
        return len(self.levels) - 1

    @classmethod
    def linear(cls, steps: int = 32, seed: int = 0) -> "NoiseSchedule":
        return cls(levels=tuple(1.0 - t / steps for t in range(steps + 1)), seed=seed)


class DenoiserHandle(Protocol):
    """One conditioned denoiser: per-view step plus latent decoding."""

    @property
    def num_views(self) -> int: ...

    def step(self, features: np.ndarray, t: int, schedule: NoiseSchedule,
             view: int) -> np.ndarray: ...


def mean_denoise_step(handle: DenoiserHandle, features: np.ndarray, t: int,
                      schedule: NoiseSchedule) -> np.ndarray:
    """Arithmetic mean of the handle's per-view updates."""
    n = handle.num_views
    if n < 1:
        raise ValueError("denoiser handle has no conditioning views")
    acc = None
    for view in range(n):
        update = np.asarray(handle.step(features, t, schedule, view), dtype=np.float32)
        acc = update if acc is None else acc + update
    return (acc / np.float32(n)).astype(np.float32)


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else int(math.ceil(x - 0.5))


def cuts_to_voxels(cuts: CutSet, resolution: int) -> tuple[int, int, int, int]:
    """World cuts to voxel indices: multiply by R, round half away from zero."""
    return tuple(_round_half_away(c * resolution) for c in cuts.as_tuple())


def crop_latents(volume: SparseLatentVolume, cuts: CutSet) -> SparseLatentVolume:
    """Drop cells outside the rounded crop box and re-index to the tight box
    (vertical extent is untouched; the result is generally non-cubic)."""
    r = volume.resolution
    x0, x1, y0, y1 = cuts_to_voxels(cuts, r)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, r), min(y1, r)
    if x1 <= x0 or y1 <= y0:
        raise DegenerateCropError(f"crop box [{x0},{x1})x[{y0},{y1}) is empty")
    c = volume.coords
    keep = (c[:, 0] >= x0) & (c[:, 0] < x1) & (c[:, 1] >= y0) & (c[:, 1] < y1)
    if not keep.any():
        raise DegenerateCropError("no cells inside the crop box")
    new_shape = (x1 - x0, y1 - y0, r)
    new_coords = c[keep] - np.array([x0, y0, 0], dtype=np.int32)
    occ = np.zeros(new_shape, dtype=bool)
    occ[new_coords[:, 0], new_coords[:, 1], new_coords[:, 2]] = True

    # The crop box keeps its world position: shift the origin, shrink axes.
    m = volume.frame.matrix()
    lo = np.array([x0 / r, y0 / r, 0.0])
    span = np.array([(x1 - x0) / r, (y1 - y0) / r, 1.0])
    new_origin = np.asarray(volume.frame.origin) + m @ lo
    new_axes = m * span[None, :]
    frame = VolumeFrame(origin=tuple(new_origin.tolist()),
                        axes=tuple(map(tuple, new_axes.T.tolist())))
    return SparseLatentVolume(shape=new_shape, coords=new_coords,
                              features=volume.features[keep], occupancy=occ,
                              frame=frame)


def rotate_quarter_z(volume: SparseLatentVolume, k: int) -> SparseLatentVolume:
    """Rotate cells k*90 degrees counter-clockwise about the vertical index
    axis; the frame is rotated along, so world positions are preserved."""
    k = int(k) % 4
    out = volume
    for _ in range(k):
        sx, sy, sz = out.shape
        c = out.coords
        new_coords = np.stack([sy - 1 - c[:, 1], c[:, 0], c[:, 2]], axis=1).astype(np.int32)
        new_shape = (sy, sx, sz)
        occ = np.zeros(new_shape, dtype=bool)
        occ[new_coords[:, 0], new_coords[:, 1], new_coords[:, 2]] = True
        # Center fractions map (fx, fy) -> (1 - fy, fx); invert to re-express
        # the same world box: origin' = origin + col_y, axes' = (-col_y, col_x).
        m = out.frame.matrix()
        new_origin = np.asarray(out.frame.origin) + m[:, 1]
        new_axes = np.stack([-m[:, 1], m[:, 0], m[:, 2]], axis=1)
        frame = VolumeFrame(origin=tuple(new_origin.tolist()),
                            axes=tuple(map(tuple, new_axes.T.tolist())))
        out = SparseLatentVolume(shape=new_shape, coords=new_coords,
                                 features=out.features.copy(), occupancy=occ,
                                 frame=frame)
    return out


def stitch(vol1: SparseLatentVolume, vol2: SparseLatentVolume,
           orientation: str = "ew") -> SparseLatentVolume:
    """Concatenate the facing halves of two cubic volumes about x = R/2.

    ``ew``: vol1 is the west tile, vol2 the east tile; the east half of vol1
    lands on x < R/2 and the west half of vol2 on x >= R/2.  ``ns`` pairs are
    first rotated into this frame (vol1 = lower-y tile); the result stays in
    the rotated frame, whose ``frame`` field still maps cells to world space.
    """
    if orientation == "ns":
        # Clockwise turn sends the shared +y edge onto +x.
        vol1 = rotate_quarter_z(vol1, 3)
        vol2 = rotate_quarter_z(vol2, 3)
    elif orientation != "ew":
        raise ValueError(f"unknown orientation {orientation!r}")
    r = vol1.resolution
    if vol2.resolution != r:
        raise LatentShapeError("stitched volumes must share a resolution")
    if vol1.channels != vol2.channels:
        raise LatentShapeError("stitched volumes must share a channel count")
    half = r // 2

    c1, c2 = vol1.coords, vol2.coords
    keep1 = c1[:, 0] >= half
    keep2 = c2[:, 0] < half
    nc1 = c1[keep1] - np.array([half, 0, 0], dtype=np.int32)
    nc2 = c2[keep2] + np.array([half, 0, 0], dtype=np.int32)
    coords = np.concatenate([nc1, nc2])
    feats = np.concatenate([vol1.features[keep1], vol2.features[keep2]])
    occ = np.zeros((r, r, r), dtype=bool)
    occ[coords[:, 0], coords[:, 1], coords[:, 2]] = True

    # World box: east half of vol1 followed by west half of vol2 along x.
    m = vol1.frame.matrix()
    origin = np.asarray(vol1.frame.origin) + m[:, 0] * 0.5
    axes = m.copy()
    frame = VolumeFrame(origin=tuple(origin.tolist()),
                        axes=tuple(map(tuple, axes.T.tolist())))
    return SparseLatentVolume(shape=(r, r, r), coords=coords, features=feats,
                              occupancy=occ, frame=frame)


def band_mask(volume: SparseLatentVolume, r_band: int) -> np.ndarray:
    """Boolean per-cell mask for |x - R/2| <= r (inclusive at both ends)."""
    half = volume.resolution // 2
    return np.abs(volume.coords[:, 0] - half) <= r_band


def blend_band(volume: SparseLatentVolume, r_band: int, handle: DenoiserHandle,
               schedule: NoiseSchedule) -> SparseLatentVolume:
    """Re-denoise only the seam band of a stitched volume.

    Inside |x - R/2| <= r the features follow the denoiser from a fresh
    noise init; outside they are reset each step to the original features
    re-noised at the step's level (fixed per-call seed), so the final step
    restores the outside bit-identically.  Occupancy is never touched.
    """
    if not (0 <= r_band < volume.resolution // 2):
        raise ValueError(f"band half-width {r_band} must satisfy 0 <= r < R/2")
    inside = band_mask(volume, r_band)
    original = volume.features
    rng_init = np.random.Generator(np.random.Philox(derive_seed(schedule.seed, "band-init")))
    current = rng_init.standard_normal(original.shape).astype(np.float32)

    for t in range(schedule.steps):
        stepped = mean_denoise_step(handle, current, t, schedule)
        if not np.isfinite(stepped[inside]).all():
            raise DenoiseNumericsError(t)
        level = schedule.levels[t + 1]
        if level == 0.0:
            noised = original
        else:
            rng_t = np.random.Generator(
                np.random.Philox(derive_seed(schedule.seed, "band-noise", t + 1)))
            eps = rng_t.standard_normal(original.shape).astype(np.float32)
            noised = (original * np.float32(1.0 - level) + eps * np.float32(level))
        current = np.where(inside[:, None], stepped, noised)

    return volume.with_features(current)


def upsample_occupancy(occupancy: np.ndarray, out_shape: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour upsampling with per-axis factors (threshold-free)."""
    occ = np.asarray(occupancy, dtype=bool)
    idx = []
    for axis, (n_in, n_out) in enumerate(zip(occ.shape, out_shape)):
        src = np.minimum((np.arange(n_out) + 0.5) * n_in / n_out, n_in - 1).astype(int)
        idx.append(src)
    return np.ascontiguousarray(occ[np.ix_(*idx)])


def upsample_latents(volume: SparseLatentVolume, views: Sequence,
                     denoiser, schedule: NoiseSchedule,
                     out_resolution: int | None = None) -> SparseLatentVolume:
    """Upsample a cropped volume back to full resolution.

    The occupancy is nearest-neighbour upsampled, fresh latents are drawn on
    it, and they are denoised to completion with each step the mean of the
    per-view updates over all conditioning renders of the original tile.
    """
    if len(views) < 1:
        raise ValueError("at least one conditioning view is required")
    if volume.cell_count == 0:
        raise ValueError("cannot upsample an empty volume")
    r = out_resolution or max(volume.shape)
    occ_up = upsample_occupancy(volume.occupancy, (r, r, r))
    rng = np.random.Generator(np.random.Philox(derive_seed(schedule.seed, "upsample-init")))
    coords = np.argwhere(occ_up).astype(np.int32)
    feats = rng.standard_normal((len(coords), volume.channels)).astype(np.float32)
    fresh = SparseLatentVolume(shape=(r, r, r), coords=coords, features=feats,
                               occupancy=occ_up, frame=volume.frame)
    handle = denoiser.make_handle(list(views), fresh)
    current = fresh.features
    for t in range(schedule.steps):
        current = mean_denoise_step(handle, current, t, schedule)
        if not np.isfinite(current).all():
            raise DenoiseNumericsError(t)
    return fresh.with_features(current)


def save_slat(volume: SparseLatentVolume, path_or_buf) -> None:
    """Header (magic "SLAT", version u16, R u16, D u16, count u64) then
    per-cell records: x, y, z as u16 each plus D little-endian float32
    features.  The on-disk format is cubic; crops are transient in memory."""
    if not volume.is_cubic:
        raise LatentFormatError("only cubic volumes serialize to SLAT")
    header = SLAT_MAGIC + struct.pack("<HHHQ", SLAT_VERSION, volume.resolution,
                                      volume.channels, volume.cell_count)
    coords = volume.coords.astype("<u2")
    feats = volume.features.astype("<f4")
    body = np.concatenate([coords.view(np.uint8).reshape(len(coords), -1),
                           feats.view(np.uint8).reshape(len(feats), -1)], axis=1).tobytes()
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(header + body)
    else:
        with open(path_or_buf, "wb") as f:
            f.write(header + body)


def load_slat(path_or_buf, frame: VolumeFrame | None = None) -> SparseLatentVolume:
    if hasattr(path_or_buf, "read"):
        data = path_or_buf.read()
    else:
        with open(path_or_buf, "rb") as f:
            data = f.read()
    if len(data) < 18 or data[:4] != SLAT_MAGIC:
        raise LatentFormatError("not a SLAT stream")
    version, r, channels, count = struct.unpack("<HHHQ", data[4:18])
    if version != SLAT_VERSION:
        raise LatentFormatError(f"unsupported SLAT version {version}")
    rec_size = 6 + 4 * channels
    body = data[18:]
    if len(body) < rec_size * count:
        raise LatentFormatError("truncated SLAT payload")
    raw = np.frombuffer(body[: rec_size * count], dtype=np.uint8).reshape(count, rec_size)
    coords = raw[:, :6].copy().view("<u2").astype(np.int32).reshape(count, 3)
    feats = raw[:, 6:].copy().view("<f4").reshape(count, channels)
    occ = np.zeros((r, r, r), dtype=bool)
    occ[coords[:, 0], coords[:, 1], coords[:, 2]] = True
    return SparseLatentVolume(shape=(r, r, r), coords=coords, features=feats,
                              occupancy=occ, frame=frame or VolumeFrame())
