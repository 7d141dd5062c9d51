"""Occupancy volumes and the geometric acceptance tests for generated tiles.

The image-to-3D generator's first stage yields a binary R x R x R voxel grid
(axes u, v, w with w vertical).  A tile is accepted when its footprint is
large enough, square, and the synthetic base ring added by rebasing has been
reconstructed: the adaptive base template is the perimeter ring of the
bounding box of the largest-footprint height slice, and the fraction of
those ring voxels present must reach the completeness threshold.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

OCCV_MAGIC = b"OCCV"
OCCV_VERSION = 1

REJECT_AREA = "area"
REJECT_SQUARENESS = "squareness"
REJECT_COMPLETENESS = "completeness"


class OccupancyFormatError(ValueError):
    """Raised when an OCCV stream is malformed."""


@dataclass
class OccupancyVolume:
    """Binary voxel grid of shape (R, R, R), indexed [u, v, w], w vertical."""

    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=bool)
        if self.voxels.ndim != 3:
            raise ValueError("occupancy must be a 3D grid")
        r = self.voxels.shape[0]
        if self.voxels.shape != (r, r, r):
            raise ValueError(f"occupancy must be cubic, got {self.voxels.shape}")
        if r < 2:
            raise ValueError("resolution must be >= 2")

    @property
    def resolution(self) -> int:
        return self.voxels.shape[0]

    @classmethod
    def empty(cls, resolution: int = 64) -> "OccupancyVolume":
        return cls(np.zeros((resolution,) * 3, dtype=bool))

    def count(self) -> int:
        return int(self.voxels.sum())

    def rotated_quarter(self, k: int) -> "OccupancyVolume":
        """Rotate k*90 degrees counter-clockwise about the vertical axis."""
        v = self.voxels
        for _ in range(int(k) % 4):
            # (u, v) -> (R-1-v, u): +u axis turns into +v.
            v = v[::-1, :, :].transpose(1, 0, 2)
        return OccupancyVolume(np.ascontiguousarray(v))


@dataclass
class Extents:
    ext_u: int
    ext_v: int
    per_height: np.ndarray  # (R, 2) int: [ext_u(w), ext_v(w)] per slice


@dataclass
class ValidationReport:
    base_area: int
    squareness: float
    completeness: float
    accepted: bool
    reject_reasons: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.accepted != (not self.reject_reasons):
            raise ValueError("verdict must be accept exactly when no test fails")

    def to_json(self) -> dict:
        return {
            "base_area": self.base_area,
            "squareness": self.squareness,
            "completeness": self.completeness,
            "verdict": "accept" if self.accepted else "reject",
            "reject_reasons": list(self.reject_reasons),
        }


def _axis_extent(active: np.ndarray) -> int:
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return 0
    return int(idx[-1] - idx[0] + 1)


def footprint_extents(volume: OccupancyVolume) -> Extents:
    """Global bounding-box extents plus per-height-slice extents."""
    v = volume.voxels
    r = volume.resolution
    ext_u = _axis_extent(v.any(axis=(1, 2)))
    ext_v = _axis_extent(v.any(axis=(0, 2)))
    per = np.zeros((r, 2), dtype=np.int64)
    any_u = v.any(axis=1)  # (R_u, R_w)
    any_v = v.any(axis=0)  # (R_v, R_w)
    for w in range(r):
        per[w, 0] = _axis_extent(any_u[:, w])
        per[w, 1] = _axis_extent(any_v[:, w])
    return Extents(ext_u=ext_u, ext_v=ext_v, per_height=per)


def base_template(volume: OccupancyVolume) -> tuple[np.ndarray, int]:
    """Adaptive base template: perimeter ring of the largest-footprint slice.

    Returns the indicator grid and the slice height w*.  Ties in slice area
    break toward the lowest height.  Degenerate extents of one voxel make the
    whole row/column part of the ring (the boundary condition is evaluated
    with exact integer arithmetic).
    """
    v = volume.voxels
    if not v.any():
        raise ValueError("empty occupancy volume has no base template")
    ext = footprint_extents(volume)
    areas = ext.per_height[:, 0] * ext.per_height[:, 1]
    w_star = int(np.argmax(areas))  # argmax returns the first (lowest) maximum
    sl = v[:, :, w_star]
    us = np.flatnonzero(sl.any(axis=1))
    vs = np.flatnonzero(sl.any(axis=0))
    u_min, u_max = int(us[0]), int(us[-1])
    v_min, v_max = int(vs[0]), int(vs[-1])

    template = np.zeros_like(v)
    uu = np.arange(v.shape[0])
    vv = np.arange(v.shape[1])
    in_u = (uu >= u_min) & (uu <= u_max)
    in_v = (vv >= v_min) & (vv <= v_max)
    on_u = in_u & ((uu == u_min) | (uu == u_max) | (u_min == u_max))
    on_v = in_v & ((vv == v_min) | (vv == v_max) | (v_min == v_max))
    ring = (on_u[:, None] & in_v[None, :]) | (in_u[:, None] & on_v[None, :])
    template[:, :, w_star] = ring
    return template, w_star


def completeness(volume: OccupancyVolume, template: np.ndarray) -> float:
    """Fraction of template ring voxels that are active in the volume."""
    t = np.asarray(template, dtype=bool)
    denom = int(t.sum())
    if denom == 0:
        raise ValueError("base template is empty")
    hits = int((volume.voxels & t).sum())
    return hits / denom


def validate_tile(volume: OccupancyVolume, alpha: float = 1.0,
                  beta: float = 0.95) -> ValidationReport:
    """Run the footprint-area, squareness and base-completeness tests.

    Rejection is a result, not an error; the report lists each failing test.
    """
    r = volume.resolution
    ext = footprint_extents(volume)
    area = ext.ext_u * ext.ext_v
    if ext.ext_u and ext.ext_v:
        squareness = min(ext.ext_u, ext.ext_v) / max(ext.ext_u, ext.ext_v)
    else:
        squareness = 0.0
    if volume.voxels.any():
        template, _ = base_template(volume)
        comp = completeness(volume, template)
    else:
        comp = 0.0

    reasons = []
    if area < (r // 2) ** 2:
        reasons.append(REJECT_AREA)
    if squareness < alpha:
        reasons.append(REJECT_SQUARENESS)
    if comp < beta:
        reasons.append(REJECT_COMPLETENESS)
    return ValidationReport(base_area=int(area), squareness=float(squareness),
                            completeness=float(comp), accepted=not reasons,
                            reject_reasons=reasons)


def save_occv(volume: OccupancyVolume, path_or_buf) -> None:
    """16-byte header (magic, version u16, R u16, 8 reserved bytes) then
    R^3 bits packed little-endian, u fastest."""
    r = volume.resolution
    header = OCCV_MAGIC + struct.pack("<HH", OCCV_VERSION, r) + b"\x00" * 8
    flat = volume.voxels.transpose(2, 1, 0).ravel()  # u fastest
    packed = np.packbits(flat, bitorder="little").tobytes()
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(header + packed)
    else:
        with open(path_or_buf, "wb") as f:
            f.write(header + packed)


def load_occv(path_or_buf) -> OccupancyVolume:
    if hasattr(path_or_buf, "read"):
        data = path_or_buf.read()
    else:
        with open(path_or_buf, "rb") as f:
            data = f.read()
    if len(data) < 16 or data[:4] != OCCV_MAGIC:
        raise OccupancyFormatError("not an OCCV stream")
    version, r = struct.unpack("<HH", data[4:8])
    if version != OCCV_VERSION:
        raise OccupancyFormatError(f"unsupported OCCV version {version}")
    nbits = r ** 3
    nbytes = (nbits + 7) // 8
    body = data[16:16 + nbytes]
    if len(body) != nbytes:
        raise OccupancyFormatError("truncated OCCV payload")
    bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), bitorder="little")[:nbits]
    voxels = bits.reshape(r, r, r).transpose(2, 1, 0).astype(bool)
    return OccupancyVolume(np.ascontiguousarray(voxels))
