"""Gaussian splat sets: the 3D representation of tiles and assembled worlds.

A splat is (center, per-axis scale, unit quaternion, opacity, RGB color).
Sets are stored as structure-of-arrays in float32 and are immutable by
convention: every transform returns a new set.  On disk a set is a binary
little-endian PLY with per-vertex properties x, y, z, scale_0..2, rot_0..3,
opacity and 8-bit red/green/blue.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_QUAT_TOL = 1e-5

PLY_FLOAT_PROPS = (
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity",
)
PLY_UCHAR_PROPS = ("red", "green", "blue")


class PlyFormatError(ValueError):
    """Raised when a PLY stream does not match the expected layout."""


@dataclass
class SplatSet:
    """A set of 3D gaussians. Quaternions are (w, x, y, z), colors in [0,1]."""

    centers: np.ndarray      # (N, 3) float32
    scales: np.ndarray       # (N, 3) float32
    rotations: np.ndarray    # (N, 4) float32, unit norm
    opacities: np.ndarray    # (N,)   float32 in [0, 1]
    colors: np.ndarray       # (N, 3) float32 in [0, 1]

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float32).reshape(-1, 3)
        n = len(self.centers)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float32).reshape(n, 4)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float32).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float32).reshape(n, 3)

    def __len__(self) -> int:
        return len(self.centers)

    @classmethod
    def empty(cls) -> "SplatSet":
        z = np.zeros((0, 3), dtype=np.float32)
        return cls(z, z.copy(), np.zeros((0, 4), dtype=np.float32),
                   np.zeros((0,), dtype=np.float32), z.copy())

    @classmethod
    def concat(cls, sets: list["SplatSet"]) -> "SplatSet":
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.centers for s in sets]),
            np.concatenate([s.scales for s in sets]),
            np.concatenate([s.rotations for s in sets]),
            np.concatenate([s.opacities for s in sets]),
            np.concatenate([s.colors for s in sets]),
        )

    def validate(self, h_max: float | None = None) -> None:
        """Check opacity range, quaternion norms and (optionally) the
        normalized-tile bound: ground footprint in [0,1]^2, height in [0, h_max]."""
        if len(self) == 0:
            return
        if not np.all((self.opacities >= 0.0) & (self.opacities <= 1.0)):
            raise ValueError("opacities outside [0, 1]")
        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        if not np.all(np.abs(norms - 1.0) <= _QUAT_TOL):
            raise ValueError("non-unit quaternion in splat set")
        if h_max is not None:
            c = self.centers
            ok = (c[:, 0] >= 0) & (c[:, 0] <= 1) & (c[:, 1] >= 0) & (c[:, 1] <= 1)
            ok &= (c[:, 2] >= 0) & (c[:, 2] <= h_max)
            if not np.all(ok):
                raise ValueError("normalized tile centers outside unit footprint box")

    def copy(self) -> "SplatSet":
        return SplatSet(self.centers.copy(), self.scales.copy(), self.rotations.copy(),
                        self.opacities.copy(), self.colors.copy())

    def subset(self, mask: np.ndarray) -> "SplatSet":
        return SplatSet(self.centers[mask], self.scales[mask], self.rotations[mask],
                        self.opacities[mask], self.colors[mask])

    def translated(self, delta) -> "SplatSet":
        d = np.asarray(delta, dtype=np.float32).reshape(3)
        out = self.copy()
        out.centers = (out.centers + d).astype(np.float32)
        return out

    def scaled(self, factor: float, origin=(0.0, 0.0, 0.0)) -> "SplatSet":
        """Uniform scale about ``origin``; gaussian scales are multiplied too."""
        o = np.asarray(origin, dtype=np.float32).reshape(3)
        out = self.copy()
        out.centers = ((out.centers - o) * np.float32(factor) + o).astype(np.float32)
        out.scales = (out.scales * np.float32(factor)).astype(np.float32)
        return out

    def rotated_quarter(self, k: int, center_xy=(0.5, 0.5)) -> "SplatSet":
        """Rotate by k*90 degrees counter-clockwise about a vertical axis."""
        k = int(k) % 4
        if k == 0:
            return self.copy()
        cx, cy = float(center_xy[0]), float(center_xy[1])
        out = self.copy()
        x = out.centers[:, 0] - np.float32(cx)
        y = out.centers[:, 1] - np.float32(cy)
        if k == 1:
            nx, ny = -y, x
        elif k == 2:
            nx, ny = -x, -y
        else:
            nx, ny = y, -x
        out.centers = np.stack(
            [nx + np.float32(cx), ny + np.float32(cy), out.centers[:, 2]], axis=1
        ).astype(np.float32)
        out.rotations = quat_mul(quat_about_z(k * 90.0), out.rotations).astype(np.float32)
        # Per-axis scales stay attached to the gaussian frame, which the
        # quaternion rotation already carries.
        return out

    def with_quantized_colors(self) -> "SplatSet":
        """Colors snapped to the 8-bit grid the PLY schema stores, so
        checkpointed and in-memory state stay bit-identical."""
        out = self.copy()
        out.colors = (np.clip(np.rint(out.colors * 255.0), 0, 255) / np.float32(255.0)
                      ).astype(np.float32)
        return out

    def footprint_bounds(self) -> tuple[float, float, float, float]:
        if len(self) == 0:
            raise ValueError("empty splat set has no footprint")
        c = self.centers
        return (float(c[:, 0].min()), float(c[:, 0].max()),
                float(c[:, 1].min()), float(c[:, 1].max()))


def quat_about_z(angle_deg: float) -> np.ndarray:
    half = np.deg2rad(angle_deg) / 2.0
    return np.array([np.cos(half), 0.0, 0.0, np.sin(half)], dtype=np.float64)


def quat_mul(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Hamilton product q*r; either side may be (4,) or (N,4), w-first."""
    q_arr = np.asarray(q, dtype=np.float64)
    r_arr = np.asarray(r, dtype=np.float64)
    squeeze = q_arr.ndim == 1 and r_arr.ndim == 1
    q2, r2 = np.atleast_2d(q_arr), np.atleast_2d(r_arr)
    w1, x1, y1, z1 = q2[:, 0], q2[:, 1], q2[:, 2], q2[:, 3]
    w2, x2, y2, z2 = r2[:, 0], r2[:, 1], r2[:, 2], r2[:, 3]
    out = np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=1)
    return out[0] if squeeze else out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (N,3,3) from unit quaternions (N,4), w-first."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((len(q), 3, 3), dtype=np.float64)
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def save_ply(splats: SplatSet, path_or_buf) -> None:
    """Write a splat set as binary little-endian PLY."""
    n = len(splats)
    header_lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header_lines += [f"property float {p}" for p in PLY_FLOAT_PROPS]
    header_lines += [f"property uchar {p}" for p in PLY_UCHAR_PROPS]
    header_lines.append("end_header")
    header = ("\n".join(header_lines) + "\n").encode("ascii")

    floats = np.concatenate(
        [splats.centers, splats.scales, splats.rotations, splats.opacities[:, None]], axis=1
    ).astype("<f4")
    colors = np.clip(np.rint(splats.colors * 255.0), 0, 255).astype(np.uint8)
    rec = np.zeros(n, dtype=_ply_dtype())
    for i, p in enumerate(PLY_FLOAT_PROPS):
        rec[p] = floats[:, i]
    for i, p in enumerate(PLY_UCHAR_PROPS):
        rec[p] = colors[:, i]

    if hasattr(path_or_buf, "write"):
        path_or_buf.write(header)
        path_or_buf.write(rec.tobytes())
    else:
        with open(path_or_buf, "wb") as f:
            f.write(header)
            f.write(rec.tobytes())


def _ply_dtype() -> np.dtype:
    fields = [(p, "<f4") for p in PLY_FLOAT_PROPS] + [(p, "u1") for p in PLY_UCHAR_PROPS]
    return np.dtype(fields)


def load_ply(path_or_buf) -> SplatSet:
    """Read a splat PLY written by :func:`save_ply` (property order may vary)."""
    if hasattr(path_or_buf, "read"):
        data = path_or_buf.read()
    else:
        with open(path_or_buf, "rb") as f:
            data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise PlyFormatError("not a PLY stream")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    n = None
    props: list[tuple[str, str]] = []
    fmt_ok = False
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise PlyFormatError(f"unsupported element {parts[1]!r}")
            n = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[1], parts[2]))
    if not fmt_ok:
        raise PlyFormatError("only binary_little_endian PLY is supported")
    if n is None:
        raise PlyFormatError("missing vertex element")

    np_types = {"float": "<f4", "float32": "<f4", "uchar": "u1", "uint8": "u1"}
    try:
        dtype = np.dtype([(name, np_types[t]) for t, name in props])
    except KeyError as exc:
        raise PlyFormatError(f"unsupported property type {exc}") from exc
    expected = {name for _, name in props}
    needed = set(PLY_FLOAT_PROPS) | set(PLY_UCHAR_PROPS)
    if not needed <= expected:
        raise PlyFormatError(f"missing properties: {sorted(needed - expected)}")
    rec = np.frombuffer(body[: n * dtype.itemsize], dtype=dtype, count=n)

    def col(name):
        return np.asarray(rec[name])

    centers = np.stack([col("x"), col("y"), col("z")], axis=1)
    scales = np.stack([col(f"scale_{i}") for i in range(3)], axis=1)
    rots = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    colors = np.stack([col(p) for p in PLY_UCHAR_PROPS], axis=1).astype(np.float32) / 255.0
    return SplatSet(centers, scales, rots, col("opacity"), colors)
