"""Byte formats of the wire protocol attachments.

Standalone implementations of the documented encodings: RGBA PNG rasters,
single-channel masks, OCCV occupancy volumes, SLAT sparse latents, and the
splat PLY layout.  Kept dependency-light (numpy + Pillow) and byte-for-byte
compatible with the engine.
"""

from __future__ import annotations

import hashlib
import io
import struct

import numpy as np
from PIL import Image

OCCV_MAGIC = b"OCCV"
SLAT_MAGIC = b"SLAT"
FORMAT_VERSION = 1

PLY_FLOAT_PROPS = ("x", "y", "z", "scale_0", "scale_1", "scale_2",
                   "rot_0", "rot_1", "rot_2", "rot_3", "opacity")
PLY_UCHAR_PROPS = ("red", "green", "blue")


class FormatError(ValueError):
    pass


def content_hash(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


# -- rasters -------------------------------------------------------------------

def png_encode(rgba: np.ndarray) -> bytes:
    arr = np.clip(np.rint(np.asarray(rgba, dtype=np.float32) * 255.0), 0, 255)
    buf = io.BytesIO()
    Image.fromarray(arr.astype(np.uint8), mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


def png_decode(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data)).convert("RGBA")
    return np.asarray(img, dtype=np.float32) / 255.0


def mask_decode(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data)).convert("L")
    return np.asarray(img) >= 128


def alpha_encode(alpha: np.ndarray) -> bytes:
    rgba = np.repeat(np.asarray(alpha, dtype=np.float32)[:, :, None], 4, axis=2)
    return png_encode(rgba)


# -- occupancy volumes -----------------------------------------------------------

def occv_encode(voxels: np.ndarray) -> bytes:
    v = np.asarray(voxels, dtype=bool)
    r = v.shape[0]
    if v.shape != (r, r, r):
        raise FormatError("occupancy must be cubic")
    header = OCCV_MAGIC + struct.pack("<HH", FORMAT_VERSION, r) + b"\x00" * 8
    flat = v.transpose(2, 1, 0).ravel()  # u fastest
    return header + np.packbits(flat, bitorder="little").tobytes()


def occv_decode(data: bytes) -> np.ndarray:
    if len(data) < 16 or data[:4] != OCCV_MAGIC:
        raise FormatError("not an OCCV stream")
    version, r = struct.unpack("<HH", data[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported OCCV version {version}")
    nbits = r ** 3
    body = data[16:16 + (nbits + 7) // 8]
    bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), bitorder="little")[:nbits]
    return np.ascontiguousarray(bits.reshape(r, r, r).transpose(2, 1, 0).astype(bool))


# -- sparse latents ----------------------------------------------------------------

def slat_encode(coords: np.ndarray, features: np.ndarray, resolution: int) -> bytes:
    coords = np.ascontiguousarray(coords, dtype=np.int64)
    feats = np.ascontiguousarray(features, dtype="<f4")
    count, channels = feats.shape
    header = SLAT_MAGIC + struct.pack("<HHHQ", FORMAT_VERSION, resolution,
                                      channels, count)
    c16 = np.ascontiguousarray(coords.astype("<u2"))
    body = np.concatenate([c16.view(np.uint8).reshape(count, -1),
                           feats.view(np.uint8).reshape(count, -1)], axis=1)
    return header + body.tobytes()


def slat_decode(data: bytes) -> tuple[np.ndarray, np.ndarray, int]:
    if len(data) < 18 or data[:4] != SLAT_MAGIC:
        raise FormatError("not a SLAT stream")
    version, r, channels, count = struct.unpack("<HHHQ", data[4:18])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported SLAT version {version}")
    rec = 6 + 4 * channels
    raw = np.frombuffer(data[18:18 + rec * count], dtype=np.uint8)
    if raw.size != rec * count:
        raise FormatError("truncated SLAT payload")
    raw = raw.reshape(count, rec)
    coords = raw[:, :6].copy().view("<u2").astype(np.int64).reshape(count, 3)
    feats = raw[:, 6:].copy().view("<f4").reshape(count, channels)
    return coords, feats, r


# -- splat PLY ------------------------------------------------------------------------

def ply_encode(centers, scales, rotations, opacities, colors) -> bytes:
    n = len(centers)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in PLY_FLOAT_PROPS]
    header += [f"property uchar {p}" for p in PLY_UCHAR_PROPS]
    header.append("end_header")
    blob = ("\n".join(header) + "\n").encode("ascii")

    dtype = np.dtype([(p, "<f4") for p in PLY_FLOAT_PROPS]
                     + [(p, "u1") for p in PLY_UCHAR_PROPS])
    rec = np.zeros(n, dtype=dtype)
    floats = np.concatenate([np.asarray(centers, np.float32),
                             np.asarray(scales, np.float32),
                             np.asarray(rotations, np.float32),
                             np.asarray(opacities, np.float32).reshape(-1, 1)], axis=1)
    for i, p in enumerate(PLY_FLOAT_PROPS):
        rec[p] = floats[:, i]
    rgb = np.clip(np.rint(np.asarray(colors, np.float32) * 255.0), 0, 255).astype(np.uint8)
    for i, p in enumerate(PLY_UCHAR_PROPS):
        rec[p] = rgb[:, i]
    return blob + rec.tobytes()


def ply_decode(data: bytes) -> dict:
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY stream")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    n = None
    props = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append((parts[1], parts[2]))
    if n is None:
        raise FormatError("missing vertex element")
    np_types = {"float": "<f4", "uchar": "u1"}
    dtype = np.dtype([(name, np_types[t]) for t, name in props])
    rec = np.frombuffer(data[end + 11: end + 11 + n * dtype.itemsize], dtype=dtype,
                        count=n)
    out = {
        "centers": np.stack([rec["x"], rec["y"], rec["z"]], axis=1),
        "scales": np.stack([rec[f"scale_{i}"] for i in range(3)], axis=1),
        "rotations": np.stack([rec[f"rot_{i}"] for i in range(4)], axis=1),
        "opacities": np.asarray(rec["opacity"]),
        "colors": np.stack([rec[p] for p in PLY_UCHAR_PROPS], axis=1).astype(np.float32) / 255.0,
    }
    return out


# -- voxel frame -----------------------------------------------------------------------

def frame_centers(frame: dict, coords: np.ndarray, shape) -> np.ndarray:
    """World centers of voxels under a {origin, axes} frame document."""
    origin = np.asarray(frame["origin"], dtype=np.float64)
    axes = np.asarray(frame["axes"], dtype=np.float64).T  # columns = index axes
    f = (np.asarray(coords, dtype=np.float64) + 0.5) / np.asarray(shape, np.float64)
    return origin + f @ axes.T


def frame_voxel_size(frame: dict, shape) -> np.ndarray:
    axes = np.asarray(frame["axes"], dtype=np.float64).T
    return np.linalg.norm(axes, axis=0) / np.asarray(shape, np.float64)
