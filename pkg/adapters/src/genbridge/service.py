"""The adapter service: wire-protocol endpoints over FastAPI.

A thin contract-enforcement layer wraps every backend: inpainting results
get the base re-imposed outside the mask (diffusion inpainters drift
slightly; the protocol is strict), and 3D artifacts are shape-checked
before they leave the process.
"""

from __future__ import annotations

import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from genbridge import PROTOCOL_MAJOR, PROTOCOL_MINOR, PROTOCOL_NAME, ROLES
from genbridge.backends import load_backends
from genbridge.config import AdapterConfig
from genbridge import formats


class BlobStore:
    def __init__(self, cache_dir: str | None = None):
        self._data: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self._cache = Path(cache_dir) if cache_dir else None
        if self._cache:
            self._cache.mkdir(parents=True, exist_ok=True)

    def put(self, h: str, data: bytes) -> bool:
        if formats.content_hash(data) != h:
            return False
        with self._lock:
            self._data[h] = data
        if self._cache:
            (self._cache / h.replace(":", "_")).write_bytes(data)
        return True

    def get(self, h: str) -> bytes | None:
        with self._lock:
            data = self._data.get(h)
        if data is None and self._cache:
            path = self._cache / h.replace(":", "_")
            if path.exists():
                data = path.read_bytes()
        return data


def _protocol_header() -> dict:
    return {"name": PROTOCOL_NAME, "major": PROTOCOL_MAJOR, "minor": PROTOCOL_MINOR}


def _error_response(request_id: str, status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={
        "request_id": request_id,
        "protocol": _protocol_header(),
        "error": {"code": code, "message": message},
    })


def reimpose_base(base: np.ndarray, mask: np.ndarray, result: np.ndarray) -> np.ndarray:
    out = result.copy()
    out[~mask] = base[~mask]
    return out


def check_3d_artifacts(artifacts: dict, resolution: int) -> None:
    occ = artifacts["occupancy"]
    cells = artifacts["cells"]
    if occ.shape != (resolution,) * 3:
        raise ValueError(f"occupancy shape {occ.shape} != R={resolution}")
    if len(cells) and not occ[cells[:, 0], cells[:, 1], cells[:, 2]].all():
        raise ValueError("latent cells outside the occupancy active set")
    if not np.isfinite(artifacts["features"]).all():
        raise ValueError("non-finite latent features")
    ops = artifacts["opacities"]
    if len(ops) and not ((ops >= 0) & (ops <= 1)).all():
        raise ValueError("opacities outside [0, 1]")
    rots = artifacts["rotations"]
    if len(rots):
        norms = np.linalg.norm(rots.astype(np.float64), axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-5):
            raise ValueError("non-unit splat quaternions")


def create_app(config: AdapterConfig | None = None) -> FastAPI:
    config = config or AdapterConfig()
    backends = load_backends(config)
    blobs = BlobStore(config.cache_dir)
    app = FastAPI(title="genbridge", version="0.1.0")
    app.state.config = config

    @app.put("/v1/blobs/{blob_hash}")
    async def put_blob(blob_hash: str, request: Request):
        data = await request.body()
        if blobs.put(blob_hash, data):
            return JSONResponse(status_code=201, content={"stored": blob_hash})
        return JSONResponse(status_code=400,
                            content={"error": {"code": "hash-mismatch",
                                               "message": blob_hash}})

    @app.get("/v1/blobs/{blob_hash}")
    async def get_blob(blob_hash: str):
        data = blobs.get(blob_hash)
        if data is None:
            return JSONResponse(status_code=404,
                                content={"error": {"code": "missing-blob",
                                                   "message": blob_hash}})
        return Response(content=data, media_type="application/octet-stream")

    @app.post("/v1/{role}")
    async def dispatch(role: str, request: Request):
        try:
            envelope = await request.json()
        except Exception:
            return _error_response("", 400, "bad-json", "unparseable body")
        request_id = envelope.get("request_id", "")
        proto = envelope.get("protocol", {})
        if proto.get("major") != PROTOCOL_MAJOR:
            return _error_response(
                request_id, 400, "version-mismatch",
                f"server speaks major {PROTOCOL_MAJOR}, client sent {proto.get('major')}")
        if role not in ROLES:
            return _error_response(request_id, 404, "unknown-role", role)
        attachments = {}
        for meta in envelope.get("attachments", []):
            data = blobs.get(meta["content_hash"])
            if data is None:
                return _error_response(request_id, 400, "missing-blob",
                                       meta["content_hash"])
            attachments[meta["name"]] = data
        try:
            result, out_atts = _handle(backends, config, blobs, role,
                                       envelope.get("op", ""),
                                       envelope.get("params", {}), attachments)
        except Exception as exc:  # noqa: BLE001 - error envelope boundary
            return _error_response(request_id, 500, type(exc).__name__, str(exc))
        att_meta = []
        for name, (data, encoding) in out_atts.items():
            h = formats.content_hash(data)
            blobs.put(h, data)
            att_meta.append({"name": name, "content_hash": h, "encoding": encoding})
        return JSONResponse(content={
            "request_id": request_id,
            "protocol": _protocol_header(),
            "result": result,
            "attachments": att_meta,
            "error": None,
        })

    return app


def _handle(backends: dict, config: AdapterConfig, blobs: BlobStore, role: str,
            op: str, params: dict, atts: dict) -> tuple[dict, dict]:
    if role == "prompt-expander" and op == "expand":
        doc = backends[role].expand(params["seed_prompt"], params["width"],
                                    params["height"])
        import json as _json

        return {}, {"worldspec": (_json.dumps(doc, indent=1).encode("utf-8"), "json")}

    if role == "inpainter-2d" and op == "inpaint":
        base = formats.png_decode(atts["base"])
        mask = formats.mask_decode(atts["mask"])
        raw = backends[role].inpaint(base, mask, params.get("prompt", ""),
                                     int(params.get("seed", 0)))
        clean = reimpose_base(base, mask, raw)
        return ({"provenance": params.get("provenance", {})},
                {"image": (formats.png_encode(clean), "png")})

    if role == "image-to-3d" and op == "generate":
        image = formats.png_decode(atts["image"])
        artifacts = backends[role].generate(image, int(params.get("seed", 0)))
        check_3d_artifacts(artifacts, config.occupancy_resolution)
        ply = formats.ply_encode(artifacts["centers"], artifacts["scales"],
                                 artifacts["rotations"], artifacts["opacities"],
                                 artifacts["colors"])
        occv = formats.occv_encode(artifacts["occupancy"])
        slat = formats.slat_encode(artifacts["cells"], artifacts["features"],
                                   config.occupancy_resolution)
        return ({"provenance": params.get("provenance", {})},
                {"splats": (ply, "ply"), "occupancy": (occv, "occv"),
                 "latents": (slat, "slat")})

    if role == "latent-denoiser" and op == "step":
        coords, feats, r = formats.slat_decode(atts["latents"])
        reference = None
        if "reference" in atts:
            _, reference, _ = formats.slat_decode(atts["reference"])
        out = backends[role].step(feats, int(params["t"]),
                                  list(params["levels"]), reference)
        if not np.isfinite(out).all():
            raise ValueError("denoiser produced non-finite values")
        return {}, {"latents": (formats.slat_encode(coords, out, r), "slat")}

    if role == "latent-denoiser" and op == "decode":
        coords, feats, r = formats.slat_decode(atts["latents"])
        splats = backends[role].decode(coords, feats, params["frame"], r)
        ply = formats.ply_encode(splats["centers"], splats["scales"],
                                 splats["rotations"], splats["opacities"],
                                 splats["colors"])
        return {}, {"splats": (ply, "ply")}

    if role == "background-removal" and op == "matte":
        image = formats.png_decode(atts["image"])
        mask = formats.mask_decode(atts["mask"])
        gt = None
        if "gt-alpha" in atts:
            gt = formats.png_decode(atts["gt-alpha"])[:, :, 0]
        alpha = backends[role].matte(image, mask, gt)
        return {}, {"alpha": (formats.alpha_encode(alpha), "png")}

    if role == "image-distance" and op == "distance":
        a = formats.png_decode(atts["a"])
        b = formats.png_decode(atts["b"])
        return {"distance": backends[role].distance(a, b)}, {}

    raise ValueError(f"unsupported op {op!r} for role {role!r}")
