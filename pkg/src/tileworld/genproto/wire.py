"""JSON-over-HTTP wire protocol for the generator roles.

One operation is one POST to /v1/{role} with a JSON envelope; bulk tensors
(rasters, occupancy, latents, splats) travel as binary attachments uploaded
to /v1/blobs/{hash} and referenced by content hash.  Responses mirror the
request shape.  The protocol version is negotiated per request: servers
refuse mismatched major versions.

Envelope:
    {"request_id": str,
     "protocol": {"name": "tileworld-genproto", "major": 1, "minor": 0},
     "op": str, "params": {...},
     "attachments": [{"name": str, "content_hash": "sha256:..",
                      "encoding": "png"|"mask-png"|"occv"|"slat"|"ply"}]}
Response adds "result" and "error" ({"code", "message"} or null).
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
import uuid
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Sequence

import numpy as np
import requests

from tileworld import occupancy as occmod
from tileworld import splats as splatmod
from tileworld.framing2d import InpaintRequest, TileImagePrompt
from tileworld.genproto.interfaces import (
    EndpointSet,
    Image3DResult,
    PROTOCOL_MAJOR,
    PROTOCOL_MINOR,
    PROTOCOL_NAME,
    ROLE_BACKGROUND_REMOVAL,
    ROLE_IMAGE_DISTANCE,
    ROLE_IMAGE_TO_3D,
    ROLE_INPAINTER,
    ROLE_LATENT_DENOISER,
    ROLE_PROMPT_EXPANDER,
    ROLES,
)
from tileworld.isorender import (
    FramedImage,
    IsometricCamera,
    mask_from_png_bytes,
    mask_to_png_bytes,
)
from tileworld.latentops import NoiseSchedule, SparseLatentVolume, VolumeFrame
from tileworld.worldspec import WorldSpec, parse_world_spec, serialize_world_spec


class TransportError(RuntimeError):
    """Network failure or malformed response."""


class RemoteProtocolError(RuntimeError):
    """The remote replied with an error envelope."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class VersionMismatchError(RemoteProtocolError):
    pass


def content_hash(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def _protocol_header() -> dict:
    return {"name": PROTOCOL_NAME, "major": PROTOCOL_MAJOR, "minor": PROTOCOL_MINOR}


# -- serialization helpers ----------------------------------------------------

def camera_to_json(cam: IsometricCamera) -> dict:
    return {"scale": cam.scale, "image_size": cam.image_size,
            "azimuth_deg": cam.azimuth_deg, "elevation_deg": cam.elevation_deg,
            "offset_px": list(cam.offset_px)}


def camera_from_json(doc: dict) -> IsometricCamera:
    return IsometricCamera(scale=doc["scale"], image_size=doc["image_size"],
                           azimuth_deg=doc["azimuth_deg"],
                           elevation_deg=doc["elevation_deg"],
                           offset_px=tuple(doc["offset_px"]))


def frame_to_json(frame: VolumeFrame) -> dict:
    return {"origin": list(frame.origin), "axes": [list(a) for a in frame.axes]}


def frame_from_json(doc: dict) -> VolumeFrame:
    return VolumeFrame(origin=tuple(doc["origin"]),
                       axes=tuple(tuple(a) for a in doc["axes"]))


def _jsonable_provenance(prov: dict) -> dict:
    out = {}
    for key, value in prov.items():
        if isinstance(value, np.ndarray):
            continue  # bulk arrays (e.g. ground-truth mattes) stay local
        out[key] = value
    return out


def splats_to_bytes(s) -> bytes:
    buf = io.BytesIO()
    splatmod.save_ply(s, buf)
    return buf.getvalue()


def occupancy_to_bytes(o) -> bytes:
    buf = io.BytesIO()
    occmod.save_occv(o, buf)
    return buf.getvalue()


def latents_to_bytes(v) -> bytes:
    buf = io.BytesIO()
    from tileworld.latentops import save_slat
    save_slat(v, buf)
    return buf.getvalue()


def latents_from_bytes(data: bytes, frame: VolumeFrame | None = None) -> SparseLatentVolume:
    from tileworld.latentops import load_slat
    return load_slat(io.BytesIO(data), frame=frame)


# -- client -------------------------------------------------------------------

class WireClient:
    """Low-level envelope/blob client for one base URL."""

    def __init__(self, base_url: str, timeout: float = 60.0, max_retries: int = 2,
                 session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries
        self.session = session or requests.Session()

    def _upload_blob(self, data: bytes) -> str:
        h = content_hash(data)
        url = f"{self.base_url}/v1/blobs/{h}"
        resp = self.session.put(url, data=data, timeout=self.timeout)
        if resp.status_code not in (200, 201):
            raise TransportError(f"blob upload failed: HTTP {resp.status_code}")
        return h

    def _fetch_blob(self, h: str) -> bytes:
        url = f"{self.base_url}/v1/blobs/{h}"
        resp = self.session.get(url, timeout=self.timeout)
        if resp.status_code != 200:
            raise TransportError(f"blob fetch failed: HTTP {resp.status_code}")
        data = resp.content
        if content_hash(data) != h:
            raise TransportError("blob content hash mismatch")
        return data

    def call(self, role: str, op: str, params: dict,
             attachments: dict[str, tuple[bytes, str]] | None = None,
             protocol: dict | None = None) -> tuple[dict, dict[str, bytes]]:
        """POST one operation; returns (result params, attachment bytes by name)."""
        att_meta = []
        for name, (data, encoding) in (attachments or {}).items():
            h = self._upload_blob(data)
            att_meta.append({"name": name, "content_hash": h, "encoding": encoding})
        envelope = {
            "request_id": str(uuid.uuid4()),
            "protocol": protocol or _protocol_header(),
            "op": op,
            "params": params,
            "attachments": att_meta,
        }
        last_exc: Exception | None = None
        for _ in range(max(1, self.max_retries)):
            try:
                resp = self.session.post(f"{self.base_url}/v1/{role}", json=envelope,
                                         timeout=self.timeout)
                break
            except requests.RequestException as exc:
                last_exc = exc
        else:
            raise TransportError(f"POST /v1/{role} failed: {last_exc}")
        try:
            doc = resp.json()
        except ValueError as exc:
            raise TransportError(f"non-JSON response from /v1/{role}") from exc
        if doc.get("error"):
            err = doc["error"]
            if err.get("code") == "version-mismatch":
                raise VersionMismatchError(err["code"], err.get("message", ""))
            raise RemoteProtocolError(err.get("code", "error"), err.get("message", ""))
        blobs = {}
        for meta in doc.get("attachments", []):
            blobs[meta["name"]] = self._fetch_blob(meta["content_hash"])
        return doc.get("result", {}), blobs


@dataclass
class RemoteEndpoints:
    """All six roles resolved to remote services (possibly one shared URL)."""

    clients: dict[str, WireClient]

    @classmethod
    def from_addresses(cls, addresses: dict[str, str], timeout: float = 60.0,
                       max_retries: int = 2) -> "RemoteEndpoints":
        clients = {}
        for role in ROLES:
            addr = addresses.get(role) or addresses.get("*")
            if addr:
                clients[role] = WireClient(addr, timeout=timeout, max_retries=max_retries)
        return cls(clients=clients)

    def client(self, role: str) -> WireClient:
        if role not in self.clients:
            raise ValueError(f"no remote address configured for role {role!r}")
        return self.clients[role]

    def as_endpoint_set(self) -> EndpointSet:
        """This object structurally implements every role protocol."""
        return EndpointSet(expander=self, inpainter=self, image3d=self,
                           denoiser=self, background=self, imagedist=self)

    # Role implementations -----------------------------------------------

    def expand(self, seed_prompt: str, width: int, height: int) -> WorldSpec:
        result, blobs = self.client(ROLE_PROMPT_EXPANDER).call(
            ROLE_PROMPT_EXPANDER, "expand",
            {"seed_prompt": seed_prompt, "width": width, "height": height})
        if "worldspec" in blobs:
            return parse_world_spec(blobs["worldspec"])
        return parse_world_spec(json.dumps(result["worldspec"]).encode())

    def inpaint(self, request: InpaintRequest) -> FramedImage:
        params = {
            "prompt": request.prompt,
            "seed": request.seed,
            "camera": camera_to_json(request.base.camera),
            "kind": request.base.kind,
            "provenance": _jsonable_provenance(request.provenance),
        }
        atts = {"base": (request.base.to_png_bytes(), "png"),
                "mask": (mask_to_png_bytes(request.mask), "mask-png")}
        result, blobs = self.client(ROLE_INPAINTER).call(
            ROLE_INPAINTER, "inpaint", params, atts)
        pixels = FramedImage.pixels_from_png(blobs["image"])
        return FramedImage(pixels=pixels, mask=request.mask,
                           camera=request.base.camera, kind="inpaint-result",
                           provenance=result.get("provenance", {}))

    def generate(self, prompt_image: TileImagePrompt, seed: int) -> Image3DResult:
        params = {"seed": int(seed),
                  "camera": camera_to_json(prompt_image.image.camera),
                  "provenance": _jsonable_provenance(prompt_image.provenance)}
        atts = {"image": (prompt_image.image.to_png_bytes(), "png")}
        result, blobs = self.client(ROLE_IMAGE_TO_3D).call(
            ROLE_IMAGE_TO_3D, "generate", params, atts)
        splats = splatmod.load_ply(io.BytesIO(blobs["splats"]))
        occ = occmod.load_occv(io.BytesIO(blobs["occupancy"]))
        latents = latents_from_bytes(blobs["latents"])
        return Image3DResult(splats=splats, occupancy=occ, latents=latents,
                             seed=int(seed), provenance=result.get("provenance", {}))

    def matte(self, image: FramedImage, mask: np.ndarray) -> np.ndarray:
        atts = {"image": (image.to_png_bytes(), "png"),
                "mask": (mask_to_png_bytes(mask), "mask-png")}
        gt = image.provenance.get("matte_alpha")
        if isinstance(gt, np.ndarray):
            rgba = np.repeat(np.asarray(gt, np.float32)[:, :, None], 4, axis=2)
            probe = FramedImage(pixels=rgba, mask=np.zeros(gt.shape, bool),
                                camera=image.camera)
            atts["gt-alpha"] = (probe.to_png_bytes(), "png")
        _, blobs = self.client(ROLE_BACKGROUND_REMOVAL).call(
            ROLE_BACKGROUND_REMOVAL, "matte",
            {"provenance": _jsonable_provenance(image.provenance)}, atts)
        alpha_img = FramedImage.pixels_from_png(blobs["alpha"])
        return alpha_img[:, :, 0]

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        def encode(arr):
            img = FramedImage(pixels=np.asarray(arr, dtype=np.float32),
                              mask=np.zeros(arr.shape[:2], bool),
                              camera=IsometricCamera(scale=1.0, image_size=arr.shape[0]))
            return img.to_png_bytes()

        result, _ = self.client(ROLE_IMAGE_DISTANCE).call(
            ROLE_IMAGE_DISTANCE, "distance", {},
            {"a": (encode(a), "png"), "b": (encode(b), "png")})
        return float(result["distance"])

    def make_handle(self, views: Sequence[FramedImage], volume: SparseLatentVolume,
                    reference: np.ndarray | None = None) -> "RemoteDenoiserHandle":
        return RemoteDenoiserHandle(self.client(ROLE_LATENT_DENOISER), views,
                                    volume, reference)

    def decode(self, volume: SparseLatentVolume) -> splatmod.SplatSet:
        params = {"frame": frame_to_json(volume.frame)}
        _, blobs = self.client(ROLE_LATENT_DENOISER).call(
            ROLE_LATENT_DENOISER, "decode", params,
            {"latents": (latents_to_bytes(volume), "slat")})
        return splatmod.load_ply(io.BytesIO(blobs["splats"]))


class RemoteDenoiserHandle:
    """Stateless remote stepping: conditioning views are uploaded once and
    referenced by content hash on every step call."""

    def __init__(self, client: WireClient, views, volume: SparseLatentVolume,
                 reference: np.ndarray | None):
        self.client = client
        self.views = list(views)
        self.volume = volume
        self.reference = reference
        self._view_meta = []
        for i, view in enumerate(self.views):
            data = view.to_png_bytes()
            h = client._upload_blob(data)
            self._view_meta.append({"content_hash": h,
                                    "camera": camera_to_json(view.camera)})

    @property
    def num_views(self) -> int:
        return len(self.views)

    def step(self, features: np.ndarray, t: int, schedule: NoiseSchedule,
             view: int) -> np.ndarray:
        vol = self.volume.with_features(features)
        atts = {"latents": (latents_to_bytes(vol), "slat")}
        if self.reference is not None:
            ref = self.volume.with_features(self.reference)
            atts["reference"] = (latents_to_bytes(ref), "slat")
        params = {
            "t": int(t),
            "levels": list(schedule.levels),
            "seed": int(schedule.seed),
            "view": int(view),
            "views": self._view_meta,
            "frame": frame_to_json(self.volume.frame),
        }
        _, blobs = self.client.call(ROLE_LATENT_DENOISER, "step", params, atts)
        out = latents_from_bytes(blobs["latents"])
        return out.features


# -- reference server ---------------------------------------------------------

class _BlobStore:
    def __init__(self):
        self._data: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, h: str, data: bytes) -> bool:
        if content_hash(data) != h:
            return False
        with self._lock:
            self._data[h] = data
        return True

    def get(self, h: str) -> bytes | None:
        with self._lock:
            return self._data.get(h)


def _error(code: str, message: str) -> dict:
    return {"code": code, "message": message}


class EndpointServer:
    """Serves a local EndpointSet over the wire protocol (reference server,
    used for loopback tests and for exposing the mocks to other processes)."""

    def __init__(self, endpoints: EndpointSet, host: str = "127.0.0.1", port: int = 0):
        self.endpoints = endpoints
        self.blobs = _BlobStore()
        handler = self._make_handler()
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "EndpointServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    # Request handling -----------------------------------------------------

    def _handle_op(self, role: str, envelope: dict) -> tuple[dict, dict[str, tuple[bytes, str]]]:
        op = envelope.get("op", "")
        params = envelope.get("params", {})
        blobs = {}
        for meta in envelope.get("attachments", []):
            data = self.blobs.get(meta["content_hash"])
            if data is None:
                raise KeyError(f"missing blob {meta['content_hash']}")
            blobs[meta["name"]] = data

        ep = self.endpoints
        if role == ROLE_PROMPT_EXPANDER and op == "expand":
            spec = ep.expander.expand(params["seed_prompt"], params["width"],
                                      params["height"])
            return {}, {"worldspec": (serialize_world_spec(spec), "json")}

        if role == ROLE_INPAINTER and op == "inpaint":
            cam = camera_from_json(params["camera"])
            pixels = FramedImage.pixels_from_png(blobs["base"])
            mask = mask_from_png_bytes(blobs["mask"])
            base = FramedImage(pixels=pixels, mask=mask, camera=cam,
                               kind=params.get("kind", "context"),
                               provenance=params.get("provenance", {}))
            req = InpaintRequest(base=base, mask=mask, prompt=params["prompt"],
                                 seed=params["seed"],
                                 provenance=params.get("provenance", {}))
            result = ep.inpainter.inpaint(req)
            return ({"provenance": _jsonable_provenance(result.provenance)},
                    {"image": (result.to_png_bytes(), "png")})

        if role == ROLE_IMAGE_TO_3D and op == "generate":
            cam = camera_from_json(params["camera"])
            pixels = FramedImage.pixels_from_png(blobs["image"])
            prompt_image = TileImagePrompt(
                image=FramedImage(pixels=pixels, mask=np.zeros(pixels.shape[:2], bool),
                                  camera=cam, kind="context",
                                  provenance=params.get("provenance", {})),
                provenance=params.get("provenance", {}))
            result = ep.image3d.generate(prompt_image, params["seed"])
            return ({"provenance": _jsonable_provenance(result.provenance)}, {
                "splats": (splats_to_bytes(result.splats), "ply"),
                "occupancy": (occupancy_to_bytes(result.occupancy), "occv"),
                "latents": (latents_to_bytes(result.latents), "slat"),
            })

        if role == ROLE_BACKGROUND_REMOVAL and op == "matte":
            pixels = FramedImage.pixels_from_png(blobs["image"])
            mask = mask_from_png_bytes(blobs["mask"])
            provenance = dict(params.get("provenance", {}))
            if "gt-alpha" in blobs:
                provenance["matte_alpha"] = FramedImage.pixels_from_png(blobs["gt-alpha"])[:, :, 0]
            img = FramedImage(pixels=pixels, mask=mask,
                              camera=IsometricCamera(scale=1.0, image_size=pixels.shape[0]),
                              kind="inpaint-result",
                              provenance=provenance)
            alpha = np.asarray(ep.background.matte(img, mask), dtype=np.float32)
            rgba = np.repeat(alpha[:, :, None], 4, axis=2)
            out = FramedImage(pixels=rgba, mask=mask, camera=img.camera,
                              kind="inpaint-result")
            return {}, {"alpha": (out.to_png_bytes(), "png")}

        if role == ROLE_IMAGE_DISTANCE and op == "distance":
            a = FramedImage.pixels_from_png(blobs["a"])
            b = FramedImage.pixels_from_png(blobs["b"])
            return {"distance": float(ep.imagedist.distance(a, b))}, {}

        if role == ROLE_LATENT_DENOISER and op == "step":
            frame = frame_from_json(params["frame"])
            vol = latents_from_bytes(blobs["latents"], frame=frame)
            views = []
            for meta in params.get("views", []):
                data = self.blobs.get(meta["content_hash"])
                if data is None:
                    raise KeyError("missing view blob")
                pixels = FramedImage.pixels_from_png(data)
                views.append(FramedImage(
                    pixels=pixels, mask=np.zeros(pixels.shape[:2], bool),
                    camera=camera_from_json(meta["camera"])))
            reference = None
            if "reference" in blobs:
                reference = latents_from_bytes(blobs["reference"], frame=frame).features
            schedule = NoiseSchedule(levels=tuple(params["levels"]), seed=params["seed"])
            handle = ep.denoiser.make_handle(views, vol, reference)
            out = handle.step(vol.features, params["t"], schedule, params["view"])
            return {}, {"latents": (latents_to_bytes(vol.with_features(out)), "slat")}

        if role == ROLE_LATENT_DENOISER and op == "decode":
            frame = frame_from_json(params["frame"])
            vol = latents_from_bytes(blobs["latents"], frame=frame)
            splats = ep.denoiser.decode(vol)
            return {}, {"splats": (splats_to_bytes(splats), "ply")}

        raise ValueError(f"unsupported op {op!r} for role {role!r}")

    def _make_handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def _send_json(self, status: int, doc: dict):
                payload = json.dumps(doc).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def do_PUT(self):
                if not self.path.startswith("/v1/blobs/"):
                    self._send_json(404, {"error": _error("not-found", self.path)})
                    return
                h = self.path[len("/v1/blobs/"):]
                length = int(self.headers.get("Content-Length", "0"))
                data = self.rfile.read(length)
                if server.blobs.put(h, data):
                    self._send_json(201, {"stored": h})
                else:
                    self._send_json(400, {"error": _error("hash-mismatch", h)})

            def do_GET(self):
                if not self.path.startswith("/v1/blobs/"):
                    self._send_json(404, {"error": _error("not-found", self.path)})
                    return
                data = server.blobs.get(self.path[len("/v1/blobs/"):])
                if data is None:
                    self._send_json(404, {"error": _error("missing-blob", self.path)})
                    return
                self.send_response(200)
                self.send_header("Content-Type", "application/octet-stream")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_POST(self):
                if not self.path.startswith("/v1/"):
                    self._send_json(404, {"error": _error("not-found", self.path)})
                    return
                role = self.path[len("/v1/"):]
                length = int(self.headers.get("Content-Length", "0"))
                try:
                    envelope = json.loads(self.rfile.read(length))
                except ValueError:
                    self._send_json(400, {"error": _error("bad-json", "unparseable body")})
                    return
                proto = envelope.get("protocol", {})
                response_base = {
                    "request_id": envelope.get("request_id", ""),
                    "protocol": _protocol_header(),
                }
                if proto.get("major") != PROTOCOL_MAJOR:
                    response_base["error"] = _error(
                        "version-mismatch",
                        f"server speaks major {PROTOCOL_MAJOR}, client sent {proto.get('major')}")
                    self._send_json(400, response_base)
                    return
                if role not in ROLES:
                    response_base["error"] = _error("unknown-role", role)
                    self._send_json(404, response_base)
                    return
                try:
                    result, attachments = server._handle_op(role, envelope)
                except Exception as exc:  # noqa: BLE001 - error envelope boundary
                    response_base["error"] = _error(type(exc).__name__, str(exc))
                    self._send_json(500, response_base)
                    return
                att_meta = []
                for name, (data, encoding) in attachments.items():
                    h = content_hash(data)
                    server.blobs.put(h, data)
                    att_meta.append({"name": name, "content_hash": h,
                                     "encoding": encoding})
                response_base.update({"result": result, "attachments": att_meta,
                                      "error": None})
                self._send_json(200, response_base)

        return Handler


def resolve_endpoints(endpoint_arg: str | dict, master_seed: int = 0,
                      mock_config=None, timeout: float = 60.0) -> EndpointSet:
    """Map a CLI-style endpoints argument onto an EndpointSet.

    "mock" serves every role from the bundled mocks; a dict of role -> URI
    (with optional "*" wildcard) resolves roles to remote services, falling
    back to local defaults for background removal and image distance when
    those roles are not mapped.
    """
    from tileworld.genproto.mock import MockConfig, mock_endpoint_set

    if endpoint_arg == "mock" or endpoint_arg == {"*": "mock"}:
        return mock_endpoint_set(master_seed, mock_config or MockConfig())
    if not isinstance(endpoint_arg, dict):
        raise ValueError(f"unsupported endpoints argument {endpoint_arg!r}")
    remote = RemoteEndpoints.from_addresses(endpoint_arg, timeout=timeout)
    mock = mock_endpoint_set(master_seed, mock_config or MockConfig())
    have = set(remote.clients)
    return EndpointSet(
        expander=remote if ROLE_PROMPT_EXPANDER in have else mock.expander,
        inpainter=remote if ROLE_INPAINTER in have else mock.inpainter,
        image3d=remote if ROLE_IMAGE_TO_3D in have else mock.image3d,
        denoiser=remote if ROLE_LATENT_DENOISER in have else mock.denoiser,
        background=remote if ROLE_BACKGROUND_REMOVAL in have else mock.background,
        imagedist=remote if ROLE_IMAGE_DISTANCE in have else mock.imagedist,
    )
