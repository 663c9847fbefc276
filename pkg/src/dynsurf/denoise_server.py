"""Toy denoiser targets and an HTTP server for the remote denoiser protocol."""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .cameras import (
    Intrinsics,
    PolarPose,
    RigidPose,
    from_polar,
    generate_rays,
    look_at,
    pixel_centers,
    to_polar,
    wrap_angle,
)
from .diffusion import (
    PROTOCOL_VERSION,
    DenoiserError,
    NoiseSchedule,
    ProtocolError,
    ToyDenoiser,
    decode_array,
    encode_array,
)
from .rendering import render_rays

__all__ = [
    "VirtualTargetRenderer",
    "TargetBank",
    "build_target_bank",
    "make_server",
    "serve_in_thread",
]

log = logging.getLogger(__name__)


def _nearest_reference(references: dict, image: np.ndarray) -> int:
    best, best_err = None, math.inf
    for k, ref in references.items():
        if ref.shape != image.shape:
            continue
        err = float(np.sum((ref - image) ** 2))
        if err < best_err:
            best, best_err = k, err
    if best is None:
        raise DenoiserError(f"no reference image of shape {image.shape}")
    return best


def _virtual_pose(reference_pose: RigidPose, delta_pose) -> RigidPose:
    ref = to_polar(reference_pose)
    dr, dp, da = (float(v) for v in np.asarray(delta_pose).reshape(3))
    polar = min(max(ref.polar + dp, 0.0), math.pi)
    virt = PolarPose(ref.radius + dr, polar, float(wrap_angle(ref.azimuth + da)))
    return look_at(from_polar(virt))


class _SceneField:
    """Exposes a synthetic scene through the query interface the volume renderer expects."""

    def __init__(self, scene, beta: float):
        self.scene = scene
        self.beta = torch.tensor(float(beta), dtype=torch.float64)

    def sdf(self, x: torch.Tensor, t) -> torch.Tensor:
        return torch.from_numpy(np.asarray(self.scene.sdf(x.detach().numpy(), t), dtype=np.float64))

    def query(self, x: torch.Tensor, t, with_color: bool = True):
        xn = x.detach().numpy()
        albedo = torch.from_numpy(self.scene.albedo(self.scene.to_canonical(xn, t)))
        return self.sdf(x, t), None, albedo


@dataclass
class VirtualTargetRenderer:
    """Clean latents rendered from a synthetic scene at the requested virtual view.

    The keyframe is recovered from the reference image, the virtual camera
    from the keyframe pose plus ``delta_pose``.  Shading uses a headlight.

    With ``beta`` unset the scene is ray traced as a hard surface.  With
    ``beta`` set (a number, or a callable returning the current value) it is
    volume rendered with the same Laplace density and sampler as the model, so
    a model that matches the scene exactly receives a zero residual.
    """

    scene: object  # SyntheticScene
    keyframe_poses: dict
    references: dict  # keyframe -> (3, H, W) reference image
    intrinsics: Intrinsics  # rescaled to the requested resolution
    mode: str = "textureless"
    ambient: float = 0.1
    bg: tuple = (1.0, 1.0, 1.0)
    beta: float | Callable[[], float] | None = None
    step: float = 0.01
    fd_eps: float = 0.005

    def render(self, k: int, delta_pose, shape) -> np.ndarray:
        _, h, w = shape
        pose = _virtual_pose(self.keyframe_poses[k], delta_pose)
        light = pose.translation / np.linalg.norm(pose.translation)
        intr = self.intrinsics.scaled(w, h)
        if self.beta is None:
            rgb, _, _ = self.scene.render(k, intr, pose, self.mode, light, self.ambient, self.bg)
            return np.transpose(rgb, (2, 0, 1))
        beta = self.beta() if callable(self.beta) else self.beta
        rays = generate_rays(intr, pose, pixel_centers(w, h))
        with torch.no_grad():
            out = render_rays(_SceneField(self.scene, beta), rays, k, self.mode, self.bg, None, self.step, light,
                              self.ambient, fd_eps=self.fd_eps)
        return out.color.numpy().T.reshape(3, h, w)

    def __call__(self, reference, delta_pose, shape) -> np.ndarray:
        k = _nearest_reference(self.references, np.asarray(reference, dtype=np.float64))
        return self.render(k, delta_pose, shape)


@dataclass
class TargetBank:
    """Precomputed clean latents per (keyframe, relative-pose bucket).

    A request is matched to the keyframe with the closest reference image and
    then to the bucket with the closest ``delta_pose`` among targets of the
    requested shape.
    """

    references: dict = field(default_factory=dict)  # keyframe -> reference image
    entries: list = field(default_factory=list)  # (keyframe, delta (3,), target (C, H, W))

    def add(self, keyframe: int, delta_pose, target: np.ndarray) -> None:
        self.entries.append((int(keyframe), np.asarray(delta_pose, dtype=np.float64).reshape(3),
                             np.asarray(target, dtype=np.float64)))

    def lookup(self, reference, delta_pose, shape) -> np.ndarray:
        k = _nearest_reference(self.references, np.asarray(reference, dtype=np.float64))
        d = np.asarray(delta_pose, dtype=np.float64).reshape(3)
        best, best_err = None, math.inf
        for kk, delta, target in self.entries:
            if kk != k or target.shape != tuple(shape):
                continue
            diff = delta - d
            diff[2] = wrap_angle(diff[2])
            err = float(diff @ diff)
            if err < best_err:
                best, best_err = target, err
        if best is None:
            raise DenoiserError(f"no target for keyframe {k} with shape {tuple(shape)}")
        return best

    __call__ = lookup

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        refs = []
        for k, img in sorted(self.references.items()):
            name = f"reference_{k:04d}.npy"
            np.save(path / name, img)
            refs.append({"keyframe": k, "file": name})
        items = []
        for i, (k, delta, target) in enumerate(self.entries):
            name = f"target_{i:05d}.npy"
            np.save(path / name, target)
            items.append({"keyframe": k, "delta_pose": delta.tolist(), "file": name})
        manifest = {"version": 1, "references": refs, "targets": items}
        (path / "bank.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, path) -> "TargetBank":
        path = Path(path)
        manifest = json.loads((path / "bank.json").read_text())
        bank = cls()
        for r in manifest["references"]:
            bank.references[int(r["keyframe"])] = np.load(path / r["file"])
        for t in manifest["targets"]:
            bank.add(t["keyframe"], t["delta_pose"], np.load(path / t["file"]))
        return bank


def build_target_bank(renderer: VirtualTargetRenderer, deltas, shapes) -> TargetBank:
    """Render ``renderer`` targets for every keyframe, relative pose and latent shape."""
    bank = TargetBank(references=dict(renderer.references))
    for k in sorted(renderer.references):
        for shape in shapes:
            for d in deltas:
                bank.add(k, d, renderer.render(k, d, shape))
    return bank


# -- HTTP --------------------------------------------------------------


class _BadRequest(ValueError):
    pass


def _parse_request(body: bytes):
    try:
        req = json.loads(body)
    except ValueError:
        raise _BadRequest("body is not JSON") from None
    if not isinstance(req, dict):
        raise _BadRequest("body must be a JSON object")
    if req.get("version") != PROTOCOL_VERSION:
        raise _BadRequest(f"unsupported protocol version {req.get('version')!r}")
    try:
        latent = decode_array(req["latent"])
        reference = decode_array(req["reference"])
        timestep = float(req["timestep"])
        delta = np.asarray(req["delta_pose"], dtype=np.float64)
    except (KeyError, TypeError, ValueError, ProtocolError) as exc:
        raise _BadRequest(f"malformed field: {exc}") from None
    if delta.shape != (3,) or not np.all(np.isfinite(delta)):
        raise _BadRequest("delta_pose must be three finite numbers")
    if not 0.0 <= timestep <= 1.0:
        raise _BadRequest("timestep must lie in [0, 1]")
    if latent.ndim != 3:
        raise _BadRequest("latent must have shape [c, h, w]")
    return latent, timestep, reference, delta


def make_handler(denoiser):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _reply(self, code: int, obj: dict) -> None:
            raw = json.dumps(obj).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def do_POST(self):
            if self.path != "/v1/denoise":
                self._reply(404, {"error": "unknown path"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length)
            try:
                latent, timestep, reference, delta = _parse_request(body)
                eps = denoiser.predict_epsilon(latent, timestep, reference, delta)
            except _BadRequest as exc:
                self._reply(400, {"error": str(exc)})
                return
            except DenoiserError as exc:
                self._reply(400, {"error": str(exc)})
                return
            self._reply(200, {"version": PROTOCOL_VERSION, "epsilon": encode_array(eps)})

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

    return Handler


def make_server(bank, port: int = 0, host: str = "127.0.0.1",
                schedule: NoiseSchedule | None = None) -> ThreadingHTTPServer:
    """HTTP server answering ``/v1/denoise`` with a toy denoiser over ``bank``."""
    server = ThreadingHTTPServer((host, port), make_handler(ToyDenoiser(bank, schedule)))
    server.daemon_threads = True
    return server


class serve_in_thread:
    """Context manager running :func:`make_server` in a background thread; yields the base URL."""

    def __init__(self, bank, port: int = 0, host: str = "127.0.0.1"):
        self.server = make_server(bank, port, host)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self) -> str:
        self.thread.start()
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join()
