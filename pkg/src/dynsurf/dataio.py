"""RGB-D sequence format, preprocessing and the analytic synthetic scene generator.

On-disk layout of a sequence directory::

    manifest.json        intrinsics, depth scale, per-frame pose (3x4 row-major) and file names
    rgb_0000.png         8-bit RGB
    depth_0000.png       16-bit z-depth in 1/depth_scale scene units (0 = invalid)
    mask_0000.png        8-bit, >= 128 is foreground
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import (
    Intrinsics,
    OrientationError,
    RigidPose,
    camera_directions,
    from_polar,
    look_at,
    PolarPose,
    pixel_centers,
    project,
    pseudo_camera,
    sphere_near_far,
)

__all__ = [
    "Frame",
    "Dataset",
    "LoadError",
    "save_dataset",
    "load_dataset",
    "preprocess",
    "SyntheticSceneSpec",
    "SyntheticScene",
    "synth_generate",
    "backproject",
]

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


class LoadError(ValueError):
    def __init__(self, msg: str, frame: int | None = None):
        super().__init__(msg if frame is None else f"frame {frame}: {msg}")
        self.frame = frame


@dataclass
class Frame:
    index: int
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) z-depth, 0 = invalid
    mask: np.ndarray  # (H, W) bool
    pose: RigidPose
    intrinsics: Intrinsics

    def __post_init__(self):
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3) or self.mask.shape != (h, w):
            raise ValueError(f"frame {self.index}: inconsistent image dimensions")
        if (self.intrinsics.width, self.intrinsics.height) != (w, h):
            raise ValueError(f"frame {self.index}: intrinsics do not match image size")
        if np.any(self.depth < 0):
            raise ValueError(f"frame {self.index}: negative depth")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class Dataset:
    frames: list[Frame]
    depth_scale: float = 1000.0

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i) -> Frame:
        return self.frames[i]


def backproject(frame: Frame, pixels_rc: np.ndarray | None = None) -> np.ndarray:
    """World points of valid depth pixels (all valid pixels when ``pixels_rc`` is None)."""
    if pixels_rc is None:
        pixels_rc = np.argwhere(frame.depth > 0)
    rows, cols = pixels_rc[:, 0], pixels_rc[:, 1]
    uv = np.stack([cols + 0.5, rows + 0.5], axis=-1)
    d_cam = camera_directions(frame.intrinsics, uv) * frame.depth[rows, cols][:, None]
    return d_cam @ frame.pose.rotation.T + frame.pose.translation


# -- serialization -----------------------------------------------------


def _intr_dict(k: Intrinsics) -> dict:
    return {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height}


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frames = []
    for f in ds.frames:
        names = {k: f"{k}_{f.index:04d}.png" for k in ("rgb", "depth", "mask")}
        Image.fromarray(np.round(np.clip(f.rgb, 0, 1) * 255).astype(np.uint8)).save(path / names["rgb"])
        d = np.round(f.depth * ds.depth_scale)
        if d.max(initial=0) > 65535:
            raise ValueError(f"frame {f.index}: depth exceeds 16-bit range at scale {ds.depth_scale}")
        Image.fromarray(d.astype(np.uint16)).save(path / names["depth"])
        Image.fromarray(np.where(f.mask, 255, 0).astype(np.uint8)).save(path / names["mask"])
        pose = np.hstack([f.pose.rotation, f.pose.translation[:, None]])
        frames.append({"index": f.index, **names, "pose": pose.ravel().tolist(), "intrinsics": _intr_dict(f.intrinsics)})
    manifest = {"version": FORMAT_VERSION, "depth_scale": ds.depth_scale, "frames": frames}
    if ds.frames:
        manifest["intrinsics"] = _intr_dict(ds.frames[0].intrinsics)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1))


def _read_png(path: Path, frame: int) -> np.ndarray:
    if not path.exists():
        raise LoadError(f"missing file {path.name}", frame)
    try:
        with Image.open(path) as im:
            return np.array(im)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise LoadError(f"cannot read {path.name}: {exc}", frame) from None


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise LoadError(f"no {MANIFEST} in {path}")
    manifest = json.loads((path / MANIFEST).read_text())
    scale = float(manifest.get("depth_scale", 1000.0))
    default_intr = manifest.get("intrinsics")
    frames = []
    for pos, entry in enumerate(manifest["frames"]):
        idx = int(entry.get("index", pos))
        if idx != pos:
            raise LoadError(f"frame indices must be contiguous from 0 (got {idx} at position {pos})", idx)
        for key in ("rgb", "depth", "mask"):
            if key not in entry:
                raise LoadError(f"manifest entry has no {key} file", idx)
        rgb = _read_png(path / entry["rgb"], idx)
        depth = _read_png(path / entry["depth"], idx)
        mask = _read_png(path / entry["mask"], idx)
        if rgb.ndim != 3 or rgb.shape[2] < 3:
            raise LoadError("rgb image must have 3 channels", idx)
        if depth.ndim != 2 or mask.ndim != 2:
            raise LoadError("depth and mask must be single-channel", idx)
        if depth.shape != rgb.shape[:2] or mask.shape != rgb.shape[:2]:
            raise LoadError("rgb, depth and mask dimensions differ", idx)
        pose_m = np.asarray(entry["pose"], dtype=np.float64)
        if pose_m.size != 12:
            raise LoadError("pose must have 12 values", idx)
        pose_m = pose_m.reshape(3, 4)
        pose = RigidPose(pose_m[:, :3], pose_m[:, 3])
        try:
            pose.check(1e-4)
        except ValueError as exc:
            raise LoadError(str(exc), idx) from None
        intr_d = entry.get("intrinsics", default_intr)
        if intr_d is None:
            raise LoadError("no intrinsics", idx)
        try:
            intr = Intrinsics(**intr_d)
            frames.append(
                Frame(
                    idx,
                    rgb[..., :3].astype(np.float64) / 255.0,
                    depth.astype(np.float64) / scale,
                    mask >= 128,
                    pose,
                    intr,
                )
            )
        except (TypeError, ValueError) as exc:
            raise LoadError(str(exc), idx) from None
    return Dataset(frames, scale)


# -- preprocessing -----------------------------------------------------


def _crop(img: np.ndarray, r0: int, c0: int, size: int) -> np.ndarray:
    out = np.zeros((size, size) + img.shape[2:], dtype=img.dtype)
    h, w = img.shape[:2]
    rs, re = max(r0, 0), min(r0 + size, h)
    cs, ce = max(c0, 0), min(c0 + size, w)
    if rs < re and cs < ce:
        out[rs - r0 : re - r0, cs - c0 : ce - c0] = img[rs:re, cs:ce]
    return out


def crop_window(frame: Frame, dilation: float = 0.1) -> tuple[int, int, int]:
    """(row0, col0, size) of the square crop centered on the object-center pixel."""
    (uv,), z = project(frame.intrinsics, frame.pose, np.zeros((1, 3)))
    if not z[0] > 0:
        raise OrientationError("object center behind the camera")
    cu, cv = int(round(uv[0])), int(round(uv[1]))
    rows, cols = np.nonzero(frame.mask)
    if len(rows):
        ext = max(np.abs(cols + 0.5 - cu).max(), np.abs(rows + 0.5 - cv).max())
        half = int(math.ceil((1.0 + dilation) * ext - 1e-9))
    else:
        half = min(frame.shape) // 2
    half = max(half, 1)
    return cv - half, cu - half, 2 * half


def preprocess(ds: Dataset, dilation: float = 0.1) -> Dataset:
    """Pseudo cameras through the object center plus a centered square crop.

    Frames whose object center lies behind the camera are dropped with a
    warning.
    """
    out = []
    for f in ds.frames:
        try:
            r0, c0, size = crop_window(f, dilation)
            pose = pseudo_camera(f.pose)
        except OrientationError:
            log.warning("frame %d: object center behind camera, dropped", f.index)
            continue
        intr = Intrinsics(f.intrinsics.fx, f.intrinsics.fy, size / 2.0, size / 2.0, size, size)
        out.append(
            Frame(
                len(out),
                _crop(f.rgb, r0, c0, size),
                _crop(f.depth, r0, c0, size),
                _crop(f.mask, r0, c0, size),
                pose,
                intr,
            )
        )
    return Dataset(out, ds.depth_scale)


# -- synthetic scenes --------------------------------------------------


@dataclass
class SyntheticSceneSpec:
    """Analytic deforming scene observed by an orbiting camera.

    The world-space shape at frame ``t`` is the canonical primitive scaled by
    ``s(t)``, rotated by ``R(t)`` about ``axis`` and translated by ``b(t)``;
    each of the three is a sinusoid of period ``n_frames`` with the given
    amplitude (zero amplitude = static).
    """

    primitive: str = "sphere"  # sphere | box | capsule | union
    radius: float = 0.5
    half_extents: tuple = (0.35, 0.25, 0.3)
    capsule_half_length: float = 0.25
    albedo: str = "stripes"  # stripes | constant
    albedo_color: tuple = (0.8, 0.6, 0.4)
    albedo_frequency: float = 6.0
    translate_amplitude: float = 0.0
    translate_axis: tuple = (1.0, 0.0, 0.0)
    rotate_amplitude: float = 0.0
    rotate_axis: tuple = (0.0, 0.0, 1.0)
    scale_amplitude: float = 0.0
    n_frames: int = 20
    width: int = 64
    height: int = 64
    fov_deg: float = 45.0
    orbit_radius: float = 2.0
    orbit_polar_deg: float = 75.0
    azimuth_start_deg: float = 0.0
    azimuth_end_deg: float = 360.0
    light_dir: tuple = (0.3, 0.4, 0.866)
    ambient: float = 0.3
    gt_mesh_resolution: int = 96
    depth_scale: float = 1000.0

    def __post_init__(self):
        if self.primitive not in ("sphere", "box", "capsule", "union"):
            raise ValueError(f"unknown primitive {self.primitive!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        known = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**known)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def _rotation(axis, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * k @ k


class SyntheticScene:
    """Closed-form SDF, albedo and motion of a :class:`SyntheticSceneSpec`."""

    def __init__(self, spec: SyntheticSceneSpec):
        self.spec = spec

    # motion
    def _phase(self, t) -> float:
        return math.sin(2.0 * math.pi * t / self.spec.n_frames)

    def transform(self, t):
        """(scale, rotation, translation) mapping canonical to world at frame ``t``."""
        sp = self.spec
        ph = self._phase(t)
        scale = 1.0 + sp.scale_amplitude * ph
        rot = _rotation(sp.rotate_axis, sp.rotate_amplitude * ph)
        axis = np.asarray(sp.translate_axis, dtype=np.float64)
        trans = sp.translate_amplitude * ph * axis / np.linalg.norm(axis)
        return scale, rot, trans

    def to_canonical(self, x, t) -> np.ndarray:
        s, rot, b = self.transform(t)
        return ((np.asarray(x) - b) @ rot) / s

    def to_world(self, xc, t) -> np.ndarray:
        s, rot, b = self.transform(t)
        return (s * np.asarray(xc)) @ rot.T + b

    # shape
    def canonical_sdf(self, p: np.ndarray) -> np.ndarray:
        sp = self.spec
        if sp.primitive == "sphere":
            return np.linalg.norm(p, axis=-1) - sp.radius
        if sp.primitive == "box":
            return _box_sdf(p, np.asarray(sp.half_extents))
        if sp.primitive == "capsule":
            return _capsule_sdf(p, sp.capsule_half_length, sp.radius)
        return np.minimum(
            np.linalg.norm(p - np.array([0.0, 0.0, 0.2]), axis=-1) - 0.8 * sp.radius,
            _box_sdf(p - np.array([0.0, 0.0, -0.2]), np.asarray(sp.half_extents) * 0.8),
        )

    def sdf(self, x, t) -> np.ndarray:
        s, _, _ = self.transform(t)
        return s * self.canonical_sdf(self.to_canonical(x, t))

    def albedo(self, xc: np.ndarray) -> np.ndarray:
        sp = self.spec
        base = np.broadcast_to(np.asarray(sp.albedo_color, dtype=np.float64), xc.shape[:-1] + (3,))
        if sp.albedo == "constant":
            return base.copy()
        w = sp.albedo_frequency
        pattern = np.stack(
            [np.sin(w * xc[..., 0]), np.sin(w * xc[..., 1] + 1.0), np.sin(w * xc[..., 2] + 2.0)], axis=-1
        )
        return np.clip(base + 0.2 * pattern, 0.0, 1.0)

    def normal(self, x, t, eps: float = 1e-6) -> np.ndarray:
        g = np.stack(
            [(self.sdf(x + e, t) - self.sdf(x - e, t)) / (2 * eps) for e in np.eye(3) * eps], axis=-1
        )
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    # cameras
    def camera(self, t) -> RigidPose:
        sp = self.spec
        span = sp.azimuth_end_deg - sp.azimuth_start_deg
        full = abs(span - 360.0) < 1e-9
        frac = t / sp.n_frames if full else t / max(sp.n_frames - 1, 1)
        az = math.radians(sp.azimuth_start_deg + span * frac)
        eye = from_polar(PolarPose(sp.orbit_radius, math.radians(sp.orbit_polar_deg), az))
        return look_at(eye)

    def intrinsics(self, width: int | None = None, height: int | None = None) -> Intrinsics:
        return Intrinsics.from_fov(self.spec.fov_deg, width or self.spec.width, height or self.spec.height)

    # rendering
    def trace(self, origins, dirs, t, max_iter: int = 256, tol: float = 1e-7):
        """Sphere tracing; returns (ray distance, hit mask)."""
        near, far = sphere_near_far(origins, dirs, 1.0)
        dist = near.copy()
        alive = far > near
        hit = np.zeros(len(dist), dtype=bool)
        for _ in range(max_iter):
            if not alive.any():
                break
            idx = np.nonzero(alive)[0]
            d = self.sdf(origins[idx] + dist[idx, None] * dirs[idx], t)
            done = d < tol
            hit[idx[done]] = True
            alive[idx[done]] = False
            step_idx = idx[~done]
            dist[step_idx] += d[~done]
            alive[step_idx[dist[step_idx] > far[step_idx]]] = False
        return dist, hit

    def render(self, t, intr: Intrinsics, pose: RigidPose, mode: str = "observed", light_dir=None,
               ambient: float | None = None, bg=(0.0, 0.0, 0.0)):
        """Render (rgb, z-depth, mask).

        ``observed`` shades the albedo with the fixed scene light (what the
        sensor sees); ``albedo``, ``lambertian`` and ``textureless`` mirror the
        model renderer's modes.
        """
        sp = self.spec
        uv = pixel_centers(intr.width, intr.height)
        d_cam = camera_directions(intr, uv)
        dirs = d_cam @ pose.rotation.T
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        origins = np.broadcast_to(pose.translation, dirs.shape).copy()
        dist, hit = self.trace(origins, dirs, t)
        pts = origins + dist[:, None] * dirs
        rgb = np.broadcast_to(np.asarray(bg, dtype=np.float64), (len(dirs), 3)).copy()
        if hit.any():
            p = pts[hit]
            alb = self.albedo(self.to_canonical(p, t))
            n = self.normal(p, t)
            if mode == "observed":
                light = np.asarray(sp.light_dir, dtype=np.float64)
                amb = sp.ambient if ambient is None else ambient
            else:
                light = None if light_dir is None else np.asarray(light_dir, dtype=np.float64)
                amb = 0.1 if ambient is None else ambient
            if mode == "albedo":
                col = alb
            else:
                if light is None:
                    raise ValueError("shaded modes need a light direction")
                light = light / np.linalg.norm(light)
                base = np.ones_like(alb) if mode == "textureless" else alb
                lam = np.clip(n @ light, 0.0, None)[:, None]
                col = np.clip(base * (amb + (1 - amb) * lam), 0.0, 1.0)
            rgb[hit] = col
        z = np.where(hit, dist * (dirs @ pose.viewing_axis), 0.0)
        shape = (intr.height, intr.width)
        return rgb.reshape(shape + (3,)), z.reshape(shape), hit.reshape(shape)

    def frame(self, t) -> Frame:
        intr = self.intrinsics()
        pose = self.camera(t)
        rgb, depth, mask = self.render(t, intr, pose)
        return Frame(t, rgb, depth, mask, pose, intr)

    def gt_mesh(self, t, resolution: int | None = None):
        from .evaluation import mesh_from_sdf

        return mesh_from_sdf(lambda x: self.sdf(x, t), resolution or self.spec.gt_mesh_resolution)


def _box_sdf(p, half):
    q = np.abs(p) - half
    return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)


def _capsule_sdf(p, half_length, radius):
    z = np.clip(p[..., 2], -half_length, half_length)
    closest = np.stack([np.zeros_like(z), np.zeros_like(z), z], axis=-1)
    return np.linalg.norm(p - closest, axis=-1) - radius


@dataclass
class SyntheticResult:
    dataset: Dataset
    scene: SyntheticScene
    gt_meshes: list = field(default_factory=list)


def synth_generate(spec: SyntheticSceneSpec, out=None, with_meshes: bool = True) -> SyntheticResult:
    """Render the sequence (and GT meshes); write it to ``out`` when given."""
    scene = SyntheticScene(spec)
    ds = Dataset([scene.frame(t) for t in range(spec.n_frames)], spec.depth_scale)
    meshes = [scene.gt_mesh(t) for t in range(spec.n_frames)] if with_meshes else []
    if out is not None:
        from .evaluation import write_ply

        out = Path(out)
        save_dataset(ds, out)
        (out / "scene.json").write_text(json.dumps(spec.to_dict(), indent=1))
        for t, m in enumerate(meshes):
            write_ply(m, out / f"gt_mesh_{t:04d}.ply")
    return SyntheticResult(ds, scene, meshes)
