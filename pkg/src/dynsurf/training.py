"""Optimization loop: schedules, real/virtual alternation, EMA and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import torch

from .cameras import (
    ViewBounds,
    from_polar,
    generate_rays,
    pixel_centers,
    relative_polar,
    sample_virtual_view,
    to_polar,
)
from .dataio import Dataset
from .diffusion import (
    DenoiserError,
    IdentityCodec,
    KeyframeCache,
    NoiseSchedule,
    sds_loss,
    sds_weight,
)
from .encodings import bandwidth_ratio
from .fields import ModelConfig, SceneModel
from .losses import (
    LossWeights,
    TruncationConfig,
    loss_beta,
    loss_cano,
    loss_code,
    loss_color,
    loss_depth,
    loss_mask,
    loss_sdf_truncation,
    loss_smooth,
    loss_surf,
    total_loss,
)
from .rendering import OccupancyGrid, render_rays, update_occupancy

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

__all__ = [
    "TrainConfig",
    "lr_schedule",
    "EMA",
    "Trainer",
    "CheckpointError",
    "save_checkpoint",
    "read_checkpoint",
    "run_training",
    "config_to_toml",
    "config_from_toml",
    "config_from_dict",
    "model_from_checkpoint",
    "load_config",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: int = 0
    e_max: int = 2000
    e_warm: int = 200
    lr_start: float = 5e-6
    lr_peak: float = 5e-4
    lr_floor: float = 0.05
    adam_betas: tuple = (0.9, 0.99)
    adam_eps: float = 1e-8
    adam_eps_hash: float = 1e-15
    steps_per_epoch: int = 0  # 0: one real step per frame
    rays_per_batch: int = 2048
    fg_fraction: float = 0.5
    virtual_ratio: float = 0.1
    virtual_res_warm: int = 64
    virtual_res_main: int = 128
    t_range_warm: tuple = (0.02, 0.5)
    t_range_main: tuple = (0.02, 0.2)
    ema_decay: float = 0.95
    render_step: float = 0.01
    occupancy_resolution: int = 128
    occupancy_refresh: int = 20
    occupancy_frames: int = 4
    occupancy_beta_factor: float = 7.0
    keyframe_interval: int = 10
    guidance: float = 5.0
    shading_probs: tuple = (0.25, 0.25, 0.5)  # textureless, albedo, lambertian
    light_mode: str = "random"  # random | headlight
    ambient: float = 0.1
    virtual_bg: str = "random"  # random | white | black
    virtual_radius: tuple = (1.8, 2.4)
    virtual_polar_deg: tuple = (45.0, 105.0)
    virtual_azimuth_deg: tuple = (-180.0, 180.0)
    cano_samples: int = 1024
    smooth_rays: int = 256
    code_half_width: int = 1
    checkpoint_every: int = 0
    threads: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    truncation: TruncationConfig = field(default_factory=TruncationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not 0 < self.e_warm < self.e_max:
            raise ValueError("need 0 < e_warm < e_max")
        if not self.lr_start < self.lr_peak:
            raise ValueError("need lr_start < lr_peak")
        for rng in (self.t_range_warm, self.t_range_main):
            if not 0 < rng[0] <= rng[1] < 1:
                raise ValueError("timestep ranges must lie inside (0, 1)")
        if abs(sum(self.shading_probs) - 1.0) > 1e-9:
            raise ValueError("shading probabilities must sum to 1")

    def view_bounds(self) -> ViewBounds:
        return ViewBounds(
            tuple(self.virtual_radius),
            tuple(math.radians(a) for a in self.virtual_polar_deg),
            tuple(math.radians(a) for a in self.virtual_azimuth_deg),
        )


# -- config files ------------------------------------------------------


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def config_to_toml(cfg: TrainConfig) -> str:
    return tomli_w.dumps(_to_plain(cfg))


def _from_plain(cls, data: dict):
    kwargs = {}
    names = {f.name: f for f in fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ValueError(f"unknown config key {cls.__name__}.{key}")
        default = getattr(cls(), key) if cls is not TrainConfig else getattr(_DEFAULT, key)
        if is_dataclass(default):
            value = _from_plain(type(default), value)
        elif isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, float) and isinstance(value, int):
            value = float(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> TrainConfig:
    """Build a config from nested plain values; unknown keys are rejected."""
    return _from_plain(TrainConfig, data)


def config_from_toml(text: str) -> TrainConfig:
    return config_from_dict(tomllib.loads(text))


def load_config(path) -> TrainConfig:
    return config_from_toml(Path(path).read_text())


def config_hash(cfg: TrainConfig) -> bytes:
    return hashlib.sha256(config_to_toml(cfg).encode()).digest()


_DEFAULT = TrainConfig()


# -- schedules ---------------------------------------------------------


def lr_schedule(epoch: float, cfg: TrainConfig) -> float:
    """Constant start, linear warm-up to the peak, then cosine decay to ``lr_floor * peak``."""
    mu1, mu2, k = cfg.lr_start, cfg.lr_peak, cfg.lr_floor
    e_w = cfg.e_warm
    if epoch <= 0.5 * e_w:
        return mu1
    if epoch <= e_w:
        w = (2.0 * epoch - e_w) / e_w
        return (1.0 - w) * mu1 + w * mu2
    c = math.cos(math.pi * (epoch - e_w) / (cfg.e_max - e_w))
    return mu2 * (k + (1.0 - k) * 0.5 * (1.0 + c))


class EMA:
    """Exponential moving average of model parameters."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {n: p.detach().clone() for n, p in model.named_parameters()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for n, p in model.named_parameters():
            self.shadow[n].mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    @torch.no_grad()
    def copy_to(self, model: torch.nn.Module) -> None:
        for n, p in model.named_parameters():
            p.copy_(self.shadow[n])


# -- checkpoints -------------------------------------------------------

MAGIC = b"DYNSURF\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, blocks: dict, meta: dict, cfg_hash: bytes) -> None:
    """Little-endian binary: magic, version, config hash, JSON metadata, named float64 blocks.

    Written to a temporary file and renamed into place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION), cfg_hash,
             struct.pack("<Q", len(meta_raw)), meta_raw, struct.pack("<I", len(blocks))]
    for name in sorted(blocks):
        arr = np.array(blocks[name], dtype="<f8", order="C")  # keeps 0-d shapes
        raw_name = name.encode()
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Returns (blocks, meta, config_hash)."""
    raw = Path(path).read_bytes()
    try:
        return _parse_checkpoint(raw, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(raw: bytes, path):
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    cfg_hash = raw[12:44]
    (meta_len,) = struct.unpack_from("<Q", raw, 44)
    off = 52
    meta = json.loads(raw[off : off + meta_len])
    off += meta_len
    (n_blocks,) = struct.unpack_from("<I", raw, off)
    off += 4
    blocks = {}
    for _ in range(n_blocks):
        (n,) = struct.unpack_from("<I", raw, off)
        name = raw[off + 4 : off + 4 + n].decode()
        off += 4 + n
        (ndim,) = struct.unpack_from("<I", raw, off)
        shape = struct.unpack_from(f"<{ndim}Q", raw, off + 4)
        off += 4 + 8 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        blocks[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return blocks, meta, cfg_hash


# -- trainer -----------------------------------------------------------


def _ray_distance(depth_z: np.ndarray, directions: np.ndarray, axis: np.ndarray) -> np.ndarray:
    return depth_z / (directions @ axis)


class Trainer:
    """Holds the model, optimizer, EMA, occupancy grid and RNG of one run."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig, denoiser=None, keyframes: KeyframeCache | None = None):
        torch.set_num_threads(cfg.threads)
        self.dataset = dataset
        self.cfg = cfg
        self.denoiser = denoiser
        model_cfg = ModelConfig(**{**asdict(cfg.model), "n_frames": len(dataset)})
        self.model = SceneModel(model_cfg, seed=cfg.seed)
        self.model.ratio = bandwidth_ratio(0, cfg.e_max)
        self.ema = EMA(self.model, cfg.ema_decay)
        hash_ids = {id(p) for p in self.model.hash_parameters()}
        self.param_names = {id(p): n for n, p in self.model.named_parameters()}
        self.optimizer = torch.optim.Adam(
            [
                {"params": [p for p in self.model.parameters() if id(p) in hash_ids], "eps": cfg.adam_eps_hash},
                {"params": [p for p in self.model.parameters() if id(p) not in hash_ids], "eps": cfg.adam_eps},
            ],
            lr=cfg.lr_start,
            betas=tuple(cfg.adam_betas),
            foreach=False,
        )
        self.rng = np.random.default_rng(cfg.seed)
        self.grid = OccupancyGrid(cfg.occupancy_resolution)
        self.schedule = NoiseSchedule()
        self.codec = IdentityCodec()
        self.keyframes = keyframes
        if denoiser is not None and keyframes is None:
            self.keyframes = KeyframeCache.build(
                lambda k: np.transpose(dataset[k].rgb, (2, 0, 1)), len(dataset), cfg.keyframe_interval, self.codec
            )
        self.epoch = 0
        self.real_steps = 0
        self.virtual_steps = 0
        self.skipped_virtual = 0
        self.virtual_credit = 0.0
        self.history: list[dict] = []

    # phase helpers
    @property
    def warmup(self) -> bool:
        return self.epoch < self.cfg.e_warm

    def virtual_resolution(self) -> int:
        return self.cfg.virtual_res_warm if self.warmup else self.cfg.virtual_res_main

    def timestep_range(self) -> tuple:
        return self.cfg.t_range_warm if self.warmup else self.cfg.t_range_main

    def _set_lr(self) -> float:
        lr = lr_schedule(self.epoch, self.cfg)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        return lr

    def _apply(self, loss: torch.Tensor, frozen=()) -> None:
        self.optimizer.zero_grad(set_to_none=True)
        if loss.requires_grad:
            loss.backward()
        for p in frozen:
            p.grad = None
        self.optimizer.step()
        self.ema.update(self.model)

    # real views
    def _sample_pixels(self, mask: np.ndarray, n: int) -> np.ndarray:
        fg = np.flatnonzero(mask.ravel())
        bg = np.flatnonzero(~mask.ravel())
        n_fg = int(round(n * self.cfg.fg_fraction)) if len(bg) else n
        if not len(fg):
            n_fg = 0
        picks = []
        if n_fg:
            picks.append(self.rng.choice(fg, size=n_fg, replace=len(fg) < n_fg))
        if n - n_fg:
            picks.append(self.rng.choice(bg, size=n - n_fg, replace=len(bg) < n - n_fg))
        return np.concatenate(picks)

    def real_losses(self, t: int, pixel_ids: np.ndarray | None = None) -> dict:
        """Loss terms of one real-view batch from frame ``t``."""
        cfg, w = self.cfg, self.cfg.weights
        frame = self.dataset[t]
        h, wd = frame.shape
        if pixel_ids is None:
            pixel_ids = self._sample_pixels(frame.mask, cfg.rays_per_batch)
        rows, cols = np.divmod(pixel_ids, wd)
        uv = np.stack([cols + 0.5, rows + 0.5], axis=-1)
        rays = generate_rays(frame.intrinsics, frame.pose, uv)
        rgb = frame.rgb[rows, cols]
        mask = frame.mask[rows, cols]
        z = frame.depth[rows, cols]
        dist = _ray_distance(z, rays.directions, frame.pose.viewing_axis)
        has_depth = (z > 0) & mask

        out = render_rays(self.model, rays, t, "albedo", (0.0, 0.0, 0.0), self.grid, cfg.render_step)
        parts = {}
        if w.color:
            parts["color"] = loss_color(out.color, rgb, mask)
        if w.depth:
            parts["depth"] = loss_depth(out.depth, np.where(has_depth, dist, 0.0), has_depth)
        if w.mask:
            parts["mask"] = loss_mask(out.opacity, mask)
        if w.sdf:
            dm = np.broadcast_to(np.where(has_depth, dist, 0.0)[:, None], out.samples.depths.shape)
            parts["sdf"] = loss_sdf_truncation(
                out.sdf, out.samples.depths[out.samples.valid], dm[out.samples.valid], cfg.truncation.tr
            )
        if w.surf:
            pts = rays.origins[has_depth] + dist[has_depth, None] * rays.directions[has_depth]
            parts["surf"] = loss_surf(self.model, torch.from_numpy(pts), rgb[has_depth], t)
        if w.smooth:
            idx = np.flatnonzero(has_depth)
            if len(idx) > cfg.smooth_rays:
                idx = self.rng.choice(idx, size=cfg.smooth_rays, replace=False)
            parts["smooth"] = loss_smooth(
                self.model, rays.origins[idx], rays.directions[idx], dist[idx], t, cfg.truncation, self.rng
            )
        parts.update(self._cano_parts(out, rays, t))
        if w.code:
            parts["code"] = loss_code(self.model.codes, float(self.model.codes.normalize(t)), cfg.code_half_width)
        if w.beta:
            parts["beta"] = loss_beta(self.model.beta)
        return parts

    def _cano_parts(self, out, rays, t) -> dict:
        w = self.cfg.weights
        if not (w.ori or w.normal or w.eik):
            return {}
        ray_of_sample = np.broadcast_to(np.arange(len(rays))[:, None], out.samples.depths.shape)[out.samples.valid]
        n = len(ray_of_sample)
        sel = np.arange(n)
        if n > self.cfg.cano_samples:
            sel = np.sort(self.rng.choice(n, size=self.cfg.cano_samples, replace=False))
        sel_t = torch.from_numpy(sel)
        weights = out.weights[torch.from_numpy(out.samples.valid)][sel_t].detach()
        terms = loss_cano(
            self.model,
            out.points[sel_t].detach(),
            rays.directions[ray_of_sample[sel]],
            t,
            self.cfg.truncation,
            self.rng,
            weights,
        )
        return {k: v for k, v in terms.items() if getattr(w, k)}

    def step_real(self, t: int) -> dict:
        parts = self.real_losses(t)
        loss, report = total_loss(parts, self.cfg.weights)
        self._apply(loss)
        self.real_steps += 1
        report.update(kind="real", frame=int(t), epoch=self.epoch)
        return report

    # virtual views
    def _light(self, cam_center: np.ndarray) -> np.ndarray:
        toward_cam = cam_center / np.linalg.norm(cam_center)
        if self.cfg.light_mode == "headlight":
            return toward_cam
        v = self.rng.normal(size=3)
        v /= np.linalg.norm(v)
        if v @ toward_cam < 0:
            v = -v
        return v

    def _background(self) -> np.ndarray:
        if self.cfg.virtual_bg == "random":
            return self.rng.uniform(size=3)
        return np.ones(3) if self.cfg.virtual_bg == "white" else np.zeros(3)

    def render_virtual(self, t: int, pose, res: int, mode: str, light, bg):
        k = self.keyframes.nearest(t)
        intr = self.dataset[k].intrinsics.scaled(res, res)
        rays = generate_rays(intr, pose, pixel_centers(res, res))
        out = render_rays(
            self.model, rays, t, mode, bg, self.grid, self.cfg.render_step, light, self.cfg.ambient,
            with_normals=mode != "albedo", fd_eps=self.cfg.truncation.fd_eps,
        )
        image = out.color.T.reshape(3, res, res)
        return image, out, rays

    def step_virtual(self, t: int | None = None) -> dict:
        """One score-distillation step on a sampled virtual view of frame ``t``."""
        cfg = self.cfg
        if self.denoiser is None or self.keyframes is None:
            raise RuntimeError("virtual steps need a denoiser and keyframes")
        if t is None:
            t = int(self.rng.integers(len(self.dataset)))
        k = self.keyframes.nearest(t)
        ref_pose = self.dataset[k].pose
        ref_polar = to_polar(ref_pose)
        pose, virt_polar = sample_virtual_view(self.rng, cfg.view_bounds(), ref_polar)
        mode = ("textureless", "albedo", "lambertian")[int(self.rng.choice(3, p=list(cfg.shading_probs)))]
        light = self._light(pose.translation)
        bg = self._background()
        res = self.virtual_resolution()
        lo, hi = self.timestep_range()
        i = float(self.rng.uniform(lo, hi))
        weight = sds_weight(self.schedule, i, from_polar(ref_polar), pose.translation)
        delta = relative_polar(ref_polar, virt_polar).as_array()

        image, out, rays = self.render_virtual(t, pose, res, mode, light, bg)
        eps = self.rng.normal(size=tuple(self.codec.encode(image).shape))
        report = {"kind": "virtual", "frame": int(t), "keyframe": int(k), "epoch": self.epoch,
                  "timestep": i, "sds_weight": weight, "mode": mode}
        try:
            sds = sds_loss(image, self.codec, self.denoiser, self.schedule, i, self.keyframes.latents[k],
                           delta, weight, eps)
        except DenoiserError as exc:
            log.warning("virtual step skipped: %s", exc)
            self.skipped_virtual += 1
            report["skipped"] = str(exc)
            return report
        parts = {"sds": sds.loss} if cfg.weights.sds else {}
        parts.update(self._cano_parts(out, rays, t))
        loss, terms = total_loss(parts, cfg.weights)
        frozen = self.model.deformation_parameters() if self.warmup else ()
        self._apply(loss, frozen)
        self.virtual_steps += 1
        report.update(terms)
        return report

    # epochs
    def refresh_occupancy(self) -> None:
        n = len(self.dataset)
        frames = np.sort(self.rng.choice(n, size=min(n, self.cfg.occupancy_frames), replace=False))
        update_occupancy(self.model, self.grid, frames.tolist(), beta_factor=self.cfg.occupancy_beta_factor)

    def run_epoch(self) -> list[dict]:
        cfg = self.cfg
        self.model.ratio = bandwidth_ratio(self.epoch, cfg.e_max)
        lr = self._set_lr()
        if cfg.occupancy_refresh and self.epoch % cfg.occupancy_refresh == 0:
            self.refresh_occupancy()
        n = len(self.dataset)
        steps = cfg.steps_per_epoch or n
        order = np.concatenate([self.rng.permutation(n) for _ in range(-(-steps // n))])[:steps]
        reports = []
        for t in order:
            rep = self.step_real(int(t))
            rep["lr"] = lr
            reports.append(rep)
            if self.denoiser is not None and cfg.virtual_ratio > 0:
                self.virtual_credit += cfg.virtual_ratio
                if self.virtual_credit >= 1.0 - 1e-9:
                    self.virtual_credit -= 1.0
                    reports.append(self.step_virtual())
        self.epoch += 1
        self.history.extend(reports)
        return reports

    def run(self, until_epoch: int | None = None, checkpoint_dir=None, on_epoch=None) -> None:
        stop = self.cfg.e_max if until_epoch is None else min(until_epoch, self.cfg.e_max)
        while self.epoch < stop:
            reports = self.run_epoch()
            if on_epoch is not None:
                on_epoch(self, reports)
            if checkpoint_dir is not None and self.cfg.checkpoint_every and self.epoch % self.cfg.checkpoint_every == 0:
                self.save(Path(checkpoint_dir) / f"epoch_{self.epoch:05d}.ckpt")

    # persistence
    def state_blocks(self) -> dict:
        blocks = {}
        for n, p in self.model.named_parameters():
            blocks[f"param/{n}"] = p.detach().numpy()
            blocks[f"ema/{n}"] = self.ema.shadow[n].numpy()
        for p, st in self.optimizer.state.items():
            n = self.param_names[id(p)]
            for key, val in st.items():
                blocks[f"adam/{key}/{n}"] = val.detach().double().numpy()
        blocks["occupancy"] = self.grid.values
        return blocks

    def meta(self) -> dict:
        return {
            "epoch": self.epoch,
            "real_steps": self.real_steps,
            "virtual_steps": self.virtual_steps,
            "skipped_virtual": self.skipped_virtual,
            "virtual_credit": self.virtual_credit,
            "rng": self.rng.bit_generator.state,
            "config": config_to_toml(self.cfg),
            "n_frames": len(self.dataset),
            "bandwidth_ratio": float(self.model.ratio),
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.state_blocks(), self.meta(), config_hash(self.cfg))

    def load_state(self, blocks: dict, meta: dict) -> None:
        params = dict(self.model.named_parameters())
        with torch.no_grad():
            for n, p in params.items():
                p.copy_(torch.from_numpy(blocks[f"param/{n}"]))
                self.ema.shadow[n] = torch.from_numpy(blocks[f"ema/{n}"]).clone()
        self.optimizer.state.clear()
        for name, arr in blocks.items():
            if not name.startswith("adam/"):
                continue
            _, key, pname = name.split("/", 2)
            p = params[pname]
            if key == "step":
                val = torch.tensor(float(arr), dtype=torch.float32)
            else:
                val = torch.from_numpy(arr).to(p.dtype).clone()
            self.optimizer.state[p][key] = val
        self.grid.values = blocks["occupancy"].copy()
        self.epoch = int(meta["epoch"])
        self.real_steps = int(meta["real_steps"])
        self.virtual_steps = int(meta["virtual_steps"])
        self.skipped_virtual = int(meta.get("skipped_virtual", 0))
        self.virtual_credit = float(meta["virtual_credit"])
        self.rng.bit_generator.state = meta["rng"]
        self.model.ratio = float(meta["bandwidth_ratio"])

    @classmethod
    def from_checkpoint(cls, path, dataset: Dataset, denoiser=None, keyframes=None) -> "Trainer":
        blocks, meta, stored_hash = read_checkpoint(path)
        cfg = config_from_toml(meta["config"])
        if config_hash(cfg) != stored_hash:
            raise CheckpointError(f"{path}: config hash does not match the stored config")
        trainer = cls(dataset, cfg, denoiser, keyframes)
        trainer.load_state(blocks, meta)
        return trainer

    def ema_model(self) -> SceneModel:
        """A copy of the model carrying the EMA parameters."""
        model = SceneModel(self.model.cfg, seed=self.cfg.seed)
        self.ema.copy_to(model)
        model.ratio = self.model.ratio
        return model


def model_from_checkpoint(path, use_ema: bool = True) -> SceneModel:
    blocks, meta, _ = read_checkpoint(path)
    cfg = config_from_toml(meta["config"])
    model_cfg = ModelConfig(**{**asdict(cfg.model), "n_frames": int(meta["n_frames"])})
    model = SceneModel(model_cfg, seed=cfg.seed)
    prefix = "ema/" if use_ema else "param/"
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(torch.from_numpy(blocks[prefix + n]))
    model.ratio = float(meta["bandwidth_ratio"])
    return model


def run_training(dataset: Dataset, cfg: TrainConfig, denoiser=None, out_dir=None, on_epoch=None) -> Trainer:
    """Train for ``cfg.e_max`` epochs; writes ``final.ckpt`` into ``out_dir`` when given."""
    trainer = Trainer(dataset, cfg, denoiser)
    trainer.run(checkpoint_dir=out_dir, on_epoch=on_epoch)
    if out_dir is not None:
        trainer.save(Path(out_dir) / "final.ckpt")
    return trainer
