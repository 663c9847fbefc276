"""Finite-difference check of every loss term's parameter gradient on a tiny model.

Each term is a closure over a fixed batch.  Quantities the losses treat as
constants (tangent offsets, rendering weights, the SDS residual) are drawn
once and frozen so the finite differences see the same function as autograd.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .cameras import Intrinsics, generate_rays, look_at
from .dataio import SyntheticScene, SyntheticSceneSpec
from .diffusion import IdentityCodec, NoiseSchedule, ToyDenoiser, sds_loss
from .fields import ModelConfig, SceneModel
from .losses import (
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
)
from .rendering import render_rays

__all__ = ["TERMS", "TermResult", "tiny_model_config", "build_terms", "check_term", "run_gradcheck"]

TERMS = ("color", "depth", "mask", "sdf", "surf", "smooth", "ori", "normal", "eik", "code", "beta", "sds")


@dataclass
class TermResult:
    term: str
    max_rel_err: float
    worst: str  # parameter[index] with the largest error
    n_coords: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= 1e-4


def tiny_model_config(n_frames: int = 8) -> ModelConfig:
    return ModelConfig(
        n_frames=n_frames, code_dim=4, deform_bands=2, topo_bands=2, hidden=8, depth=2,
        hash_levels=4, hash_feat=2, log2_table=8, base_resolution=4, max_resolution=16,
        decoder_hidden=8, decoder_layers=3, geo_feat=4,
    )


def build_terms(model: SceneModel, seed: int = 0, t: int = 3) -> dict:
    """Closures ``name -> () -> scalar tensor`` over a 4-ray, 8-sample batch.

    ``sds`` is special: it returns ``(loss, oracle)`` where ``oracle()`` is the
    scalar whose parameter gradient the SDS loss must reproduce.
    """
    cfg = TruncationConfig()
    scene = SyntheticScene(SyntheticSceneSpec(radius=0.45, width=8, height=8))
    pose = look_at((0.0, 0.0, 2.0))
    intr = Intrinsics(40.0, 40.0, 4.0, 4.0, 8, 8)
    pixels = np.array([[3.5, 3.5], [4.5, 3.5], [3.5, 4.5], [4.5, 4.5]])
    rays = generate_rays(intr, pose, pixels)
    step = 0.25  # 8 samples across the unit bounding sphere
    rgb_img, depth_img, mask_img = scene.render(t, intr, pose)
    rows, cols = pixels[:, 1].astype(int), pixels[:, 0].astype(int)
    rgb, mask = rgb_img[rows, cols], mask_img[rows, cols]
    dist = depth_img[rows, cols] / (rays.directions @ pose.viewing_axis)
    surf_pts = torch.from_numpy(rays.origins + dist[:, None] * rays.directions)

    def render(mode="albedo", light=None):
        return render_rays(model, rays, t, mode, (0.0, 0.0, 0.0), None, step, light, 0.1, fd_eps=cfg.fd_eps)

    with torch.no_grad():
        base = render()
    reg_points = base.points.detach().clone()
    ray_of_sample = np.broadcast_to(np.arange(len(rays))[:, None], base.samples.depths.shape)[base.samples.valid]
    view_dirs = rays.directions[ray_of_sample]
    reg_weights = base.weights[torch.from_numpy(base.samples.valid)].detach().clone()
    frozen_smooth, frozen_cano = {}, {}

    def rng():
        return np.random.default_rng(seed)

    def cano(name):
        return lambda: loss_cano(model, reg_points, view_dirs, t, cfg, rng(), reg_weights, frozen_cano)[name]

    def sdf_term():
        out = render()
        valid = out.samples.valid
        dm = np.broadcast_to(dist[:, None], valid.shape)[valid]
        return loss_sdf_truncation(out.sdf, out.samples.depths[valid], dm, cfg.tr)

    terms = {
        "color": lambda: loss_color(render().color, rgb, mask),
        "depth": lambda: loss_depth(render().depth, dist, mask),
        "mask": lambda: loss_mask(render().opacity, mask),
        "sdf": sdf_term,
        "surf": lambda: loss_surf(model, surf_pts, rgb, t),
        "smooth": lambda: loss_smooth(model, rays.origins, rays.directions, dist, t, cfg, rng(), frozen_smooth),
        "ori": cano("ori"),
        "normal": cano("normal"),
        "eik": cano("eik"),
        "code": lambda: loss_code(model.codes, float(model.codes.normalize(t)), 1),
        "beta": lambda: loss_beta(model.beta),
    }
    for name in ("smooth", "ori"):  # draw the frozen offsets at the base parameters
        with torch.no_grad():
            terms[name]()

    # SDS on a 2x2 shaded virtual image
    schedule = NoiseSchedule()
    codec = IdentityCodec()
    light = np.array([0.0, 0.6, 0.8])
    z_star = np.full((3, 2, 2), 0.5)
    den = ToyDenoiser(z_star, schedule)
    eps = np.random.default_rng(seed + 1).normal(size=(3, 2, 2))

    def image():
        return render("lambertian", light).color.T.reshape(3, 2, 2)

    with torch.no_grad():
        g = sds_loss(image(), codec, den, schedule, 0.3, z_star, np.zeros(3), 0.7, eps).grad
    g_t = torch.from_numpy(g)

    def sds():
        return sds_loss(image(), codec, den, schedule, 0.3, z_star, np.zeros(3), 0.7, eps).loss

    def sds_oracle():
        return 2.0 * (g_t * codec.encode(image())).sum()

    terms["sds"] = (sds, sds_oracle)
    return terms


def _pick_coords(grad: torch.Tensor, k: int, rng: np.random.Generator) -> np.ndarray:
    flat = grad.reshape(-1).abs().numpy()
    n = flat.size
    if n <= k:
        return np.arange(n)
    top = np.argsort(-flat, kind="stable")[: k // 2]
    rest = np.setdiff1d(np.arange(n), top)
    return np.concatenate([top, rng.choice(rest, size=k - len(top), replace=False)])


def check_term(model: SceneModel, loss_fn, oracle_fn=None, coords: int = 6, h: float = 1e-6,
               seed: int = 0, floor: float = 1e-3):
    """Max relative error between autograd and central differences over sampled coordinates.

    The relative error of a coordinate is ``|a - f| / max(|a|, |f|, floor * max|f|)``
    with the maximum over all checked coordinates of the term.
    """
    oracle_fn = oracle_fn or loss_fn
    params = dict(model.named_parameters())
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    analytic = {}
    if loss.requires_grad:
        loss.backward()
    for n, p in params.items():
        analytic[n] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    model.zero_grad(set_to_none=True)

    rng = np.random.default_rng(seed)
    rows = []
    with torch.no_grad():
        for n, p in params.items():
            flat = p.view(-1)
            for i in _pick_coords(analytic[n], coords, rng):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(oracle_fn())
                flat[i] = orig - h
                down = float(oracle_fn())
                flat[i] = orig
                rows.append((f"{n}[{i}]", float(analytic[n].reshape(-1)[i]), (up - down) / (2 * h)))
    if not rows:
        return 0.0, "", 0
    fd_max = max(abs(f) for _, _, f in rows)
    worst, worst_name = 0.0, ""
    for name, a, f in rows:
        denom = max(abs(a), abs(f), floor * fd_max)
        err = 0.0 if denom == 0.0 else abs(a - f) / denom
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name, len(rows)


def run_gradcheck(seed: int = 0, coords: int = 6, h: float = 1e-6, terms=TERMS) -> list[TermResult]:
    model = SceneModel(tiny_model_config(), seed=seed)
    closures = build_terms(model, seed)
    results = []
    for name in terms:
        t0 = time.perf_counter()
        fn = closures[name]
        loss_fn, oracle_fn = fn if isinstance(fn, tuple) else (fn, None)
        err, worst, n = check_term(model, loss_fn, oracle_fn, coords, h, seed)
        results.append(TermResult(name, err, worst, n, time.perf_counter() - t0))
    return results
