"""SDF-to-density, occupancy-grid ray sampling and volume compositing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .cameras import Rays
from .fields import SceneModel, fd_gradient

__all__ = [
    "density_from_sdf",
    "alpha_from_density",
    "composite",
    "shade",
    "OccupancyGrid",
    "update_occupancy",
    "SampleBatch",
    "sample_rays",
    "RenderOutput",
    "render_rays",
    "MODES",
]

MODES = ("albedo", "lambertian", "textureless")


def density_from_sdf(s, beta):
    """Laplace-CDF density: ``(1/beta) * Psi_beta(-s)``."""
    s = torch.as_tensor(s)
    beta = torch.as_tensor(beta, dtype=s.dtype)
    e = torch.exp(-s.abs() / beta)
    cdf = torch.where(s > 0, 0.5 * e, 1.0 - 0.5 * e)
    return cdf / beta


def alpha_from_density(sigma, delta):
    return 1.0 - torch.exp(-sigma * delta)


def composite(alphas, colors=None, depths=None):
    """Front-to-back compositing along the last sample axis.

    ``alphas`` is (..., S); ``colors`` (..., S, C); ``depths`` (..., S).
    Returns ``(weights, color, depth, opacity)``; missing inputs give ``None``.
    """
    ones = torch.ones_like(alphas[..., :1])
    trans = torch.cumprod(torch.cat([ones, 1.0 - alphas[..., :-1]], dim=-1), dim=-1)
    weights = trans * alphas
    # one minus the final transmittance equals the weight sum but cannot leave [0, 1] by rounding
    opacity = 1.0 - torch.prod(1.0 - alphas, dim=-1)
    color = (weights[..., None] * colors).sum(dim=-2) if colors is not None else None
    depth = (weights * depths).sum(dim=-1) if depths is not None else None
    return weights, color, depth, opacity


def shade(albedo, normal, light_dir, ambient: float):
    """Lambertian shading ``albedo * (ambient + (1 - ambient) * max(0, n.l))``.

    Normals with zero length get ambient light only.
    """
    norm = normal.norm(dim=-1, keepdim=True)
    n = torch.where(norm > 1e-12, normal / norm.clamp_min(1e-12), torch.zeros_like(normal))
    light = torch.as_tensor(light_dir, dtype=normal.dtype)
    lam = (n * light).sum(dim=-1, keepdim=True).clamp_min(0.0)
    return (albedo * (ambient + (1.0 - ambient) * lam)).clamp(0.0, 1.0)


@dataclass
class OccupancyGrid:
    """Occupancy over the ``[-bound, bound]^3`` cube.

    Each refresh multiplies the stored scores by ``decay`` and writes 1 into
    the cells it keeps; a cell is occupied while its score exceeds 0.5, so with
    the default decay only the latest refresh counts.
    """

    resolution: int = 128
    bound: float = 1.0
    decay: float = 0.5
    values: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.values is None:
            self.values = np.ones((self.resolution,) * 3, dtype=np.float64)

    @property
    def cell_size(self) -> float:
        return 2.0 * self.bound / self.resolution

    @property
    def binary(self) -> np.ndarray:
        return self.values > 0.5

    def cell_index(self, points: np.ndarray) -> np.ndarray:
        idx = np.floor((points + self.bound) / self.cell_size).astype(np.int64)
        return np.clip(idx, 0, self.resolution - 1)

    def occupied(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points).reshape(-1, 3)
        inside = np.all(np.abs(pts) <= self.bound, axis=-1)
        ijk = self.cell_index(pts)
        occ = self.binary[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
        return (occ & inside).reshape(np.shape(points)[:-1])

    def cell_centers(self, resolution: int | None = None) -> np.ndarray:
        res = resolution or self.resolution
        c = (np.arange(res) + 0.5) * (2.0 * self.bound / res) - self.bound
        return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


def occupancy_threshold(grid: OccupancyGrid, beta: float, beta_factor: float = 7.0) -> float:
    """|s| below which a cell must be kept.

    Two cells of geometric margin, widened to ``beta_factor * beta`` so the
    density mass outside kept cells stays below ~1e-3.
    """
    return max(2.0 * math.sqrt(3.0) * grid.cell_size, beta_factor * beta)


def update_occupancy(
    model: SceneModel,
    grid: OccupancyGrid,
    frames,
    coarse_factor: int = 4,
    lipschitz: float = 1.5,
    beta_factor: float = 7.0,
) -> None:
    """Refresh ``grid`` from ``min |s|`` over the given frame indices.

    Coarse cells are evaluated first; fine cells are only evaluated where the
    coarse value is ambiguous under a Lipschitz bound on the SDF.
    """
    thr = occupancy_threshold(grid, float(model.beta.detach()), beta_factor)
    res_c = grid.resolution // coarse_factor
    centers_c = grid.cell_centers(res_c).reshape(-1, 3)
    half_diag_c = 0.5 * math.sqrt(3.0) * (2.0 * grid.bound / res_c)
    min_abs_c = np.full(len(centers_c), np.inf)
    for t in frames:
        min_abs_c = np.minimum(min_abs_c, np.abs(model.sdf_numpy(centers_c, t)))
    margin = lipschitz * half_diag_c
    sure = (min_abs_c <= thr - margin).reshape((res_c,) * 3)
    ambiguous = ((min_abs_c < thr + margin) & ~(min_abs_c <= thr - margin)).reshape((res_c,) * 3)

    new = np.repeat(np.repeat(np.repeat(sure, coarse_factor, 0), coarse_factor, 1), coarse_factor, 2)
    amb_fine = np.repeat(np.repeat(np.repeat(ambiguous, coarse_factor, 0), coarse_factor, 1), coarse_factor, 2)
    idx = np.argwhere(amb_fine)
    if len(idx):
        pts = (idx + 0.5) * grid.cell_size - grid.bound
        min_abs = np.full(len(pts), np.inf)
        for t in frames:
            min_abs = np.minimum(min_abs, np.abs(model.sdf_numpy(pts, t)))
        new[idx[:, 0], idx[:, 1], idx[:, 2]] = min_abs < thr
    grid.values = np.maximum(grid.values * grid.decay, new.astype(np.float64))


@dataclass
class SampleBatch:
    """Padded per-ray samples: (R, S) depths, validity mask and deltas."""

    depths: np.ndarray
    valid: np.ndarray
    deltas: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.valid.sum())


def sample_rays(rays: Rays, step: float, grid: OccupancyGrid | None = None) -> SampleBatch:
    """Fixed-step samples at ``near + (k + 1/2) step`` inside occupied cells."""
    r = len(rays)
    span = np.maximum(rays.far - rays.near, 0.0)
    k_max = int(np.ceil(span.max() / step)) if r else 0
    if k_max == 0:
        z = np.zeros((r, 0))
        return SampleBatch(z, z.astype(bool), z)
    t = rays.near[:, None] + (np.arange(k_max) + 0.5) * step
    keep = t < rays.far[:, None]
    if grid is not None:
        pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
        keep &= grid.occupied(pts)
    counts = keep.sum(axis=1)
    s_max = int(counts.max()) if r else 0
    order = np.argsort(~keep, axis=1, kind="stable")[:, :s_max]
    depths = np.take_along_axis(t, order, axis=1)
    valid = np.arange(s_max)[None, :] < counts[:, None]
    depths = np.where(valid, depths, 0.0)
    deltas = np.where(valid, step, 0.0)
    return SampleBatch(depths, valid, deltas)


@dataclass
class RenderOutput:
    color: torch.Tensor
    depth: torch.Tensor
    opacity: torch.Tensor
    weights: torch.Tensor
    samples: SampleBatch
    points: torch.Tensor  # (P, 3) valid sample positions, row-major over (ray, sample)
    sdf: torch.Tensor  # (P,)
    normal: torch.Tensor | None = None  # (R, 3) composited unit normals
    sample_normals: torch.Tensor | None = None  # (P, 3) finite-difference gradients


def render_rays(
    model: SceneModel,
    rays: Rays,
    t,
    mode: str = "albedo",
    bg=(0.0, 0.0, 0.0),
    grid: OccupancyGrid | None = None,
    step: float = 0.01,
    light_dir=None,
    ambient: float = 0.1,
    with_normals: bool = False,
    fd_eps: float = 0.005,
) -> RenderOutput:
    """Volume-render ``rays`` at frame ``t`` and composite over ``bg``."""
    if mode not in MODES:
        raise ValueError(f"unknown shading mode {mode!r}")
    batch = sample_rays(rays, step, grid)
    r, s_max = batch.depths.shape
    valid = torch.from_numpy(batch.valid)
    depths = torch.from_numpy(batch.depths)
    deltas = torch.from_numpy(batch.deltas)
    pts_np = rays.origins[:, None, :] + batch.depths[..., None] * rays.directions[:, None, :]
    points = torch.from_numpy(pts_np[batch.valid])

    need_normals = with_normals or mode != "albedo"
    sdf, _, albedo = model.query(points, t, with_color=True)
    grads = fd_gradient(lambda p: model.sdf(p, t), points, fd_eps) if need_normals else None

    if mode == "albedo":
        color = albedo
    else:
        if light_dir is None:
            raise ValueError("shaded modes need a light direction")
        base = albedo if mode == "lambertian" else torch.ones_like(albedo)
        color = shade(base, grads, light_dir, ambient)

    sigma = density_from_sdf(sdf, model.beta)
    dense_sigma = sdf.new_zeros(r, s_max).masked_scatter(valid, sigma)
    dense_color = sdf.new_zeros(r, s_max, 3).masked_scatter(valid[..., None].expand(-1, -1, 3), color)
    alphas = alpha_from_density(dense_sigma, deltas)
    weights, rgb, depth, opacity = composite(alphas, dense_color, depths)

    normal_map = None
    if need_normals:
        n = grads / grads.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        dense_n = sdf.new_zeros(r, s_max, 3).masked_scatter(valid[..., None].expand(-1, -1, 3), n)
        normal_map = (weights[..., None] * dense_n).sum(dim=-2)

    bg_t = torch.as_tensor(np.asarray(bg, dtype=np.float64)).reshape(-1, 3)
    rgb = rgb + (1.0 - opacity)[:, None] * bg_t
    return RenderOutput(rgb, depth, opacity, weights, batch, points, sdf, normal_map, grads)
