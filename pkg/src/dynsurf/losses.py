"""Supervision and regularization terms and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .encodings import TemporalCodeGrid
from .fields import SceneModel, fd_gradient

__all__ = [
    "LossWeights",
    "TruncationConfig",
    "LossError",
    "loss_color",
    "loss_depth",
    "loss_mask",
    "loss_sdf_truncation",
    "loss_surf",
    "tangent_perturbation",
    "smoothness",
    "loss_smooth",
    "loss_cano",
    "loss_code",
    "loss_beta",
    "total_loss",
]


@dataclass
class LossWeights:
    color: float = 10.0
    depth: float = 1.0
    mask: float = 0.1
    sdf: float = 1000.0
    surf: float = 100.0
    smooth: float = 1.0
    ori: float = 0.1
    normal: float = 1.0
    eik: float = 0.1
    code: float = 1.0
    beta: float = 0.01
    sds: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0")


@dataclass
class TruncationConfig:
    tr: float = 0.05
    n_smooth: int = 4
    perturb_radius: float = 0.01
    fd_eps: float = 0.005

    def __post_init__(self):
        if not (self.tr > 0 and self.perturb_radius > 0 and self.fd_eps > 0):
            raise ValueError("truncation, perturbation radius and fd step must be positive")


class LossError(FloatingPointError):
    """A loss term evaluated to a non-finite value."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


def _masked_mse(pred: torch.Tensor, obs: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    valid = torch.as_tensor(valid, dtype=torch.bool)
    if not bool(valid.any()):
        return pred.sum() * 0.0
    diff = (pred - torch.as_tensor(obs, dtype=pred.dtype))[valid]
    return (diff**2).mean()


def loss_color(rendered: torch.Tensor, observed, valid) -> torch.Tensor:
    """Mean squared error over valid pixels (all channels)."""
    return _masked_mse(rendered, observed, valid)


def loss_depth(rendered: torch.Tensor, observed, valid) -> torch.Tensor:
    obs = torch.as_tensor(observed, dtype=rendered.dtype)
    return _masked_mse(rendered, obs, torch.as_tensor(valid, dtype=torch.bool) & (obs > 0))


def loss_mask(opacity: torch.Tensor, mask) -> torch.Tensor:
    """Binary cross-entropy with the opacity clamped away from 0 and 1."""
    m = torch.as_tensor(mask, dtype=opacity.dtype)
    p = opacity.clamp(1e-5, 1.0 - 1e-5)
    return -(m * torch.log(p) + (1.0 - m) * torch.log(1.0 - p)).mean()


def sdf_targets(sample_depths, observed_depth, tr: float):
    """Per-sample pseudo-SDF target and inclusion mask.

    Inside the band ``|D - d| <= tr`` the target is ``D - d``; free space in
    front of the band is pushed to ``tr``; samples behind the band are skipped.
    """
    d = np.asarray(sample_depths, dtype=np.float64)
    dm = np.asarray(observed_depth, dtype=np.float64)
    dm = np.broadcast_to(dm.reshape(dm.shape + (1,) * (d.ndim - dm.ndim)), d.shape)
    band = np.abs(dm - d) <= tr
    free = d < dm - tr
    target = np.where(band, dm - d, tr)
    return target, (band | free) & (dm > 0)


def loss_sdf_truncation(sdf: torch.Tensor, sample_depths, observed_depth, tr: float, valid=None) -> torch.Tensor:
    target, use = sdf_targets(sample_depths, observed_depth, tr)
    if valid is not None:
        use &= np.asarray(valid, dtype=bool)
    return _masked_mse(sdf, torch.from_numpy(target), torch.from_numpy(use))


def loss_surf(model: SceneModel, points: torch.Tensor, colors, t) -> torch.Tensor:
    """SDF should vanish and albedo should match at back-projected depth points."""
    if points.shape[0] == 0:
        return model.log_beta * 0.0
    s, _, c = model.query(points, t, with_color=True)
    return (s**2).mean() + ((c - torch.as_tensor(colors, dtype=c.dtype)) ** 2).mean()


def tangent_perturbation(grad: np.ndarray, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Random vectors of length ``radius`` orthogonal to each row of ``grad``."""
    n = grad / np.linalg.norm(grad, axis=-1, keepdims=True)
    helper = np.where(np.abs(n[:, :1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    u = np.cross(n, helper)
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    v = np.cross(n, u)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=(len(n), 1))
    return radius * (np.cos(phi) * u + np.sin(phi) * v)


def smoothness(sdf_fn, points: torch.Tensor, eps: float, radius: float, rng: np.random.Generator,
               grad: torch.Tensor | None = None, frozen: dict | None = None) -> torch.Tensor:
    """Mean ``|grad s(x) - grad s(x + dx)|^2`` with ``dx`` on the tangent circle of radius ``radius``.

    The offsets ``dx`` are constants of the loss.  Passing the same ``frozen``
    dict on repeated calls reuses the offsets drawn by the first call.
    """
    if grad is None:
        grad = fd_gradient(sdf_fn, points, eps)
    if frozen is not None and "ok" in frozen:
        ok, dx = frozen["ok"], frozen["dx"]
    else:
        g_np = grad.detach().numpy()
        ok = np.linalg.norm(g_np, axis=-1) >= 1e-8
        dx = tangent_perturbation(g_np[ok], radius, rng) if ok.any() else np.zeros((0, 3))
        if frozen is not None:
            frozen.update(ok=ok, dx=dx)
    if not ok.any():
        return grad.sum() * 0.0
    ok_t = torch.from_numpy(ok)
    grad_p = fd_gradient(sdf_fn, points[ok_t] + torch.from_numpy(dx), eps)
    return ((grad[ok_t] - grad_p) ** 2).sum(dim=-1).mean()


def loss_smooth(model: SceneModel, origins, directions, depth, t, cfg: TruncationConfig,
                rng: np.random.Generator, frozen: dict | None = None) -> torch.Tensor:
    """Normal smoothness at points drawn in ``[depth - tr/2, depth + tr/2]`` along each ray."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.size == 0:
        return model.log_beta * 0.0
    offs = rng.uniform(-0.5 * cfg.tr, 0.5 * cfg.tr, size=(len(depth), cfg.n_smooth))
    ts = depth[:, None] + offs
    pts = np.asarray(origins)[:, None, :] + ts[..., None] * np.asarray(directions)[:, None, :]
    pts = torch.from_numpy(pts.reshape(-1, 3))
    return smoothness(lambda p: model.sdf(p, t), pts, cfg.fd_eps, cfg.perturb_radius, rng, frozen=frozen)


def loss_cano(model: SceneModel, points: torch.Tensor, view_dirs, t, cfg: TruncationConfig,
              rng: np.random.Generator, weights=None, frozen: dict | None = None) -> dict:
    """Orientation, normal-smoothness and eikonal terms on the canonical shortcut ``{x, T(x, t)}``.

    Returns a dict with ``ori``, ``normal`` and ``eik``.  ``weights`` are the
    (detached) rendering weights of the points; the orientation term is
    weighted by them.
    """
    if points.shape[0] == 0:
        zero = model.log_beta * 0.0
        return {"ori": zero, "normal": zero, "eik": zero}

    def fn(p):
        return model.sdf(p, t, canonical_shortcut=True)

    grad = fd_gradient(fn, points, cfg.fd_eps)
    norm = grad.norm(dim=-1)
    eik = ((norm - 1.0) ** 2).mean()

    ok = (norm.detach() >= 1e-8)
    v = torch.as_tensor(np.asarray(view_dirs), dtype=grad.dtype)
    w = torch.ones_like(norm) if weights is None else torch.as_tensor(weights, dtype=grad.dtype).detach()
    n_hat = grad[ok] / norm[ok][:, None]
    facing = (n_hat * v[ok]).sum(dim=-1).clamp_min(0.0)
    ori = (w[ok] * facing**2).mean() if bool(ok.any()) else grad.sum() * 0.0

    normal = smoothness(fn, points, cfg.fd_eps, cfg.perturb_radius, rng, grad=grad, frozen=frozen)
    return {"ori": ori, "normal": normal, "eik": eik}


def code_window(grid: TemporalCodeGrid, t_norm: float, level: int, half_width: int) -> list[int]:
    res = grid.resolutions[level]
    if res < 3:
        return []
    k = min(max(grid.node_index(t_norm, level), 1), res - 2)
    lo, hi = max(1, k - half_width), min(res - 2, k + half_width)
    return list(range(lo, hi + 1))


def loss_code(grid: TemporalCodeGrid, t_norm: float, half_width: int = 1, windows=None) -> torch.Tensor:
    """Squared second difference of code-grid nodes around ``t_norm``, averaged per level and summed.

    ``windows`` optionally overrides the node window per level.
    """
    total = grid.levels[0].sum() * 0.0
    for lvl, table in enumerate(grid.levels):
        idx = windows[lvl] if windows is not None else code_window(grid, t_norm, lvl, half_width)
        idx = [k for k in idx if 1 <= k <= grid.resolutions[lvl] - 2]
        if not idx:
            continue
        k = torch.tensor(idx)
        second = 2.0 * table[k] - table[k - 1] - table[k + 1]
        total = total + (second**2).sum(dim=-1).mean()
    return total


def loss_beta(beta: torch.Tensor) -> torch.Tensor:
    return beta.abs()


def total_loss(parts: dict, weights: LossWeights):
    """Weighted sum of the named terms; returns ``(loss, report)``.

    Raises :class:`LossError` naming the first non-finite term.
    """
    w = asdict(weights)
    report = {}
    total = None
    for name, value in parts.items():
        v = float(value.detach())
        if not math.isfinite(v):
            raise LossError(name, v)
        report[name] = v
        term = w[name] * value
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    report["total"] = float(total.detach())
    return total, report
