"""Deformation, topology and hyper-dimensional canonical SDF/color fields."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encodings import FrequencyEncoding, HashGrid3D, TemporalCodeGrid

__all__ = ["ModelConfig", "SceneModel", "sdf_gradient_fd", "fd_gradient"]


@dataclass
class ModelConfig:
    n_frames: int = 1
    code_dim: int = 16
    code_init_std: float = 1e-2
    deform_bands: int = 6
    topo_bands: int = 4
    hidden: int = 128
    depth: int = 6
    ambient_dim: int = 2
    hash_levels: int = 16
    hash_feat: int = 2
    log2_table: int = 15
    base_resolution: int = 16
    max_resolution: int = 256
    decoder_hidden: int = 64
    decoder_layers: int = 3
    geo_feat: int = 16
    beta_init: float = 0.1
    r_init: float = 0.5
    softplus_beta: float = 100.0


def _sphere_directions(n: int) -> torch.Tensor:
    """``n`` near-uniform unit vectors on a Fibonacci spiral."""
    i = torch.arange(n, dtype=torch.float64) + 0.5
    z = 1.0 - 2.0 * i / n
    r = torch.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return torch.stack([r * torch.cos(phi), r * torch.sin(phi), z], dim=1)


def _mlp(in_dim: int, hidden: int, n_hidden: int, out_dim: int) -> nn.ModuleList:
    dims = [in_dim] + [hidden] * n_hidden + [out_dim]
    return nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))


class SceneModel(nn.Module):
    """All trainable state of the dynamic scene.

    ``ratio`` is the coarse-to-fine bandwidth fraction applied to the
    frequency encodings and the hash grids; the trainer sets it every epoch.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.ratio = 1.0
        g = torch.Generator().manual_seed(seed)
        self.codes = TemporalCodeGrid(cfg.n_frames, cfg.code_dim, cfg.code_init_std, generator=g)
        self.enc_deform = FrequencyEncoding(3, cfg.deform_bands)
        self.enc_topo = FrequencyEncoding(3, cfg.topo_bands)
        self.deform_net = _mlp(self.enc_deform.out_dim + self.codes.out_dim, cfg.hidden, cfg.depth, 3)
        self.topo_net = _mlp(self.enc_topo.out_dim + self.codes.out_dim, cfg.hidden, cfg.depth, cfg.ambient_dim)
        hash_kw = dict(
            n_levels=cfg.hash_levels,
            feat_dim=cfg.hash_feat,
            log2_table_size=cfg.log2_table,
            base_resolution=cfg.base_resolution,
            max_resolution=cfg.max_resolution,
        )
        self.grid_sdf = HashGrid3D(generator=g, **hash_kw)
        self.grid_color = HashGrid3D(generator=g, **hash_kw)
        n_dec_hidden = cfg.decoder_layers - 1
        self.sdf_in_dim = 3 + self.grid_sdf.out_dim + cfg.ambient_dim
        self.sdf_net = _mlp(self.sdf_in_dim, cfg.decoder_hidden, n_dec_hidden, 1 + cfg.geo_feat)
        self.color_net = _mlp(self.grid_color.out_dim + cfg.geo_feat, cfg.decoder_hidden, n_dec_hidden, 3)
        self.log_beta = nn.Parameter(torch.tensor(math.log(cfg.beta_init), dtype=torch.float64))
        self.double()
        self._reset_mlps(g)
        self.geometric_init(cfg.r_init, g)

    # -- initialization -------------------------------------------------

    def _reset_mlps(self, g: torch.Generator) -> None:
        for net in (self.deform_net, self.topo_net, self.color_net):
            for layer in net:
                bound = 1.0 / math.sqrt(layer.in_features)
                with torch.no_grad():
                    layer.weight.uniform_(-bound, bound, generator=g)
                    layer.bias.uniform_(-bound, bound, generator=g)
        # deformation starts at the identity, ambient coordinates at zero
        for net in (self.deform_net, self.topo_net):
            with torch.no_grad():
                net[-1].weight.zero_()
                net[-1].bias.zero_()

    def geometric_init(self, r_init: float, g: torch.Generator | None = None) -> None:
        """Sphere initialization of the SDF decoder.

        The first layer sees xyz through quasi-uniform unit directions, so its
        units sum to a multiple of ``|x|``; square hidden layers start
        at the identity.  The output row is then fitted by least squares.
        """
        g = g if g is not None else torch.Generator().manual_seed(0)
        layers = self.sdf_net
        with torch.no_grad():
            for k, layer in enumerate(layers):
                out_dim, in_dim = layer.weight.shape
                layer.bias.zero_()
                if k == 0:
                    layer.weight.zero_()
                    layer.weight[:, :3] = math.sqrt(2.0) * _sphere_directions(out_dim)
                    # ambient inputs start at zero, so small weights here leave the
                    # sphere intact while keeping the topology net trainable
                    layer.weight[:, in_dim - self.cfg.ambient_dim:].normal_(0.0, 1e-4, generator=g)
                elif k == len(layers) - 1:
                    layer.weight.normal_(0.0, 1e-4, generator=g)
                elif out_dim == in_dim:
                    layer.weight.copy_(torch.eye(out_dim, dtype=layer.weight.dtype))
                else:
                    layer.weight.normal_(0.0, math.sqrt(2.0) / math.sqrt(out_dim), generator=g)
            self._refit_sphere(r_init, g)

    def _refit_sphere(self, r_init: float, g: torch.Generator) -> None:
        """Least-squares fit of the SDF output row to ``|x| - r_init`` and its gradient in the unit ball."""
        layers = self.sdf_net
        with torch.no_grad():
            n, eps = 8192, 1e-4
            x = torch.randn(n, 3, generator=g, dtype=torch.float64)
            x = x / x.norm(dim=-1, keepdim=True) * torch.rand(n, 1, generator=g, dtype=torch.float64) ** (1 / 3)

            def features(p):
                h = torch.cat([p, p.new_zeros(len(p), self.sdf_in_dim - 3)], dim=-1)
                for layer in layers[:-1]:
                    h = self._softplus(layer(h))
                return h

            h = features(x)
            rows = [torch.cat([h, h.new_ones(n, 1)], dim=-1)]
            r = x.norm(dim=-1)
            targets = [r - r_init]
            for axis in range(3):
                off = torch.zeros(3, dtype=x.dtype)
                off[axis] = eps
                dh = (features(x + off) - features(x - off)) / (2 * eps)
                rows.append(torch.cat([dh, dh.new_zeros(n, 1)], dim=-1))
                targets.append(x[:, axis] / r.clamp_min(1e-9))
            a, target = torch.cat(rows), torch.cat(targets)
            ridge = 1e-8 * torch.eye(a.shape[1], dtype=a.dtype)
            sol = torch.linalg.solve(a.T @ a + ridge, a.T @ target)
            layers[-1].weight[0] = sol[:-1]
            layers[-1].bias[0] = sol[-1]

    # -- parameter groups ----------------------------------------------

    def deformation_parameters(self) -> list[nn.Parameter]:
        """Parameters of the deformation field (codes, deformation and topology nets)."""
        return [*self.codes.parameters(), *self.deform_net.parameters(), *self.topo_net.parameters()]

    def hash_parameters(self) -> list[nn.Parameter]:
        return [self.grid_sdf.table, self.grid_color.table]

    @property
    def beta(self) -> torch.Tensor:
        return torch.exp(self.log_beta)

    # -- field evaluation ----------------------------------------------

    @staticmethod
    def _run(net: nn.ModuleList, h: torch.Tensor, act) -> torch.Tensor:
        for layer in net[:-1]:
            h = act(layer(h))
        return net[-1](h)

    def _time_code(self, t, n: int) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.float64)
        code = self.codes(self.codes.normalize(t))
        if code.dim() == 1:
            code = code.expand(n, -1)
        return code

    def topology(self, x: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        h = torch.cat([self.enc_topo(x, self.ratio), code], dim=-1)
        return self._run(self.topo_net, h, F.relu)

    def deform(self, x: torch.Tensor, t):
        """Observation-space points at frame ``t`` -> (canonical xyz, ambient coordinates)."""
        code = self._time_code(t, x.shape[0])
        h = torch.cat([self.enc_deform(x, self.ratio), code], dim=-1)
        xm = x + self._run(self.deform_net, h, F.relu)
        return xm, self.topology(x, code)

    def canonical_reg_point(self, x: torch.Tensor, t):
        """Hyper-canonical point that bypasses the deformation network."""
        code = self._time_code(t, x.shape[0])
        return x, self.topology(x, code)

    def _softplus(self, h):
        return F.softplus(h, beta=self.cfg.softplus_beta)

    def sdf_color(self, xm: torch.Tensor, xa: torch.Tensor, with_color: bool = True):
        """Canonical SDF, geometric feature and (optionally) albedo at hyper points."""
        inp = torch.cat([xm, self.grid_sdf(xm, self.ratio), xa], dim=-1)
        out = self._run(self.sdf_net, inp, self._softplus)
        s, h = out[..., 0], out[..., 1:]
        if not with_color:
            return s, h, None
        cin = torch.cat([self.grid_color(xm, self.ratio), h], dim=-1)
        c = torch.sigmoid(self._run(self.color_net, cin, F.relu))
        return s, h, c

    def sdf(self, x: torch.Tensor, t, canonical_shortcut: bool = False) -> torch.Tensor:
        """Composed observation-space SDF ``x -> s(deform(x, t))``."""
        xm, xa = self.canonical_reg_point(x, t) if canonical_shortcut else self.deform(x, t)
        return self.sdf_color(xm, xa, with_color=False)[0]

    def query(self, x: torch.Tensor, t, with_color: bool = True):
        xm, xa = self.deform(x, t)
        return self.sdf_color(xm, xa, with_color)

    @torch.no_grad()
    def sdf_numpy(self, x: np.ndarray, t, chunk: int = 65536) -> np.ndarray:
        out = [self.sdf(torch.from_numpy(np.ascontiguousarray(x[i : i + chunk])), t).numpy()
               for i in range(0, len(x), chunk)]
        return np.concatenate(out) if out else np.zeros(0)


_AXES = torch.eye(3, dtype=torch.float64)


def fd_gradient(fn, x: torch.Tensor, eps: float) -> torch.Tensor:
    """Central-difference gradient of a scalar field ``fn`` (N,3)->(N,) at ``x``."""
    n = x.shape[0]
    offs = (_AXES * eps).to(x.dtype)
    pts = torch.cat([x[None] + offs[:, None], x[None] - offs[:, None]], dim=0).reshape(-1, 3)
    vals = fn(pts).reshape(2, 3, n)
    return ((vals[0] - vals[1]) / (2.0 * eps)).T


def sdf_gradient_fd(model: SceneModel, x: torch.Tensor, t, eps: float, canonical_shortcut: bool = False):
    return fd_gradient(lambda p: model.sdf(p, t, canonical_shortcut), x, eps)
