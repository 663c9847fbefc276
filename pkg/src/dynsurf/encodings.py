"""Positional and temporal input encodings with coarse-to-fine bandwidth control."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

__all__ = [
    "bandwidth_ratio",
    "band_window",
    "FrequencyEncoding",
    "TemporalCodeGrid",
    "HashGrid3D",
    "HASH_PRIMES",
]

HASH_PRIMES = (1, 2654435761, 805459861)


def bandwidth_ratio(epoch: float, e_max: float) -> float:
    """Fraction of the encoding bandwidth that is active at ``epoch``."""
    return min(0.25 + epoch / e_max, 1.0)


def band_window(num_bands: int, ratio: float) -> np.ndarray:
    """Cosine easing weight per band; band ``b`` opens as ``ratio * num_bands`` passes ``b``."""
    alpha = ratio * num_bands
    x = np.clip(alpha - np.arange(num_bands), 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * x))


class FrequencyEncoding(nn.Module):
    """sin/cos features at frequencies ``2**b * pi``, optionally prefixed by the raw input."""

    def __init__(self, in_dim: int, num_bands: int, include_identity: bool = True):
        super().__init__()
        if num_bands < 1:
            raise ValueError("num_bands must be >= 1")
        self.in_dim = in_dim
        self.num_bands = num_bands
        self.include_identity = include_identity

    @property
    def out_dim(self) -> int:
        return self.in_dim * (2 * self.num_bands + int(self.include_identity))

    def forward(self, x: torch.Tensor, ratio: float = 1.0) -> torch.Tensor:
        freqs = (2.0 ** torch.arange(self.num_bands, dtype=x.dtype)) * math.pi
        xb = x[..., None, :] * freqs[:, None]  # (..., B, D)
        w = torch.as_tensor(band_window(self.num_bands, ratio), dtype=x.dtype)[:, None]
        feats = [(w * torch.sin(xb)).flatten(-2), (w * torch.cos(xb)).flatten(-2)]
        if self.include_identity:
            feats.insert(0, x)
        return torch.cat(feats, dim=-1)


class TemporalCodeGrid(nn.Module):
    """Multi-resolution 1-D feature grid over normalized time.

    Level resolutions are ``[ceil(N/8), ceil(N/4), N]`` nodes (at least two
    each); frame ``t`` sits at normalized time ``t / (N - 1)``.
    """

    def __init__(self, n_frames: int, feat_dim: int = 16, init_std: float = 1e-2, generator=None):
        super().__init__()
        self.n_frames = n_frames
        self.feat_dim = feat_dim
        self.resolutions = [max(2, math.ceil(n_frames / 8)), max(2, math.ceil(n_frames / 4)), max(2, n_frames)]
        self.levels = nn.ParameterList(
            nn.Parameter(torch.randn(r, feat_dim, generator=generator, dtype=torch.float64) * init_std)
            for r in self.resolutions
        )

    @property
    def out_dim(self) -> int:
        return self.feat_dim * len(self.resolutions)

    def normalize(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.float64)
        return t / max(self.n_frames - 1, 1)

    def forward(self, t_norm) -> torch.Tensor:
        """Interpolated codes for normalized times (any shape) -> (..., out_dim)."""
        t_norm = torch.as_tensor(t_norm, dtype=self.levels[0].dtype).clamp(0.0, 1.0)
        out = []
        for res, table in zip(self.resolutions, self.levels):
            pos = t_norm * (res - 1)
            i0 = torch.clamp(torch.floor(pos).long(), 0, res - 2)
            w = (pos - i0)[..., None]
            out.append(table[i0] * (1.0 - w) + table[i0 + 1] * w)
        return torch.cat(out, dim=-1)

    def node_index(self, t_norm: float, level: int) -> int:
        return int(round(float(t_norm) * (self.resolutions[level] - 1)))


class HashGrid3D(nn.Module):
    """Multi-resolution hash encoding of points in [-1, 1]^3.

    Levels whose dense grid fits in the table are indexed densely, larger ones
    are hashed with the XOR-of-primes hash.  Levels past ``ceil(ratio * L)``
    are zeroed.
    """

    def __init__(
        self,
        n_levels: int = 16,
        feat_dim: int = 2,
        log2_table_size: int = 15,
        base_resolution: int = 16,
        max_resolution: int = 256,
        init_scale: float = 1e-4,
        generator=None,
    ):
        super().__init__()
        self.n_levels = n_levels
        self.feat_dim = feat_dim
        self.table_size = 2**log2_table_size
        growth = math.exp((math.log(max_resolution) - math.log(base_resolution)) / max(n_levels - 1, 1))
        self.resolutions = [int(math.floor(base_resolution * growth**lvl + 1e-9)) for lvl in range(n_levels)]
        self.dense = [(r + 1) ** 3 <= self.table_size for r in self.resolutions]
        self.sizes = [(r + 1) ** 3 if d else self.table_size for r, d in zip(self.resolutions, self.dense)]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).tolist()
        total = int(sum(self.sizes))
        table = (torch.rand(total, feat_dim, generator=generator, dtype=torch.float64) * 2 - 1) * init_scale
        self.table = nn.Parameter(table)

        corners = torch.tensor([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=torch.long)
        self.register_buffer("corners", corners, persistent=False)
        self.register_buffer("_res", torch.tensor(self.resolutions, dtype=torch.float64), persistent=False)
        self.register_buffer("_res_long", torch.tensor(self.resolutions, dtype=torch.long), persistent=False)
        self.register_buffer("_dense", torch.tensor(self.dense), persistent=False)
        self.register_buffer("_offsets", torch.tensor(self.offsets, dtype=torch.long), persistent=False)

    @property
    def out_dim(self) -> int:
        return self.n_levels * self.feat_dim

    def active_levels(self, ratio: float) -> int:
        return min(self.n_levels, int(math.ceil(ratio * self.n_levels - 1e-12)))

    def corner_index(self, ijk: torch.Tensor, levels: torch.Tensor) -> torch.Tensor:
        """Table rows of integer grid vertices ``ijk`` (..., L, 8, 3) for ``levels`` (L,)."""
        res1 = (self._res_long[levels] + 1)[:, None]
        dense = (ijk[..., 0] * res1 + ijk[..., 1]) * res1 + ijk[..., 2]
        hashed = ijk[..., 0] * HASH_PRIMES[0]
        hashed = torch.bitwise_xor(hashed, ijk[..., 1] * HASH_PRIMES[1])
        hashed = torch.bitwise_xor(hashed, ijk[..., 2] * HASH_PRIMES[2])
        hashed = torch.bitwise_and(hashed, self.table_size - 1)
        idx = torch.where(self._dense[levels][:, None], dense, hashed)
        return idx + self._offsets[levels][:, None]

    def _rows(self, base: torch.Tensor) -> torch.Tensor:
        """Table rows of the 8 cell corners for lower corners ``base`` (P, L, 3) -> (P, L, 8).

        Same result as :meth:`corner_index`, built per axis and broadcast over corners.
        """
        n_active = base.shape[1]
        n_dense = min(n_active, sum(self.dense))
        step = torch.tensor([0, 1])
        a = base[..., None] + step  # (P, L, 3, 2)
        parts = []
        if n_dense:
            ad = a[:, :n_dense]
            r1 = (self._res_long[:n_dense] + 1)[None, :, None]
            i = (ad[:, :, 0] * r1 * r1)[..., :, None, None]
            j = (ad[:, :, 1] * r1)[..., None, :, None]
            k = ad[:, :, 2][..., None, None, :]
            parts.append((i + j + k).reshape(base.shape[0], n_dense, 8))
        if n_dense < n_active:
            ah = a[:, n_dense:]
            i = (ah[:, :, 0] * HASH_PRIMES[0])[..., :, None, None]
            j = (ah[:, :, 1] * HASH_PRIMES[1])[..., None, :, None]
            k = (ah[:, :, 2] * HASH_PRIMES[2])[..., None, None, :]
            h = torch.bitwise_and(torch.bitwise_xor(torch.bitwise_xor(i, j), k), self.table_size - 1)
            parts.append(h.reshape(base.shape[0], n_active - n_dense, 8))
        rows = parts[0] if len(parts) == 1 else torch.cat(parts, dim=1)
        return rows + self._offsets[:n_active, None]

    def forward(self, x: torch.Tensor, ratio: float = 1.0) -> torch.Tensor:
        shape = x.shape[:-1]
        x = x.reshape(-1, 3)
        n = x.shape[0]
        n_active = self.active_levels(ratio)
        u = (x.clamp(-1.0, 1.0) + 1.0) * 0.5
        res = self._res[:n_active].to(x.dtype)
        pos = u[:, None, :] * res[None, :, None]  # (P, L, 3)
        base = torch.minimum(torch.floor(pos).long(), self._res_long[:n_active, None] - 1).clamp_min(0)
        frac = pos - base
        rows = self._rows(base)
        wx = torch.stack([1.0 - frac, frac], dim=-1)  # (P, L, 3, 2)
        w = wx[:, :, 0, :, None, None] * wx[:, :, 1, None, :, None] * wx[:, :, 2, None, None, :]
        vals = self.table.index_select(0, rows.reshape(-1)).reshape(n, n_active, 8, self.feat_dim)
        feats = torch.einsum("plc,plcf->plf", w.reshape(n, n_active, 8), vals).reshape(n, -1)
        if n_active < self.n_levels:
            feats = torch.cat([feats, x.new_zeros(n, (self.n_levels - n_active) * self.feat_dim)], dim=-1)
        return feats.reshape(*shape, self.out_dim)
