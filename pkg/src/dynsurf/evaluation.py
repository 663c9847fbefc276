"""Mesh extraction, surface metrics, culling and deformation checks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .cameras import project

__all__ = [
    "TriangleMesh",
    "mesh_from_sdf",
    "extract_mesh",
    "sample_surface",
    "point_triangle_distance",
    "point_mesh_distance",
    "accuracy_completion",
    "cull_mesh",
    "deformation_error",
    "write_ply",
    "read_ply",
    "write_metrics",
]


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (F, 3) int
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def cleaned(self, min_area: float = 1e-12) -> "TriangleMesh":
        """Drop degenerate triangles and unreferenced vertices."""
        keep = self.areas() > min_area
        return self.subset(keep)

    def subset(self, keep_triangles: np.ndarray) -> "TriangleMesh":
        tris = self.triangles[keep_triangles]
        used, inverse = np.unique(tris.ravel(), return_inverse=True)
        colors = self.colors[used] if self.colors is not None else None
        return TriangleMesh(self.vertices[used], inverse.reshape(-1, 3), colors)


def mesh_from_sdf(sdf_fn, resolution: int, bound: float = 1.0) -> TriangleMesh:
    """Zero level set of ``sdf_fn`` over ``[-bound, bound]^3`` by marching cubes."""
    if resolution < 2:
        raise ValueError("resolution too small")
    lin = np.linspace(-bound, bound, resolution)
    grid = np.stack(np.meshgrid(lin, lin, lin, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.asarray(sdf_fn(grid), dtype=np.float64).reshape((resolution,) * 3)
    if not (vals.min() < 0.0 < vals.max()):
        return TriangleMesh.empty()
    spacing = (lin[1] - lin[0],) * 3
    verts, faces, _, _ = marching_cubes(vals, level=0.0, spacing=spacing)
    # with the default "descent" direction, faces wind so normals point toward increasing SDF (outward)
    mesh = TriangleMesh(verts - bound, faces)
    return mesh.cleaned()


def extract_mesh(model, t, resolution: int = 64, with_color: bool = True) -> TriangleMesh:
    """Mesh of the observation-space surface at frame ``t``."""
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    mesh = mesh_from_sdf(lambda x: model.sdf_numpy(x, t), resolution)
    if with_color and mesh.n_triangles:
        with torch.no_grad():
            _, _, c = model.query(torch.from_numpy(mesh.vertices), t, with_color=True)
        mesh.colors = c.numpy()
    return mesh


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points uniformly distributed by area."""
    if mesh.n_triangles == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.areas()
    tri = rng.choice(mesh.n_triangles, size=n, p=areas / areas.sum())
    r1, r2 = rng.uniform(size=(2, n))
    s = np.sqrt(r1)
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    return (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c


def point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from points to triangles (row-wise, all (N, 3))."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        closest = a + ab * v[:, None] + ac * w[:, None]  # interior

        t_ab = d1 / (d1 - d3)
        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        closest = np.where(on_ab[:, None], a + ab * t_ab[:, None], closest)
        t_ac = d2 / (d2 - d6)
        on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        closest = np.where(on_ac[:, None], a + ac * t_ac[:, None], closest)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        closest = np.where(on_bc[:, None], b + (c - b) * t_bc[:, None], closest)

    closest = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, closest)
    return np.linalg.norm(p - closest, axis=-1)


def point_mesh_distance(points: np.ndarray, mesh: TriangleMesh, chunk: int = 4096) -> np.ndarray:
    """Exact point-to-surface distance.

    A KD-tree over triangle centroids bounds the search: a triangle can only
    be the closest one if its centroid is within (upper bound + largest
    centroid-to-vertex radius) of the query.
    """
    if mesh.n_triangles == 0:
        raise ValueError("empty mesh")
    tri = mesh.vertices[mesh.triangles]  # (F, 3, 3)
    centroids = tri.mean(axis=1)
    r_max = float(np.linalg.norm(tri - centroids[:, None], axis=-1).max())
    tree = cKDTree(centroids)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk]
        _, nearest = tree.query(p)
        upper = point_triangle_distance(p, *(tri[nearest, k] for k in range(3)))
        cands = tree.query_ball_point(p, upper + r_max + 1e-12)
        lens = np.fromiter((len(c) for c in cands), dtype=np.int64, count=len(cands))
        flat = np.fromiter((i for c in cands for i in c), dtype=np.int64, count=int(lens.sum()))
        owner = np.repeat(np.arange(len(p)), lens)
        d = point_triangle_distance(p[owner], *(tri[flat, k] for k in range(3)))
        best = upper.copy()
        np.minimum.at(best, owner, d)
        out[s : s + chunk] = best
    return out


def accuracy_completion(pred: TriangleMesh, gt: TriangleMesh, samples: int = 100_000, seed: int = 0):
    """(accuracy, completion): mean pred->gt and gt->pred surface distances."""
    if pred.n_triangles == 0 or gt.n_triangles == 0:
        raise ValueError("accuracy/completion need two nonempty meshes")
    # one fresh stream per mesh, so swapping the arguments swaps the results exactly
    pts_pred = sample_surface(pred, samples, np.random.default_rng(seed))
    pts_gt = sample_surface(gt, samples, np.random.default_rng(seed))
    acc = float(point_mesh_distance(pts_pred, gt).mean())
    comp = float(point_mesh_distance(pts_gt, pred).mean())
    return acc, comp


def cull_mesh(mesh: TriangleMesh, frames, tau: float = 0.02) -> TriangleMesh:
    """Keep triangles with a vertex near the observed depth of some frame.

    A vertex is observed when it lies within ``tau`` of a back-projected depth
    point, or projects inside a frame with valid depth that agrees with its
    own depth to within ``tau``.
    """
    from .dataio import backproject

    frames = list(frames)
    if not frames or mesh.n_triangles == 0:
        return TriangleMesh.empty()
    seen = np.zeros(len(mesh.vertices), dtype=bool)
    for f in frames:
        pts = backproject(f)
        if len(pts):
            d, _ = cKDTree(pts).query(mesh.vertices, distance_upper_bound=tau)
            seen |= np.isfinite(d)
        uv, z = project(f.intrinsics, f.pose, mesh.vertices)
        h, w = f.shape
        with np.errstate(invalid="ignore"):
            inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
        cols = np.clip(np.floor(np.nan_to_num(uv[:, 0])).astype(int), 0, w - 1)
        rows = np.clip(np.floor(np.nan_to_num(uv[:, 1])).astype(int), 0, h - 1)
        obs = f.depth[rows, cols]
        seen |= inside & (obs > 0) & (np.abs(obs - z) <= tau)
    keep = seen[mesh.triangles].any(axis=1)
    return mesh.subset(keep)


def deformation_error(model, gt_mesh: TriangleMesh, t, samples: int = 20_000, resolution: int = 64,
                      seed: int = 0) -> float:
    """Symmetric mean surface distance between the model's frame-``t`` surface and ground truth."""
    pred = extract_mesh(model, t, resolution, with_color=False)
    if pred.n_triangles == 0:
        return float("inf")
    acc, comp = accuracy_completion(pred, gt_mesh, samples, seed)
    return 0.5 * (acc + comp)


def write_ply(mesh: TriangleMesh, path) -> None:
    """ASCII PLY with optional 8-bit vertex colors."""
    path = Path(path)
    has_color = mesh.colors is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
             "property float x", "property float y", "property float z"]
    if has_color:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines += [f"element face {mesh.n_triangles}", "property list uchar int vertex_indices", "end_header"]
    body = []
    cols = np.round(np.clip(mesh.colors, 0, 1) * 255).astype(int) if has_color else None
    for i, v in enumerate(mesh.vertices):
        row = f"{v[0]:.7g} {v[1]:.7g} {v[2]:.7g}"
        if has_color:
            row += f" {cols[i, 0]} {cols[i, 1]} {cols[i, 2]}"
        body.append(row)
    body += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    path.write_text("\n".join(lines + body) + "\n")


def read_ply(path) -> TriangleMesh:
    """Read the ASCII PLY subset written by :func:`write_ply`."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_v = n_f = 0
    props = []
    i = 1
    while text[i].strip() != "end_header":
        tok = text[i].split()
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element":
            if tok[1] == "vertex":
                n_v = int(tok[2])
            elif tok[1] == "face":
                n_f = int(tok[2])
        elif tok[0] == "property" and n_f == 0 and tok[1] != "list":
            props.append(tok[-1])
        i += 1
    i += 1
    vdata = np.array([text[i + k].split() for k in range(n_v)], dtype=np.float64).reshape(n_v, len(props))
    faces = np.array([text[i + n_v + k].split()[1:4] for k in range(n_f)], dtype=np.int64).reshape(n_f, 3)
    verts = vdata[:, [props.index(a) for a in ("x", "y", "z")]]
    colors = None
    if "red" in props:
        colors = vdata[:, [props.index(a) for a in ("red", "green", "blue")]] / 255.0
    return TriangleMesh(verts, faces, colors)


def write_metrics(per_frame: dict, path) -> dict:
    """JSON report with per-frame values and their means."""
    keys = sorted({k for v in per_frame.values() for k, x in v.items() if isinstance(x, (int, float))})
    mean = {k: float(np.mean([v[k] for v in per_frame.values() if k in v])) for k in keys}
    report = {"per_frame": {str(k): v for k, v in per_frame.items()}, "mean": mean}
    Path(path).write_text(json.dumps(report, indent=1))
    return report
