"""Chamfer distance, voxel Volume IoU and the success criterion."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptySet, NonWatertightWarning
from .geometry import TriMesh, as_points

SUCCESS_THRESHOLD = 0.004
MESH_SAMPLES = 100_000


def _squared_nn(a: np.ndarray, b: np.ndarray, threads: int = 1) -> np.ndarray:
    _, idx = cKDTree(b).query(a, k=1, workers=threads)
    d = a - b[idx]
    return (d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2]


def chamfer_distance(a, b, threads: int = 1, samples: int = MESH_SAMPLES, seed: int = 0) -> float:
    """Symmetric sum of mean squared nearest-neighbour distances.

    Meshes are first sampled area-uniformly, both with the same seed, so a
    mesh compared with itself scores exactly 0.
    """
    pa = a.sample_surface(samples, seed) if isinstance(a, TriMesh) else np.asarray(a, dtype=np.float64)
    pb = b.sample_surface(samples, seed) if isinstance(b, TriMesh) else np.asarray(b, dtype=np.float64)
    if pa.size == 0 or pb.size == 0:
        raise EmptySet("chamfer distance needs two non-empty sets")
    pa, pb = as_points(pa), as_points(pb)
    return float(_squared_nn(pa, pb, threads).mean() + _squared_nn(pb, pa, threads).mean())


def success(cd: float, threshold: float = SUCCESS_THRESHOLD) -> bool:
    if cd < 0:
        raise ValueError("chamfer distance cannot be negative")
    return bool(cd < threshold)


def voxelize(mesh: TriMesh, lo, hi, resolution: int):
    """Occupancy of voxel centres by parity ray casting along +x.

    Returns ``(occupancy, odd_rays)``, where ``odd_rays`` counts rays with an
    odd number of surface crossings (a sign the mesh is not watertight).
    Shared edges follow a top-left ownership rule so each crossing is counted once.
    """
    n = int(resolution)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    h = (hi - lo) / n
    v = mesh.vertices
    a, b, c = v[mesh.faces[:, 0]], v[mesh.faces[:, 1]], v[mesh.faces[:, 2]]
    # signed area of the (y, z) projection; flip to counter-clockwise
    area = (b[:, 1] - a[:, 1]) * (c[:, 2] - a[:, 2]) - (b[:, 2] - a[:, 2]) * (c[:, 1] - a[:, 1])
    keep = area != 0
    a, b, c, area = a[keep], b[keep], c[keep], area[keep]
    flip = area < 0
    b, c = np.where(flip[:, None], c, b), np.where(flip[:, None], b, c)

    tri_lo = np.minimum(np.minimum(a, b), c)
    tri_hi = np.maximum(np.maximum(a, b), c)
    j0 = np.clip(np.ceil((tri_lo[:, 1] - lo[1]) / h[1] - 0.5), 0, n).astype(np.int64)
    j1 = np.clip(np.floor((tri_hi[:, 1] - lo[1]) / h[1] - 0.5), -1, n - 1).astype(np.int64)
    k0 = np.clip(np.ceil((tri_lo[:, 2] - lo[2]) / h[2] - 0.5), 0, n).astype(np.int64)
    k1 = np.clip(np.floor((tri_hi[:, 2] - lo[2]) / h[2] - 0.5), -1, n - 1).astype(np.int64)
    nj = np.maximum(j1 - j0 + 1, 0)
    nk = np.maximum(k1 - k0 + 1, 0)
    cnt = nj * nk
    tri = np.repeat(np.arange(len(a)), cnt)
    local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    jj = j0[tri] + local // np.maximum(nk[tri], 1)
    kk = k0[tri] + local % np.maximum(nk[tri], 1)
    py = lo[1] + (jj + 0.5) * h[1]
    pz = lo[2] + (kk + 0.5) * h[2]

    inside = np.ones(len(tri), dtype=bool)
    A, B, C = a[tri], b[tri], c[tri]
    for p0, p1 in ((A, B), (B, C), (C, A)):
        du = p1[:, 1] - p0[:, 1]
        dv = p1[:, 2] - p0[:, 2]
        e = du * (pz - p0[:, 2]) - dv * (py - p0[:, 1])
        owns = (dv < 0) | ((dv == 0) & (du < 0))
        inside &= (e > 0) | ((e == 0) & owns)
    tri, jj, kk, py, pz = tri[inside], jj[inside], kk[inside], py[inside], pz[inside]
    A, B, C = a[tri], b[tri], c[tri]
    nrm = np.cross(B - A, C - A)
    x = A[:, 0] - (nrm[:, 1] * (py - A[:, 1]) + nrm[:, 2] * (pz - A[:, 2])) / nrm[:, 0]

    centers = lo[0] + (np.arange(n) + 0.5) * h[0]
    s = np.searchsorted(centers, x, side="right")
    toggles = np.zeros((n, n, n + 1), dtype=np.int64)
    np.add.at(toggles, (jj, kk, s), 1)
    occ = (np.cumsum(toggles[:, :, :n], axis=2) % 2).astype(bool)
    odd = int((toggles.sum(axis=2) % 2).sum())
    # (y, z, x) -> (x, y, z)
    return np.transpose(occ, (2, 0, 1)), odd


def volume_iou(a: TriMesh, b: TriMesh, resolution: int = 128) -> float:
    """Intersection over union of the voxelized solids inside the union bounding box."""
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    lo = np.minimum(a.vertices.min(axis=0), b.vertices.min(axis=0))
    hi = np.maximum(a.vertices.max(axis=0), b.vertices.max(axis=0))
    hi = np.where(hi > lo, hi, lo + 1e-9)
    rays = resolution * resolution
    occs = []
    for name, m in (("first", a), ("second", b)):
        occ, odd = voxelize(m, lo, hi, resolution)
        if odd > 0.001 * rays:
            warnings.warn(f"{name} mesh looks non-watertight: {odd} of {rays} rays have odd parity", NonWatertightWarning, stacklevel=2)
        occs.append(occ)
    inter = np.logical_and(*occs).sum()
    union = np.logical_or(*occs).sum()
    return float(inter / union) if union else 0.0


@dataclass(frozen=True)
class MetricReport:
    chamfer: float
    volume_iou: float
    success: bool

    def to_dict(self) -> dict:
        return {"cd": self.chamfer, "cd_x1000": 1000.0 * self.chamfer, "vmiou": self.volume_iou, "success": self.success}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate_meshes(pred: TriMesh, gt: TriMesh, resolution: int = 128, threshold: float = SUCCESS_THRESHOLD,
                    samples: int = MESH_SAMPLES, seed: int = 0, threads: int = 1) -> MetricReport:
    cd = chamfer_distance(pred, gt, threads=threads, samples=samples, seed=seed)
    return MetricReport(cd, volume_iou(pred, gt, resolution), success(cd, threshold))
