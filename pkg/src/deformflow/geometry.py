"""Geometric primitives: anchored rigid maps, triangle meshes, exact KNN, marching cubes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import EmptyIsosurface, EmptyPointSet, InvalidGrid, InvalidMesh, InvalidRotation

ROTATION_TOL = 1e-9
REPROJECT_TOL = 1e-6
BRUTE_FORCE_BELOW = 64


def as_points(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got shape {arr.shape}")
    return arr


def point_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance with a fixed summation order, broadcasting over leading axes.

    Every distance in the package goes through this so that tree queries and
    brute-force scans agree bit for bit.
    """
    d = a - b
    return np.sqrt((d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) + d[..., 2] * d[..., 2])


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar factor) of one or many 3x3 matrices."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    u[..., :, 2] *= np.asarray(d)[..., None]
    return u @ vt


def rotation_error(r: np.ndarray) -> float:
    return float(np.linalg.norm(r.T @ r - np.eye(3)))


def check_rotation(r) -> np.ndarray:
    """Validate a rotation, re-orthonormalizing small drift and rejecting the rest."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise InvalidRotation("rotation must be a finite 3x3 matrix")
    err = rotation_error(r)
    det = np.linalg.det(r)
    if err <= ROTATION_TOL and abs(det - 1.0) <= ROTATION_TOL:
        return r
    if err <= REPROJECT_TOL and det > 0:
        return project_to_so3(r)
    raise InvalidRotation(f"not a rotation: |R^T R - I| = {err:.3g}, det = {det:.6g}")


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class AnchoredRigid:
    """Rigid map p -> R (p - origin) + origin + translation."""

    rotation: np.ndarray
    origin: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation))
        for name in ("origin", "translation"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)

    @classmethod
    def identity(cls, origin=(0.0, 0.0, 0.0)) -> "AnchoredRigid":
        return cls(np.eye(3), origin, np.zeros(3))


def apply_rigid(xi: AnchoredRigid, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return (p - xi.origin) @ xi.rotation.T + xi.origin + xi.translation


def apply_rigid_inverse(xi: AnchoredRigid, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return (p - xi.origin - xi.translation) @ xi.rotation + xi.origin


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise InvalidMesh("vertices must be finite")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise InvalidMesh("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise InvalidMesh("degenerate face with repeated vertex index")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (i, j) pairs with i < j."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return int(len(used) - len(self.edges()) + len(self.faces))

    def components(self) -> tuple[int, np.ndarray]:
        """Connected components over face connectivity (isolated vertices count alone)."""
        e = self.edges()
        n = self.n_vertices
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        return connected_components(adj, directed=False)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def signed_volume(self) -> float:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def average_edge_length(self) -> float:
        e = self.edges()
        return float(point_distance(self.vertices[e[:, 0]], self.vertices[e[:, 1]]).mean())

    def sample_surface(self, n: int, seed: int = 0) -> np.ndarray:
        """Area-weighted uniform samples on the surface."""
        rng = np.random.default_rng(seed)
        areas = self.face_areas()
        total = areas.sum()
        if total <= 0:
            raise InvalidMesh("mesh has zero surface area")
        fid = rng.choice(len(areas), size=n, p=areas / total)
        r1 = rng.random(n)
        r2 = rng.random(n)
        s = np.sqrt(r1)
        a, b, c = (self.vertices[self.faces[fid, i]] for i in range(3))
        return (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces)


class KnnIndex:
    """Exact k-nearest-neighbour index over a fixed point set.

    Results are sorted by distance, ties broken by ascending point index, so
    queries are identical to a brute-force scan. Read-only after construction
    and safe to query from several threads.
    """

    def __init__(self, points):
        pts = np.array(points, dtype=np.float64, copy=True)
        if pts.size == 0:
            raise EmptyPointSet("cannot index an empty point set")
        pts = as_points(pts)
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts) if len(pts) >= BRUTE_FORCE_BELOW else None

    def __len__(self):
        return len(self.points)

    def query(self, queries, k: int, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
        """Batch query: returns (indices, distances), each of shape (m, min(k, n))."""
        if k < 1:
            raise ValueError("k must be >= 1")
        q = as_points(queries)
        kk = min(int(k), len(self.points))
        idx = np.empty((len(q), kk), dtype=np.int64)
        dist = np.empty((len(q), kk), dtype=np.float64)
        for s in range(0, len(q), chunk):
            sl = slice(s, s + chunk)
            if self._tree is None or kk >= len(self.points):
                idx[sl], dist[sl] = self._brute(q[sl], kk)
            else:
                idx[sl], dist[sl] = self._tree_query(q[sl], kk)
        return idx, dist

    def _brute(self, q, kk):
        idx = np.empty((len(q), kk), dtype=np.int64)
        dist = np.empty((len(q), kk), dtype=np.float64)
        rows = max(1, 4_000_000 // len(self.points))
        for s in range(0, len(q), rows):
            d = point_distance(q[s : s + rows, None, :], self.points[None, :, :])
            order = np.argsort(d, axis=1, kind="stable")[:, :kk]
            idx[s : s + rows] = order
            dist[s : s + rows] = np.take_along_axis(d, order, axis=1)
        return idx, dist

    def _tree_query(self, q, kk):
        _, cand = self._tree.query(q, k=kk + 1)
        cand = cand.astype(np.int64)
        d = point_distance(q[:, None, :], self.points[cand])
        order = np.lexsort((cand, d), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        # membership of the first kk is ambiguous when the runner-up ties the kk-th
        margin = 1e-9 * (1.0 + d[:, kk - 1])
        ambiguous = d[:, kk] - d[:, kk - 1] <= margin
        out_i, out_d = cand[:, :kk].copy(), d[:, :kk].copy()
        for row in np.flatnonzero(ambiguous):
            radius = d[row, kk] * (1 + 1e-9) + 1e-300
            ids = np.asarray(self._tree.query_ball_point(q[row], radius), dtype=np.int64)
            dd = point_distance(q[row][None, :], self.points[ids])
            o = np.lexsort((ids, dd))[:kk]
            out_i[row], out_d[row] = ids[o], dd[o]
        return out_i, out_d


def build_knn_index(points) -> KnnIndex:
    return KnnIndex(points)


def knn_query(index: KnnIndex, p, k: int) -> list[tuple[int, float]]:
    """K nearest stored points to a single query, ascending by distance."""
    idx, dist = index.query(np.asarray(p, dtype=np.float64).reshape(1, 3), k)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]


def _point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Distance from each point to each triangle; p is (m,3), triangles (t,3) -> (m,t)."""
    p = p[:, None, :]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("mti,ti->mt", ap, ab)
    d2 = np.einsum("mti,ti->mt", ap, ac)
    bp = p - b
    d3 = np.einsum("mti,ti->mt", bp, ab)
    d4 = np.einsum("mti,ti->mt", bp, ac)
    cp = p - c
    d5 = np.einsum("mti,ti->mt", cp, ab)
    d6 = np.einsum("mti,ti->mt", cp, ac)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        closest = a + v[..., None] * ab + w[..., None] * ac
        # vertex and edge regions (Ericson, Real-Time Collision Detection 5.1.5)
        t_ab = np.clip(np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0), 0, 1)
        t_ac = np.clip(np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0), 0, 1)
        t_bc = np.clip(np.where((d4 - d3) + (d5 - d6) != 0, (d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0), 0, 1)
    on_ab = a + t_ab[..., None] * ab
    on_ac = a + t_ac[..., None] * ac
    on_bc = b + t_bc[..., None] * (c - b)
    closest = np.where(((vc <= 0) & (d1 >= 0) & (d3 <= 0))[..., None], on_ab, closest)
    closest = np.where(((vb <= 0) & (d2 >= 0) & (d6 <= 0))[..., None], on_ac, closest)
    closest = np.where(((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0))[..., None], on_bc, closest)
    closest = np.where(((d1 <= 0) & (d2 <= 0))[..., None], np.broadcast_to(a, closest.shape), closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[..., None], np.broadcast_to(b, closest.shape), closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[..., None], np.broadcast_to(c, closest.shape), closest)
    return point_distance(p, closest)


def surface_distance(index: KnnIndex, p, mesh: TriMesh | None = None, mode: str = "vertex"):
    """Distance from query point(s) to the surface.

    ``mode="vertex"`` measures to the nearest indexed vertex. ``mode="triangle"``
    measures exactly to the triangles of ``mesh`` (brute force, for coarse meshes).
    """
    single = np.asarray(p).ndim == 1
    q = as_points(p)
    if mode == "vertex":
        _, d = index.query(q, 1)
        out = d[:, 0]
    elif mode == "triangle":
        if mesh is None:
            raise ValueError("triangle mode needs the mesh")
        a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
        out = np.empty(len(q))
        step = max(1, 2_000_000 // max(1, mesh.n_faces))
        for s in range(0, len(q), step):
            out[s : s + step] = _point_triangle_distance(q[s : s + step], a, b, c).min(axis=1)
    else:
        raise ValueError(f"unknown surface distance mode {mode!r}")
    return float(out[0]) if single else out


@dataclass(frozen=True)
class ScalarGrid:
    """Scalar samples on a regular lattice; ``values[i, j, k]`` sits at origin + voxel_size * (i, j, k)."""

    values: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    voxel_size: float = 1.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3 or min(vals.shape) < 2:
            raise InvalidGrid("grid needs three axes of at least 2 samples each")
        if not self.voxel_size > 0:
            raise InvalidGrid("voxel size must be positive")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(self.origin[i] + self.voxel_size * np.arange(self.values.shape[i]) for i in range(3))

    @classmethod
    def from_function(cls, fn, resolution, lo, hi) -> "ScalarGrid":
        """Sample ``fn(x, y, z)`` on a cube lattice spanning [lo, hi] with ``resolution`` samples per axis."""
        n = int(resolution)
        h = (hi - lo) / (n - 1)
        ax = lo + h * np.arange(n)
        x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
        return cls(fn(x, y, z), origin=np.full(3, lo, dtype=np.float64), voxel_size=h)


def marching_cubes(grid: ScalarGrid, iso: float = 0.0, inside: str = "high") -> TriMesh:
    """Extract the iso-level surface of a scalar grid.

    ``inside`` says which side of the level set is solid ("high" or "low");
    faces are wound so normals point out of the solid.
    """
    from skimage.measure import marching_cubes as _skimage_mc

    vals = grid.values
    if not (np.nanmin(vals) < iso < np.nanmax(vals)):
        raise EmptyIsosurface(f"no cell straddles iso level {iso}")
    if inside not in ("high", "low"):
        raise ValueError("inside must be 'high' or 'low'")
    verts, faces, _, _ = _skimage_mc(vals, level=iso, method="lewiner", allow_degenerate=False)
    verts = grid.origin + grid.voxel_size * verts.astype(np.float64)
    faces = faces.astype(np.int64)
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    if len(faces) == 0:
        raise EmptyIsosurface(f"no cell straddles iso level {iso}")
    faces = _orient_outward(verts, faces, grid, inside)
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(verts[used], remap[faces])


def _orient_outward(verts, faces, grid: ScalarGrid, inside: str) -> np.ndarray:
    # majority vote of face normals against the sampled gradient at face centroids
    from scipy.ndimage import map_coordinates

    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    n = np.cross(b - a, c - a)
    cen = (a + b + c) / 3.0
    idx = ((cen - grid.origin) / grid.voxel_size).T
    grads = np.stack([map_coordinates(g, idx, order=1, mode="nearest") for g in np.gradient(grid.values)], axis=1)
    outward = -grads if inside == "high" else grads
    score = np.einsum("ij,ij->i", n, outward).sum()
    return faces if score >= 0 else faces[:, ::-1].copy()
