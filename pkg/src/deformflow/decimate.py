"""Quadric-error edge-collapse decimation to an exact vertex budget."""
from __future__ import annotations

import heapq

import numpy as np

from .errors import TargetTooLarge
from .geometry import TriMesh

BOUNDARY_WEIGHT = 100.0
# Edge-length term in the collapse ranking. Flat or developable regions have
# zero quadric error, and without it whole strips drain into one spot.
LENGTH_WEIGHT = 0.05


def _face_quadrics(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    n = np.cross(b - a, c - a)
    area2 = np.linalg.norm(n, axis=1)
    unit = n / np.where(area2 > 0, area2, 1.0)[:, None]
    d = -np.einsum("ij,ij->i", unit, a)
    return _plane_quadrics(unit, d, 0.5 * area2)


def _plane_quadrics(n: np.ndarray, d: np.ndarray, weight: np.ndarray) -> np.ndarray:
    # upper triangle of the 4x4 plane outer product: a2 ab ac ad b2 bc bd c2 cd d2
    a, b, c = n[:, 0], n[:, 1], n[:, 2]
    q = np.stack([a * a, a * b, a * c, a * d, b * b, b * c, b * d, c * c, c * d, d * d], axis=1)
    return q * weight[:, None]


def _boundary_quadrics(v: np.ndarray, f: np.ndarray):
    """Penalty planes through open boundary edges, perpendicular to their face."""
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    owner = np.tile(np.arange(len(f)), 3)
    key = np.sort(e, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    border = counts[inv] == 1
    if not np.any(border):
        return None, None
    e, owner = e[border], owner[border]
    fa, fb, fc = v[f[owner, 0]], v[f[owner, 1]], v[f[owner, 2]]
    fn = np.cross(fb - fa, fc - fa)
    p0, p1 = v[e[:, 0]], v[e[:, 1]]
    n = np.cross(p1 - p0, fn)
    length = np.linalg.norm(n, axis=1)
    n = n / np.where(length > 0, length, 1.0)[:, None]
    d = -np.einsum("ij,ij->i", n, p0)
    w = BOUNDARY_WEIGHT * np.linalg.norm(p1 - p0, axis=1) ** 2
    return e, _plane_quadrics(n, d, w)


def _solve(q, p, r):
    """Minimizer of the summed quadric over the edge; falls back to endpoints/midpoint."""
    a2, ab, ac, ad, b2, bc, bd, c2, cd, d2 = q
    det = a2 * (b2 * c2 - bc * bc) - ab * (ab * c2 - bc * ac) + ac * (ab * bc - b2 * ac)
    scale = max(abs(a2), abs(b2), abs(c2), 1e-300) ** 3
    cands = []
    mid = ((p[0] + r[0]) * 0.5, (p[1] + r[1]) * 0.5, (p[2] + r[2]) * 0.5)
    if abs(det) > 1e-10 * scale:
        # Cramer's rule on A x = -b
        rx, ry, rz = -ad, -bd, -cd
        x = (rx * (b2 * c2 - bc * bc) - ab * (ry * c2 - bc * rz) + ac * (ry * bc - b2 * rz)) / det
        y = (a2 * (ry * c2 - bc * rz) - rx * (ab * c2 - bc * ac) + ac * (ab * rz - ry * ac)) / det
        z = (a2 * (b2 * rz - ry * bc) - ab * (ab * rz - ry * ac) + rx * (ab * bc - b2 * ac)) / det
        el2 = (p[0] - r[0]) ** 2 + (p[1] - r[1]) ** 2 + (p[2] - r[2]) ** 2
        if (x - mid[0]) ** 2 + (y - mid[1]) ** 2 + (z - mid[2]) ** 2 <= 4.0 * el2:
            cands.append((x, y, z))
    cands.extend((mid, tuple(p), tuple(r)))
    best, best_cost = None, None
    for x, y, z in cands:
        cost = (
            a2 * x * x + 2 * ab * x * y + 2 * ac * x * z + 2 * ad * x
            + b2 * y * y + 2 * bc * y * z + 2 * bd * y
            + c2 * z * z + 2 * cd * z + d2
        )
        if best_cost is None or cost < best_cost:
            best, best_cost = (x, y, z), cost
    return max(best_cost, 0.0), best


def _normal(a, b, c):
    ux, uy, uz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    vx, vy, vz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    return (uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx)


class _Collapser:
    def __init__(self, mesh: TriMesh, length_weight: float = LENGTH_WEIGHT):
        self.length_weight = length_weight
        v = mesh.vertices
        f = mesh.faces
        fq = _face_quadrics(v, f)
        q = np.zeros((len(v), 10))
        for i in range(3):
            np.add.at(q, f[:, i], fq)
        be, bq = _boundary_quadrics(v, f)
        if be is not None:
            np.add.at(q, be[:, 0], bq)
            np.add.at(q, be[:, 1], bq)
        self.pos = [tuple(p) for p in v.tolist()]
        self.quad = [tuple(x) for x in q.tolist()]
        self.faces = [list(t) for t in f.tolist()]
        self.face_alive = [True] * len(f)
        self.vfaces = [set() for _ in range(len(v))]
        for fi, t in enumerate(self.faces):
            for i in t:
                self.vfaces[i].add(fi)
        self.alive = [bool(s) for s in self.vfaces]
        self.n_alive = sum(self.alive)
        self.version = [0] * len(v)
        self.heap = []
        for i, j in mesh.edges().tolist():
            self._push(i, j)

    def neighbors(self, u):
        out = set()
        for fi in self.vfaces[u]:
            out.update(self.faces[fi])
        out.discard(u)
        return out

    def _push(self, u, v):
        q = tuple(a + b for a, b in zip(self.quad[u], self.quad[v]))
        p, r = self.pos[u], self.pos[v]
        cost, x = _solve(q, p, r)
        el2 = (p[0] - r[0]) ** 2 + (p[1] - r[1]) ** 2 + (p[2] - r[2]) ** 2
        cost += self.length_weight * el2 * el2
        heapq.heappush(self.heap, (cost, u, v, self.version[u], self.version[v], x))

    def _valid(self, u, v, x):
        shared = self.vfaces[u] & self.vfaces[v]
        if not shared:
            return False
        opposite = set()
        for fi in shared:
            opposite.update(self.faces[fi])
        opposite -= {u, v}
        if (self.neighbors(u) & self.neighbors(v)) != opposite:
            return False
        existing = {tuple(sorted(self.faces[fi])) for fi in self.vfaces[u] - shared}
        for fi in self.vfaces[v] - shared:
            t = tuple(sorted(u if i == v else i for i in self.faces[fi]))
            if t in existing:
                return False
        for w in (u, v):
            for fi in self.vfaces[w] - shared:
                pts = [self.pos[i] for i in self.faces[fi]]
                n0 = _normal(*pts)
                pts = [x if i == w else self.pos[i] for i in self.faces[fi]]
                n1 = _normal(*pts)
                if n0[0] * n1[0] + n0[1] * n1[1] + n0[2] * n1[2] <= 0.0:
                    return False
        return True

    def collapse(self, u, v, x):
        shared = self.vfaces[u] & self.vfaces[v]
        for fi in shared:
            self.face_alive[fi] = False
            for i in self.faces[fi]:
                self.vfaces[i].discard(fi)
        for fi in list(self.vfaces[v]):
            t = self.faces[fi]
            t[t.index(v)] = u
            self.vfaces[u].add(fi)
        self.vfaces[v] = set()
        self.alive[v] = False
        self.n_alive -= 1
        self.pos[u] = x
        self.quad[u] = tuple(a + b for a, b in zip(self.quad[u], self.quad[v]))
        self.version[u] += 1
        self.version[v] += 1
        for n in self.neighbors(u):
            self._push(u, n)

    def run(self, target: int):
        while self.n_alive > target and self.heap:
            cost, u, v, vu, vv, x = heapq.heappop(self.heap)
            if not (self.alive[u] and self.alive[v]):
                continue
            if vu != self.version[u] or vv != self.version[v]:
                continue
            if self._valid(u, v, x):
                self.collapse(u, v, x)

    def result(self) -> TriMesh:
        keep = [i for i, a in enumerate(self.alive) if a]
        remap = {old: new for new, old in enumerate(keep)}
        faces = [[remap[i] for i in t] for t, a in zip(self.faces, self.face_alive) if a]
        verts = np.array([self.pos[i] for i in keep], dtype=np.float64).reshape(-1, 3)
        return TriMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))


def decimate(mesh: TriMesh, target_nodes: int) -> TriMesh:
    """Collapse edges in order of quadric error until ``target_nodes`` vertices remain.

    Collapses that would break manifoldness, duplicate a face or flip a face
    normal are skipped. Edge collapses never join separate components. Vertices
    not referenced by any face are dropped from the output.
    """
    target_nodes = int(target_nodes)
    if target_nodes < 1:
        raise ValueError("target_nodes must be positive")
    if target_nodes > mesh.n_vertices:
        raise TargetTooLarge(f"target {target_nodes} exceeds vertex count {mesh.n_vertices}")
    if target_nodes == mesh.n_vertices:
        return mesh
    c = _Collapser(mesh)
    c.run(target_nodes)
    return c.result()
