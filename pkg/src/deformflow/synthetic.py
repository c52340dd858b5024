"""Procedural deformation scenes with known ground-truth flow, for end-to-end testing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correspond import Camera, Matches, PairSet, look_at
from .errors import InvalidParams
from .flow import DEFAULT_K, DEFAULT_TAU, TransformField, warp_mesh
from .geometry import KnnIndex, TriMesh, rot_y, rot_z

KINDS = ("bend", "twist", "articulate")

DEFAULTS = {
    "bend": {"angle_deg": 45.0},
    "twist": {"rate_deg_per_unit": 90.0},
    "articulate": {"angle_deg": 30.0},
}
COMMON = {"n_correspondences": 500, "outlier_fraction": 0.3, "patch_size": 10}
LIMITS = {"angle_deg": (0.0, 90.0), "rate_deg_per_unit": (0.0, 180.0)}

HALF_LENGTH = 0.4


def cylinder_mesh(radius_x: float = 0.15, radius_y: float = 0.15, half_length: float = HALF_LENGTH,
                  n_theta: int = 100, n_z: int = 100) -> TriMesh:
    """Closed cylinder along z: n_theta x n_z side vertices plus one centre per cap."""
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    z = np.linspace(-half_length, half_length, n_z)
    tt, zz = np.meshgrid(theta, z)
    side = np.stack([radius_x * np.cos(tt).ravel(), radius_y * np.sin(tt).ravel(), zz.ravel()], axis=1)
    verts = np.concatenate([side, [[0, 0, -half_length], [0, 0, half_length]]])
    bottom, top = len(side), len(side) + 1

    i = np.arange(n_z - 1)[:, None] * n_theta
    j = np.arange(n_theta)[None, :]
    a = (i + j).ravel()
    b = (i + (j + 1) % n_theta).ravel()
    c = a + n_theta
    d = b + n_theta
    faces = [np.stack([a, b, d], 1), np.stack([a, d, c], 1)]
    ring0 = np.arange(n_theta)
    ring1 = (n_z - 1) * n_theta + ring0
    faces.append(np.stack([np.full(n_theta, bottom), (ring0 + 1) % n_theta, ring0], 1))
    faces.append(np.stack([np.full(n_theta, top), ring1, (n_z - 1) * n_theta + (ring0 + 1) % n_theta], 1))
    return TriMesh(verts, np.concatenate(faces))


def box_mesh(lo, hi, cells: int = 20) -> TriMesh:
    """Closed, outward-wound box surface with ``cells`` subdivisions per edge."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    g = np.linspace(0.0, 1.0, cells + 1)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    uu, vv = uu.ravel(), vv.ravel()
    verts, faces = [], []
    ii = np.arange(cells)[:, None] * (cells + 1)
    jj = np.arange(cells)[None, :]
    a = (ii + jj).ravel()
    b = a + (cells + 1)
    quad = [np.stack([a, b, b + 1], 1), np.stack([a, b + 1, a + 1], 1)]
    base = 0
    for axis in range(3):
        u_ax, v_ax = (axis + 1) % 3, (axis + 2) % 3
        for side in (0, 1):
            p = np.empty((len(uu), 3))
            p[:, axis] = hi[axis] if side else lo[axis]
            p[:, u_ax] = lo[u_ax] + uu * (hi[u_ax] - lo[u_ax])
            p[:, v_ax] = lo[v_ax] + vv * (hi[v_ax] - lo[v_ax])
            f = np.concatenate(quad)
            if not side:
                f = f[:, ::-1]
            verts.append(p)
            faces.append(f + base)
            base += len(p)
    verts = np.concatenate(verts)
    faces = np.concatenate(faces)
    key = np.round((verts - lo) / np.maximum(hi - lo, 1e-12) * cells).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    return TriMesh(verts[first[order]], remap[inverse.reshape(-1)][faces])


def merge_meshes(*meshes: TriMesh) -> TriMesh:
    verts, faces, base = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + base)
        base += m.n_vertices
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


def bend_transforms(vertices: np.ndarray, angle: float, half_length: float = HALF_LENGTH):
    """Per-vertex rotations and translations bending the z axis into an arc toward +x."""
    n = len(vertices)
    if angle == 0:
        return np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), np.zeros((n, 3))
    length = 2 * half_length
    rho = length / angle
    s = vertices[:, 2] + half_length
    phi = angle * s / length
    c, sn = np.cos(phi), np.sin(phi)
    rot = np.zeros((n, 3, 3))
    rot[:, 0, 0], rot[:, 0, 2] = c, sn
    rot[:, 1, 1] = 1.0
    rot[:, 2, 0], rot[:, 2, 2] = -sn, c
    center = np.array([rho, 0.0, -half_length])
    local = vertices - center - np.stack([np.zeros(n), np.zeros(n), s], axis=1)
    image = center + np.einsum("nij,nj->ni", rot, local)
    return rot, image - vertices


def twist_transforms(vertices: np.ndarray, rate: float, half_length: float = HALF_LENGTH):
    """Rotation about z by ``rate`` radians per unit height, zero at the bottom cap."""
    s = vertices[:, 2] + half_length
    rot = np.stack([rot_z(a) for a in rate * s])
    return rot, np.einsum("nij,nj->ni", rot, vertices) - vertices


def articulate_transforms(vertices: np.ndarray, angle: float, hinge_z: float = 0.0):
    """Upper part (z > hinge) swings rigidly about the y axis through the hinge; lower part stays."""
    n = len(vertices)
    rot = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    upper = vertices[:, 2] > hinge_z
    r = rot_y(angle)
    pivot = np.array([0.0, 0.0, hinge_z])
    rot[upper] = r
    image = vertices.copy()
    image[upper] = (vertices[upper] - pivot) @ r.T + pivot
    return rot, image - vertices


@dataclass
class SyntheticScene:
    kind: str
    params: dict
    rest: TriMesh
    gt_field: TransformField
    transformed: TriMesh
    clean_ids: np.ndarray
    clean: PairSet
    contaminated: PairSet
    outlier_mask: np.ndarray
    seed: int = 0
    extra: dict = field(default_factory=dict)


def _resolve_params(kind: str, params: dict | None) -> dict:
    if kind not in KINDS:
        raise InvalidParams(f"unknown synthetic kind {kind!r}; expected one of {KINDS}")
    merged = {**DEFAULTS[kind], **COMMON}
    for key, value in (params or {}).items():
        if key not in merged:
            raise InvalidParams(f"unknown parameter {key!r} for {kind}")
        merged[key] = value
    for key, (lo, hi) in LIMITS.items():
        if key in merged and not lo <= float(merged[key]) <= hi:
            raise InvalidParams(f"{key} must lie in [{lo}, {hi}]")
    if not 0 <= float(merged["outlier_fraction"]) < 1:
        raise InvalidParams("outlier_fraction must lie in [0, 1)")
    if int(merged["n_correspondences"]) < 1 or int(merged["patch_size"]) < 1:
        raise InvalidParams("n_correspondences and patch_size must be positive")
    return merged


def _patch_sample(vertices: np.ndarray, n: int, patch: int, rng) -> np.ndarray:
    """Vertex ids in compact patches (a seed vertex and its nearest neighbours), like dense 2D matches."""
    index = KnnIndex(vertices)
    taken = np.zeros(len(vertices), dtype=bool)
    out: list[int] = []
    for seed_vid in rng.permutation(len(vertices)):
        if taken[seed_vid]:
            continue
        ids, _ = index.query(vertices[seed_vid], patch)
        fresh = [int(i) for i in ids[0] if not taken[i]]
        taken[fresh] = True
        out.extend(fresh)
        if len(out) >= n:
            break
    return np.asarray(out[:n], dtype=np.int64)


def make_synthetic(kind: str = "bend", params: dict | None = None, seed: int = 0,
                   k: int = DEFAULT_K, tau: float = DEFAULT_TAU) -> SyntheticScene:
    """Build a rest mesh, a smooth ground-truth field, the warped mesh and correspondences.

    Correspondences are drawn as compact surface patches of ``patch_size``
    vertices. The contaminated copy replaces exactly
    ``round(outlier_fraction * n)`` transformed points with uniform samples from
    the transformed bounding box.
    """
    p = _resolve_params(kind, params)
    rng = np.random.default_rng(seed)
    if kind == "bend":
        rest = cylinder_mesh()
        rot, t = bend_transforms(rest.vertices, np.radians(float(p["angle_deg"])))
    elif kind == "twist":
        rest = cylinder_mesh(radius_x=0.2, radius_y=0.1)
        rot, t = twist_transforms(rest.vertices, np.radians(float(p["rate_deg_per_unit"])))
    else:
        lower = box_mesh([-0.1, -0.1, -HALF_LENGTH], [0.1, 0.1, -0.03], cells=28)
        upper = box_mesh([-0.1, -0.1, 0.03], [0.1, 0.1, HALF_LENGTH], cells=28)
        rest = merge_meshes(lower, upper)
        rot, t = articulate_transforms(rest.vertices, np.radians(float(p["angle_deg"])))
    gt = TransformField(rest.vertices, rot, t, k=k, tau=tau)
    transformed = warp_mesh(gt, rest)

    n = int(p["n_correspondences"])
    ids = _patch_sample(rest.vertices, n, int(p["patch_size"]), rng)
    clean = PairSet(rest.vertices[ids], transformed.vertices[ids])
    n_out = int(round(float(p["outlier_fraction"]) * len(ids)))
    outliers = np.zeros(len(ids), dtype=bool)
    outliers[rng.choice(len(ids), size=n_out, replace=False)] = True
    lo, hi = transformed.bbox()
    pb = clean.pb.copy()
    pb[outliers] = lo + rng.random((n_out, 3)) * (hi - lo)
    contaminated = PairSet(clean.pa, pb)
    return SyntheticScene(kind, p, rest, gt, transformed, ids, clean, contaminated, outliers, seed)


def render_match_fixture(scene: SyntheticScene, n_views: int = 8, width: int = 512, distance: float = 2.0,
                         seed: int = 0, decoys: float = 0.2):
    """2D matches, cameras and sparse depth rasters reproducing the contaminated pairs.

    Every pair becomes one match: its transformed point is projected into a
    target camera and its original point into the source view that sees it
    most frontally. Depth rasters hold the exact z-depth at the matched pixel
    and 0 (background) elsewhere. A fraction ``decoys`` of matches gets an
    isolated low-density duplicate in another view, which multi-view fusion
    has to discard. Returns ``(matches, cams, depths, target_cam, target_depth, labels)``
    where ``labels`` marks outlier matches.
    """
    rng = np.random.default_rng(seed)
    f = width * 1.2
    height = width

    def make_cam(pos):
        return Camera(f, f, width / 2.0, height / 2.0, width, height, look_at(pos, np.zeros(3)))

    target_cam = make_cam(np.array([0.3, -distance, 0.4]))
    angles = 2 * np.pi * np.arange(n_views) / n_views
    cams = [make_cam(np.array([distance * np.cos(a), distance * np.sin(a), 0.5])) for a in angles]

    pairs = scene.contaminated
    ub, vb, zb = target_cam.project(pairs.pb)
    dirs = np.stack([c.pose[:3, 2] for c in cams])
    view = np.argmin(np.einsum("nj,vj->nv", pairs.pa, dirs), axis=1)
    ua, va, za = np.zeros(len(pairs)), np.zeros(len(pairs)), np.zeros(len(pairs))
    for vid, cam in enumerate(cams):
        sel = view == vid
        if np.any(sel):
            ua[sel], va[sel], za[sel] = cam.project(pairs.pa[sel])

    target_depth = np.zeros((height, width))
    depths = [np.zeros((height, width)) for _ in cams]
    keep = np.ones(len(pairs), dtype=bool)
    iub, ivb = np.floor(ub + 0.5).astype(int), np.floor(vb + 0.5).astype(int)
    iua, iva = np.floor(ua + 0.5).astype(int), np.floor(va + 0.5).astype(int)
    for i in range(len(pairs)):
        inside = 0 <= iub[i] < width and 0 <= ivb[i] < height and 0 <= iua[i] < width and 0 <= iva[i] < height
        if not inside or target_depth[ivb[i], iub[i]] or depths[view[i]][iva[i], iua[i]]:
            keep[i] = False
            continue
        target_depth[ivb[i], iub[i]] = zb[i]
        depths[view[i]][iva[i], iua[i]] = za[i]
    sel = np.flatnonzero(keep)
    conf = 0.6 + 0.4 * rng.random(len(sel))
    cols = [view[sel], ub[sel], vb[sel], ua[sel], va[sel], conf]
    labels = scene.outlier_mask[sel]

    n_decoy = int(round(decoys * len(sel)))
    if n_decoy and n_views > 1:
        pick = rng.choice(len(sel), size=n_decoy, replace=False)
        other = (view[sel][pick] + 1 + rng.integers(0, n_views - 1, size=n_decoy)) % n_views
        cols = [
            np.concatenate([cols[0], other]),
            np.concatenate([cols[1], ub[sel][pick]]),
            np.concatenate([cols[2], vb[sel][pick]]),
            np.concatenate([cols[3], rng.uniform(0, width - 1, n_decoy)]),
            np.concatenate([cols[4], rng.uniform(0, height - 1, n_decoy)]),
            np.concatenate([cols[5], conf[pick] - 0.05]),
        ]
        labels = np.concatenate([labels, np.ones(n_decoy, dtype=bool)])
    return Matches(*cols), cams, depths, target_cam, target_depth, labels
