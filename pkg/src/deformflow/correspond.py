"""From raw multi-view 2D matches and depth maps to a filtered anchor set."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidDepth
from .geometry import KnnIndex, TriMesh, as_points, check_rotation, point_distance, rot_z
from .optimizer import AnchorSet

DEFAULT_YAWS = (0.0, -30.0, 30.0, -60.0, 60.0, -90.0, 90.0)
DEFAULT_CONFIDENCE = 0.5


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``pose`` maps camera coordinates (x right, y down, z forward) to world."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if not np.allclose(pose[3], [0, 0, 0, 1]):
            raise ValueError("pose must be a rigid 4x4 matrix")
        r = pose[:3, :3]
        if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-6 or np.linalg.det(r) <= 0:
            raise ValueError("pose rotation is not in SO(3)")
        object.__setattr__(self, "pose", pose)

    def project(self, points):
        """World points -> (u, v, depth) along the camera z axis."""
        p = as_points(points)
        r, t = self.pose[:3, :3], self.pose[:3, 3]
        pc = (p - t) @ r
        z = pc[:, 2]
        return self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy, z


def unproject(cam: Camera, u, v, depth):
    """Pixel + z-depth -> world point; vectorized over array inputs."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~np.isfinite(depth)) or np.any(depth <= 0):
        raise InvalidDepth("depth must be finite and positive")
    pc = np.stack(np.broadcast_arrays((u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth), axis=-1)
    return pc @ cam.pose[:3, :3].T + cam.pose[:3, 3]


@dataclass(frozen=True)
class RawMatch:
    view: int
    ub: float
    vb: float
    ua: float
    va: float
    conf: float


class Matches:
    """Column store of raw 2D matches (transformed pixel -> source-view pixel)."""

    COLUMNS = ("view", "ub", "vb", "ua", "va", "conf")

    def __init__(self, view, ub, vb, ua, va, conf):
        self.view = np.asarray(view, dtype=np.int64).reshape(-1)
        self.ub = np.asarray(ub, dtype=np.float64).reshape(-1)
        self.vb = np.asarray(vb, dtype=np.float64).reshape(-1)
        self.ua = np.asarray(ua, dtype=np.float64).reshape(-1)
        self.va = np.asarray(va, dtype=np.float64).reshape(-1)
        self.conf = np.asarray(conf, dtype=np.float64).reshape(-1)
        n = len(self.view)
        if any(len(getattr(self, c)) != n for c in self.COLUMNS):
            raise ValueError("match columns must have equal length")
        if not np.all(np.isfinite(self.conf)):
            raise ValueError("confidences must be finite")

    @classmethod
    def empty(cls) -> "Matches":
        return cls(*[[] for _ in cls.COLUMNS])

    @classmethod
    def from_records(cls, records) -> "Matches":
        rows = [(r.view, r.ub, r.vb, r.ua, r.va, r.conf) if isinstance(r, RawMatch) else tuple(r[c] for c in cls.COLUMNS) for r in records]
        if not rows:
            return cls.empty()
        return cls(*zip(*rows))

    def records(self) -> list[RawMatch]:
        return [RawMatch(int(a), float(b), float(c), float(d), float(e), float(f)) for a, b, c, d, e, f in zip(*(getattr(self, c) for c in self.COLUMNS))]

    def __len__(self):
        return len(self.view)

    def __getitem__(self, sel) -> "Matches":
        return Matches(*(getattr(self, c)[sel] for c in self.COLUMNS))

    def target_pixels(self) -> tuple[np.ndarray, np.ndarray]:
        """Transformed-image pixels rounded half-up to integers."""
        return np.floor(self.ub + 0.5).astype(np.int64), np.floor(self.vb + 0.5).astype(np.int64)


def confidence_filter(matches: Matches, threshold: float = DEFAULT_CONFIDENCE) -> Matches:
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    return matches[matches.conf >= threshold]


def _encode(view, u, v):
    # pack (view, u, v) into one sortable key; pixels are offset to stay non-negative
    return (view.astype(np.int64) << 42) | ((u.astype(np.int64) + (1 << 20)) << 21) | (v.astype(np.int64) + (1 << 20))


def neighbor_densities(matches: Matches, radius: int = 1, mode: str = "count") -> np.ndarray:
    """Per match: number of other same-view matches within Chebyshev ``radius`` in the transformed image.

    ``mode="component"`` instead scores the size (minus one) of the
    8-connected patch of matched pixels the match belongs to.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    n = len(matches)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    u, v = matches.target_pixels()
    if mode == "component":
        return _component_sizes(matches.view, u, v) - 1
    if mode != "count":
        raise ValueError(f"unknown density mode {mode!r}")
    codes = _encode(matches.view, u, v)
    keys, counts = np.unique(codes, return_counts=True)
    out = np.full(n, -1, dtype=np.int64)
    for du in range(-radius, radius + 1):
        for dv in range(-radius, radius + 1):
            q = _encode(matches.view, u + du, v + dv)
            pos = np.clip(np.searchsorted(keys, q), 0, len(keys) - 1)
            out += np.where(keys[pos] == q, counts[pos], 0)
    return out


def _component_sizes(view, u, v) -> np.ndarray:
    sizes = np.zeros(len(view), dtype=np.int64)
    for vid in np.unique(view):
        sel = np.flatnonzero(view == vid)
        uu, vv = u[sel] - u[sel].min(), v[sel] - v[sel].min()
        img = np.zeros((vv.max() + 1, uu.max() + 1), dtype=np.int64)
        np.add.at(img, (vv, uu), 1)
        labels, _ = ndimage.label(img > 0, structure=np.ones((3, 3)))
        per_label = np.bincount(labels.ravel(), weights=img.ravel()).astype(np.int64)
        sizes[sel] = per_label[labels[vv, uu]]
    return sizes


def neighbor_density(matches: Matches, view: int, pixel, radius: int = 1) -> int:
    """Count of matches to ``view`` within Chebyshev ``radius`` of ``pixel``, excluding one at the pixel itself."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    if len(matches) == 0:
        return 0
    u, v = matches.target_pixels()
    pu, pv = (int(np.floor(c + 0.5)) for c in pixel)
    near = (matches.view == view) & (np.abs(u - pu) <= radius) & (np.abs(v - pv) <= radius)
    self_hits = (matches.view == view) & (u == pu) & (v == pv)
    return int(near.sum() - min(1, int(self_hits.sum())))


def fuse_multiview(matches: Matches, radius: int = 1, mode: str = "count") -> Matches:
    """Keep one match per transformed pixel: highest density, then confidence, then lowest view id.

    Survivors keep their relative input order. Which match survives does not
    depend on the input order.
    """
    if len(matches) == 0:
        return matches
    dens = neighbor_densities(matches, radius, mode)
    u, v = matches.target_pixels()
    # lexsort: last key is primary
    order = np.lexsort((matches.vb, matches.ub, matches.va, matches.ua, matches.view, -matches.conf, -dens, u, v))
    uo, vo = u[order], v[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = (uo[1:] != uo[:-1]) | (vo[1:] != vo[:-1])
    # survivors keep their input order
    return matches[np.sort(order[first])]


@dataclass(frozen=True)
class PairSet:
    """Lifted 3D correspondences: original point, transformed point, source view, density score."""

    pa: np.ndarray
    pb: np.ndarray
    view: np.ndarray = None
    density: np.ndarray = None

    def __post_init__(self):
        pa = np.asarray(self.pa, dtype=np.float64).reshape(-1, 3)
        pb = np.asarray(self.pb, dtype=np.float64).reshape(-1, 3)
        if len(pa) != len(pb):
            raise ValueError("pa and pb must have equal length")
        if not (np.all(np.isfinite(pa)) and np.all(np.isfinite(pb))):
            raise ValueError("pair coordinates must be finite")
        view = np.zeros(len(pa), dtype=np.int64) if self.view is None else np.asarray(self.view, dtype=np.int64).reshape(-1)
        dens = np.zeros(len(pa), dtype=np.int64) if self.density is None else np.asarray(self.density, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "pa", pa)
        object.__setattr__(self, "pb", pb)
        object.__setattr__(self, "view", view)
        object.__setattr__(self, "density", dens)

    def __len__(self):
        return len(self.pa)

    def __getitem__(self, sel) -> "PairSet":
        return PairSet(self.pa[sel], self.pb[sel], self.view[sel], self.density[sel])


def _lookup_depth(depth: np.ndarray, u, v):
    h, w = depth.shape
    iu = np.floor(np.asarray(u) + 0.5).astype(np.int64)
    iv = np.floor(np.asarray(v) + 0.5).astype(np.int64)
    inside = (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    d = np.zeros(len(iu))
    d[inside] = depth[iv[inside], iu[inside]]
    ok = inside & np.isfinite(d) & (d > 0)
    return d, ok


def lift_pairs(matches: Matches, target_cam: Camera, target_depth: np.ndarray, cams, depths, radius: int = 1):
    """Lift 2D matches to 3D pairs through the depth maps.

    ``cams`` and ``depths`` map a source view id to its camera and depth raster
    (lists or dicts). Depth is looked up at the nearest pixel. Matches that hit
    background (0 or non-finite depth) or leave the image are dropped.
    Returns ``(pairs, skipped)``.
    """
    n = len(matches)
    if n == 0:
        return PairSet(np.zeros((0, 3)), np.zeros((0, 3))), 0
    target_depth = np.asarray(target_depth, dtype=np.float64)
    if target_depth.shape != (target_cam.height, target_cam.width):
        raise ValueError("target depth does not match the camera size")
    db, ok = _lookup_depth(target_depth, matches.ub, matches.vb)
    da = np.zeros(n)
    for vid in np.unique(matches.view):
        sel = np.flatnonzero(matches.view == vid)
        try:
            cam, dep = cams[vid], np.asarray(depths[vid], dtype=np.float64)
        except (KeyError, IndexError):
            ok[sel] = False
            continue
        if dep.shape != (cam.height, cam.width):
            raise ValueError(f"depth for view {vid} does not match its camera size")
        d, good = _lookup_depth(dep, matches.ua[sel], matches.va[sel])
        da[sel] = d
        ok[sel] &= good
    dens = neighbor_densities(matches, radius)
    keep = np.flatnonzero(ok)
    pb = unproject(target_cam, matches.ub[keep], matches.vb[keep], db[keep]) if len(keep) else np.zeros((0, 3))
    pa = np.zeros((len(keep), 3))
    for vid in np.unique(matches.view[keep]):
        sel = matches.view[keep] == vid
        k = keep[sel]
        pa[sel] = unproject(cams[vid], matches.ua[k], matches.va[k], da[k])
    return PairSet(pa, pb, matches.view[keep], dens[keep]), int(n - len(keep))


def cluster_points(points, radius: float) -> list[np.ndarray]:
    """Greedy leader clustering in index order.

    Each point joins the first cluster whose leader lies within ``radius``;
    otherwise it founds a new cluster.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    p = as_points(points) if len(points) else np.zeros((0, 3))
    leaders = np.empty((len(p), 3))
    members: list[list[int]] = []
    for i, x in enumerate(p):
        n = len(members)
        if n:
            hit = np.flatnonzero(point_distance(leaders[:n], x) <= radius)
            if len(hit):
                members[hit[0]].append(i)
                continue
        leaders[n] = x
        members.append([i])
    return [np.asarray(m, dtype=np.int64) for m in members]


def default_cluster_radius(pairs: PairSet) -> float:
    lo, hi = pairs.pa.min(axis=0), pairs.pa.max(axis=0)
    return 0.02 * float(np.linalg.norm(hi - lo))


def filter_3d_mask(pairs: PairSet, eps_a: float | None = None, kappa: float = 3.0, min_size: int = 3) -> np.ndarray:
    """Boolean keep-mask of the cluster consistency filter.

    Pairs are clustered on their original positions; inside each cluster the
    displacement ``pb - pa`` of every member must lie within
    ``max(eps_a, kappa * MAD)`` of the per-component median displacement.
    Clusters smaller than ``min_size`` are dropped. ``eps_a`` defaults to 2%
    of the bounding-box diagonal of the original points.
    """
    if len(pairs) == 0:
        return np.zeros(0, dtype=bool)
    if eps_a is None:
        eps_a = default_cluster_radius(pairs)
    if not (eps_a > 0 and kappa > 0 and min_size >= 2):
        raise ValueError("need eps_a > 0, kappa > 0, min_size >= 2")
    disp = pairs.pb - pairs.pa
    keep = np.zeros(len(pairs), dtype=bool)
    for members in cluster_points(pairs.pa, eps_a):
        if len(members) < min_size:
            continue
        d = disp[members]
        med = np.median(d, axis=0)
        dev = point_distance(d, med)
        mad = np.median(dev)
        keep[members] = dev <= max(eps_a, kappa * mad)
    return keep


def filter_3d(pairs: PairSet, eps_a: float | None = None, kappa: float = 3.0, min_size: int = 3) -> PairSet:
    return pairs[filter_3d_mask(pairs, eps_a, kappa, min_size)]


def snap_to_anchors(pairs: PairSet, mesh: TriMesh, index: KnnIndex | None = None):
    """Replace each original point by its nearest mesh vertex, one pair per vertex.

    When several pairs land on one vertex the closest snap wins, earlier pairs
    on ties. Returns ``(anchors, snap_distances)`` ordered by vertex id.
    """
    if mesh.n_vertices == 0:
        raise ValueError("mesh has no vertices")
    if len(pairs) == 0:
        return AnchorSet(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3))), np.zeros(0)
    if index is None:
        index = KnnIndex(mesh.vertices)
    idx, dist = index.query(pairs.pa, 1)
    vid, dist = idx[:, 0], dist[:, 0]
    order = np.lexsort((np.arange(len(vid)), dist, vid))
    first = np.ones(len(order), dtype=bool)
    first[1:] = vid[order][1:] != vid[order][:-1]
    sel = order[first]
    return AnchorSet(vid[sel], mesh.vertices[vid[sel]], pairs.pb[sel]), dist[sel]


def look_at(position, center, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera pose looking from ``position`` at ``center`` (x right, y down, z forward)."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(center, dtype=np.float64) - position
    f /= np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(r)
    if nr < 1e-12:
        r = np.cross(f, [0.0, 1.0, 0.0])
        nr = np.linalg.norm(r)
    r /= nr
    d = np.cross(f, r)
    pose = np.eye(4)
    pose[:3, :3] = np.stack([r, d, f], axis=1)
    pose[:3, 3] = position
    return pose


def hemisphere_poses(
    count: int,
    radius: float,
    center=(0.0, 0.0, 0.0),
    yaws=DEFAULT_YAWS,
    width: int = 512,
    height: int = 512,
    fov_deg: float = 60.0,
) -> list[Camera]:
    """Fibonacci-spiral viewpoints on the upper hemisphere, each rolled by every yaw angle.

    Returns ``count * len(yaws)`` cameras ordered position-major.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    cams = []
    for i in range(count):
        z = 1.0 - (i + 0.5) / count
        rxy = np.sqrt(max(0.0, 1.0 - z * z))
        phi = golden * i
        offset = np.array([rxy * np.cos(phi), rxy * np.sin(phi), z])
        offset /= np.linalg.norm(offset)
        base = look_at(center + radius * offset, center)
        for yaw in yaws:
            pose = base.copy()
            pose[:3, :3] = check_rotation(base[:3, :3] @ rot_z(np.radians(yaw)))
            cams.append(Camera(f, f, width / 2.0, height / 2.0, width, height, pose))
    return cams
