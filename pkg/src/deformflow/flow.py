"""Forward/backward scene flow as a KNN blend of anchored rigid transforms."""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import DegenerateDirection, DegenerateDirectionWarning, InvalidRotation
from .geometry import KnnIndex, REPROJECT_TOL, ROTATION_TOL, TriMesh, as_points, project_to_so3

DEFAULT_K = 20
DEFAULT_TAU = 7e-5
CHUNK = 8192


def blend_weights(distances) -> np.ndarray:
    """Normalized linear-falloff weights for ascending neighbour distances.

    Raw weight is ``1 - d / d_max`` so the farthest neighbour gets exactly zero.
    Works on a single row or a (m, K) batch. A single neighbour gets weight 1;
    rows whose raw weights all vanish (equal distances) fall back to uniform.
    """
    d = np.asarray(distances, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    m, k = d.shape
    if k == 1:
        w = np.ones_like(d)
        return w[0] if single else w
    dmax = d.max(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(dmax > 0, 1.0 - d / dmax, 0.0)
    raw = np.maximum(raw, 0.0)
    degenerate = raw.max(axis=1) < 1e-12
    raw[degenerate] = 1.0
    w = raw / raw.sum(axis=1, keepdims=True)
    return w[0] if single else w


def _check_rotations(rotations: np.ndarray) -> np.ndarray:
    r = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    if not np.all(np.isfinite(r)):
        raise InvalidRotation("rotations must be finite")
    err = np.linalg.norm(np.swapaxes(r, 1, 2) @ r - np.eye(3), axis=(1, 2))
    det = np.linalg.det(r)
    bad = (err > REPROJECT_TOL) | (det <= 0)
    if np.any(bad):
        raise InvalidRotation(f"{int(bad.sum())} matrices are not rotations")
    drift = (err > ROTATION_TOL) | (np.abs(det - 1.0) > ROTATION_TOL)
    if np.any(drift):
        r = r.copy()
        r[drift] = project_to_so3(r[drift])
    return r


class TransformField:
    """One anchored rigid transform per anchor vertex plus the two KNN indices.

    The forward index covers the anchors, the backward index the transformed
    anchors ``v + t``. Immutable; evaluation methods are pure and thread-safe.
    """

    def __init__(self, anchors, rotations, translations, k: int = DEFAULT_K, tau: float = DEFAULT_TAU):
        anchors = as_points(anchors).copy()
        translations = as_points(translations).copy()
        rotations = _check_rotations(rotations)
        if not (len(anchors) == len(rotations) == len(translations)):
            raise ValueError("anchors, rotations and translations must have equal length")
        if int(k) < 1:
            raise ValueError("k must be >= 1")
        if not tau > 0:
            raise ValueError("tau must be positive")
        for a in (anchors, rotations, translations):
            a.setflags(write=False)
        self.anchors = anchors
        self.rotations = rotations
        self.translations = translations
        self.k = int(k)
        self.tau = float(tau)
        self.forward_index = KnnIndex(anchors)
        self.backward_index = KnnIndex(anchors + translations)

    @classmethod
    def identity(cls, anchors, k: int = DEFAULT_K, tau: float = DEFAULT_TAU) -> "TransformField":
        anchors = as_points(anchors)
        n = len(anchors)
        return cls(anchors, np.broadcast_to(np.eye(3), (n, 3, 3)), np.zeros((n, 3)), k=k, tau=tau)

    @classmethod
    def from_global(cls, anchors, rotation, offset, k: int = DEFAULT_K, tau: float = DEFAULT_TAU) -> "TransformField":
        """Field where every anchor carries the global map p -> rotation @ p + offset."""
        anchors = as_points(anchors)
        rotation = np.asarray(rotation, dtype=np.float64)
        t = anchors @ rotation.T + np.asarray(offset, dtype=np.float64) - anchors
        return cls(anchors, np.broadcast_to(rotation, (len(anchors), 3, 3)), t, k=k, tau=tau)

    def __len__(self):
        return len(self.anchors)

    @property
    def transformed_anchors(self) -> np.ndarray:
        return self.backward_index.points


def _chunked(fn, p: np.ndarray, threads: int) -> np.ndarray:
    # fixed chunk boundaries keep results independent of the worker count
    chunks = [p[s : s + CHUNK] for s in range(0, len(p), CHUNK)]
    if threads <= 1 or len(chunks) <= 1:
        parts = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(fn, chunks))
    return np.concatenate(parts, axis=0) if parts else np.empty((0, 3))


def _forward_chunk(field: TransformField, p: np.ndarray) -> np.ndarray:
    idx, d = field.forward_index.query(p, field.k)
    w = blend_weights(d)
    local = p[:, None, :] - field.anchors[idx]
    rot = field.rotations[idx]
    # displacement form: R(p - v) + v + t = p + (R - I)(p - v) + t
    disp = np.einsum("mkij,mkj->mki", rot, local) - local + field.translations[idx]
    return p + np.einsum("mk,mki->mi", w, disp)


def _backward_chunk(field: TransformField, p: np.ndarray) -> np.ndarray:
    idx, d = field.backward_index.query(p, field.k)
    w = blend_weights(d)
    t = field.translations[idx]
    local = p[:, None, :] - field.anchors[idx] - t
    rot = field.rotations[idx]
    # R^T (p - v - t) + v = p + (R^T - I)(p - v - t) - t
    disp = np.einsum("mkji,mkj->mki", rot, local) - local - t
    return p + np.einsum("mk,mki->mi", w, disp)


def forward_flow(field: TransformField, p, threads: int = 1) -> np.ndarray:
    single = np.asarray(p).ndim == 1
    q = as_points(p)
    out = _chunked(lambda c: _forward_chunk(field, c), q, threads)
    return out[0] if single else out


def backward_flow(field: TransformField, p, threads: int = 1) -> np.ndarray:
    single = np.asarray(p).ndim == 1
    q = as_points(p)
    out = _chunked(lambda c: _backward_chunk(field, c), q, threads)
    return out[0] if single else out


def is_near_surface(field: TransformField, p, side: str = "original"):
    """Strict surface gate: nearest (transformed) anchor closer than tau."""
    single = np.asarray(p).ndim == 1
    if side == "original":
        index = field.forward_index
    elif side == "transformed":
        index = field.backward_index
    else:
        raise ValueError("side must be 'original' or 'transformed'")
    _, d = index.query(as_points(p), 1)
    near = d[:, 0] < field.tau
    return bool(near[0]) if single else near


def warp_mesh(field: TransformField, mesh: TriMesh, threads: int = 1) -> TriMesh:
    """Move every vertex with the forward flow; faces are reused as-is."""
    return TriMesh(forward_flow(field, mesh.vertices, threads=threads), mesh.faces)


def warp_ray_samples(field: TransformField, samples, threads: int = 1):
    """Map ray samples from the transformed scene back to the original one.

    Returns ``(points, directions, near)``: backward-flowed sample positions,
    unit directions from central differences of those positions (one-sided at
    the ends), and the surface-gate flag per sample. Samples with
    ``near == False`` are to be treated as empty space by the caller.
    """
    s = as_points(samples)
    if len(s) < 2:
        raise ValueError("a ray needs at least two samples")
    if np.any(np.all(s[1:] == s[:-1], axis=1)):
        raise ValueError("consecutive ray samples must be distinct")
    q = backward_flow(field, s, threads=threads)
    diff = np.empty_like(q)
    diff[0] = q[1] - q[0]
    diff[-1] = q[-1] - q[-2]
    if len(q) > 2:
        diff[1:-1] = q[2:] - q[:-2]
    norm = np.linalg.norm(diff, axis=1)
    valid = norm > 1e-15
    if not np.any(valid):
        raise DegenerateDirection("all transformed ray samples coincide")
    dirs = np.zeros_like(diff)
    dirs[valid] = diff[valid] / norm[valid, None]
    if not np.all(valid):
        good = np.flatnonzero(valid)
        for i in np.flatnonzero(~valid):
            j = good[np.argmin(np.abs(good - i))]
            dirs[i] = dirs[j]
        warnings.warn(
            f"{int((~valid).sum())} degenerate ray directions copied from neighbours",
            DegenerateDirectionWarning,
            stacklevel=2,
        )
    near = is_near_surface(field, s, side="transformed")
    return q, dirs, near
