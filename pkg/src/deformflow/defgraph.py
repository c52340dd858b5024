"""Embedded deformation graph on a decimated mesh and its interpolation to full resolution."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decimate import decimate
from .flow import DEFAULT_K, DEFAULT_TAU, TransformField, blend_weights
from .geometry import KnnIndex, TriMesh, as_points, project_to_so3
from .rotations import (
    blend_quaternions,
    canonicalize_axis_angle,
    quaternion_from_axis_angle,
    rotation_from_axis_angle,
    rotation_from_quaternion,
)

TRANSLATION_MODES = ("linear", "embedded")
ROTATION_BLENDS = ("quaternion", "linear")

__all__ = [
    "DeformationGraph",
    "InterpolationWeights",
    "build_graph",
    "compute_interpolation",
    "decimate",
    "field_from_graph",
    "rotation_from_axis_angle",
]


class DeformationGraph:
    """Nodes, undirected edges and per-node (axis-angle, translation) parameters.

    Parameters are the only mutable state; the optimizer writes them between
    evaluation passes.
    """

    def __init__(self, nodes, edges, rotvecs=None, translations=None):
        self.nodes = as_points(nodes).copy()
        self.nodes.setflags(write=False)
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        n = len(self.nodes)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise ValueError("edge references a missing node")
        self.edges = e
        self.rotvecs = np.zeros((n, 3)) if rotvecs is None else np.array(rotvecs, dtype=np.float64).reshape(n, 3)
        self.translations = (
            np.zeros((n, 3)) if translations is None else np.array(translations, dtype=np.float64).reshape(n, 3)
        )
        self.node_index = KnnIndex(self.nodes)

    def __len__(self):
        return len(self.nodes)

    @property
    def params(self) -> np.ndarray:
        """Stacked (n, 6) parameters: axis-angle then translation."""
        return np.concatenate([self.rotvecs, self.translations], axis=1)

    def set_params(self, params) -> None:
        p = np.asarray(params, dtype=np.float64).reshape(len(self), 6)
        self.rotvecs = canonicalize_axis_angle(p[:, :3])
        self.translations = p[:, 3:].copy()

    def rotations(self) -> np.ndarray:
        return rotation_from_axis_angle(self.rotvecs)

    def directed_edges(self) -> np.ndarray:
        return np.concatenate([self.edges, self.edges[:, ::-1]])

    def copy(self) -> "DeformationGraph":
        g = DeformationGraph.__new__(DeformationGraph)
        g.nodes, g.edges, g.node_index = self.nodes, self.edges, self.node_index
        g.rotvecs, g.translations = self.rotvecs.copy(), self.translations.copy()
        return g


@dataclass(frozen=True)
class InterpolationWeights:
    """K nearest graph nodes and their blend weights for each full-resolution vertex."""

    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.indices.shape != self.weights.shape:
            raise ValueError("indices and weights must have the same shape")

    def __len__(self):
        return len(self.indices)

    def subset(self, rows) -> "InterpolationWeights":
        return InterpolationWeights(self.indices[rows], self.weights[rows])

    def dense(self, n_nodes: int) -> np.ndarray:
        w = np.zeros((len(self.indices), n_nodes))
        np.add.at(w, (np.repeat(np.arange(len(self.indices)), self.indices.shape[1]), self.indices.ravel()), self.weights.ravel())
        return w


def build_graph(decimated: TriMesh) -> DeformationGraph:
    return DeformationGraph(decimated.vertices, decimated.edges())


def compute_interpolation(graph: DeformationGraph, vertices, k: int = DEFAULT_K) -> InterpolationWeights:
    if k < 1 or k > len(graph):
        raise ValueError(f"k must lie in [1, {len(graph)}]")
    idx, d = graph.node_index.query(as_points(vertices), k)
    return InterpolationWeights(idx, blend_weights(d))


def interpolate_translations(graph: DeformationGraph, vertices, weights: InterpolationWeights, mode: str = "linear"):
    """Per-vertex translations from node parameters.

    ``linear`` blends node translations only. ``embedded`` blends the full node
    maps R_j (v - n_j) + n_j + t_j and subtracts v, which reproduces a global
    rigid motion exactly.
    """
    idx, w = weights.indices, weights.weights
    if mode == "linear":
        return np.einsum("mk,mki->mi", w, graph.translations[idx])
    if mode == "embedded":
        v = as_points(vertices)
        rot = graph.rotations()[idx]
        nodes = graph.nodes[idx]
        moved = np.einsum("mkij,mkj->mki", rot, v[:, None, :] - nodes) + nodes + graph.translations[idx]
        return np.einsum("mk,mki->mi", w, moved) - v
    raise ValueError(f"unknown translation mode {mode!r}")


def interpolate_rotations(graph: DeformationGraph, weights: InterpolationWeights, blend: str = "quaternion"):
    idx, w = weights.indices, weights.weights
    node_rot = graph.rotations()
    heavy = idx[np.arange(len(idx)), np.argmax(w, axis=1)]
    if blend == "quaternion":
        q = quaternion_from_axis_angle(graph.rotvecs)[idx]
        out = rotation_from_quaternion(blend_quaternions(q, w))
    elif blend == "linear":
        out = project_to_so3(np.einsum("mk,mkij->mij", w, node_rot[idx]))
    else:
        raise ValueError(f"unknown rotation blend {blend!r}")
    # a blend of identical rotations is that rotation, bit for bit
    aa = graph.rotvecs[idx]
    same = np.all((aa == graph.rotvecs[heavy][:, None, :]).all(axis=2) | (w == 0), axis=1)
    out[same] = node_rot[heavy[same]]
    return out


def field_from_graph(
    graph: DeformationGraph,
    vertices,
    weights: InterpolationWeights,
    k: int = DEFAULT_K,
    tau: float = DEFAULT_TAU,
    translation_mode: str = "linear",
    rotation_blend: str = "quaternion",
) -> TransformField:
    """Anchor one interpolated rigid transform at every full-resolution vertex."""
    v = as_points(vertices)
    if len(weights) != len(v):
        raise ValueError("weights were computed for a different vertex set")
    t = interpolate_translations(graph, v, weights, translation_mode)
    r = interpolate_rotations(graph, weights, rotation_blend)
    return TransformField(v, r, t, k=k, tau=tau)
