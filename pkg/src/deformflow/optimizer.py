"""Deformation-graph energy (ARAP + consistency), analytic gradients and the Adam loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .defgraph import DeformationGraph, InterpolationWeights, TRANSLATION_MODES
from .errors import ConfigError, EmptyAnchorSet, NonFiniteLoss
from .geometry import TriMesh, as_points
from .rotations import canonicalize_axis_angle, left_jacobian

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnchorSet:
    """Full-mesh vertex ids with their original and observed transformed positions."""

    vertex_ids: np.ndarray
    va: np.ndarray
    vb: np.ndarray

    def __post_init__(self):
        vid = np.asarray(self.vertex_ids, dtype=np.int64).reshape(-1)
        va = np.asarray(self.va, dtype=np.float64).reshape(-1, 3)
        vb = np.asarray(self.vb, dtype=np.float64).reshape(-1, 3)
        if not (len(vid) == len(va) == len(vb)):
            raise ValueError("anchor arrays must have equal length")
        if not (np.all(np.isfinite(va)) and np.all(np.isfinite(vb))):
            raise ValueError("anchor positions must be finite")
        object.__setattr__(self, "vertex_ids", vid)
        object.__setattr__(self, "va", va)
        object.__setattr__(self, "vb", vb)

    def __len__(self):
        return len(self.vertex_ids)

    def validate(self, mesh: TriMesh, tol: float = 1e-9) -> None:
        if len(self) and (self.vertex_ids.min() < 0 or self.vertex_ids.max() >= mesh.n_vertices):
            raise ValueError("anchor vertex id out of range")
        err = np.abs(mesh.vertices[self.vertex_ids] - self.va).max(initial=0.0)
        if err > tol:
            raise ValueError(f"anchor positions deviate from mesh vertices by {err:.3g}")

    @classmethod
    def from_mesh(cls, mesh: TriMesh, vertex_ids, vb) -> "AnchorSet":
        vid = np.asarray(vertex_ids, dtype=np.int64)
        return cls(vid, mesh.vertices[vid], as_points(vb))


@dataclass(frozen=True)
class OptimConfig:
    alpha: float = 0.1
    lr: float = 0.001
    iterations: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    consistency_mode: str = "linear"

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError("alpha must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ConfigError("iterations must be an integer >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("moment decays must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps must be > 0")
        if self.consistency_mode not in TRANSLATION_MODES:
            raise ConfigError(f"consistency_mode must be one of {TRANSLATION_MODES}")

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown optimizer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def zeros(cls, n_nodes: int) -> "OptimState":
        return cls(np.zeros((n_nodes, 6)), np.zeros((n_nodes, 6)))

    def history_array(self) -> np.ndarray:
        """Rows of (L_ARAP, L_Con, L_DG), one per iteration."""
        return np.asarray(self.history, dtype=np.float64).reshape(-1, 3)


def _arap_terms(graph: DeformationGraph, rot: np.ndarray):
    de = graph.directed_edges()
    j, k = de[:, 0], de[:, 1]
    e = graph.nodes[k] - graph.nodes[j]
    re = np.einsum("eab,eb->ea", rot[j], e)
    r = (re - e) + (graph.translations[j] - graph.translations[k])
    return j, k, re, r


def arap_loss(graph: DeformationGraph) -> float:
    """Mean over directed edges (j, k) of |R_j (n_k - n_j) + n_j + t_j - (n_k + t_k)|^2."""
    if len(graph.edges) == 0:
        return 0.0
    _, _, _, r = _arap_terms(graph, graph.rotations())
    return float(np.mean(np.einsum("ei,ei->e", r, r)))


def _consistency_terms(graph: DeformationGraph, aw: InterpolationWeights, anchors: AnchorSet, mode: str, rot=None):
    idx, w = aw.indices, aw.weights
    if mode == "linear":
        t = np.einsum("mk,mki->mi", w, graph.translations[idx])
        return t + anchors.va - anchors.vb, None
    e = anchors.va[:, None, :] - graph.nodes[idx]
    re = np.einsum("mkab,mkb->mka", rot[idx], e)
    moved = re + graph.nodes[idx] + graph.translations[idx]
    return np.einsum("mk,mki->mi", w, moved) - anchors.vb, re


def consistency_loss(graph: DeformationGraph, weights: InterpolationWeights, anchors: AnchorSet, mode: str = "linear") -> float:
    """Mean squared gap between interpolated anchor translations and observed displacements.

    ``weights`` rows are indexed by full-mesh vertex id. In the default
    ``linear`` mode only node translations enter.
    """
    if len(anchors) == 0:
        raise EmptyAnchorSet("consistency loss needs at least one anchor")
    aw = weights.subset(anchors.vertex_ids)
    rot = graph.rotations() if mode == "embedded" else None
    a, _ = _consistency_terms(graph, aw, anchors, mode, rot)
    return float(np.mean(np.einsum("mi,mi->m", a, a)))


def total_loss(graph, weights, anchors, config: OptimConfig = OptimConfig()) -> tuple[float, float, float]:
    la = arap_loss(graph)
    lc = consistency_loss(graph, weights, anchors, config.consistency_mode)
    return la + config.alpha * lc, la, lc


def _loss_and_grad(graph: DeformationGraph, aw: InterpolationWeights, anchors: AnchorSet, config: OptimConfig):
    n = len(graph)
    rot = graph.rotations()
    jac = left_jacobian(graph.rotvecs)
    grad = np.zeros((n, 6))

    if len(graph.edges):
        j, k, re, r = _arap_terms(graph, rot)
        n_e = len(r)
        la = float(np.mean(np.einsum("ei,ei->e", r, r)))
        gr = (2.0 / n_e) * r
        np.add.at(grad[:, 3:], j, gr)
        np.add.at(grad[:, 3:], k, -gr)
        np.add.at(grad[:, :3], j, np.einsum("eba,eb->ea", jac[j], np.cross(re, gr)))
    else:
        la = 0.0

    if len(anchors) == 0:
        raise EmptyAnchorSet("consistency loss needs at least one anchor")
    a, re_c = _consistency_terms(graph, aw, anchors, config.consistency_mode, rot)
    m = len(a)
    lc = float(np.mean(np.einsum("mi,mi->m", a, a)))
    idx, w = aw.indices, aw.weights
    ga = (2.0 * config.alpha / m) * a
    contrib = w[:, :, None] * ga[:, None, :]
    np.add.at(grad[:, 3:], idx.ravel(), contrib.reshape(-1, 3))
    if re_c is not None:
        rg = np.cross(re_c, contrib)
        np.add.at(grad[:, :3], idx.ravel(), np.einsum("mkba,mkb->mka", jac[idx], rg).reshape(-1, 3))
    return (la + config.alpha * lc, la, lc), grad


def gradients(graph, weights, anchors, config: OptimConfig = OptimConfig()) -> np.ndarray:
    """Analytic gradient of L_DG as an (n_nodes, 6) array: d/d axis-angle, then d/d translation."""
    _, g = _loss_and_grad(graph, weights.subset(anchors.vertex_ids), anchors, config)
    return g


def adam_step(state: OptimState, params: np.ndarray, grads: np.ndarray, config: OptimConfig):
    """One bias-corrected Adam update; axis-angle columns are wrapped back into [0, pi]."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes must agree")
    step = state.step + 1
    m = config.beta1 * state.m + (1 - config.beta1) * grads
    v = config.beta2 * state.v + (1 - config.beta2) * grads * grads
    m_hat = m / (1 - config.beta1**step)
    v_hat = v / (1 - config.beta2**step)
    new = params - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    if new.shape[-1] == 6:
        new[:, :3] = canonicalize_axis_angle(new[:, :3])
    return OptimState(m, v, step, state.history), new


def optimize_graph(graph: DeformationGraph, weights: InterpolationWeights, anchors: AnchorSet, config: OptimConfig = OptimConfig()):
    """Minimize L_DG with Adam for ``config.iterations`` steps, updating ``graph`` in place.

    Returns the final (n_nodes, 6) parameters and the optimizer state, whose
    history holds the losses evaluated before each step.
    """
    if len(anchors) == 0:
        raise EmptyAnchorSet("optimization needs at least one anchor")
    aw = weights.subset(anchors.vertex_ids)
    state = OptimState.zeros(len(graph))
    params = graph.params
    for it in range(config.iterations):
        graph.set_params(params)
        losses, grad = _loss_and_grad(graph, aw, anchors, config)
        if not all(np.isfinite(losses)) or not np.all(np.isfinite(grad)):
            raise NonFiniteLoss(it)
        state.history.append((losses[1], losses[2], losses[0]))
        state, params = adam_step(state, params, grad, config)
        if it % 500 == 0:
            log.debug("iter %d  L_DG=%.6g  L_ARAP=%.6g  L_Con=%.6g", it, *losses)
    graph.set_params(params)
    return graph.params, state


def write_history_csv(path, state: OptimState) -> None:
    from .formats import history_bytes

    with open(path, "wb") as fh:
        fh.write(history_bytes(state.history_array()))
