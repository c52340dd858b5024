"""End-to-end stages shared by the CLI: correspondence filtering and flow recovery."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .correspond import (
    confidence_filter,
    filter_3d_mask,
    fuse_multiview,
    lift_pairs,
    snap_to_anchors,
)
from .defgraph import build_graph, compute_interpolation, decimate, field_from_graph
from .geometry import KnnIndex, TriMesh
from .optimizer import AnchorSet, optimize_graph

log = logging.getLogger(__name__)


@dataclass
class FilterResult:
    anchors: AnchorSet
    stats: dict
    pair_mask: np.ndarray


def filter_matches(matches, target_cam, target_depth, cams, depths, mesh: TriMesh, cfg: PipelineConfig) -> FilterResult:
    stats = {"raw": len(matches)}
    m = confidence_filter(matches, cfg.confidence_threshold)
    stats["confident"] = len(m)
    m = fuse_multiview(m, cfg.fusion_radius, cfg.density_mode)
    stats["fused"] = len(m)
    pairs, skipped = lift_pairs(m, target_cam, target_depth, cams, depths, cfg.fusion_radius)
    stats["lifted"] = len(pairs)
    stats["depth_skipped"] = skipped
    eps = cfg.cluster_radius
    if eps is None and len(pairs):
        eps = 0.02 * mesh.bbox_diagonal()
    mask = filter_3d_mask(pairs, eps, cfg.kappa, cfg.min_cluster_size) if len(pairs) else np.zeros(0, dtype=bool)
    stats["filtered"] = int(mask.sum())
    anchors, _ = snap_to_anchors(pairs[mask], mesh, KnnIndex(mesh.vertices))
    stats["anchors"] = len(anchors)
    return FilterResult(anchors, stats, mask)


@dataclass
class RecoveryResult:
    field: object
    graph: object
    state: object
    decimated: TriMesh


def recover_flow(mesh: TriMesh, anchors: AnchorSet, cfg: PipelineConfig, threads: int = 1) -> RecoveryResult:
    """Decimate, build the graph, fit it to the anchors and interpolate a full-resolution field."""
    anchors.validate(mesh)
    target = min(cfg.target_nodes, mesh.n_vertices)
    low = decimate(mesh, target)
    graph = build_graph(low)
    k_interp = min(cfg.k, len(graph))
    weights = compute_interpolation(graph, mesh.vertices, k_interp)
    log.info("graph: %d nodes, %d edges; %d anchors", len(graph), len(graph.edges), len(anchors))
    _, state = optimize_graph(graph, weights, anchors, cfg.optim_config())
    field = field_from_graph(
        graph, mesh.vertices, weights, k=cfg.k, tau=cfg.tau,
        translation_mode=cfg.consistency_mode, rotation_blend=cfg.rotation_blend,
    )
    return RecoveryResult(field, graph, state, low)
