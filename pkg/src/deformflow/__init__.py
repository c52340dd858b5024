"""Scene-flow recovery from sparse, noisy 3D correspondences.

The pipeline filters multi-view 2D matches into 3D anchors, fits an embedded
deformation graph to them, and exposes the resulting forward and backward
flow for warping meshes, points and ray samples.
"""

__version__ = "0.1.0"

from .config import PipelineConfig, load_config
from .correspond import (
    Camera,
    Matches,
    PairSet,
    confidence_filter,
    filter_3d,
    fuse_multiview,
    hemisphere_poses,
    lift_pairs,
    snap_to_anchors,
)
from .defgraph import DeformationGraph, build_graph, compute_interpolation, decimate, field_from_graph
from .errors import *  # noqa: F401,F403
from .flow import TransformField, backward_flow, forward_flow, is_near_surface, warp_mesh, warp_ray_samples
from .geometry import AnchoredRigid, KnnIndex, ScalarGrid, TriMesh, build_knn_index, knn_query, marching_cubes
from .metrics import chamfer_distance, evaluate_meshes, success, volume_iou
from .optimizer import AnchorSet, OptimConfig, arap_loss, consistency_loss, gradients, optimize_graph, total_loss
from .pipeline import filter_matches, recover_flow
from .synthetic import make_synthetic
