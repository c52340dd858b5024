import json

import numpy as np
import pytest

from deformflow.config import PipelineConfig, load_config
from deformflow.errors import ConfigError
from deformflow.flow import warp_mesh
from deformflow.metrics import evaluate_meshes
from deformflow.optimizer import AnchorSet
from deformflow.pipeline import filter_matches, recover_flow
from deformflow.synthetic import make_synthetic, render_match_fixture


def test_config_defaults():
    c = PipelineConfig()
    assert (c.k, c.tau, c.alpha, c.lr, c.iterations, c.target_nodes) == (20, 7e-5, 0.1, 0.001, 3000, 2000)
    assert c.confidence_threshold == 0.5 and c.kappa == 3.0 and c.min_cluster_size == 3
    assert c.optim_config().iterations == 3000
    assert json.loads(json.dumps(c.to_dict()))["tau"] == 7e-5


@pytest.mark.parametrize("bad", [
    {"k": 0}, {"tau": 0.0}, {"alpha": -0.1}, {"lr": 0}, {"iterations": 0}, {"target_nodes": 0},
    {"confidence_threshold": 1.5}, {"fusion_radius": 0}, {"density_mode": "area"}, {"cluster_radius": -1.0},
    {"kappa": 0}, {"min_cluster_size": 1}, {"metric_resolution": 8}, {"consistency_mode": "x"},
    {"rotation_blend": "slerp"}, {"surface_distance": "face"}, {"unknown": 1},
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides(bad)


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"alpha": 0.5, "seed": 9}))
    c = load_config(p)
    assert c.alpha == 0.5 and c.seed == 9 and c.k == 20
    assert load_config(None) == PipelineConfig()
    p.write_text("[]")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_filter_matches_stage_counts():
    scene = make_synthetic("bend", {"n_correspondences": 650, "outlier_fraction": 150 / 650}, seed=3)
    m, cams, depths, tcam, tdepth, labels = render_match_fixture(scene, seed=3)
    res = filter_matches(m, tcam, tdepth, cams, depths, scene.rest, PipelineConfig())
    s = res.stats
    assert s["raw"] == len(m)
    assert s["raw"] >= s["confident"] >= s["fused"] >= s["lifted"] >= s["filtered"] >= s["anchors"]
    assert s["lifted"] + s["depth_skipped"] == s["fused"]
    bad = set(scene.clean_ids[scene.outlier_mask].tolist())
    kept_bad = sum(v in bad for v in res.anchors.vertex_ids.tolist())
    assert 1 - kept_bad / len(bad) >= 0.85
    res.anchors.validate(scene.rest)


@pytest.mark.parametrize("kind", ["bend", "twist", "articulate"])
def test_recovery_on_every_kind(kind):
    s = make_synthetic(kind, seed=0)
    an = AnchorSet.from_mesh(s.rest, s.clean_ids, s.clean.pb)
    res = recover_flow(s.rest, an, PipelineConfig(target_nodes=200))
    rep = evaluate_meshes(warp_mesh(res.field, s.rest), s.transformed, samples=50_000)
    assert rep.success and rep.volume_iou > 0.9
    assert len(res.state.history) == 3000
