import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from deformflow import formats as fmt
from deformflow.cli import main
from deformflow.optimizer import AnchorSet
from deformflow.synthetic import box_mesh

from meshgen import uv_sphere

FAST = {"iterations": 200, "target_nodes": 100, "metric_samples": 5000, "metric_resolution": 32}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def stats(err):
    return dict(line.split(": ", 1) for line in err.splitlines() if ": " in line and not line.startswith(("error", "WARNING")))


def tree(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def fast_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "fast.json"
    p.write_text(json.dumps(FAST))
    return p


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth") / "bend"
    assert main(["synth", "bend", str(d), "--fixture", "--param", "n_correspondences=650",
                 "--param", "outlier_fraction=0.230769"]) == 0
    return d


# --- synth

def test_synth_layout_and_manifest(synth_dir):
    man = json.loads((synth_dir / "manifest.json").read_text())
    assert man["outliers"] == 150 and man["correspondences"] == 650
    for rel in man["files"].values():
        assert (synth_dir / rel).exists()
    clean = fmt.read_anchors(synth_dir / "anchors_clean.jsonl")
    dirty = fmt.read_anchors(synth_dir / "anchors_contaminated.jsonl")
    changed = clean.vertex_ids[np.any(clean.vb != dirty.vb, axis=1)]
    assert sorted(changed.tolist()) == sorted(man["outlier_vids"])
    rest = fmt.read_mesh(synth_dir / "rest.obj")
    clean.validate(rest)


def test_synth_examples(tmp_path, capsys):
    assert run(capsys, "synth", "bend", tmp_path / "a", "--param", "angle_deg=0")[0] == 0
    a = fmt.read_mesh(tmp_path / "a" / "rest.obj")
    b = fmt.read_mesh(tmp_path / "a" / "transformed.obj")
    assert np.array_equal(a.vertices, b.vertices)

    assert run(capsys, "synth", "twist", tmp_path / "b", "--contamination", "0.3", "--seed", "4")[0] == 0
    man = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man["outlier_fraction"] == 0.3 and man["seed"] == 4

    assert run(capsys, "synth", "twist", tmp_path / "c", "--contamination", "0.3", "--seed", "4")[0] == 0
    assert tree(tmp_path / "b") == tree(tmp_path / "c")

    assert run(capsys, "synth", "articulate", tmp_path / "d", "--mesh-format", "ply")[0] == 0
    assert (tmp_path / "d" / "rest.ply").exists()


def test_synth_invalid(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "bend", tmp_path / "x", "--param", "angle_deg=120")
    assert code == 2 and "angle_deg" in err
    assert not (tmp_path / "x").exists()
    assert run(capsys, "synth", "bend", tmp_path / "y", "--param", "oops")[0] == 2
    assert not (tmp_path / "y").exists()


# --- filter-matches

def filter_args(d, out):
    return ["filter-matches", d / "matches.jsonl", d / "cameras.json", d / "depth", d / "rest.obj",
            "--target-camera", d / "target_camera.json", "--target-depth", d / "depth" / "target.pfm", "-o", out]


def test_filter_matches_removes_outliers(synth_dir, tmp_path, capsys):
    code, _, err = run(capsys, *filter_args(synth_dir, tmp_path / "a.jsonl"))
    assert code == 0
    s = {k: int(v) for k, v in stats(err).items()}
    assert s["raw"] >= s["confident"] >= s["fused"] >= s["lifted"] >= s["filtered"] >= s["anchors"] > 0
    man = json.loads((synth_dir / "manifest.json").read_text())
    bad = set(man["outlier_vids"])
    got = fmt.read_anchors(tmp_path / "a.jsonl")
    kept_bad = sum(int(v) in bad for v in got.vertex_ids)
    assert 1 - kept_bad / len(bad) >= 0.9
    assert kept_bad / len(got) <= 0.1


def test_filter_matches_empty_and_bad_input(synth_dir, tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    args = filter_args(synth_dir, tmp_path / "o.jsonl")
    args[1] = empty
    code, _, err = run(capsys, *args)
    assert code == 3 and "no anchors survived" in err
    assert not (tmp_path / "o.jsonl").exists()

    broken = tmp_path / "broken.jsonl"
    lines = (synth_dir / "matches.jsonl").read_text().splitlines()
    broken.write_text("\n".join(lines[:4] + ["{not json"] + lines[4:]) + "\n")
    args[1] = broken
    code, _, err = run(capsys, *args)
    assert code == 2 and f"{broken}:5:" in err
    assert not (tmp_path / "o.jsonl").exists()


# --- optimize

def translation_fixture(tmp_path):
    mesh = uv_sphere(20, 30, 0.4)
    fmt.write_mesh(tmp_path / "sphere.obj", mesh)
    ids = np.sort(np.random.default_rng(0).choice(mesh.n_vertices, 100, replace=False))
    t = np.array([0.1, -0.15, 0.06])
    (tmp_path / "anchors.jsonl").write_bytes(fmt.anchors_bytes(AnchorSet(ids, mesh.vertices[ids], mesh.vertices[ids] + t)))
    return t


def test_optimize_global_translation(tmp_path, capsys):
    t = translation_fixture(tmp_path)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"target_nodes": 100}))
    code, _, err = run(capsys, "optimize", tmp_path / "sphere.obj", tmp_path / "anchors.jsonl",
                       "--out-dir", tmp_path / "out", "--config", cfg)
    assert code == 0
    g = fmt.read_graph(tmp_path / "out" / "graph.dgraph")
    assert np.abs(g.translations - t).max() < 1e-4
    rows = (tmp_path / "out" / "history.csv").read_text().splitlines()
    assert len(rows) == 1 + 3000
    s = stats(err)
    last = rows[-1].split(",")
    assert s["final L_DG"] == last[3] and s["final L_ARAP"] == last[1] and s["final L_Con"] == last[2]
    field = fmt.read_field(tmp_path / "out" / "field.dfield")
    assert len(field) == uv_sphere(20, 30, 0.4).n_vertices and field.k == 20 and field.tau == 7e-5


def test_optimize_errors(tmp_path, capsys, fast_config):
    translation_fixture(tmp_path)
    mesh = tmp_path / "sphere.obj"
    # anchors not on the mesh
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"vid": 0, "va": [5, 5, 5], "vb": [0, 0, 0]}\n')
    assert run(capsys, "optimize", mesh, bad, "--out-dir", tmp_path / "o1", "--config", fast_config)[0] == 2
    # empty anchor file
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert run(capsys, "optimize", mesh, empty, "--out-dir", tmp_path / "o2", "--config", fast_config)[0] == 3
    # overflow -> non-finite loss
    an = fmt.read_anchors(tmp_path / "anchors.jsonl")
    (tmp_path / "huge.jsonl").write_bytes(fmt.anchors_bytes(AnchorSet(an.vertex_ids, an.va, an.vb * 1e200)))
    code, _, err = run(capsys, "optimize", mesh, tmp_path / "huge.jsonl", "--out-dir", tmp_path / "o3", "--config", fast_config)
    assert code == 4 and "iteration 0" in err
    for d in ("o1", "o2", "o3"):
        assert not (tmp_path / d).exists()


def test_config_errors(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"alpha": 0.1, "not_a_key": 3}))
    code, _, err = run(capsys, "--config", cfg, "poses", "2", "1.0", "-o", tmp_path / "p.json")
    assert code == 2 and "not_a_key" in err
    cfg.write_text(json.dumps({"k": 0}))
    assert run(capsys, "poses", "2", "1.0", "--config", cfg, "-o", tmp_path / "p.json")[0] == 2
    cfg.write_text("[1, 2")
    assert run(capsys, "poses", "2", "1.0", "--config", cfg, "-o", tmp_path / "p.json")[0] == 2
    assert not (tmp_path / "p.json").exists()
    assert run(capsys, "poses", "2", "1.0", "--threads", "0")[0] == 2


# --- warp

def test_warp_identity_mesh(tmp_path, capsys):
    m = uv_sphere(6, 8)
    fmt.write_mesh(tmp_path / "m.obj", m)
    from deformflow.flow import TransformField

    n = m.n_vertices
    f = TransformField(m.vertices, np.tile(np.eye(3), (n, 1, 1)), np.zeros((n, 3)))
    (tmp_path / "id.dfield").write_bytes(fmt.field_bytes(f))
    assert run(capsys, "warp", tmp_path / "id.dfield", tmp_path / "m.obj", "-o", tmp_path / "w.obj")[0] == 0
    assert (tmp_path / "w.obj").read_bytes() == (tmp_path / "m.obj").read_bytes()
    code, _, _ = run(capsys, "warp", tmp_path / "id.dfield", tmp_path / "m.obj", "--direction", "backward", "-o", tmp_path / "x.obj")
    assert code == 2 and not (tmp_path / "x.obj").exists()


def test_warp_points_cycle_on_bend(synth_dir, tmp_path, capsys):
    rest = fmt.read_mesh(synth_dir / "rest.obj")
    pts = rest.vertices[::7]
    (tmp_path / "p.jsonl").write_bytes(fmt.points_bytes(pts))
    code, _, err = run(capsys, "warp", synth_dir / "gt.dfield", tmp_path / "p.jsonl", "--report-cycle", "-o", tmp_path / "q.jsonl")
    assert code == 0
    s = stats(err)
    assert float(s["cycle max error / bbox diagonal"]) < 1e-3
    assert int(s["near surface"]) == len(pts)
    moved = fmt.read_points(tmp_path / "q.jsonl")
    tr = fmt.read_mesh(synth_dir / "transformed.obj").vertices[::7]
    assert np.abs(moved - tr).max() < 1e-9


def test_warp_rays(synth_dir, tmp_path, capsys):
    f = fmt.read_field(synth_dir / "gt.dfield")
    # the transformed-side gate is measured against v_k + t_k
    on = f.anchors[100] + f.translations[100]
    rays = [{"samples": [on.tolist(), (on + [0, 0, 0.5]).tolist(), [5.0, 5.0, 5.0]]}]
    (tmp_path / "r.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rays))
    code, _, err = run(capsys, "warp", synth_dir / "gt.dfield", tmp_path / "r.jsonl", "--direction", "backward", "-o", tmp_path / "o.jsonl")
    assert code == 0
    out = json.loads((tmp_path / "o.jsonl").read_text())
    assert out["near"] == [True, False, False]
    assert int(stats(err)["flagged empty"]) == 2
    assert run(capsys, "warp", synth_dir / "gt.dfield", tmp_path / "r.jsonl", "-o", tmp_path / "o2.jsonl")[0] == 2
    (tmp_path / "bad.jsonl").write_text('{"samples": [[0, 0, 0]]}\n')
    assert run(capsys, "warp", synth_dir / "gt.dfield", tmp_path / "bad.jsonl", "--mode", "rays",
               "--direction", "backward", "-o", tmp_path / "o3.jsonl")[0] == 2
    assert not (tmp_path / "o3.jsonl").exists()


# --- eval

def test_eval(tmp_path, capsys):
    a = box_mesh([0, 0, 0], [1, 1, 1], cells=4)
    b = box_mesh([0.5, 0, 0], [1.5, 1, 1], cells=4)
    fmt.write_mesh(tmp_path / "a.obj", a)
    fmt.write_mesh(tmp_path / "b.obj", b)
    code, out, _ = run(capsys, "eval", tmp_path / "a.obj", tmp_path / "a.obj")
    rep = json.loads(out)
    assert code == 0 and rep == {"cd": 0.0, "cd_x1000": 0.0, "vmiou": 1.0, "success": True}
    code, out, _ = run(capsys, "eval", tmp_path / "a.obj", tmp_path / "b.obj")
    rep = json.loads(out)
    assert abs(rep["vmiou"] - 1 / 3) <= 0.01
    assert rep["cd_x1000"] == 1000 * rep["cd"] and not rep["success"]
    (tmp_path / "bad.obj").write_text("v 0 0\n")
    code, _, err = run(capsys, "eval", tmp_path / "bad.obj", tmp_path / "a.obj")
    assert code == 2 and "bad.obj:1" in err


# --- poses

def test_poses(tmp_path, capsys):
    assert run(capsys, "poses", "200", "3.0", "-o", tmp_path / "c.json")[0] == 0
    cams = fmt.read_cameras(tmp_path / "c.json")
    assert len(cams) == 1400
    for c in cams:
        r = c.pose[:3, :3]
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
    code, out, _ = run(capsys, "poses", "200", "3.0")
    assert out.encode() == (tmp_path / "c.json").read_bytes()


# --- determinism

def test_every_command_is_deterministic(synth_dir, tmp_path, capsys, fast_config):
    translation_fixture(tmp_path)
    (tmp_path / "p.jsonl").write_bytes(fmt.points_bytes(fmt.read_mesh(synth_dir / "rest.obj").vertices[::50]))
    outputs = {}
    for tag, threads in (("r1", 1), ("r2", 1), ("r8", 8)):
        d = tmp_path / tag
        cmds = [
            ["synth", "twist", d / "synth", "--fixture", "--width", "256"],
            filter_args(synth_dir, d / "anchors.jsonl"),
            ["optimize", tmp_path / "sphere.obj", tmp_path / "anchors.jsonl", "--out-dir", d / "opt"],
            ["warp", synth_dir / "gt.dfield", tmp_path / "p.jsonl", "-o", d / "w.jsonl"],
            ["warp", synth_dir / "gt.dfield", synth_dir / "rest.obj", "-o", d / "w.obj"],
            ["eval", synth_dir / "rest.obj", synth_dir / "transformed.obj", "-o", d / "eval.json"],
            ["poses", "20", "2.0", "-o", d / "poses.json"],
        ]
        for c in cmds:
            code, _, err = run(capsys, *c, "--threads", threads, "--config", fast_config)
            assert code == 0, err
        outputs[tag] = tree(d)
    assert outputs["r1"] == outputs["r2"] == outputs["r8"]
    assert len(outputs["r1"]) >= 15


def test_console_script(tmp_path):
    res = subprocess.run([sys.executable, "-m", "deformflow.cli", "poses", "1", "1.0", "--yaws", "0"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and len(json.loads(res.stdout)) == 1
    res = subprocess.run([sys.executable, "-m", "deformflow.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout
