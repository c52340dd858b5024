"""``deformflow`` command-line entry point.

Exit codes: 0 ok, 2 bad input, 3 empty result, 4 numerical failure.
Every command validates and computes first and writes files last, so an error
never leaves partial artifacts behind.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import formats as fmt
from .config import PipelineConfig, load_config
from .correspond import DEFAULT_YAWS, hemisphere_poses
from .errors import DeformFlowError, EmptyAnchorSet, NonFiniteLoss
from .flow import backward_flow, forward_flow, is_near_surface, warp_mesh, warp_ray_samples
from .metrics import evaluate_meshes
from .pipeline import filter_matches, recover_flow
from .synthetic import make_synthetic, render_match_fixture

log = logging.getLogger("deformflow")

EXIT_OK, EXIT_INPUT, EXIT_EMPTY, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(DeformFlowError):
    pass


def _stats(lines) -> None:
    for key, value in lines:
        print(f"{key}: {value}", file=sys.stderr)


def _commit(outputs: dict) -> None:
    """Write every prepared payload; directories are created only now."""
    for path, data in outputs.items():
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        fmt.write_bytes(path, data)


# ---------------------------------------------------------------- commands

def cmd_filter_matches(args, cfg: PipelineConfig) -> int:
    matches = fmt.read_matches(args.matches)
    cams = fmt.read_cameras(args.cameras)
    mesh = fmt.read_mesh(args.mesh)
    target_cam = fmt.read_camera(args.target_camera)
    target_depth = fmt.read_pfm(args.target_depth)
    if target_depth.shape != (target_cam.height, target_cam.width):
        raise UsageError(f"{args.target_depth}: depth size does not match the target camera")
    if len(matches) and matches.view.max() >= len(cams):
        raise UsageError(f"{args.matches}: view {int(matches.view.max())} has no camera in {args.cameras}")
    depth_map = fmt.read_depths(args.depth_dir, matches.view) if len(matches) else {}
    for v, d in depth_map.items():
        if d.shape != (cams[v].height, cams[v].width):
            raise UsageError(f"{Path(args.depth_dir) / fmt.depth_filename(v)}: size does not match camera {v}")
    depths = [depth_map.get(i) for i in range(len(cams))]

    res = filter_matches(matches, target_cam, target_depth, cams, depths, mesh, cfg)
    _stats(res.stats.items())
    if len(res.anchors) == 0:
        print("error: no anchors survived", file=sys.stderr)
        return EXIT_EMPTY
    _commit({args.output: fmt.anchors_bytes(res.anchors)})
    return EXIT_OK


def cmd_optimize(args, cfg: PipelineConfig) -> int:
    mesh = fmt.read_mesh(args.mesh)
    anchors = fmt.read_anchors(args.anchors)
    if len(anchors) == 0:
        print(f"error: {args.anchors}: no anchors", file=sys.stderr)
        return EXIT_EMPTY
    try:
        anchors.validate(mesh, tol=args.anchor_tol)
    except ValueError as exc:
        raise UsageError(f"{args.anchors}: {exc}") from exc
    res = recover_flow(mesh, anchors, cfg, threads=args.threads)
    hist = res.state.history_array()
    out = Path(args.out_dir)
    _stats([
        ("nodes", len(res.graph)),
        ("edges", len(res.graph.edges)),
        ("anchors", len(anchors)),
        ("iterations", len(hist)),
        ("final L_ARAP", repr(float(hist[-1, 0])) if len(hist) else "n/a"),
        ("final L_Con", repr(float(hist[-1, 1])) if len(hist) else "n/a"),
        ("final L_DG", repr(float(hist[-1, 2])) if len(hist) else "n/a"),
    ])
    _commit({
        out / "field.dfield": fmt.field_bytes(res.field),
        out / "graph.dgraph": fmt.graph_bytes(res.graph),
        out / "history.csv": fmt.history_bytes(hist),
    })
    return EXIT_OK


def _warp_mode(path: str, mode: str) -> str:
    if mode != "auto":
        return mode
    suffix = Path(path).suffix.lower()
    if suffix in (".obj", ".ply"):
        return "mesh"
    for line in fmt._read_text(path).splitlines():
        if line.strip():
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                break
            if isinstance(obj, dict) and "samples" in obj:
                return "rays"
            if isinstance(obj, dict) and "p" in obj:
                return "points"
            break
    raise UsageError(f"{path}: cannot infer warp mode; pass --mode")


def cmd_warp(args, cfg: PipelineConfig) -> int:
    field = fmt.read_field(args.field)
    mode = _warp_mode(args.input, args.mode)
    t = args.threads
    if mode == "mesh":
        if args.direction != "forward":
            raise UsageError("mesh mode always uses the forward flow")
        mesh = fmt.read_mesh(args.input)
        payload = fmt.mesh_bytes(warp_mesh(field, mesh, threads=t), args.output)
        _stats([("vertices", mesh.n_vertices), ("faces", mesh.n_faces)])
    elif mode == "points":
        p = fmt.read_points(args.input)
        flow = forward_flow if args.direction == "forward" else backward_flow
        q = flow(field, p, threads=t) if len(p) else p
        side = "original" if args.direction == "forward" else "transformed"
        near = is_near_surface(field, p, side=side) if len(p) else np.zeros(0, dtype=bool)
        payload = fmt.points_bytes(q)
        lines = [("points", len(p)), ("near surface", int(np.sum(near)))]
        if args.report_cycle and len(p):
            back = backward_flow if args.direction == "forward" else forward_flow
            err = np.linalg.norm(back(field, q, threads=t) - p, axis=1)
            diag = float(np.linalg.norm(np.ptp(field.anchors, axis=0)))
            lines += [
                ("cycle max error", repr(float(err.max()))),
                ("cycle max error / bbox diagonal", repr(float(err.max()) / diag)),
                ("cycle p95 error / bbox diagonal", repr(float(np.percentile(err, 95)) / diag)),
            ]
        _stats(lines)
    else:
        rays = fmt.read_rays(args.input)
        if args.direction != "backward":
            raise UsageError("ray samples live in the transformed scene; use --direction backward")
        results = []
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            for i, s in enumerate(rays):
                try:
                    results.append(warp_ray_samples(field, s, threads=t))
                except (ValueError, DeformFlowError) as exc:
                    raise UsageError(f"{args.input}: ray {i + 1}: {exc}") from exc
        for w in caught:
            log.warning("%s", w.message)
        payload = fmt.rays_bytes(results)
        near = sum(int(np.sum(r[2])) for r in results)
        total = sum(len(r[2]) for r in results)
        _stats([("rays", len(rays)), ("samples", total), ("near surface", near), ("flagged empty", total - near)])
    _commit({args.output: payload})
    return EXIT_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    pred = fmt.read_mesh(args.pred)
    gt = fmt.read_mesh(args.gt)
    for path, m in ((args.pred, pred), (args.gt, gt)):
        if m.n_faces == 0:
            raise UsageError(f"{path}: mesh has no faces")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = evaluate_meshes(
            pred, gt, resolution=cfg.metric_resolution, threshold=cfg.success_threshold,
            samples=cfg.metric_samples, seed=cfg.seed, threads=args.threads,
        )
    for w in caught:
        log.warning("%s", w.message)
    text = report.to_json() + "\n"
    if args.output:
        _commit({args.output: text.encode()})
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_params(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--param expects key=value, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--param {key}: value must be a number") from exc
    return out


def cmd_synth(args, cfg: PipelineConfig) -> int:
    params = _parse_params(args.param)
    if args.contamination is not None:
        params["outlier_fraction"] = args.contamination
    scene = make_synthetic(args.kind, params, seed=cfg.seed, k=cfg.k, tau=cfg.tau)
    out = Path(args.outdir)
    ext = args.mesh_format
    clean = fmt.anchors_bytes(_anchor_set(scene.clean_ids, scene.clean.pa, scene.clean.pb))
    dirty = fmt.anchors_bytes(_anchor_set(scene.clean_ids, scene.contaminated.pa, scene.contaminated.pb))
    manifest = {
        "kind": scene.kind,
        "params": scene.params,
        "seed": scene.seed,
        "vertices": scene.rest.n_vertices,
        "faces": scene.rest.n_faces,
        "correspondences": len(scene.clean_ids),
        "outliers": int(scene.outlier_mask.sum()),
        "outlier_fraction": float(scene.outlier_mask.mean()) if len(scene.outlier_mask) else 0.0,
        "outlier_vids": [int(v) for v in scene.clean_ids[scene.outlier_mask]],
        "files": {
            "rest": f"rest.{ext}",
            "transformed": f"transformed.{ext}",
            "gt_field": "gt.dfield",
            "clean_anchors": "anchors_clean.jsonl",
            "contaminated_anchors": "anchors_contaminated.jsonl",
        },
    }
    outputs = {
        out / f"rest.{ext}": fmt.mesh_bytes(scene.rest, f"x.{ext}"),
        out / f"transformed.{ext}": fmt.mesh_bytes(scene.transformed, f"x.{ext}"),
        out / "gt.dfield": fmt.field_bytes(scene.gt_field),
        out / "anchors_clean.jsonl": clean,
        out / "anchors_contaminated.jsonl": dirty,
    }
    if args.fixture:
        matches, cams, depths, target_cam, target_depth, labels = render_match_fixture(
            scene, n_views=args.views, width=args.width, seed=cfg.seed)
        outputs[out / "matches.jsonl"] = fmt.matches_bytes(matches)
        outputs[out / "cameras.json"] = fmt.cameras_bytes(cams)
        outputs[out / "target_camera.json"] = fmt.camera_bytes(target_cam)
        outputs[out / "depth" / "target.pfm"] = fmt.pfm_bytes(target_depth)
        for v, d in enumerate(depths):
            outputs[out / "depth" / fmt.depth_filename(v)] = fmt.pfm_bytes(d)
        manifest["fixture"] = {
            "matches": len(matches),
            "match_outliers": int(labels.sum()),
            "match_outlier_labels": [bool(x) for x in labels],
            "views": len(cams),
        }
        manifest["files"].update({
            "matches": "matches.jsonl", "cameras": "cameras.json",
            "target_camera": "target_camera.json", "target_depth": "depth/target.pfm", "depth_dir": "depth",
        })
    outputs[out / "manifest.json"] = (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()
    _stats([("vertices", scene.rest.n_vertices), ("correspondences", len(scene.clean_ids)),
            ("outliers", int(scene.outlier_mask.sum()))])
    _commit(outputs)
    return EXIT_OK


def _anchor_set(ids, pa, pb):
    from .optimizer import AnchorSet
    return AnchorSet(ids, pa, pb)


def cmd_poses(args, cfg: PipelineConfig) -> int:
    if args.count < 1:
        raise UsageError("count must be >= 1")
    cams = hemisphere_poses(args.count, args.radius, center=args.center, yaws=args.yaws,
                            width=args.width, height=args.height, fov_deg=args.fov)
    data = fmt.cameras_bytes(cams)
    _stats([("positions", args.count), ("yaws", len(args.yaws)), ("cameras", len(cams))])
    if args.output:
        _commit({args.output: data})
    else:
        sys.stdout.write(data.decode())
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="JSON file overriding config defaults field-wise")
    p.add_argument("--seed", type=int, metavar="N", default=d, help="overrides the config seed")
    p.add_argument("--threads", type=int, metavar="N", default=argparse.SUPPRESS if suppress else 1,
                   help="worker cap; results do not depend on it")
    p.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deformflow", description="Scene-flow recovery from sparse 3D correspondences.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = sub.add_parser("filter-matches", parents=[common], help="2D matches -> filtered 3D anchors")
    p.add_argument("matches", help="raw matches (JSON Lines)")
    p.add_argument("cameras", help="source-view cameras (JSON array)")
    p.add_argument("depth_dir", help="directory with depth_NNNN.pfm per source view")
    p.add_argument("mesh", help="original-scene mesh (.obj or .ply)")
    p.add_argument("--target-camera", required=True, help="camera of the transformed view (JSON object)")
    p.add_argument("--target-depth", required=True, help="depth of the transformed view (PFM)")
    p.add_argument("-o", "--output", required=True, help="anchors output (JSON Lines)")
    p.set_defaults(func=cmd_filter_matches)

    p = sub.add_parser("optimize", parents=[common], help="fit the deformation graph to anchors")
    p.add_argument("mesh")
    p.add_argument("anchors")
    p.add_argument("--out-dir", required=True, help="receives field.dfield, graph.dgraph and history.csv")
    p.add_argument("--anchor-tol", type=float, default=1e-6, help="max |va - vertex| accepted")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("warp", parents=[common], help="apply a field to a mesh, points or ray samples")
    p.add_argument("field")
    p.add_argument("input")
    p.add_argument("--direction", choices=("forward", "backward"), default="forward")
    p.add_argument("--mode", choices=("auto", "mesh", "points", "rays"), default="auto")
    p.add_argument("--report-cycle", action="store_true", help="points mode: report round-trip error")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("eval", parents=[common], help="Chamfer distance, Volume IoU and success")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("-o", "--output", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic deformation fixture")
    p.add_argument("kind", choices=("bend", "twist", "articulate"))
    p.add_argument("outdir")
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="generator parameter, repeatable")
    p.add_argument("--contamination", type=float, help="outlier fraction")
    p.add_argument("--mesh-format", choices=("obj", "ply"), default="obj")
    p.add_argument("--fixture", action="store_true", help="also render 2D matches, cameras and depth maps")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--width", type=int, default=512)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("poses", parents=[common], help="hemisphere camera poses")
    p.add_argument("count", type=int)
    p.add_argument("radius", type=float)
    p.add_argument("--center", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.add_argument("--yaws", type=float, nargs="+", default=list(DEFAULT_YAWS))
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--fov", type=float, default=60.0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_poses)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides({"seed": args.seed})
        return args.func(args, cfg)
    except NonFiniteLoss as exc:
        print(f"error: non-finite loss at iteration {exc.iteration}", file=sys.stderr)
        return EXIT_NUMERIC
    except EmptyAnchorSet as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (DeformFlowError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
