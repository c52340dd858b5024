"""Readers and writers for every on-disk format the CLI touches.

Text formats report the offending 1-based line in FormatError. Writers build
the full byte payload first, so a failure never leaves a half-written file.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .correspond import Camera, Matches
from .defgraph import DeformationGraph
from .errors import FormatError, InvalidMesh
from .flow import TransformField
from .geometry import ScalarGrid, TriMesh
from .optimizer import AnchorSet

GRID_MAGIC = b"DFGRID01"
FIELD_MAGIC = b"DFIELD01"
_GRID_HEADER = struct.Struct("<8s3I3dd")  # 52 bytes, padded to 64


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(", ", ": "), allow_nan=False)


def write_bytes(path, data: bytes) -> None:
    Path(path).write_bytes(data)


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(path, str(exc)) from exc


def _read_binary(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(path, str(exc)) from exc


def _vec3(value, path, line, key):
    if not (isinstance(value, list) and len(value) == 3):
        raise FormatError(path, f"{key!r} must be a list of 3 numbers", line)
    out = []
    for x in value:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise FormatError(path, f"{key!r} must hold finite numbers", line)
        out.append(float(x))
    return out


def _number(value, path, line, key):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise FormatError(path, f"{key!r} must be a finite number", line)
    return float(value)


def _integer(value, path, line, key, minimum=0):
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise FormatError(path, f"{key!r} must be an integer >= {minimum}", line)
    return value


def _jsonl(path):
    """Yield (line number, object) for every non-blank line."""
    for no, raw in enumerate(_read_text(path).splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise FormatError(path, f"invalid JSON ({exc.msg})", no) from exc
        if not isinstance(obj, dict):
            raise FormatError(path, "expected a JSON object", no)
        yield no, obj


def _require(obj, keys, path, line):
    missing = [k for k in keys if k not in obj]
    if missing:
        raise FormatError(path, f"missing key(s): {', '.join(missing)}", line)


# ---------------------------------------------------------------- meshes

def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for no, raw in enumerate(_read_text(path).splitlines(), start=1):
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        if tok[0] == "v":
            try:
                xyz = [float(t) for t in tok[1:4]]
            except ValueError as exc:
                raise FormatError(path, "bad vertex coordinate", no) from exc
            if len(xyz) != 3 or not all(math.isfinite(x) for x in xyz):
                raise FormatError(path, "vertex needs 3 finite coordinates", no)
            verts.append(xyz)
        elif tok[0] == "f":
            try:
                idx = [int(t.split("/")[0]) for t in tok[1:]]
            except ValueError as exc:
                raise FormatError(path, "bad face index", no) from exc
            if len(idx) < 3:
                raise FormatError(path, "face needs at least 3 vertices", no)
            n = len(verts)
            idx = [i - 1 if i > 0 else n + i for i in idx]
            if any(i < 0 or i >= n for i in idx) or 0 in [int(t.split("/")[0]) for t in tok[1:]]:
                raise FormatError(path, "face index out of range", no)
            # fan triangulation for polygons
            faces.extend([idx[0], idx[j], idx[j + 1]] for j in range(1, len(idx) - 1))
    return _mesh(path, verts, faces)


def _mesh(path, verts, faces) -> TriMesh:
    try:
        return TriMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    except (InvalidMesh, ValueError) as exc:
        raise FormatError(path, str(exc)) from exc


def obj_bytes(mesh: TriMesh) -> bytes:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return ("\n".join(lines) + "\n").encode()


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> TriMesh:
    """Binary little-endian PLY with a vertex element (x, y, z first-class) and a face list."""
    data = _read_binary(path)
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(path, "not a PLY file")
    header = data[:end].decode("ascii", "replace").splitlines()
    elements = []
    fmt = None
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property" and elements:
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list", _PLY_TYPES.get(tok[2]), _PLY_TYPES.get(tok[3])))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES.get(tok[1]), None, None))
    if fmt != "binary_little_endian":
        raise FormatError(path, f"unsupported PLY format {fmt!r}; expected binary_little_endian")
    pos = end + len(b"end_header\n")
    verts = faces = None
    for name, count, props in elements:
        if any(p[1] is None or (p[1] == "list" and (p[2] is None or p[3] is None)) for p in props):
            raise FormatError(path, f"unknown property type in element {name!r}")
        if all(p[1] != "list" for p in props):
            dt = np.dtype([(p[0], "<" + p[1]) for p in props])
            size = dt.itemsize * count
            if pos + size > len(data):
                raise FormatError(path, f"truncated {name!r} element")
            arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
            pos += size
            if name == "vertex":
                if not {"x", "y", "z"} <= set(arr.dtype.names):
                    raise FormatError(path, "vertex element lacks x, y, z")
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
        elif name == "face" and len(props) == 1:
            _, _, ct, it = props[0]
            ct, it = np.dtype("<" + ct), np.dtype("<" + it)
            out = []
            for _ in range(count):
                if pos + ct.itemsize > len(data):
                    raise FormatError(path, "truncated face element")
                n = int(np.frombuffer(data, ct, 1, pos)[0])
                pos += ct.itemsize
                if n < 3 or pos + n * it.itemsize > len(data):
                    raise FormatError(path, "bad or truncated face")
                idx = np.frombuffer(data, it, n, pos).astype(np.int64)
                pos += n * it.itemsize
                out.extend([idx[0], idx[j], idx[j + 1]] for j in range(1, n - 1))
            faces = out
        else:
            raise FormatError(path, f"unsupported PLY element {name!r}")
    if verts is None:
        raise FormatError(path, "no vertex element")
    if not np.all(np.isfinite(verts)):
        raise FormatError(path, "non-finite vertex coordinate")
    faces = np.asarray(faces if faces is not None else [], dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise FormatError(path, "face index out of range")
    return _mesh(path, verts, faces)


def ply_bytes(mesh: TriMesh) -> bytes:
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {mesh.n_vertices}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {mesh.n_faces}\nproperty list uchar int vertex_indices\nend_header\n"
    ).encode("ascii")
    v = mesh.vertices.astype("<f4").tobytes()
    f = np.zeros(mesh.n_faces, dtype=[("n", "u1"), ("i", "<i4", (3,))])
    f["n"] = 3
    f["i"] = mesh.faces
    return header + v + f.tobytes()


def read_mesh(path) -> TriMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise FormatError(path, "mesh files must end in .obj or .ply")


def mesh_bytes(mesh: TriMesh, path) -> bytes:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return obj_bytes(mesh)
    if suffix == ".ply":
        return ply_bytes(mesh)
    raise FormatError(path, "mesh files must end in .obj or .ply")


def write_mesh(path, mesh: TriMesh) -> None:
    write_bytes(path, mesh_bytes(mesh, path))


# ---------------------------------------------------------------- scalar grid

def grid_bytes(grid: ScalarGrid) -> bytes:
    nx, ny, nz = grid.resolution
    head = _GRID_HEADER.pack(GRID_MAGIC, nx, ny, nz, *map(float, grid.origin), float(grid.voxel_size))
    head = head.ljust(64, b"\0")
    # x-fastest: C order over (z, y, x)
    return head + np.ascontiguousarray(np.transpose(grid.values, (2, 1, 0)), dtype="<f4").tobytes()


def read_grid(path) -> ScalarGrid:
    data = _read_binary(path)
    if len(data) < 64 or data[:8] != GRID_MAGIC:
        raise FormatError(path, "not a DFGRID01 file")
    _, nx, ny, nz, ox, oy, oz, h = _GRID_HEADER.unpack_from(data)
    need = 64 + 4 * nx * ny * nz
    if len(data) != need:
        raise FormatError(path, f"expected {need} bytes, found {len(data)}")
    vals = np.frombuffer(data, dtype="<f4", offset=64).reshape(nz, ny, nx)
    try:
        return ScalarGrid(np.transpose(vals, (2, 1, 0)).astype(np.float64), origin=(ox, oy, oz), voxel_size=h)
    except ValueError as exc:
        raise FormatError(path, str(exc)) from exc


# ---------------------------------------------------------------- transform field

def field_bytes(field: TransformField) -> bytes:
    header = json.dumps({"count": len(field), "k": field.k, "tau": field.tau}, sort_keys=True).encode()
    blob = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (field.anchors, field.rotations.reshape(-1, 9), field.translations)
    )
    return FIELD_MAGIC + struct.pack("<I", len(header)) + header + blob


def read_field(path) -> TransformField:
    data = _read_binary(path)
    if len(data) < 12 or data[:8] != FIELD_MAGIC:
        raise FormatError(path, "not a DFIELD01 file")
    (hlen,) = struct.unpack_from("<I", data, 8)
    try:
        head = json.loads(data[12:12 + hlen])
        n, k, tau = int(head["count"]), int(head["k"]), float(head["tau"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(path, f"bad header: {exc}") from exc
    off = 12 + hlen
    if len(data) - off != 8 * 15 * n:
        raise FormatError(path, f"blob holds {len(data) - off} bytes, expected {8 * 15 * n}")
    blob = np.frombuffer(data, dtype="<f8", offset=off)
    anchors = blob[: 3 * n].reshape(n, 3)
    rots = blob[3 * n: 12 * n].reshape(n, 3, 3)
    trans = blob[12 * n:].reshape(n, 3)
    if not np.all(np.isfinite(blob)):
        raise FormatError(path, "non-finite values in field")
    try:
        return TransformField(anchors, rots, trans, k=k, tau=tau)
    except ValueError as exc:
        raise FormatError(path, str(exc)) from exc


# ---------------------------------------------------------------- deformation graph

def graph_bytes(graph: DeformationGraph) -> bytes:
    doc = {
        "nodes": graph.nodes.tolist(),
        "edges": graph.edges.tolist(),
        "params": graph.params.tolist(),
    }
    return (json.dumps(doc, allow_nan=False) + "\n").encode()


def read_graph(path) -> DeformationGraph:
    try:
        doc = json.loads(_read_text(path))
        nodes = np.asarray(doc["nodes"], dtype=np.float64).reshape(-1, 3)
        edges = np.asarray(doc["edges"], dtype=np.int64).reshape(-1, 2)
        params = np.asarray(doc["params"], dtype=np.float64).reshape(-1, 6)
        if len(params) != len(nodes):
            raise ValueError("params and nodes differ in length")
        return DeformationGraph(nodes, edges, params[:, :3], params[:, 3:])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, str(exc)) from exc


# ---------------------------------------------------------------- matches / cameras / depth

def read_matches(path) -> Matches:
    rows = []
    for no, obj in _jsonl(path):
        _require(obj, Matches.COLUMNS, path, no)
        view = _integer(obj["view"], path, no, "view")
        vals = [_number(obj[c], path, no, c) for c in Matches.COLUMNS[1:]]
        rows.append((view, *vals))
    if not rows:
        return Matches.empty()
    return Matches(*zip(*rows))


def matches_bytes(matches: Matches) -> bytes:
    out = []
    for r in matches.records():
        out.append(_dumps({"view": r.view, "ub": r.ub, "vb": r.vb, "ua": r.ua, "va": r.va, "conf": r.conf}))
    return "".join(line + "\n" for line in out).encode()


def camera_to_dict(cam: Camera) -> dict:
    return {
        "fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx), "cy": float(cam.cy),
        "width": int(cam.width), "height": int(cam.height),
        "T_wc": [float(x) for x in cam.pose.reshape(-1)],
    }


def _camera_from(obj, path, where) -> Camera:
    if not isinstance(obj, dict):
        raise FormatError(path, f"{where}: camera must be an object")
    keys = ("fx", "fy", "cx", "cy", "width", "height", "T_wc")
    missing = [k for k in keys if k not in obj]
    if missing:
        raise FormatError(path, f"{where}: missing key(s) {', '.join(missing)}")
    t = obj["T_wc"]
    if not (isinstance(t, list) and len(t) == 16):
        raise FormatError(path, f"{where}: T_wc must be 16 numbers")
    try:
        return Camera(
            _number(obj["fx"], path, None, "fx"), _number(obj["fy"], path, None, "fy"),
            _number(obj["cx"], path, None, "cx"), _number(obj["cy"], path, None, "cy"),
            _integer(obj["width"], path, None, "width", 1), _integer(obj["height"], path, None, "height", 1),
            np.array([_number(x, path, None, "T_wc") for x in t]).reshape(4, 4),
        )
    except FormatError as exc:
        raise FormatError(path, f"{where}: {exc.args[0].split(': ', 1)[-1]}") from exc
    except ValueError as exc:
        raise FormatError(path, f"{where}: {exc}") from exc


def read_cameras(path) -> list[Camera]:
    try:
        doc = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"invalid JSON ({exc.msg})", exc.lineno) from exc
    if not isinstance(doc, list):
        raise FormatError(path, "expected a JSON array of cameras")
    return [_camera_from(c, path, f"camera {i}") for i, c in enumerate(doc)]


def read_camera(path) -> Camera:
    """A single camera object (the array form with one entry is accepted too)."""
    try:
        doc = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"invalid JSON ({exc.msg})", exc.lineno) from exc
    if isinstance(doc, list):
        if len(doc) != 1:
            raise FormatError(path, "expected exactly one camera")
        doc = doc[0]
    return _camera_from(doc, path, "camera")


def cameras_bytes(cams) -> bytes:
    return (json.dumps([camera_to_dict(c) for c in cams], indent=1) + "\n").encode()


def camera_bytes(cam: Camera) -> bytes:
    return (json.dumps(camera_to_dict(cam), indent=1) + "\n").encode()


def depth_filename(view: int) -> str:
    return f"depth_{view:04}.pfm"


def pfm_bytes(depth: np.ndarray) -> bytes:
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise ValueError("depth map must be 2-D")
    h, w = d.shape
    # PFM stores rows bottom to top
    return f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + np.ascontiguousarray(d[::-1]).tobytes()


def read_pfm(path) -> np.ndarray:
    data = _read_binary(path)
    parts, pos = [], 0
    while len(parts) < 4:
        # header tokens are whitespace separated; the last is followed by exactly one byte
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, "truncated PFM header")
        parts.append(data[start:pos].decode("ascii", "replace"))
    pos += 1
    kind, w, h, scale = parts
    if kind != "Pf":
        raise FormatError(path, "only single-channel 'Pf' depth maps are supported")
    try:
        w, h, scale = int(w), int(h), float(scale)
    except ValueError as exc:
        raise FormatError(path, "bad PFM header") from exc
    if w < 1 or h < 1 or scale == 0:
        raise FormatError(path, "bad PFM header")
    dt = "<f4" if scale < 0 else ">f4"
    if len(data) - pos != 4 * w * h:
        raise FormatError(path, f"expected {4 * w * h} data bytes, found {len(data) - pos}")
    return np.frombuffer(data, dtype=dt, offset=pos).reshape(h, w)[::-1].astype(np.float64)


def read_depths(directory, views) -> dict:
    """Depth maps for the given view ids keyed by view."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(directory, "depth directory not found")
    return {int(v): read_pfm(directory / depth_filename(int(v))) for v in sorted(set(int(x) for x in views))}


# ---------------------------------------------------------------- anchors / points / rays

def anchors_bytes(anchors: AnchorSet) -> bytes:
    lines = [
        _dumps({"vid": int(i), "va": a, "vb": b})
        for i, a, b in zip(anchors.vertex_ids.tolist(), anchors.va.tolist(), anchors.vb.tolist())
    ]
    return "".join(line + "\n" for line in lines).encode()


def read_anchors(path) -> AnchorSet:
    ids, va, vb = [], [], []
    for no, obj in _jsonl(path):
        _require(obj, ("vid", "va", "vb"), path, no)
        ids.append(_integer(obj["vid"], path, no, "vid"))
        va.append(_vec3(obj["va"], path, no, "va"))
        vb.append(_vec3(obj["vb"], path, no, "vb"))
    return AnchorSet(np.asarray(ids, dtype=np.int64), np.asarray(va).reshape(-1, 3), np.asarray(vb).reshape(-1, 3))


def read_points(path) -> np.ndarray:
    pts = [_vec3(obj.get("p"), path, no, "p") for no, obj in _jsonl(path)]
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def points_bytes(points: np.ndarray) -> bytes:
    return "".join(_dumps({"p": p}) + "\n" for p in np.asarray(points).tolist()).encode()


def read_rays(path) -> list[np.ndarray]:
    rays = []
    for no, obj in _jsonl(path):
        s = obj.get("samples")
        if not isinstance(s, list) or len(s) < 2:
            raise FormatError(path, "'samples' must list at least 2 points", no)
        rays.append(np.asarray([_vec3(p, path, no, "samples") for p in s], dtype=np.float64))
    return rays


def rays_bytes(results) -> bytes:
    """``results`` yields (points, dirs, near) per ray."""
    lines = [
        _dumps({"points": q.tolist(), "dirs": d.tolist(), "near": [bool(x) for x in near]})
        for q, d, near in results
    ]
    return "".join(line + "\n" for line in lines).encode()


def history_bytes(history: np.ndarray) -> bytes:
    rows = ["iteration,L_ARAP,L_Con,L_DG"]
    rows += [f"{i},{la!r},{lc!r},{ld!r}" for i, (la, lc, ld) in enumerate(np.asarray(history).reshape(-1, 3).tolist())]
    return ("\n".join(rows) + "\n").encode()
