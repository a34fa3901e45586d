"""On-disk scene format: ASCII PLY clouds, binary PPM images, JSON cameras.

A scene directory holds points.ply, image.ppm, and camera.json. Formats are
deliberately minimal so files stay inspectable with a text editor (PLY,
JSON) or any image viewer (PPM). All parse failures carry the file path and
the byte offset of the offending content.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, ParseError
from .geometry import CameraModel, farthest_point_sampling, project_points
from .synth import Scene

_PLY_TYPES = {"char", "uchar", "short", "ushort", "int", "uint",
              "float", "double"}


def _header_lines(raw: bytes, path):
    """Yield (byte offset, decoded line) until end_header; error if absent."""
    offset = 0
    for chunk in raw.splitlines(keepends=True):
        line = chunk.decode("ascii", errors="replace").strip()
        yield offset, line
        offset += len(chunk)
        if line == "end_header":
            return
    raise ParseError(path, offset, "missing end_header")


def read_ply(path):
    """Parse an ASCII PLY vertex list.

    Returns (points, extras): points is (n, 3) float64 from the x/y/z
    properties; extras maps any additional property name to its column.
    """
    path = Path(path)
    raw = path.read_bytes()
    names = []
    count = None
    fmt_seen = False
    body_start = None

    lines = _header_lines(raw, path)
    off, line = next(lines, (0, ""))
    if line != "ply":
        raise ParseError(path, off, "not a PLY file (expected 'ply')")
    for off, line in lines:
        if line == "end_header":
            body_start = off + len("end_header") + 1
            break
        if not line or line.startswith("comment"):
            continue
        fields = line.split()
        if fields[0] == "format":
            if fields[1:] != ["ascii", "1.0"]:
                raise ParseError(path, off, f"unsupported format {line!r}, "
                                 "only 'format ascii 1.0'")
            fmt_seen = True
        elif fields[0] == "element":
            if fields[1] != "vertex" or len(fields) != 3:
                raise ParseError(path, off, f"unsupported element {line!r}")
            if count is not None:
                raise ParseError(path, off, "duplicate vertex element")
            try:
                count = int(fields[2])
            except ValueError:
                raise ParseError(path, off, f"bad vertex count {fields[2]!r}")
        elif fields[0] == "property":
            if len(fields) != 3 or fields[1] not in _PLY_TYPES:
                raise ParseError(path, off, f"unsupported property {line!r}")
            if count is None:
                raise ParseError(path, off, "property before vertex element")
            names.append(fields[2])
        else:
            raise ParseError(path, off, f"unexpected header line {line!r}")
    if not fmt_seen:
        raise ParseError(path, 0, "missing format line")
    if count is None:
        raise ParseError(path, 0, "missing 'element vertex' declaration")
    for axis in "xyz":
        if axis not in names:
            raise ParseError(path, 0, f"missing property {axis!r}")

    rows = np.empty((count, len(names)), dtype=np.float64)
    offset = body_start
    got = 0
    for chunk in raw[body_start:].splitlines(keepends=True):
        line = chunk.decode("ascii", errors="replace").strip()
        if line:
            if got >= count:
                raise ParseError(path, offset, "more data rows than declared")
            parts = line.split()
            if len(parts) != len(names):
                raise ParseError(path, offset,
                                 f"expected {len(names)} values, got {len(parts)}")
            try:
                rows[got] = [float(p) for p in parts]
            except ValueError:
                raise ParseError(path, offset, f"non-numeric value in {line!r}")
            got += 1
        offset += len(chunk)
    if got < count:
        raise ParseError(path, len(raw),
                         f"declared {count} vertices, found {got}")

    cols = {name: rows[:, i] for i, name in enumerate(names)}
    points = np.stack([cols.pop("x"), cols.pop("y"), cols.pop("z")], axis=1)
    return points, cols


def write_ply(path, points, masked=None):
    """Write an (n, 3) cloud; repr coordinates round-trip float64 exactly.

    masked, if given, is a per-vertex 0/1 array stored as 'property uchar
    masked' so viewers can color predicted clusters differently.
    """
    points = np.asarray(points, dtype=np.float64)
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
              "property double x", "property double y", "property double z"]
    if masked is not None:
        header.append("property uchar masked")
        masked = np.asarray(masked).astype(int)
    header.append("end_header")
    out = ["\n".join(header)]
    for i, (x, y, z) in enumerate(points):
        row = f"{float(x)!r} {float(y)!r} {float(z)!r}"
        if masked is not None:
            row += f" {masked[i]}"
        out.append(row)
    Path(path).write_text("\n".join(out) + "\n", encoding="ascii")


def _ppm_token(raw: bytes, pos: int, path):
    """Next whitespace-delimited header token, skipping # comments."""
    n = len(raw)
    while pos < n:
        c = raw[pos:pos + 1]
        if c == b"#":
            while pos < n and raw[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not raw[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ParseError(path, start, "truncated PPM header")
    return raw[start:pos].decode("ascii", errors="replace"), pos


def read_ppm(path) -> np.ndarray:
    """Binary P6, 8-bit only. Returns (h, w, 3) float64 in [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    magic, pos = _ppm_token(raw, 0, path)
    if magic != "P6":
        raise ParseError(path, 0, f"unsupported magic {magic!r}, "
                         "only binary P6 is accepted")
    dims = []
    for field in ("width", "height", "maxval"):
        tok, pos = _ppm_token(raw, pos, path)
        try:
            dims.append(int(tok))
        except ValueError:
            raise ParseError(path, pos - len(tok), f"bad {field} {tok!r}")
    w, h, maxval = dims
    if maxval != 255:
        raise ParseError(path, pos, f"maxval {maxval}, only 255 supported")
    pos += 1  # single whitespace byte after maxval
    need = h * w * 3
    data = raw[pos:pos + need]
    if len(data) < need:
        raise ParseError(path, len(raw),
                         f"pixel data cut short ({len(data)} of {need} bytes)")
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return pixels.astype(np.float64) / 255.0


def write_ppm(path, image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatch(f"expected (h, w, 3) image, got {image.shape}")
    h, w, _ = image.shape
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantized.tobytes())


def read_camera(path) -> CameraModel:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(path, e.pos, f"invalid JSON: {e.msg}")
    for key in ("K", "Rt", "H", "W"):
        if key not in doc:
            raise ParseError(path, 0, f"missing key {key!r}")
    try:
        K = np.asarray(doc["K"], dtype=np.float64).reshape(3, 4)
        Rt = np.asarray(doc["Rt"], dtype=np.float64).reshape(4, 4)
    except (ValueError, TypeError):
        raise ParseError(path, 0, "K must hold 12 numbers (3x4 row-major) "
                         "and Rt 16 (4x4 row-major)")
    if not (isinstance(doc["H"], int) and isinstance(doc["W"], int)):
        raise ParseError(path, 0, "H and W must be integers")
    return CameraModel(K=K, Rt=Rt, h=doc["H"], w=doc["W"])


def write_camera(path, cam: CameraModel):
    doc = {"K": np.asarray(cam.K, dtype=np.float64).reshape(-1).tolist(),
           "Rt": np.asarray(cam.Rt, dtype=np.float64).reshape(-1).tolist(),
           "H": int(cam.h), "W": int(cam.w)}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _colors_under_points(points, image, cam):
    """Pixel color under each in-bounds projection, zeros elsewhere."""
    u, v, _, ok = project_points(points, cam)
    h, w = image.shape[:2]
    cols = np.floor(u).astype(np.int64)
    rows = np.floor(v).astype(np.int64)
    ok = ok & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    colors = np.zeros((len(points), 3))
    colors[ok] = image[rows[ok], cols[ok]]
    return colors


def load_scene(scene_dir, n_points: int) -> Scene:
    """Read one scene directory, FPS-subsampling down to n_points if larger."""
    scene_dir = Path(scene_dir)
    cam = read_camera(scene_dir / "camera.json")
    image = read_ppm(scene_dir / "image.ppm")
    if image.shape[:2] != (cam.h, cam.w):
        raise DimensionMismatch(
            f"{scene_dir}: image is {image.shape[1]}x{image.shape[0]} but "
            f"camera.json says {cam.w}x{cam.h}")
    points, _ = read_ply(scene_dir / "points.ply")
    if len(points) < n_points:
        raise DimensionMismatch(
            f"{scene_dir}: cloud has {len(points)} points, need {n_points}")
    if len(points) > n_points:
        points = points[farthest_point_sampling(points, n_points)]
    return Scene(points=points, image=image, cam=cam,
                 point_colors=_colors_under_points(points, image, cam),
                 provenance={"kind": "dir", "path": str(scene_dir)})


def write_scene_dir(scene_dir, scene: Scene):
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    write_ply(scene_dir / "points.ply", scene.points)
    write_ppm(scene_dir / "image.ppm", scene.image)
    write_camera(scene_dir / "camera.json", scene.cam)


def find_scene_dirs(root):
    """The scene directories under root, lexicographically ordered.

    root itself counts when it directly holds points.ply."""
    root = Path(root)
    if (root / "points.ply").exists():
        return [root]
    return sorted(d for d in root.iterdir()
                  if d.is_dir() and (d / "points.ply").exists())


def load_scene_dirs(root, n_points: int, max_workers=None):
    """Load every scene under root, in parallel, keeping directory order."""
    dirs = find_scene_dirs(root)
    if not dirs:
        raise DimensionMismatch(f"{root}: no scene directories found")
    if max_workers is not None:
        max_workers = max(1, int(max_workers))
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda d: load_scene(d, n_points), dirs))
