"""ASCII PLY and ASCII PCD readers plus an ASCII PLY writer.

Binary variants are rejected so that fixtures stay bit-exact and diffable.
"""

import os

import numpy as np

from ..errors import FormatError, ValidationError
from .cloud import PointCloud, TriangleMesh, drop_degenerate_faces

_FLOAT_TYPES = {"float", "float32", "double", "float64"}
_UCHAR_TYPES = {"uchar", "uint8"}


def _read_lines(path):
    try:
        with open(path, "r", encoding="ascii", errors="strict") as fh:
            return fh.read().splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not an ASCII file ({exc})") from None
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from None


class _PlyElement:
    def __init__(self, name, count):
        self.name = name
        self.count = count
        self.properties = []  # (name, type) or ("list", count_type, item_type, name)


def _parse_ply_header(lines, path):
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}:1: missing 'ply' magic")
    elements = []
    fmt_seen = False
    i = 1
    while i < len(lines):
        tokens = lines[i].strip().split()
        i += 1
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise FormatError(f"{path}:{i}: only 'format ascii 1.0' is supported")
            fmt_seen = True
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise FormatError(f"{path}:{i}: malformed element declaration")
            try:
                count = int(tokens[2])
            except ValueError:
                raise FormatError(f"{path}:{i}: element count is not an integer") from None
            elements.append(_PlyElement(tokens[1], count))
        elif tokens[0] == "property":
            if not elements:
                raise FormatError(f"{path}:{i}: property before any element")
            if tokens[1] == "list":
                if len(tokens) != 5:
                    raise FormatError(f"{path}:{i}: malformed list property")
                elements[-1].properties.append(("list", tokens[2], tokens[3], tokens[4]))
            else:
                if len(tokens) != 3:
                    raise FormatError(f"{path}:{i}: malformed property")
                elements[-1].properties.append((tokens[1], tokens[2]))
        elif tokens[0] == "end_header":
            if not fmt_seen:
                raise FormatError(f"{path}: header missing a format line")
            return elements, i
        else:
            raise FormatError(f"{path}:{i}: unknown header keyword {tokens[0]!r}")
    raise FormatError(f"{path}: header never terminated with end_header")


def _parse_float(token, path, lineno, record, column):
    try:
        value = float(token)
    except ValueError:
        raise FormatError(
            f"{path}:{lineno}: record {record}: cannot parse {token!r} as a number"
        ) from None
    if not np.isfinite(value):
        raise FormatError(
            f"{path}:{lineno}: record {record}: non-finite coordinate {token!r} in column {column}"
        )
    return value


def _load_ply(path, want_faces):
    lines = _read_lines(path)
    elements, header_end = _parse_ply_header(lines, path)
    by_name = {e.name: e for e in elements}
    if "vertex" not in by_name:
        raise FormatError(f"{path}: no vertex element")
    vertex = by_name["vertex"]
    prop_names = [p[3] if p[0] == "list" else p[1] for p in vertex.properties]
    try:
        cols = [prop_names.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise FormatError(f"{path}: vertex element lacks x/y/z properties") from None

    body = lines[header_end:]
    cursor = 0
    points = np.empty((vertex.count, 3))
    faces = []
    for element in elements:
        for record in range(element.count):
            while cursor < len(body) and not body[cursor].strip():
                cursor += 1
            if cursor >= len(body):
                raise FormatError(
                    f"{path}: unexpected end of file in element {element.name!r} "
                    f"(record {record})"
                )
            lineno = header_end + cursor + 1
            tokens = body[cursor].split()
            cursor += 1
            if element.name == "vertex":
                if len(tokens) < len(vertex.properties):
                    raise FormatError(
                        f"{path}:{lineno}: record {record}: expected "
                        f"{len(vertex.properties)} values, got {len(tokens)}"
                    )
                for k, col in enumerate(cols):
                    points[record, k] = _parse_float(
                        tokens[col], path, lineno, record, "xyz"[k]
                    )
            elif element.name == "face" and want_faces:
                try:
                    n = int(tokens[0])
                    idx = [int(t) for t in tokens[1 : 1 + n]]
                except (ValueError, IndexError):
                    raise FormatError(f"{path}:{lineno}: malformed face record {record}") from None
                if n != 3:
                    raise FormatError(
                        f"{path}:{lineno}: face record {record} has {n} vertices; "
                        "only triangles are supported"
                    )
                faces.append(idx)
    if vertex.count == 0:
        raise FormatError(f"{path}: file declares zero vertices")
    return points, faces


def load_point_cloud(path) -> PointCloud:
    """Load an ASCII PLY or ASCII PCD file, preserving point order."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pcd":
        points = _load_pcd(path)
    else:
        points, _ = _load_ply(path, want_faces=False)
    try:
        return PointCloud(points, frame_id="")
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from None


def load_mesh(path) -> TriangleMesh:
    """Load an ASCII PLY triangle mesh; degenerate faces are dropped."""
    points, faces = _load_ply(path, want_faces=True)
    if not faces:
        raise FormatError(f"{path}: mesh has no faces")
    faces = np.asarray(faces, dtype=np.int64)
    if faces.min() < 0 or faces.max() >= points.shape[0]:
        raise FormatError(f"{path}: face indices out of vertex range")
    faces = drop_degenerate_faces(points, faces)
    if faces.shape[0] == 0:
        raise FormatError(f"{path}: every face is degenerate")
    try:
        return TriangleMesh(points, faces)
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from None


def _load_pcd(path):
    lines = _read_lines(path)
    header = {}
    body_start = None
    for i, line in enumerate(lines):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        key = tokens[0].upper()
        header[key] = tokens[1:]
        if key == "DATA":
            body_start = i + 1
            break
    if body_start is None:
        raise FormatError(f"{path}: PCD header has no DATA line")
    if header["DATA"] != ["ascii"]:
        raise FormatError(f"{path}: only 'DATA ascii' PCD files are supported")
    fields = header.get("FIELDS")
    if fields is None:
        raise FormatError(f"{path}: PCD header missing FIELDS")
    try:
        cols = [fields.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise FormatError(f"{path}: PCD FIELDS must include x y z") from None
    try:
        count = int(header.get("POINTS", header.get("WIDTH", ["0"]))[0])
    except (ValueError, IndexError):
        raise FormatError(f"{path}: malformed POINTS/WIDTH in PCD header") from None
    if count <= 0:
        raise FormatError(f"{path}: PCD declares zero points")
    records = [l for l in lines[body_start:] if l.strip()]
    if len(records) < count:
        raise FormatError(f"{path}: PCD declares {count} points but has {len(records)} records")
    points = np.empty((count, 3))
    for record in range(count):
        lineno = body_start + record + 1
        tokens = records[record].split()
        if len(tokens) < len(fields):
            raise FormatError(
                f"{path}:{lineno}: record {record}: expected {len(fields)} values, "
                f"got {len(tokens)}"
            )
        for k, col in enumerate(cols):
            points[record, k] = _parse_float(tokens[col], path, lineno, record, "xyz"[k])
    return points


def save_point_cloud(cloud: PointCloud, path, colors=None) -> None:
    """Write an ASCII PLY file; per-point RGB (uint8) is emitted when given."""
    pts = cloud.points
    if colors is not None:
        colors = np.asarray(colors)
        if colors.ndim == 1:
            colors = np.tile(colors, (len(cloud), 1))
        if colors.shape != (len(cloud), 3):
            raise ValidationError(
                f"colors must have shape ({len(cloud)}, 3), got {colors.shape}"
            )
        colors = np.clip(np.round(colors), 0, 255).astype(np.uint8)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    lines += [f"property float {axis}" for axis in "xyz"]
    if colors is not None:
        lines += [f"property uchar {c}" for c in ("red", "green", "blue")]
    lines.append("end_header")
    for i, p in enumerate(pts):
        row = f"{p[0]:.10g} {p[1]:.10g} {p[2]:.10g}"
        if colors is not None:
            row += f" {colors[i, 0]} {colors[i, 1]} {colors[i, 2]}"
        lines.append(row)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
