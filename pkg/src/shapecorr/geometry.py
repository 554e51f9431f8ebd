"""Meshes, point clouds, surface sampling, and nearest-neighbor search."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

_DEGENERATE_AREA = 1e-12


class GeometryError(Exception):
    pass


class ParseError(GeometryError):
    pass


class InvalidTopology(GeometryError):
    pass


class IoError(GeometryError):
    pass


@dataclass(frozen=True)
class PointCloud:
    """Unordered set of 3D points (meters)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise GeometryError(f"point cloud must be (n, 3) with n >= 1, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise GeometryError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh: vertices (V, 3) and faces (F, 3) of vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray
    _edges: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise InvalidTopology(f"vertices must be (V, 3), got {verts.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise InvalidTopology(f"faces must be (F, 3), got {faces.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise InvalidTopology("face index out of range")
        same = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        if same.any():
            raise InvalidTopology("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    @property
    def edges(self) -> np.ndarray:
        """Deduplicated undirected edges as an (E, 2) array, i < j."""
        if self._edges is None:
            e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
            e = np.sort(e, axis=1)
            e = np.unique(e, axis=0)
            object.__setattr__(self, "_edges", e)
        return self._edges

    def face_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def as_point_cloud(self) -> PointCloud:
        return PointCloud(self.vertices)


def _validate_mesh(mesh: Mesh) -> Mesh:
    if (mesh.face_areas() < _DEGENERATE_AREA).any():
        raise InvalidTopology("zero-area face")
    return mesh


# ----------------------------------------------------------------------
# OBJ / PLY ascii I/O
# ----------------------------------------------------------------------


def _parse_obj(lines: list[str]) -> tuple[Mesh, np.ndarray | None]:
    verts: list[list[float]] = []
    colors: list[list[float]] = []
    faces: list[list[int]] = []
    for ln, raw in enumerate(lines, start=1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) not in (4, 7):
                raise ParseError(f"line {ln}: bad vertex line")
            try:
                vals = [float(x) for x in parts[1:]]
            except ValueError as exc:
                raise ParseError(f"line {ln}: {exc}") from exc
            verts.append(vals[:3])
            if len(vals) == 6:
                colors.append(vals[3:])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ParseError(f"line {ln}: only triangle faces supported")
            idx = []
            for tok in parts[1:]:
                try:
                    i = int(tok.split("/")[0])
                except ValueError as exc:
                    raise ParseError(f"line {ln}: {exc}") from exc
                if i == 0:
                    raise ParseError(f"line {ln}: OBJ indices are 1-based")
                idx.append(i - 1 if i > 0 else len(verts) + i)
            faces.append(idx)
        # other directives (vn, vt, usemtl, ...) are ignored
    if not verts or not faces:
        raise ParseError("OBJ file has no vertices or no faces")
    try:
        mesh = Mesh(np.array(verts), np.array(faces))
    except InvalidTopology:
        raise
    col = np.array(colors) if len(colors) == len(verts) and colors else None
    return _validate_mesh(mesh), col


def _parse_ply(lines: list[str]) -> tuple[Mesh, np.ndarray | None]:
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic")
    i = 1
    n_vert = n_face = None
    vert_props: list[str] = []
    in_elem = None
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise ParseError("only ascii PLY is supported")
        elif parts[0] == "element":
            in_elem = parts[1]
            if parts[1] == "vertex":
                n_vert = int(parts[2])
            elif parts[1] == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and in_elem == "vertex" and parts[1] != "list":
            vert_props.append(parts[2])
        elif parts[0] == "end_header":
            break
        elif parts[0] == "comment":
            continue
    else:
        raise ParseError("missing end_header")
    if n_vert is None or n_face is None:
        raise ParseError("PLY must declare vertex and face elements")
    for axis in "xyz":
        if axis not in vert_props:
            raise ParseError(f"vertex element lacks property '{axis}'")
    has_rgb = all(c in vert_props for c in ("red", "green", "blue"))

    body = lines[i:]
    if len(body) < n_vert + n_face:
        raise ParseError("truncated PLY body")
    verts = np.empty((n_vert, 3))
    colors = np.empty((n_vert, 3)) if has_rgb else None
    for j in range(n_vert):
        try:
            vals = [float(x) for x in body[j].split()]
        except ValueError as exc:
            raise ParseError(f"vertex row {j}: {exc}") from exc
        if len(vals) != len(vert_props):
            raise ParseError(f"vertex row {j}: expected {len(vert_props)} values")
        row = dict(zip(vert_props, vals))
        verts[j] = (row["x"], row["y"], row["z"])
        if has_rgb:
            colors[j] = (row["red"], row["green"], row["blue"])
    faces = np.empty((n_face, 3), dtype=np.int64)
    for j in range(n_face):
        try:
            vals = [int(x) for x in body[n_vert + j].split()]
        except ValueError as exc:
            raise ParseError(f"face row {j}: {exc}") from exc
        if not vals or vals[0] != 3 or len(vals) != 4:
            raise ParseError(f"face row {j}: only triangles supported")
        faces[j] = vals[1:]
    return _validate_mesh(Mesh(verts, faces)), colors


def load_mesh(path: str | os.PathLike, format: str | None = None) -> Mesh:
    """Load an OBJ or ascii-PLY triangle mesh; normals/UVs/materials ignored."""
    mesh, _ = load_mesh_with_colors(path, format)
    return mesh


def load_mesh_with_colors(path, format: str | None = None) -> tuple[Mesh, np.ndarray | None]:
    fmt = format or _format_from_path(path)
    try:
        with open(path, "r") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if fmt == "obj":
        return _parse_obj(lines)
    if fmt == "ply":
        return _parse_ply(lines)
    raise ParseError(f"unknown mesh format {fmt!r}")


def _format_from_path(path) -> str:
    ext = os.path.splitext(str(path))[1].lower().lstrip(".")
    return ext


def save_mesh(
    mesh: Mesh,
    path: str | os.PathLike,
    format: str | None = None,
    vertex_colors: np.ndarray | None = None,
) -> None:
    """Write a mesh as OBJ or ascii PLY, optionally with per-vertex RGB.

    Colors are floats in [0, 1]; PLY stores them as uchar, OBJ uses the
    ``v x y z r g b`` extension.
    """
    fmt = format or _format_from_path(path)
    if vertex_colors is not None:
        vertex_colors = np.asarray(vertex_colors, dtype=np.float64)
        if vertex_colors.shape != (len(mesh.vertices), 3):
            raise GeometryError(
                f"expected {len(mesh.vertices)} vertex colors, got {vertex_colors.shape}"
            )
    try:
        if fmt == "obj":
            _write_obj(mesh, path, vertex_colors)
        elif fmt == "ply":
            _write_ply(mesh, path, vertex_colors)
        else:
            raise GeometryError(f"unknown mesh format {fmt!r}")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def _write_obj(mesh, path, colors):
    with open(path, "w") as fh:
        for i, v in enumerate(mesh.vertices):
            if colors is not None:
                c = colors[i]
                fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
            else:
                fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def _write_ply(mesh, path, colors):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        if colors is not None:
            fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write(f"element face {len(mesh.faces)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for i, v in enumerate(mesh.vertices):
            line = f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}"
            if colors is not None:
                rgb = np.clip(np.round(colors[i] * 255), 0, 255).astype(int)
                line += f" {rgb[0]} {rgb[1]} {rgb[2]}"
            fh.write(line + "\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# ----------------------------------------------------------------------
# sampling and rigid transforms
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class SurfaceSamples:
    """Points sampled on a mesh plus their provenance on the surface."""

    points: np.ndarray
    face_indices: np.ndarray
    barycentric: np.ndarray

    def as_point_cloud(self) -> PointCloud:
        return PointCloud(self.points)


def sample_surface(mesh: Mesh, n: int, mode: str = "uniform_area", seed: int = 0) -> SurfaceSamples:
    """Sample n surface points.

    ``uniform_area`` picks faces with probability proportional to area and a
    uniform point inside each; ``vertex_only`` walks the vertex list
    cyclically.
    """
    if n < 1:
        raise GeometryError("n must be >= 1")
    if mode == "vertex_only":
        idx = np.arange(n) % len(mesh.vertices)
        verts = mesh.vertices[idx]
        # provenance: first face containing the vertex, barycentric one-hot
        face_of_vertex = np.full(len(mesh.vertices), -1, dtype=np.int64)
        for fi in range(len(mesh.faces) - 1, -1, -1):
            face_of_vertex[mesh.faces[fi]] = fi
        fidx = face_of_vertex[idx]
        bary = np.zeros((n, 3))
        for k in range(n):
            corner = np.where(mesh.faces[fidx[k]] == idx[k])[0][0]
            bary[k, corner] = 1.0
        return SurfaceSamples(verts, fidx, bary)
    if mode != "uniform_area":
        raise GeometryError(f"unknown sampling mode {mode!r}")

    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    fidx = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    bary = np.stack([1.0 - u - v, u, v], axis=1)
    tri = mesh.vertices[mesh.faces[fidx]]
    pts = np.einsum("nk,nkd->nd", bary, tri)
    return SurfaceSamples(pts, fidx, bary)


def bounding_box_center(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points)
    return 0.5 * (pts.min(axis=0) + pts.max(axis=0))


def normalize_shape(cloud: PointCloud) -> tuple[PointCloud, np.ndarray]:
    """Center the bounding box at the origin; returns the applied translation."""
    t = -bounding_box_center(cloud.points)
    return PointCloud(cloud.points + t), t


def rotate_y(cloud: PointCloud, angle: float) -> PointCloud:
    """Right-handed rotation about the +Y (vertical) axis."""
    return PointCloud(rotate_y_points(cloud.points, angle))


def rotate_y_points(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return np.stack([c * x + s * z, y, -s * x + c * z], axis=1)


# ----------------------------------------------------------------------
# nearest-neighbor index
# ----------------------------------------------------------------------

_BRUTE_FORCE_MAX = 32
_BATCH_BRUTE_LIMIT = 30_000_000  # n_points * n_queries entries


class NearestNeighborIndex:
    """3D k-d tree with median splits over a fixed point set.

    Queries return ``(index, squared distance)`` and agree with brute force,
    breaking distance ties by the lowest point index. Sets smaller than 32
    points skip tree construction entirely.
    """

    def __init__(self, points: np.ndarray | PointCloud):
        if isinstance(points, PointCloud):
            points = points.points
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise GeometryError("index requires a non-empty (n, 3) point set")
        self.points = points
        self._tree = None
        if len(points) > _BRUTE_FORCE_MAX:
            self._tree = self._build(np.arange(len(points)), 0)

    def _build(self, idx: np.ndarray, depth: int):
        if len(idx) <= _BRUTE_FORCE_MAX:
            return (None, idx)
        axis = depth % 3
        order = np.argsort(self.points[idx, axis], kind="stable")
        idx = idx[order]
        mid = len(idx) // 2
        split = self.points[idx[mid], axis]
        left = self._build(idx[:mid], depth + 1)
        right = self._build(idx[mid:], depth + 1)
        return (axis, split, left, right)

    def _brute(self, q: np.ndarray, idx: np.ndarray) -> tuple[int, float]:
        d2 = ((self.points[idx] - q) ** 2).sum(axis=1)
        k = int(np.argmin(d2))
        return int(idx[k]), float(d2[k])

    def query(self, point) -> tuple[int, float]:
        q = np.asarray(point, dtype=np.float64)
        if self._tree is None:
            return self._brute(q, np.arange(len(self.points)))
        best = (np.inf, len(self.points))  # (squared distance, index)
        stack = [self._tree]
        while stack:
            node = stack.pop()
            if node[0] is None:
                i, d2 = self._brute(q, node[1])
                if (d2, i) < best:
                    best = (d2, i)
                continue
            axis, split, left, right = node
            diff = q[axis] - split
            near, far = (left, right) if diff < 0 else (right, left)
            # visit the far side when the splitting plane is within reach;
            # <= keeps boundary-equal candidates so ties resolve by index
            if diff * diff <= best[0]:
                stack.append(far)
            stack.append(near)
        return best[1], best[0]

    def query_many(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized queries; identical results to per-point ``query``."""
        queries = np.asarray(queries, dtype=np.float64)
        n, m = len(self.points), len(queries)
        if n * m <= _BATCH_BRUTE_LIMIT:
            # blocked brute force: exact, deterministic, and faster than
            # tree traversal from python at these sizes
            idx = np.empty(m, dtype=np.int64)
            d2 = np.empty(m)
            block = max(1, _BATCH_BRUTE_LIMIT // max(n, 1) // 4)
            for s in range(0, m, block):
                q = queries[s : s + block]
                dist = ((q[:, None, :] - self.points[None, :, :]) ** 2).sum(axis=2)
                k = np.argmin(dist, axis=1)
                idx[s : s + len(q)] = k
                d2[s : s + len(q)] = dist[np.arange(len(q)), k]
            return idx, d2
        out = [self.query(q) for q in queries]
        return np.array([o[0] for o in out]), np.array([o[1] for o in out])


def build_nn_index(points: PointCloud | np.ndarray) -> NearestNeighborIndex:
    return NearestNeighborIndex(points)
