"""Triangle meshes: validation, adjacency, one-ring ordering and OBJ/PLY I/O.

Meshes are immutable after construction. Every learnable operation in the
package assumes that all shapes share one template's face list (vertex
correspondence), so topology-derived tables are computed once on the template.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonManifoldError, ParseError, ValidationError

logger = logging.getLogger(__name__)

__all__ = [
    "TriangleMesh",
    "VertexCorrespondence",
    "Adjacency",
    "derive_adjacency",
    "one_ring_ccw",
    "load_mesh",
    "load_mesh_with_colors",
    "save_mesh",
    "icosphere",
]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh with counter-clockwise faces.

    Parameters
    ----------
    vertices : array_like, shape (N, 3)
    faces : array_like of int, shape (F, 3)
        Zero-based vertex indices.

    Raises
    ------
    ValidationError
        On out-of-range indices, degenerate faces, unreferenced vertices or an
        inconsistent winding (a directed edge used by two faces).
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must have shape (N, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValidationError(f"faces must have shape (F, 3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("vertices contain non-finite coordinates")
        n = v.shape[0]
        if f.size and (f.min() < 0 or f.max() >= n):
            raise ValidationError(f"face index out of range [0, {n})")
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            raise ValidationError(f"degenerate face at index {int(np.flatnonzero(degenerate)[0])}")
        used = np.zeros(n, dtype=bool)
        used[f.ravel()] = True
        if not used.all():
            raise ValidationError(f"vertex {int(np.flatnonzero(~used)[0])} is not referenced by any face")
        directed = f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        if len(np.unique(directed, axis=0)) != len(directed):
            raise ValidationError("inconsistent orientation: a directed edge appears in two faces")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same topology, new positions (the correspondence-preserving update)."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise ValidationError(f"expected vertices of shape {self.vertices.shape}, got {vertices.shape}")
        return TriangleMesh(vertices, self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ``(i, j)`` rows with ``i < j``."""
        e = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_faces

    def is_closed_manifold(self) -> bool:
        """True if every directed edge has its reverse and every one-ring is a single cycle."""
        directed = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        fwd = set(map(tuple, directed.tolist()))
        if any((b, a) not in fwd for a, b in fwd):
            return False
        adj = derive_adjacency(self)
        try:
            for i in range(self.n_vertices):
                one_ring_ccw(self, adj, i)
        except NonManifoldError:
            return False
        return True

    def face_normals(self, unit: bool = True) -> np.ndarray:
        v = self.vertices
        n = np.cross(v[self.faces[:, 1]] - v[self.faces[:, 0]], v[self.faces[:, 2]] - v[self.faces[:, 0]])
        if unit:
            n = n / np.linalg.norm(n, axis=1, keepdims=True)
        return n

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted unit vertex normals."""
        fn = self.face_normals(unit=False)
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        return vn / np.linalg.norm(vn, axis=1, keepdims=True)

    def mean_edge_length(self) -> float:
        e = self.edges()
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def topology_digest(self) -> str:
        return hashlib.sha256(self.faces.astype("<i8").tobytes()).hexdigest()


@dataclass(frozen=True)
class VertexCorrespondence:
    """Contract that a mesh shares a template's vertex count and face list."""

    template_id: str
    n_vertices: int
    faces_digest: str = field(default="", repr=False)

    @classmethod
    def from_template(cls, template: TriangleMesh, template_id: str) -> "VertexCorrespondence":
        return cls(template_id, template.n_vertices, template.topology_digest())

    def matches(self, mesh: TriangleMesh) -> bool:
        return mesh.n_vertices == self.n_vertices and mesh.topology_digest() == self.faces_digest

    def require(self, mesh: TriangleMesh) -> None:
        if not self.matches(mesh):
            raise ValidationError(
                f"mesh does not correspond to template {self.template_id!r} "
                f"(N={mesh.n_vertices}, expected {self.n_vertices})"
            )


@dataclass(frozen=True, eq=False)
class Adjacency:
    """Sparse view of the vertex graph.

    ``neighbors[i]`` is the sorted array of vertices sharing an edge with ``i``;
    ``edges`` is the sorted undirected edge list; ``vertex_faces[i]`` lists the
    indices of faces incident to ``i``.
    """

    neighbors: tuple
    edges: np.ndarray
    vertex_faces: tuple

    def degree(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors])


def derive_adjacency(mesh: TriangleMesh) -> Adjacency:
    edges = mesh.edges()
    n = mesh.n_vertices
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges.tolist():
        nbrs[a].append(b)
        nbrs[b].append(a)
    vf: list[list[int]] = [[] for _ in range(n)]
    for fi, tri in enumerate(mesh.faces.tolist()):
        for v in tri:
            vf[v].append(fi)
    return Adjacency(
        neighbors=tuple(_frozen(np.array(sorted(x), dtype=np.int64)) for x in nbrs),
        edges=_frozen(edges),
        vertex_faces=tuple(_frozen(np.array(x, dtype=np.int64)) for x in vf),
    )


def one_ring_ccw(mesh: TriangleMesh, adjacency: Adjacency, vertex: int) -> list[int]:
    """Neighbors of ``vertex`` ordered counter-clockwise, starting at the smallest index.

    Each incident face ``(vertex, a, b)`` (rotated so ``vertex`` leads) sends
    ``a`` to ``b`` in the counter-clockwise walk.

    Raises
    ------
    NonManifoldError
        If the incident faces do not close into a single cycle (boundary or
        non-manifold vertex).
    """
    succ: dict[int, int] = {}
    for fi in adjacency.vertex_faces[vertex]:
        tri = mesh.faces[fi].tolist()
        k = tri.index(vertex)
        a, b = tri[(k + 1) % 3], tri[(k + 2) % 3]
        if a in succ:
            raise NonManifoldError(f"vertex {vertex}: neighbor {a} starts two fans")
        succ[a] = b
    nbrs = adjacency.neighbors[vertex]
    if len(succ) != len(nbrs):
        raise NonManifoldError(f"vertex {vertex}: one-ring is open (boundary vertex)")
    start = int(nbrs[0])
    ring = [start]
    cur = start
    for _ in range(len(nbrs)):
        nxt = succ.get(cur)
        if nxt is None:
            raise NonManifoldError(f"vertex {vertex}: one-ring is open (boundary vertex)")
        if nxt == start:
            break
        ring.append(nxt)
        cur = nxt
    else:
        raise NonManifoldError(f"vertex {vertex}: one-ring does not close")
    if len(ring) != len(nbrs):
        raise NonManifoldError(f"vertex {vertex}: one-ring splits into several cycles")
    return ring


# --------------------------------------------------------------------------- I/O


def _infer_format(path: Path, fmt: str | None) -> str:
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt not in ("obj", "ply"):
        raise ParseError(f"{path}: unsupported mesh format {fmt!r} (expected obj or ply)")
    return fmt


def load_mesh(path, format: str | None = None) -> TriangleMesh:
    return load_mesh_with_colors(path, format)[0]


def load_mesh_with_colors(path, format: str | None = None) -> tuple[TriangleMesh, np.ndarray | None]:
    """Load an OBJ or PLY file. Returns the mesh and per-vertex uint8 colors (PLY only)."""
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "obj":
        v, f = _read_obj(path)
        colors = None
    else:
        v, f, colors = _read_ply(path)
    return TriangleMesh(v, f), colors


def _read_obj(path: Path):
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad vertex line") from exc
                if len(verts[-1]) != 3:
                    raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    try:
                        k = int(tok.split("/")[0])
                    except ValueError as exc:
                        raise ParseError(f"{path}:{lineno}: bad face index {tok!r}") from exc
                    if k == 0:
                        raise ParseError(f"{path}:{lineno}: OBJ indices are 1-based, got 0")
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                if len(idx) != 3:
                    raise ValidationError(f"{path}:{lineno}: only triangles are supported, got {len(idx)}-gon")
                faces.append(idx)
    if not verts:
        raise ParseError(f"{path}: no vertices")
    return np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path: Path):
    raw = path.read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file")
    nl = raw.find(b"\n", end)
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[nl + 1 :]
    fmt = None
    elements: list[dict] = []
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"{path}: property before element")
            try:
                if parts[1] == "list":
                    elements[-1]["props"].append((parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
                else:
                    elements[-1]["props"].append((parts[2], _PLY_TYPES[parts[1]], None))
            except (KeyError, IndexError) as exc:
                raise ParseError(f"{path}: bad property line {line!r}") from exc
    if fmt == "ascii":
        data = _ply_ascii(path, body, elements)
    elif fmt == "binary_little_endian":
        data = _ply_binary(path, body, elements)
    else:
        raise ParseError(f"{path}: unsupported PLY format {fmt!r}")
    if "vertex" not in data or "face" not in data:
        raise ParseError(f"{path}: PLY needs vertex and face elements")
    vd = data["vertex"]
    try:
        v = np.column_stack([vd["x"], vd["y"], vd["z"]]).astype(np.float64)
    except KeyError as exc:
        raise ParseError(f"{path}: vertex element lacks x/y/z") from exc
    colors = None
    if all(c in vd for c in ("red", "green", "blue")):
        colors = np.column_stack([vd["red"], vd["green"], vd["blue"]]).astype(np.uint8)
    fd = data["face"]
    key = "vertex_indices" if "vertex_indices" in fd else "vertex_index"
    if key not in fd:
        raise ParseError(f"{path}: face element lacks vertex_indices")
    lists = fd[key]
    if any(len(x) != 3 for x in lists):
        raise ValidationError(f"{path}: only triangles are supported")
    f = np.array(lists, dtype=np.int64).reshape(-1, 3)
    return v, f, colors


def _ply_ascii(path, body: bytes, elements):
    tokens = body.decode("ascii").split()
    pos = 0
    out = {}
    try:
        for el in elements:
            cols: dict[str, list] = {p[0]: [] for p in el["props"]}
            for _ in range(el["count"]):
                for name, dtype, item in el["props"]:
                    if item is None:
                        cols[name].append(float(tokens[pos]))
                        pos += 1
                    else:
                        k = int(tokens[pos])
                        cols[name].append([int(float(t)) for t in tokens[pos + 1 : pos + 1 + k]])
                        pos += 1 + k
            out[el["name"]] = cols
    except (IndexError, ValueError) as exc:
        raise ParseError(f"{path}: malformed ASCII PLY body") from exc
    return out


def _ply_binary(path, body: bytes, elements):
    off = 0
    out = {}
    try:
        for el in elements:
            props = el["props"]
            if all(item is None for _, _, item in props):
                dt = np.dtype([(name, "<" + t) for name, t, _ in props])
                arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=off)
                off += dt.itemsize * el["count"]
                out[el["name"]] = {name: arr[name] for name, _, _ in props}
                continue
            cols: dict[str, list] = {p[0]: [] for p in props}
            for _ in range(el["count"]):
                for name, t, item in props:
                    if item is None:
                        (val,) = struct.unpack_from("<" + np.dtype(t).char, body, off)
                        off += np.dtype(t).itemsize
                        cols[name].append(val)
                    else:
                        (k,) = struct.unpack_from("<" + np.dtype(t).char, body, off)
                        off += np.dtype(t).itemsize
                        vals = np.frombuffer(body, dtype="<" + item, count=int(k), offset=off)
                        off += vals.nbytes
                        cols[name].append(vals.tolist())
            out[el["name"]] = cols
    except (struct.error, ValueError) as exc:
        raise ParseError(f"{path}: truncated binary PLY body") from exc
    return out


def save_mesh(
    mesh: TriangleMesh,
    path,
    format: str | None = None,
    vertex_colors=None,
    binary: bool = False,
    comments: list[str] | None = None,
) -> None:
    """Write ``mesh`` as OBJ or PLY.

    Coordinates are written with 17 significant digits (ASCII) or as float64
    (binary PLY), so a round trip through :func:`load_mesh` is exact.
    Vertex colors and ``binary`` are PLY-only.
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    if vertex_colors is not None:
        vertex_colors = np.asarray(vertex_colors)
        if vertex_colors.shape != (mesh.n_vertices, 3):
            raise ValidationError(
                f"vertex_colors must have shape ({mesh.n_vertices}, 3), got {vertex_colors.shape}"
            )
        if fmt == "obj":
            raise ValidationError("vertex colors are only supported for PLY output")
        vertex_colors = np.clip(np.round(vertex_colors), 0, 255).astype(np.uint8)
    if fmt == "obj":
        lines = [f"# {c}" for c in comments or []]
        lines += ["v %.17g %.17g %.17g" % tuple(p) for p in mesh.vertices.tolist()]
        lines += ["f %d %d %d" % (a + 1, b + 1, c + 1) for a, b, c in mesh.faces.tolist()]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    head += [f"comment {c}" for c in comments or []]
    head += [f"element vertex {mesh.n_vertices}", "property double x", "property double y", "property double z"]
    if vertex_colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    header = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
        if vertex_colors is not None:
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        vrec = np.zeros(mesh.n_vertices, dtype=fields)
        vrec["x"], vrec["y"], vrec["z"] = mesh.vertices.T
        if vertex_colors is not None:
            vrec["red"], vrec["green"], vrec["blue"] = vertex_colors.T
        frec = np.zeros(mesh.n_faces, dtype=[("n", "u1"), ("i", "<i4", (3,))])
        frec["n"] = 3
        frec["i"] = mesh.faces
        path.write_bytes(header + vrec.tobytes() + frec.tobytes())
        return
    rows = []
    for k, p in enumerate(mesh.vertices.tolist()):
        row = "%.17g %.17g %.17g" % tuple(p)
        if vertex_colors is not None:
            row += " %d %d %d" % tuple(vertex_colors[k].tolist())
        rows.append(row)
    rows += ["3 %d %d %d" % tuple(t) for t in mesh.faces.tolist()]
    path.write_bytes(header + ("\n".join(rows) + "\n").encode("ascii"))


# ------------------------------------------------------------------- generators


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Unit icosphere with counter-clockwise (outward) faces.

    ``subdivisions`` k gives ``10 * 4**k + 2`` vertices (12, 42, 162, 642, ...).
    Vertex numbering is deterministic.
    """
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(np.array(verts) * radius, np.array(faces))
