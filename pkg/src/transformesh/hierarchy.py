"""Template mesh hierarchy: quadric-error edge collapse and barycentric up-sampling.

Pooling and un-pooling are fixed sparse matrices computed once on the template
and shared by every corresponded mesh.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from ._records import read_records, write_records
from .errors import DecimationStuckError, ParseError
from .mesh import TriangleMesh
from .spiral import SpiralTable, build_spiral_table

logger = logging.getLogger(__name__)

_HIER_MAGIC = b"TMHIERAR"
_HIER_VERSION = 1
_SINGULAR_DET = 1e-12


# ------------------------------------------------------------------ quadrics


def face_quadrics(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Fundamental error quadric ``p p^T`` of each face plane, shape (F, 4, 4)."""
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    n = np.cross(v1 - v0, v2 - v0)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    d = -np.einsum("ij,ij->i", n, v0)
    p = np.column_stack([n, d])
    return np.einsum("fi,fj->fij", p, p)


def vertex_quadrics(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    kf = face_quadrics(vertices, faces)
    q = np.zeros((len(vertices), 4, 4))
    for k in range(3):
        np.add.at(q, faces[:, k], kf)
    return q


def quadric_error(q: np.ndarray, point: np.ndarray) -> float:
    h = np.append(point, 1.0)
    return float(h @ q @ h)


def optimal_contraction(q: np.ndarray, va: np.ndarray, vb: np.ndarray) -> tuple[float, np.ndarray]:
    """Minimize ``v^T Q v``; fall back to the best of the endpoints and midpoint."""
    a = q.copy()
    a[3] = (0.0, 0.0, 0.0, 1.0)
    if abs(np.linalg.det(a)) >= _SINGULAR_DET:
        v = np.linalg.solve(a, np.array([0.0, 0.0, 0.0, 1.0]))[:3]
        return max(quadric_error(q, v), 0.0), v
    best = None
    for v in (va, vb, 0.5 * (va + vb)):
        c = quadric_error(q, v)
        if best is None or c < best[0]:
            best = (c, v)
    return max(best[0], 0.0), best[1].copy()


# ---------------------------------------------------------------- decimation


class _Decimator:
    """Mutable edge-collapse state. Surviving endpoint is the smaller index."""

    def __init__(self, mesh: TriangleMesh):
        self.pos = mesh.vertices.copy()
        self.q = vertex_quadrics(mesh.vertices, mesh.faces)
        self.faces: dict[int, list[int]] = {i: list(f) for i, f in enumerate(mesh.faces.tolist())}
        self.vfaces: list[set[int]] = [set() for _ in range(mesh.n_vertices)]
        for fi, f in self.faces.items():
            for v in f:
                self.vfaces[v].add(fi)
        self.cluster: list[list[int]] = [[i] for i in range(mesh.n_vertices)]
        self.alive = np.ones(mesh.n_vertices, dtype=bool)
        self.n_alive = mesh.n_vertices
        self.heap: list = []
        self.stamp = np.zeros(mesh.n_vertices, dtype=np.int64)
        self.rejected: set[tuple[int, int]] = set()

    def neighbors(self, v: int) -> set[int]:
        out = set()
        for fi in self.vfaces[v]:
            out.update(self.faces[fi])
        out.discard(v)
        return out

    def on_boundary(self, v: int) -> bool:
        return len(self.vfaces[v]) != len(self.neighbors(v))

    def push_edge(self, a: int, b: int) -> None:
        a, b = min(a, b), max(a, b)
        cost, _ = optimal_contraction(self.q[a] + self.q[b], self.pos[a], self.pos[b])
        heapq.heappush(self.heap, (cost, a, b, int(self.stamp[a]), int(self.stamp[b])))

    def _normal(self, f: list[int], pos: np.ndarray | None = None) -> np.ndarray:
        p = self.pos if pos is None else pos
        return np.cross(p[f[1]] - p[f[0]], p[f[2]] - p[f[0]])

    def legal(self, a: int, b: int, target: np.ndarray) -> bool:
        na, nb = self.neighbors(a), self.neighbors(b)
        shared = self.vfaces[a] & self.vfaces[b]
        wings = {v for fi in shared for v in self.faces[fi]} - {a, b}
        # link condition: the only common neighbors are the wings of edge (a, b)
        if na & nb != wings:
            return False
        # an interior edge joining two boundary vertices would pinch the surface
        if len(shared) == 2 and self.on_boundary(a) and self.on_boundary(b):
            return False
        # collapsing a tetrahedron-like pocket would leave a degenerate surface
        if len(na | nb) <= 3:
            return False
        new_faces = set()
        for fi in (self.vfaces[a] | self.vfaces[b]) - shared:
            old = self.faces[fi]
            new = [a if v == b else v for v in old]
            if len(set(new)) < 3:
                return False
            key = tuple(sorted(new))
            if key in new_faces:
                return False
            new_faces.add(key)
            n_old = self._normal(old)
            p = {v: self.pos[v] for v in new}
            p[a] = target
            n_new = np.cross(p[new[1]] - p[new[0]], p[new[2]] - p[new[0]])
            if np.linalg.norm(n_new) < 1e-14 * max(1.0, np.linalg.norm(n_old)):
                return False
            if float(n_old @ n_new) < 0.0:
                return False
        return True

    def collapse(self, a: int, b: int, target: np.ndarray) -> None:
        shared = self.vfaces[a] & self.vfaces[b]
        for fi in shared:
            for v in self.faces[fi]:
                self.vfaces[v].discard(fi)
            del self.faces[fi]
        for fi in list(self.vfaces[b]):
            self.faces[fi] = [a if v == b else v for v in self.faces[fi]]
            self.vfaces[a].add(fi)
        self.vfaces[b] = set()
        self.pos[a] = target
        self.q[a] = self.q[a] + self.q[b]
        self.cluster[a].extend(self.cluster[b])
        self.cluster[b] = []
        self.alive[b] = False
        self.n_alive -= 1
        self.stamp[a] += 1
        self.stamp[b] += 1
        ring = self.neighbors(a)
        for w in ring:
            self.push_edge(a, w)
        # legality of nearby edges may have changed; give rejected ones another chance
        for w in ring:
            for x in self.neighbors(w):
                key = (min(w, x), max(w, x))
                if key in self.rejected:
                    self.rejected.discard(key)
                    self.push_edge(*key)


def qem_decimate(
    mesh: TriangleMesh, target_vertex_count: int
) -> tuple[TriangleMesh, sparse.csr_matrix, np.ndarray]:
    """Garland-Heckbert edge collapse down to ``target_vertex_count`` vertices.

    Returns
    -------
    coarse : TriangleMesh
        Surviving vertices (renumbered in increasing original index) at their
        optimal contraction positions.
    down : csr_matrix, shape (n_coarse, n_fine)
        Row ``k`` uniformly averages the fine vertices merged into coarse vertex ``k``.
    survivors : ndarray of int
        Fine index of each coarse vertex.
    """
    n = mesh.n_vertices
    if target_vertex_count < 1:
        raise ValueError("target_vertex_count must be positive")
    if target_vertex_count >= n:
        return mesh, sparse.identity(n, format="csr", dtype=np.float64), np.arange(n)
    st = _Decimator(mesh)
    for a, b in mesh.edges().tolist():
        st.push_edge(a, b)
    while st.n_alive > target_vertex_count:
        if not st.heap:
            raise DecimationStuckError(
                f"no legal contraction left at {st.n_alive} vertices (target {target_vertex_count})"
            )
        cost, a, b, sa, sb = heapq.heappop(st.heap)
        if not (st.alive[a] and st.alive[b]) or sa != st.stamp[a] or sb != st.stamp[b]:
            continue
        if b not in st.neighbors(a):
            continue
        _, target = optimal_contraction(st.q[a] + st.q[b], st.pos[a], st.pos[b])
        if not st.legal(a, b, target):
            st.rejected.add((a, b))
            continue
        st.collapse(a, b, target)

    survivors = np.flatnonzero(st.alive)
    remap = -np.ones(n, dtype=np.int64)
    remap[survivors] = np.arange(len(survivors))
    faces = np.array([st.faces[k] for k in sorted(st.faces)], dtype=np.int64)
    coarse = TriangleMesh(st.pos[survivors], remap[faces])
    rows, cols, vals = [], [], []
    for k, s in enumerate(survivors.tolist()):
        members = sorted(st.cluster[s])
        rows += [k] * len(members)
        cols += members
        vals += [1.0 / len(members)] * len(members)
    down = sparse.csr_matrix((vals, (rows, cols)), shape=(len(survivors), n))
    return coarse, down, survivors


# ------------------------------------------------------------- up-sampling


def closest_points_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest point from ``p`` (3,) to each triangle ``(a, b, c)`` (T, 3).

    Returns ``(points (T, 3), barycentric (T, 3))``; exact region-based
    classification (vertex, edge, interior).
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    bary = np.zeros((len(a), 3))
    done = np.zeros(len(a), dtype=bool)

    def assign(mask, w):
        nonlocal done
        m = mask & ~done
        bary[m] = w[m] if w.ndim == 2 else w
        done |= m

    t = len(a)
    one = np.ones(t)
    zero = np.zeros(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), np.column_stack([one, zero, zero]))
        assign((d3 >= 0) & (d4 <= d3), np.column_stack([zero, one, zero]))
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), np.column_stack([1 - v, v, zero]))
        assign((d6 >= 0) & (d5 <= d6), np.column_stack([zero, zero, one]))
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), np.column_stack([1 - w, zero, w]))
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), np.column_stack([zero, 1 - w, w]))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        assign(np.ones(t, dtype=bool), np.column_stack([1 - v - w, v, w]))
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    pts = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return pts, bary


def barycentric_up(fine: TriangleMesh, coarse: TriangleMesh) -> sparse.csr_matrix:
    """Up-sampling matrix (n_fine, n_coarse) from closest-triangle barycentrics."""
    a, b, c = (coarse.vertices[coarse.faces[:, k]] for k in range(3))
    rows, cols, vals = [], [], []
    for i, p in enumerate(fine.vertices):
        pts, bary = closest_points_on_triangles(p, a, b, c)
        d = np.einsum("ij,ij->i", pts - p, pts - p)
        t = int(np.argmin(d))
        for k in range(3):
            if bary[t, k] > 0.0:
                rows.append(i)
                cols.append(int(coarse.faces[t, k]))
                vals.append(bary[t, k])
    up = sparse.csr_matrix((vals, (rows, cols)), shape=(fine.n_vertices, coarse.n_vertices))
    up.sum_duplicates()
    return up


# --------------------------------------------------------------- hierarchy


@dataclass(frozen=True, eq=False)
class MeshLevel:
    mesh: TriangleMesh
    spirals: SpiralTable
    down: sparse.csr_matrix | None  # to the next coarser level; None on the last level
    up: sparse.csr_matrix | None  # from the next coarser level back to this one


@dataclass(frozen=True, eq=False)
class MeshHierarchy:
    levels: tuple

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def vertex_counts(self) -> list[int]:
        return [lv.mesh.n_vertices for lv in self.levels]

    def save(self, path) -> None:
        records: list = [("n_levels", np.array([self.n_levels], dtype=np.int64))]
        for k, lv in enumerate(self.levels):
            records += [
                (f"L{k}/vertices", lv.mesh.vertices),
                (f"L{k}/faces", lv.mesh.faces),
                (f"L{k}/spiral", lv.spirals.indices),
            ]
            if lv.down is not None:
                for tag, mat in (("down", lv.down), ("up", lv.up)):
                    coo = mat.tocoo()
                    order = np.lexsort((coo.col, coo.row))
                    records += [
                        (f"L{k}/{tag}/shape", np.array(mat.shape, dtype=np.int64)),
                        (f"L{k}/{tag}/row", coo.row[order].astype(np.int64)),
                        (f"L{k}/{tag}/col", coo.col[order].astype(np.int64)),
                        (f"L{k}/{tag}/val", coo.data[order].astype(np.float64)),
                    ]
        write_records(path, _HIER_MAGIC, _HIER_VERSION, records)

    @classmethod
    def load(cls, path) -> "MeshHierarchy":
        version, recs = read_records(path, _HIER_MAGIC)
        if version != _HIER_VERSION:
            raise ParseError(f"{path}: hierarchy cache version {version} != {_HIER_VERSION}")
        r = dict(recs)
        levels = []
        n_levels = int(r["n_levels"][0])
        for k in range(n_levels):
            mesh = TriangleMesh(r[f"L{k}/vertices"], r[f"L{k}/faces"])
            sp = r[f"L{k}/spiral"]
            sp.setflags(write=False)
            spirals = SpiralTable(k, sp.shape[1], sp)
            mats = {}
            for tag in ("down", "up"):
                if f"L{k}/{tag}/shape" in r:
                    shape = tuple(int(s) for s in r[f"L{k}/{tag}/shape"])
                    mats[tag] = sparse.csr_matrix(
                        (r[f"L{k}/{tag}/val"], (r[f"L{k}/{tag}/row"], r[f"L{k}/{tag}/col"])), shape=shape
                    )
            levels.append(MeshLevel(mesh, spirals, mats.get("down"), mats.get("up")))
        return cls(tuple(levels))


def build_hierarchy(
    template: TriangleMesh, factors=(4, 4), spiral_lengths=9
) -> MeshHierarchy:
    """Chain QEM decimation by ``factors`` and attach spiral tables per level.

    ``spiral_lengths`` is one int for all levels or one per level
    (``len(factors) + 1`` entries).
    """
    factors = list(factors)
    if any(f <= 1 for f in factors):
        raise ValueError("reduction factors must be > 1")
    n_levels = len(factors) + 1
    if isinstance(spiral_lengths, int):
        spiral_lengths = [spiral_lengths] * n_levels
    spiral_lengths = list(spiral_lengths)
    if len(spiral_lengths) != n_levels:
        raise ValueError(f"need {n_levels} spiral lengths, got {len(spiral_lengths)}")
    meshes = [template]
    downs, ups = [], []
    for k, f in enumerate(factors):
        fine = meshes[-1]
        target = fine.n_vertices // f
        if target < 4:
            raise DecimationStuckError(f"level {k + 1}: {fine.n_vertices} vertices cannot be reduced by {f}")
        coarse, down, _ = qem_decimate(fine, target)
        logger.info("level %d: %d -> %d vertices", k + 1, fine.n_vertices, coarse.n_vertices)
        meshes.append(coarse)
        downs.append(down)
        ups.append(barycentric_up(fine, coarse))
    levels = []
    for k, m in enumerate(meshes):
        levels.append(
            MeshLevel(
                mesh=m,
                spirals=build_spiral_table(m, spiral_lengths[k], level=k),
                down=downs[k] if k < len(factors) else None,
                up=ups[k] if k < len(factors) else None,
            )
        )
    return MeshHierarchy(tuple(levels))


def load_or_build_hierarchy(path, template: TriangleMesh, factors=(4, 4), spiral_lengths=9, rebuild=False):
    """Read the cache at ``path`` or build and write it."""
    path = Path(path)
    if path.exists() and not rebuild:
        hier = MeshHierarchy.load(path)
        if np.array_equal(hier.levels[0].mesh.faces, template.faces) and hier.n_levels == len(factors) + 1:
            return hier
        logger.warning("hierarchy cache %s does not match the template; rebuilding", path)
    hier = build_hierarchy(template, factors, spiral_lengths)
    path.parent.mkdir(parents=True, exist_ok=True)
    hier.save(path)
    return hier
