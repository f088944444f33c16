"""Spiral sequences: fixed-length, ring-by-ring counter-clockwise vertex orderings.

A spiral starts at the center vertex, walks its one-ring counter-clockwise,
then continues outward one breadth-first ring at a time. Tables are built once
on a template and reused for every corresponded mesh.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .mesh import Adjacency, TriangleMesh, derive_adjacency, one_ring_ccw

FILLER = -1

_SIDECAR_MAGIC = b"TMSPIRAL"
_SIDECAR_VERSION = 1


@dataclass(frozen=True, eq=False)
class SpiralTable:
    level: int
    length_l: int
    indices: np.ndarray  # (N, l) int64, FILLER = -1

    @property
    def n_vertices(self) -> int:
        return self.indices.shape[0]

    def has_filler(self) -> bool:
        return bool((self.indices == FILLER).any())

    def save(self, path) -> None:
        """Write the binary sidecar: header (level, N, l) then row-major int32 body."""
        body = np.ascontiguousarray(self.indices, dtype="<i4")
        with open(path, "wb") as fh:
            fh.write(_SIDECAR_MAGIC)
            fh.write(struct.pack("<Iiii", _SIDECAR_VERSION, self.level, self.n_vertices, self.length_l))
            fh.write(body.tobytes())

    @classmethod
    def load(cls, path) -> "SpiralTable":
        raw = Path(path).read_bytes()
        if raw[:8] != _SIDECAR_MAGIC:
            raise ParseError(f"{path}: not a spiral sidecar")
        version, level, n, l = struct.unpack_from("<Iiii", raw, 8)
        if version != _SIDECAR_VERSION:
            raise ParseError(f"{path}: unsupported spiral sidecar version {version}")
        body = np.frombuffer(raw, dtype="<i4", offset=24)
        if body.size != n * l:
            raise ParseError(f"{path}: expected {n * l} entries, found {body.size}")
        idx = body.reshape(n, l).astype(np.int64)
        idx.setflags(write=False)
        return cls(level, l, idx)


def _outer_arc(cycle: list[int], outer: set[int]) -> list[int]:
    """Members of ``outer`` in ``cycle`` order, starting just after a non-member."""
    k = len(cycle)
    start = 0
    for i in range(k):
        if cycle[i] not in outer:
            start = (i + 1) % k
            break
    return [cycle[(start + j) % k] for j in range(k) if cycle[(start + j) % k] in outer]


def build_spiral(
    mesh: TriangleMesh,
    adjacency: Adjacency,
    vertex: int,
    length_l: int,
    rings: list[list[int]] | None = None,
) -> list[int]:
    """Spiral of ``length_l`` indices around ``vertex``, padded with FILLER.

    ``rings`` optionally caches :func:`one_ring_ccw` for every vertex.
    """
    if length_l < 1:
        raise ValueError("spiral length must be >= 1")

    def ring_of(u: int) -> list[int]:
        return rings[u] if rings is not None else one_ring_ccw(mesh, adjacency, u)

    seq = [vertex]
    visited = {vertex}
    current = [vertex]
    while len(seq) < length_l:
        if current == [vertex]:
            nxt = list(ring_of(vertex))
        else:
            frontier = {w for u in current for w in adjacency.neighbors[u].tolist()} - visited
            nxt = []
            seen: set[int] = set()
            for u in current:
                for w in _outer_arc(ring_of(u), frontier):
                    if w not in seen:
                        seen.add(w)
                        nxt.append(w)
            # splice: begin adjacent to where the previous ring ended
            for u in reversed(current):
                arc = _outer_arc(ring_of(u), frontier)
                if arc:
                    k = nxt.index(arc[0])
                    nxt = nxt[k:] + nxt[:k]
                    break
        if not nxt:
            break
        seq.extend(nxt)
        visited.update(nxt)
        current = nxt
    seq = seq[:length_l]
    return seq + [FILLER] * (length_l - len(seq))


def build_spiral_table(mesh: TriangleMesh, length_l: int, level: int = 0) -> SpiralTable:
    adj = derive_adjacency(mesh)
    rings = [one_ring_ccw(mesh, adj, i) for i in range(mesh.n_vertices)]
    rows = [build_spiral(mesh, adj, i, length_l, rings) for i in range(mesh.n_vertices)]
    idx = np.array(rows, dtype=np.int64).reshape(mesh.n_vertices, length_l)
    idx.setflags(write=False)
    return SpiralTable(level, length_l, idx)
