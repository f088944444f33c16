import numpy as np
import pytest

from oracles import bfs_distances
from transformesh.hierarchy import build_hierarchy
from transformesh.mesh import derive_adjacency, icosphere, one_ring_ccw
from transformesh.spiral import FILLER, SpiralTable, build_spiral, build_spiral_table


def test_length_one_is_center(ico2):
    t = build_spiral_table(ico2, 1)
    assert np.array_equal(t.indices[:, 0], np.arange(ico2.n_vertices))


def test_tetrahedron_spirals(tetra):
    adj = derive_adjacency(tetra)
    for v in range(4):
        row = build_spiral(tetra, adj, v, 4)
        assert row[0] == v and row[1:] == one_ring_ccw(tetra, adj, v)
    assert build_spiral(tetra, adj, 0, 5) == [0, 1, 3, 2, FILLER]
    assert build_spiral_table(tetra, 5).has_filler()


def test_icosphere1_l9_no_filler():
    assert not build_spiral_table(icosphere(1), 9).has_filler()


def test_deterministic(ico2):
    a = build_spiral_table(ico2, 12).indices
    b = build_spiral_table(ico2, 12).indices
    assert a.tobytes() == b.tobytes()


def _small_meshes():
    h = build_hierarchy(icosphere(2), factors=(2, 2), spiral_lengths=9)
    return [icosphere(0), icosphere(1), icosphere(2)] + [lvl.mesh for lvl in h.levels[1:]]


@pytest.mark.parametrize("mesh", _small_meshes(), ids=lambda m: f"N{m.n_vertices}")
@pytest.mark.parametrize("length", [7, 9, 19, 40])
def test_bfs_ring_oracle(mesh, length):
    """Rows list BFS rings in order: complete rings first, then a prefix of the next."""
    assert mesh.n_vertices <= 200
    adj = derive_adjacency(mesh)
    table = build_spiral_table(mesh, length)
    for i in range(mesh.n_vertices):
        row = [j for j in table.indices[i] if j != FILLER]
        assert row[0] == i and len(set(row)) == len(row)
        dist = bfs_distances(adj, i)
        d = [dist[j] for j in row]
        assert d == sorted(d)
        last = d[-1]
        full = {j for j, dj in dist.items() if dj < last}
        assert full <= set(row)
        if len(row) < length:  # exhausted the component
            assert len(row) == mesh.n_vertices


@pytest.mark.parametrize("subdiv", [1, 2])
def test_ring_contiguity_icosphere(subdiv):
    """On icospheres every BFS ring is a simple cycle, so spirals walk it edge by edge."""
    mesh = icosphere(subdiv)
    adj = derive_adjacency(mesh)
    table = build_spiral_table(mesh, 19)
    for i in range(mesh.n_vertices):
        row = list(table.indices[i])
        dist = bfs_distances(adj, i)
        for a, b in zip(row[1:], row[2:]):
            if dist[a] == dist[b]:
                assert b in adj.neighbors[a]


def test_sidecar_round_trip(tmp_path, ico2):
    t = build_spiral_table(ico2, 9, level=2)
    p = tmp_path / "s.spiral"
    t.save(p)
    back = SpiralTable.load(p)
    assert back.level == 2 and back.length_l == 9
    assert np.array_equal(back.indices, t.indices) and back.indices.dtype == t.indices.dtype
