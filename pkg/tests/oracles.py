"""Independent reference implementations used as test oracles."""

from collections import deque

import numpy as np

from transformesh.mesh import TriangleMesh


def bfs_distances(adjacency, source: int) -> dict:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for w in adjacency.neighbors[u]:
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def naive_spiral_conv(x, table, weight, bias, activation="elu"):
    """Per-vertex loop: gather, zero-pad fillers, affine, nonlinearity."""
    n, l = table.shape
    c = x.shape[1]
    out = np.zeros((n, weight.shape[1]))
    for i in range(n):
        feats = []
        for j in table[i]:
            feats.extend(x[j] if j >= 0 else np.zeros(c))
        z = np.asarray(feats) @ weight + bias
        if activation == "elu":
            z = np.where(z > 0, z, np.expm1(np.minimum(z, 0)))
        out[i] = z
    return out


def planar_grid(n: int = 5) -> TriangleMesh:
    xs, ys = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    verts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(n * n)])
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            i = r * n + c
            faces += [[i, i + 1, i + n + 1], [i, i + n + 1, i + n]]
    return TriangleMesh(verts, np.array(faces))
