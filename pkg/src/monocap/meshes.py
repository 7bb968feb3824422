"""Small triangle-mesh utilities and procedural test shapes."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def unique_edges(triangles: np.ndarray) -> np.ndarray:
    """Sorted (E, 2) array of undirected edges."""
    t = np.asarray(triangles)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def edge_face_counts(triangles: np.ndarray) -> np.ndarray:
    t = np.asarray(triangles)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def edge_graph(vertices: np.ndarray, triangles: np.ndarray) -> sp.csr_matrix:
    """Symmetric sparse matrix of edge lengths."""
    e = unique_edges(triangles)
    w = np.linalg.norm(vertices[e[:, 0]] - vertices[e[:, 1]], axis=1)
    n = len(vertices)
    G = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]),
                                                 np.concatenate([e[:, 1], e[:, 0]]))),
                      shape=(n, n))
    return G.tocsr()


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = vertices[triangles]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(n, triangles[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
    """Geodesic sphere; returns (vertices, triangles)."""
    p = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
             (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache, new = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    V = np.array(verts) * radius + np.asarray(center, float)
    return V, np.array(faces, dtype=np.int64)


def grid_mesh(nx: int, ny: int, spacing: float = 1.0, z: float = 0.0):
    """Regular planar grid of ``nx * ny`` vertices, two triangles per cell."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing)
    V = np.column_stack([xs.ravel(), ys.ravel(), np.full(nx * ny, z)])
    idx = np.arange(nx * ny).reshape(ny, nx)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    F = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    return V, F


def cylinder_mesh(radius: float, height: float, n_around: int = 32, n_along: int = 16,
                  center=(0.0, 0.0, 0.0)):
    """Capped cylinder along y, returned as one closed mesh."""
    ang = 2 * np.pi * np.arange(n_around) / n_around
    ys = np.linspace(-height / 2, height / 2, n_along)
    V = [np.column_stack([radius * np.cos(ang), np.full(n_around, y), radius * np.sin(ang)])
         for y in ys]
    V = np.concatenate(V + [[[0, ys[0], 0]], [[0, ys[-1], 0]]])
    F = []
    for i in range(n_along - 1):
        for j in range(n_around):
            a = i * n_around + j
            b = i * n_around + (j + 1) % n_around
            c, d = a + n_around, b + n_around
            F += [(a, c, b), (b, c, d)]
    top, bot = len(V) - 1, len(V) - 2
    last = (n_along - 1) * n_around
    for j in range(n_around):
        F.append((bot, j, (j + 1) % n_around))
        F.append((top, last + (j + 1) % n_around, last + j))
    return V + np.asarray(center, float), np.array(F, dtype=np.int64)
