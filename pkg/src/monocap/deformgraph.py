"""Embedded deformation graph: construction, warping and the as-rigid-as-possible term."""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra

from .meshes import edge_graph, unique_edges
from .rotations import hat_batch, right_jacobian_batch, rodrigues_batch


class GraphError(ValueError):
    pass


@dataclass
class DeformGraph:
    canonical: np.ndarray     # (V, 3) undeformed vertices
    triangles: np.ndarray     # (T, 3)
    node_vertex: np.ndarray   # (M,) vertex index of each node
    edges: np.ndarray         # (E, 2) undirected node adjacency, i < j
    radii: np.ndarray         # (M,)
    influence: sp.csr_matrix  # (V, M) blend weights, rows sum to one
    rotations: np.ndarray     # (M, 3) rotation vectors
    translations: np.ndarray  # (M, 3)

    @property
    def num_nodes(self) -> int:
        return len(self.node_vertex)

    @property
    def nodes(self) -> np.ndarray:
        return self.canonical[self.node_vertex]

    @property
    def directed_edges(self) -> np.ndarray:
        return np.concatenate([self.edges, self.edges[:, ::-1]])

    def params(self) -> np.ndarray:
        """Flat ``[r_0, t_0, r_1, t_1, ...]``."""
        return np.concatenate([self.rotations, self.translations], axis=1).ravel()

    def set_params(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float).reshape(self.num_nodes, 6)
        self.rotations = x[:, :3].copy()
        self.translations = x[:, 3:].copy()

    def reset(self) -> None:
        self.rotations = np.zeros((self.num_nodes, 3))
        self.translations = np.zeros((self.num_nodes, 3))


def decimate_vertices(vertices: np.ndarray, triangles: np.ndarray, target: int):
    """Collapse the shortest edge until ``target`` vertices remain.

    The lower-indexed endpoint survives at its original position. Returns the
    surviving vertex ids (sorted) and their adjacency as (E, 2) pairs of ids.
    """
    V = np.asarray(vertices, dtype=float)
    adj = [set() for _ in range(len(V))]
    for a, b in unique_edges(triangles):
        adj[a].add(b)
        adj[b].add(a)
    alive = np.ones(len(V), dtype=bool)
    heap = [(float(np.linalg.norm(V[a] - V[b])), int(a), int(b)) for a, b in unique_edges(triangles)]
    heapq.heapify(heap)
    count = len(V)
    while count > target and heap:
        _, a, b = heapq.heappop(heap)
        if not (alive[a] and alive[b]) or b not in adj[a]:
            continue
        keep, gone = (a, b) if a < b else (b, a)
        alive[gone] = False
        count -= 1
        for w in adj[gone]:
            adj[w].discard(gone)
            if w != keep and w not in adj[keep]:
                adj[keep].add(w)
                adj[w].add(keep)
                lo, hi = min(keep, w), max(keep, w)
                heapq.heappush(heap, (float(np.linalg.norm(V[lo] - V[hi])), lo, hi))
        adj[gone] = set()
        adj[keep].discard(keep)
    ids = np.flatnonzero(alive)
    pairs = sorted((a, b) for a in ids for b in adj[a] if a < b)
    return ids, np.array(pairs, dtype=np.int64).reshape(-1, 2)


def build_graph(vertices: np.ndarray, triangles: np.ndarray, num_nodes: int = 1000) -> DeformGraph:
    """Deformation graph of a connected mesh with about ``num_nodes`` nodes.

    Node radii are the largest geodesic distance to a graph neighbour; each
    vertex is influenced by the nodes whose radius reaches it (always at
    least its nearest node) with Gaussian weights of bandwidth r / 2.
    """
    V = np.asarray(vertices, dtype=float)
    F = np.asarray(triangles, dtype=np.int64)
    if len(V) == 0 or len(F) == 0:
        raise GraphError("cannot build a deformation graph on an empty mesh")
    G = edge_graph(V, F)
    ncomp, _ = connected_components(G, directed=False)
    if ncomp != 1:
        raise GraphError(f"mesh has {ncomp} connected components")
    n = len(V)
    if num_nodes >= n:
        ids = np.arange(n)
        edges = unique_edges(F)
    else:
        ids, edges = decimate_vertices(V, F, num_nodes)
    D = dijkstra(G, directed=False, indices=ids)          # (M, V) geodesic distances
    M = len(ids)
    pos = np.full(n, -1, dtype=np.int64)
    pos[ids] = np.arange(M)
    e = pos[edges]
    radii = np.zeros(M)
    dist_e = D[e[:, 0], ids[e[:, 1]]]
    np.maximum.at(radii, e[:, 0], dist_e)
    np.maximum.at(radii, e[:, 1], dist_e)

    if num_nodes >= n:
        W = sp.identity(n, format="csr")
    else:
        within = D <= radii[:, None]
        within[np.argmin(D, axis=0), np.arange(n)] = True
        k, v = np.nonzero(within)
        sig = radii[k] / 2.0
        w = np.exp(-D[k, v] ** 2 / (2.0 * np.where(sig > 0, sig, 1.0) ** 2))
        w = np.where(sig > 0, w, 1.0)
        W = sp.csr_matrix((w, (v, k)), shape=(n, M))
        W = sp.diags(1.0 / np.asarray(W.sum(axis=1)).ravel()) @ W
        W = W.tocsr()
    return DeformGraph(V.copy(), F.copy(), ids, e, radii, W, np.zeros((M, 3)), np.zeros((M, 3)))


def _influence_coo(graph: DeformGraph, vertex_ids=None):
    W = graph.influence if vertex_ids is None else graph.influence[vertex_ids]
    W = W.tocoo()
    return W.row, W.col, W.data


def apply_graph(graph: DeformGraph, canonical: np.ndarray | None = None, vertex_ids=None
                ) -> np.ndarray:
    """Blend of node warps ``R_k (v - g_k) + g_k + t_k`` over each vertex's nodes.

    Written as ``v + sum_k b_k ((R_k - I)(v - g_k) + t_k)`` so that the
    identity state returns the input bit-for-bit.
    """
    Vc = graph.canonical if canonical is None else np.asarray(canonical, dtype=float)
    if vertex_ids is not None:
        Vc = Vc[vertex_ids]
    rows, cols, b = _influence_coo(graph, vertex_ids)
    R = rodrigues_batch(graph.rotations)
    x = Vc[rows] - graph.nodes[cols]
    disp = np.einsum("nab,nb->na", R[cols] - np.eye(3), x) + graph.translations[cols]
    out = Vc.copy()
    np.add.at(out, rows, b[:, None] * disp)
    return out


def graph_vertex_jacobian(graph: DeformGraph, vertex_ids) -> sp.csr_matrix:
    """d vertices / d params for ``vertex_ids``, shape (3n, 6M)."""
    vertex_ids = np.asarray(vertex_ids, dtype=np.int64)
    rows, cols, b = _influence_coo(graph, vertex_ids)
    Vc = graph.canonical[vertex_ids]
    R = rodrigues_batch(graph.rotations[cols])
    Jr = right_jacobian_batch(graph.rotations[cols])
    x = Vc[rows] - graph.nodes[cols]
    # d(R x)/dr = -R [x]_x J_r(r)
    dr = -np.einsum("nab,nbc,ncd->nad", R, hat_batch(x), Jr) * b[:, None, None]
    dt = np.broadcast_to(np.eye(3), dr.shape) * b[:, None, None]
    blocks = np.concatenate([dr, dt], axis=2)                      # (nnz, 3, 6)
    ri = (3 * rows[:, None, None] + np.arange(3)[None, :, None]).repeat(6, axis=2)
    ci = (6 * cols[:, None, None] + np.arange(6)[None, None, :]).repeat(3, axis=1)
    n = len(vertex_ids)
    return sp.csr_matrix((blocks.ravel(), (ri.ravel(), ci.ravel())),
                         shape=(3 * n, 6 * graph.num_nodes))


def arap_residual(graph: DeformGraph, length_scale: float = 1.0) -> np.ndarray:
    """Stacked ``(g_i - g_j) - R_i (g^_i - g^_j)`` over directed edges, times sqrt(1/M)."""
    e = graph.directed_edges
    g = graph.nodes
    d = g[e[:, 0]] - g[e[:, 1]]
    R = rodrigues_batch(graph.rotations[e[:, 0]])
    res = (d - np.einsum("nab,nb->na", R, d)
           + graph.translations[e[:, 0]] - graph.translations[e[:, 1]])
    return (length_scale / np.sqrt(graph.num_nodes)) * res.ravel()


def arap_jacobian(graph: DeformGraph, length_scale: float = 1.0) -> sp.csr_matrix:
    e = graph.directed_edges
    g = graph.nodes
    d = g[e[:, 0]] - g[e[:, 1]]
    R = rodrigues_batch(graph.rotations[e[:, 0]])
    Jr = right_jacobian_batch(graph.rotations[e[:, 0]])
    dr = np.einsum("nab,nbc,ncd->nad", R, hat_batch(d), Jr)
    ne = len(e)
    s = length_scale / np.sqrt(graph.num_nodes)
    r3 = 3 * np.arange(ne)[:, None] + np.arange(3)[None]
    rows = [np.repeat(r3, 3, axis=1).ravel(), r3.ravel(), r3.ravel()]
    cols = [(6 * e[:, 0, None, None] + np.arange(3)[None, None, :]).repeat(3, axis=1).ravel(),
            (6 * e[:, 0, None] + 3 + np.arange(3)[None]).ravel(),
            (6 * e[:, 1, None] + 3 + np.arange(3)[None]).ravel()]
    vals = [dr.ravel(), np.ones(3 * ne), -np.ones(3 * ne)]
    return s * sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(3 * ne, 6 * graph.num_nodes))


def energy_arap(graph: DeformGraph, length_scale: float = 1.0) -> float:
    r = arap_residual(graph, length_scale)
    return float(r @ r)
