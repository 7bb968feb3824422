import numpy as np
import pytest
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

from monocap.deformgraph import (DeformGraph, GraphError, apply_graph, arap_jacobian,
                                 arap_residual, build_graph, decimate_vertices, energy_arap,
                                 graph_vertex_jacobian)
from monocap.meshes import grid_mesh, icosphere
from monocap.solver import ResidualBlock, check_jacobian


@pytest.fixture(scope="module")
def grid_graph():
    V, F = grid_mesh(40, 40, spacing=0.01)
    return build_graph(V, F, 1000)


def rigid_state(graph, rng):
    """Node parameters that make every node warp the same rigid motion G(x) = Q x + c."""
    rv = Rotation.random(random_state=int(rng.integers(1 << 30))).as_rotvec()
    Q = Rotation.from_rotvec(rv).as_matrix()
    c = rng.normal(size=3)
    g = graph.nodes
    graph.rotations = np.tile(rv, (graph.num_nodes, 1))
    graph.translations = g @ Q.T + c - g
    return Q, c


def test_grid_node_count_and_partition_of_unity(grid_graph):
    assert 980 <= grid_graph.num_nodes <= 1020
    sums = np.asarray(grid_graph.influence.sum(axis=1)).ravel()
    assert np.allclose(sums, 1.0, atol=1e-12)
    assert np.all(grid_graph.influence.data >= 0)
    assert np.all(grid_graph.radii > 0)


def test_small_mesh_is_its_own_graph():
    V, F = icosphere(1)
    g = build_graph(V, F, 1000)
    assert g.num_nodes == len(V)
    assert np.array_equal(g.node_vertex, np.arange(len(V)))
    W = g.influence.toarray()
    assert np.array_equal(W, np.eye(len(V)))


def test_two_triangle_radii():
    h = np.sqrt(3) / 2
    V = np.array([[0, 0, 0], [1, 0, 0], [0.5, h, 0], [1.5, h, 0]], float)
    F = np.array([[0, 1, 2], [1, 3, 2]])
    g = build_graph(V, F, 10)
    assert np.allclose(g.radii, 1.0)


def test_disconnected_mesh_rejected():
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5], [6, 5, 5], [5, 6, 5]], float)
    with pytest.raises(GraphError):
        build_graph(V, np.array([[0, 1, 2], [3, 4, 5]]), 3)


def test_decimation_reaches_target():
    V, F = grid_mesh(10, 10, spacing=1.0)
    ids, edges = decimate_vertices(V, F, 50)
    assert len(ids) == 50
    assert np.all(np.isin(edges, ids))
    assert np.all(edges[:, 0] < edges[:, 1])


def test_identity_state_exact(grid_graph):
    grid_graph.reset()
    assert np.array_equal(apply_graph(grid_graph), grid_graph.canonical)
    assert energy_arap(grid_graph) == 0.0


def test_common_translation(grid_graph):
    grid_graph.reset()
    grid_graph.translations[:] = [0.1, 0.0, 0.0]
    out = apply_graph(grid_graph)
    assert np.allclose(out, grid_graph.canonical + [0.1, 0, 0], atol=1e-14)
    grid_graph.reset()


def test_global_rigid_motion(grid_graph, rng):
    for _ in range(5):
        Q, c = rigid_state(grid_graph, rng)
        assert np.allclose(apply_graph(grid_graph), grid_graph.canonical @ Q.T + c, atol=1e-12)
        assert energy_arap(grid_graph) < 1e-10
    grid_graph.reset()


def test_arap_two_node_hand_value():
    g = DeformGraph(np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.zeros((0, 3), int), np.array([0, 1]),
                    np.array([[0, 1]]), np.ones(2), sp.identity(2, format="csr"),
                    np.zeros((2, 3)), np.array([[0, 0, 0.5], [0, 0, 0]]))
    assert energy_arap(g) == pytest.approx(0.25, abs=1e-15)


def test_arap_and_vertex_jacobians(rng):
    V, F = icosphere(2)
    g = build_graph(V, F, 60)
    ids = np.arange(0, len(V), 7)

    def vres(x):
        g.set_params(x)
        return apply_graph(g, vertex_ids=ids).ravel()

    def vjac(x):
        g.set_params(x)
        return graph_vertex_jacobian(g, ids)

    def ares(x):
        g.set_params(x)
        return arap_residual(g, 3.0)

    def ajac(x):
        g.set_params(x)
        return arap_jacobian(g, 3.0)

    for _ in range(3):
        x = rng.normal(scale=0.3, size=6 * g.num_nodes)
        assert check_jacobian(ResidualBlock(vres, vjac), x) < 1e-6
        assert check_jacobian(ResidualBlock(ares, ajac), x) < 1e-6


def test_params_roundtrip(grid_graph, rng):
    x = rng.normal(size=6 * grid_graph.num_nodes)
    grid_graph.set_params(x)
    assert np.array_equal(grid_graph.params(), x)
    grid_graph.reset()
