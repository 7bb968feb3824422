import numpy as np
import pytest

from monocap.deformgraph import build_graph
from monocap.kinematics import joint_positions, project_points, skin_mesh
from monocap.raster import (Contour, CorrespondenceSet, extract_contour, mask_iou,
                            model_boundary_vertices, render_mask)
from monocap.refine import (RefineError, RefinementConfig, arap_block, contour_residual,
                            edge_offset, graph_contour_block, pose_contour_block, refine_pose,
                            refine_surface, second_pass_segmentation, stabilization_block,
                            surface_graph, temporal_smooth)
from monocap.solver import check_jacobian
from monocap.synth import default_base_pose

R_SHOULDER_Z = 5   # angle index of the right shoulder's z axis
R_HIP_Z = 17


@pytest.fixture(scope="module")
def base(rig):
    return default_base_pose(rig)


def silhouette(template, rig, pose, cam):
    return extract_contour(render_mask(skin_mesh(template, rig, pose), template.triangles, cam))


def corr_for(template, rig, pose, cam, target_pose):
    V = skin_mesh(template, rig, pose)
    b = model_boundary_vertices(V, template.triangles, cam)
    from monocap.raster import find_correspondences
    return find_correspondences(b, silhouette(template, rig, target_pose, cam))


# ---------------------------------------------------------------- contour term

def test_edge_offset_values():
    n = np.array([[1.0, 0.0], [0.0, -1.0], [np.sqrt(0.5), np.sqrt(0.5)]])
    assert np.allclose(edge_offset(n), [0.5, 0.5, 0.5 * np.sqrt(0.5)])


def test_contour_residual_point_to_line():
    corr = CorrespondenceSet(np.arange(2), np.array([[10.0, 10.0], [0.0, 0.0]]),
                             np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2))
    p = np.array([[13.0, 50.0], [7.0, -2.0]])
    # along-normal distances 3 and -2, shifted by the half-pixel outline offset
    assert np.allclose(contour_residual(p, corr), (np.array([3.0, -2.0]) - 0.5) / np.sqrt(2))


def test_refinement_jacobians(rig, template, cam, base, rng):
    target = base.copy()
    target.theta[R_SHOULDER_Z] += 0.1
    corr = corr_for(template, rig, base, cam, target)
    assert len(corr) > 50
    pose_blk = pose_contour_block(template, rig, cam, corr)
    stab = stabilization_block(rig, base, 0.06, 150.0)
    for _ in range(2):
        x = base.vector() + rng.normal(scale=0.02, size=33)
        assert check_jacobian(pose_blk, x) < 1e-4
        assert check_jacobian(stab, x) < 1e-4
    V = skin_mesh(template, rig, base)
    g = build_graph(V, template.triangles, 150)
    gc = graph_contour_block(g, cam, corr)
    ar = arap_block(g, 0.6, 150.0)
    x = rng.normal(scale=0.01, size=6 * g.num_nodes)
    assert check_jacobian(gc, x) < 1e-4
    assert check_jacobian(ar, x) < 1e-4


# ---------------------------------------------------------------- pose refinement

def test_pose_fixed_point(rig, template, cam, base):
    out, rep = refine_pose(base, template, rig, cam, silhouette(template, rig, base, cam))
    assert not rep.flagged
    uv0, _ = project_points(cam, joint_positions(rig, base))
    uv1, _ = project_points(cam, joint_positions(rig, out))
    # silhouettes are pixel-quantised, so the fixed point holds to a fraction of a pixel
    assert np.linalg.norm(uv1 - uv0, axis=1).max() < 0.5
    assert 1000 * np.linalg.norm(joint_positions(rig, out) - joint_positions(rig, base), axis=1).max() < 5.0


@pytest.mark.parametrize("idx,sign", [(R_SHOULDER_Z, 1), (R_SHOULDER_Z, -1), (R_HIP_Z, 1), (R_HIP_Z, -1)])
def test_pose_recovers_five_degrees(rig, template, cam, base, idx, sign):
    target = base.copy()
    target.theta[idx] += sign * np.deg2rad(5)
    out, rep = refine_pose(base, template, rig, cam, silhouette(template, rig, target, cam))
    assert abs(np.rad2deg(out.theta[idx] - target.theta[idx])) < 1.0
    assert all(after <= before for before, after in rep.objectives)
    starts = [b for b, _ in rep.objectives]
    assert all(b <= a for a, b in zip(starts, starts[1:]))
    lo, hi = rig.param_bounds()
    assert np.all(out.vector() >= lo) and np.all(out.vector() <= hi)


def test_pose_stabilisation_dominates(rig, template, cam, base):
    target = base.copy()
    target.theta[R_SHOULDER_Z] += np.deg2rad(5)
    out, _ = refine_pose(base, template, rig, cam, silhouette(template, rig, target, cam),
                         RefinementConfig(w_stab=1e6))
    moved = np.linalg.norm(joint_positions(rig, out) - joint_positions(rig, base), axis=1)
    assert 1000 * moved.max() < 0.1


def test_pose_without_correspondences(rig, template, cam, base):
    empty = Contour(np.zeros((0, 2)), np.zeros((0, 2)))
    out, rep = refine_pose(base, template, rig, cam, empty)
    assert rep.flagged
    assert np.array_equal(out.vector(), base.vector())


# ---------------------------------------------------------------- surface refinement

@pytest.fixture(scope="module")
def posed(rig, template, base):
    return skin_mesh(template, rig, base)


def test_surface_fixed_point(posed, template, cam):
    g = build_graph(posed, template.triangles, 300)
    sil = extract_contour(render_mask(posed, template.triangles, cam))
    out, rep = refine_surface(g, sil, cam, RefinementConfig(graph_nodes=300))
    p0, _ = project_points(cam, posed)
    p1, _ = project_points(cam, out)
    assert np.linalg.norm(p1 - p0, axis=1).max() < 1.5
    assert mask_iou(render_mask(out, template.triangles, cam),
                    render_mask(posed, template.triangles, cam)) > 0.99


def test_surface_rigidity_dominates(posed, template, cam):
    from monocap.meshes import vertex_normals

    n = vertex_normals(posed, template.triangles)
    target = posed + 0.03 * n
    g = build_graph(posed, template.triangles, 300)
    sil = extract_contour(render_mask(target, template.triangles, cam))
    out, _ = refine_surface(g, sil, cam, RefinementConfig(graph_nodes=300, w_arap=(1e6, 1e6)))
    assert 1000 * np.linalg.norm(out - posed, axis=1).max() < 0.1


def test_surface_without_correspondences(posed, template, cam):
    g = build_graph(posed, template.triangles, 300)
    out, rep = refine_surface(g, Contour(np.zeros((0, 2)), np.zeros((0, 2))), cam)
    assert rep.flagged
    assert np.array_equal(out, posed)


def test_cached_graph_reanchors(posed, template):
    cfg = RefinementConfig(graph_nodes=300, rebuild_graph_per_frame=False)
    g0 = surface_graph(posed, template.triangles, cfg)
    g0.translations[:] = 1.0
    moved = posed + [0.1, 0.0, 0.0]
    g1 = surface_graph(moved, template.triangles, cfg, cached=g0)
    assert np.array_equal(g1.node_vertex, g0.node_vertex)
    assert np.array_equal(g1.canonical, moved)
    assert not g1.translations.any()


# ---------------------------------------------------------------- smoothing

def test_smooth_constant_and_ramp():
    const = np.full((9, 4, 3), 2.5)
    assert np.allclose(temporal_smooth(const), const)
    ramp = np.arange(12, dtype=float)[:, None, None] * np.ones((1, 2, 3))
    assert np.allclose(temporal_smooth(ramp), ramp)


def test_smooth_impulse():
    x = np.zeros((11, 1))
    x[5] = 1.0
    out = temporal_smooth(x, 5)
    assert np.allclose(out[3:8, 0], 0.2)
    assert np.allclose(np.delete(out[:, 0], range(3, 8)), 0)


def test_smooth_shrinking_window_at_ends():
    x = np.array([[0.0], [3.0], [6.0], [30.0], [0.0]])
    out = temporal_smooth(x, 5)
    assert out[0, 0] == 0.0
    assert out[1, 0] == pytest.approx(3.0)
    assert out[2, 0] == pytest.approx(39.0 / 5)
    assert out[4, 0] == 0.0


def test_smooth_rejects_even_window():
    with pytest.raises(RefineError):
        temporal_smooth(np.zeros((5, 2)), 4)


# ---------------------------------------------------------------- second pass

def test_second_pass_bypass_with_user_mask(rig, template, cam, base):
    user = np.zeros((cam.height, cam.width), bool)
    user[100:200, 100:200] = True
    mask, tm = second_pass_segmentation(None, None, rig, template, base, cam, user_mask=user)
    assert tm is None and np.array_equal(mask, user)


def test_second_pass_recovers_rendered_silhouette(rig, template, cam, base):
    gt = render_mask(skin_mesh(template, rig, base), template.triangles, cam)
    rng = np.random.default_rng(0)
    img = np.where(gt[..., None], [200, 60, 50], [40, 110, 190]).astype(float)
    img += rng.normal(0, 5, img.shape)
    from monocap.segment import GrabCutParams
    mask, tm = second_pass_segmentation(img, None, rig, template, base, cam,
                                        params=GrabCutParams(k=2, iters=2))
    assert tm is not None
    assert mask_iou(mask, gt) > 0.98
