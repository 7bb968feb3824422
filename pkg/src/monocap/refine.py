"""Silhouette-driven pose refinement, deformation-graph surface refinement and smoothing."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .deformgraph import (DeformGraph, apply_graph, arap_jacobian, arap_residual, build_graph,
                          graph_vertex_jacobian)
from .kinematics import (ActorTemplate, Camera, SkeletonPose, SkeletonRig, joint_jacobian,
                         joint_positions, project_points, skin_jacobian, skin_mesh)
from .raster import (Contour, CorrespondenceSet, edge_offset, find_correspondences,
                     model_boundary_vertices, render_mask, render_skeleton_mask)
from .solver import BoxConstraints, LMOptions, ResidualBlock, lm_minimize, objective

log = logging.getLogger(__name__)


class RefineError(ValueError):
    pass


@dataclass
class RefinementConfig:
    w_stab: float = 0.06
    pose_iters: int = 3
    w_arap: tuple = (0.6, 0.2)
    window: int = 5
    max_dist: float = 30.0
    max_normal_angle: float = 45.0
    graph_nodes: int = 1000
    rebuild_graph_per_frame: bool = True
    lm_iters: int = 20
    lm_function_tol: float = 1e-3
    # metric residuals are expressed in pixels at the subject's depth unless set
    stab_scale: float | None = None
    arap_scale: float | None = None

    def __post_init__(self):
        self.w_arap = tuple(float(w) for w in self.w_arap)
        if self.w_stab <= 0 or any(w <= 0 for w in self.w_arap):
            raise RefineError("refinement weights must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise RefineError(f"smoothing window must be odd, got {self.window}")
        if self.pose_iters < 0 or self.graph_nodes < 1:
            raise RefineError("invalid iteration or node count")

    @property
    def surface_iters(self) -> int:
        return len(self.w_arap)


@dataclass
class RefineReport:
    flagged: bool = False
    correspondences: list[int] = field(default_factory=list)
    # objective on each iteration's fixed correspondences, before and after the solve
    objectives: list[tuple[float, float]] = field(default_factory=list)


# ---------------------------------------------------------------- contour term

def contour_residual(points2d: np.ndarray, corr: CorrespondenceSet) -> np.ndarray:
    """Point-to-line distances ``n_k . (p_k - s_k) / sqrt(|S|)``.

    ``s_k`` is the silhouette pixel moved out to the expected outline position.
    """
    d = np.einsum("ka,ka->k", corr.normals, points2d - corr.targets) - edge_offset(corr.normals)
    return d / np.sqrt(len(corr))


def _contour_jacobian(cam: Camera, P: np.ndarray, dP: np.ndarray, corr: CorrespondenceSet):
    """Chain rule through the projection; ``dP`` is (n, 3, p) dense or (3n, p) sparse."""
    _, _, Jp = project_points(cam, P, jacobian=True)
    row = np.einsum("ka,kab->kb", corr.normals, Jp) / np.sqrt(len(corr))   # (n, 3)
    if sp.issparse(dP):
        n = len(P)
        A = sp.csr_matrix((row.ravel(), (np.repeat(np.arange(n), 3), np.arange(3 * n))),
                          shape=(n, 3 * n))
        return A @ dP
    return np.einsum("kb,kbp->kp", row, dP)


def pose_contour_block(template, rig, cam, corr: CorrespondenceSet) -> ResidualBlock:
    ids = corr.vertex_ids

    def res(x):
        P = skin_mesh(template, rig, SkeletonPose.from_vector(x), ids)
        uv, _ = project_points(cam, P)
        return contour_residual(uv, corr)

    def jac(x):
        P, dP = skin_jacobian(template, rig, SkeletonPose.from_vector(x), ids)
        return _contour_jacobian(cam, P, dP, corr)

    return ResidualBlock(res, jac, 1.0, "contour")


def pixels_per_metre(cam: Camera, depth: float) -> float:
    return 0.5 * (cam.fx + cam.fy) / max(float(depth), 1e-3)


def stabilization_block(rig, anchor: SkeletonPose, weight: float, length_scale: float
                        ) -> ResidualBlock:
    """Joint positions held near the anchor pose, ``sum ||J_i - J^_i||^2 / N_d``."""
    ref = joint_positions(rig, anchor)
    s = length_scale / np.sqrt(rig.num_joints)

    def res(x):
        return s * (joint_positions(rig, SkeletonPose.from_vector(x)) - ref).ravel()

    def jac(x):
        _, J = joint_jacobian(rig, SkeletonPose.from_vector(x))
        return s * J.reshape(-1, rig.num_params)

    return ResidualBlock(res, jac, weight, "stabilization")


def refine_pose(pose: SkeletonPose, template: ActorTemplate, rig: SkeletonRig, cam: Camera,
                silhouette: Contour, cfg: RefinementConfig | None = None
                ) -> tuple[SkeletonPose, RefineReport]:
    """ICP on the silhouette: match model boundary vertices, then solve E_con + w_stab E_stab.

    The stabilisation anchor is the input pose for every iteration. Without
    any correspondence the input pose is returned and the report flagged.
    """
    cfg = cfg or RefinementConfig()
    report = RefineReport()
    lo, hi = rig.param_bounds()
    box = BoxConstraints(lo, hi)
    x = box.project(pose.vector())
    scale = cfg.stab_scale if cfg.stab_scale is not None else pixels_per_metre(cam, pose.t[2])
    stab = stabilization_block(rig, pose, cfg.w_stab, scale)
    for _ in range(cfg.pose_iters):
        verts = skin_mesh(template, rig, SkeletonPose.from_vector(x))
        boundary = model_boundary_vertices(verts, template.triangles, cam)
        corr = find_correspondences(boundary, silhouette, cfg.max_dist, cfg.max_normal_angle)
        report.correspondences.append(len(corr))
        if len(corr) == 0:
            report.flagged = True
            log.warning("pose refinement: no silhouette correspondences")
            break
        blocks = [pose_contour_block(template, rig, cam, corr), stab]
        before = objective(blocks, x)
        x, _ = lm_minimize(blocks, x, box, LMOptions(max_iters=cfg.lm_iters, function_tol=cfg.lm_function_tol))
        report.objectives.append((before, objective(blocks, x)))
    return SkeletonPose.from_vector(x), report


# ---------------------------------------------------------------- surface

def graph_contour_block(graph: DeformGraph, cam: Camera, corr: CorrespondenceSet) -> ResidualBlock:
    ids = corr.vertex_ids

    def res(x):
        graph.set_params(x)
        uv, _ = project_points(cam, apply_graph(graph, vertex_ids=ids))
        return contour_residual(uv, corr)

    def jac(x):
        graph.set_params(x)
        P = apply_graph(graph, vertex_ids=ids)
        return _contour_jacobian(cam, P, graph_vertex_jacobian(graph, ids), corr)

    return ResidualBlock(res, jac, 1.0, "contour")


def arap_block(graph: DeformGraph, weight: float, length_scale: float) -> ResidualBlock:
    def res(x):
        graph.set_params(x)
        return arap_residual(graph, length_scale)

    def jac(x):
        graph.set_params(x)
        return arap_jacobian(graph, length_scale)

    return ResidualBlock(res, jac, weight, "arap")


def refine_surface(graph: DeformGraph, silhouette: Contour, cam: Camera,
                   cfg: RefinementConfig | None = None) -> tuple[np.ndarray, RefineReport]:
    """Two ICP rounds of E_con + w_arap E_arap over all node rotations and translations.

    Returns the deformed vertices; ``graph`` is left holding the solution.
    Vertices without correspondences follow only through the ARAP coupling.
    """
    cfg = cfg or RefinementConfig()
    report = RefineReport()
    scale = (cfg.arap_scale if cfg.arap_scale is not None
             else pixels_per_metre(cam, graph.canonical[:, 2].mean()))
    for w in cfg.w_arap:
        verts = apply_graph(graph)
        boundary = model_boundary_vertices(verts, graph.triangles, cam)
        corr = find_correspondences(boundary, silhouette, cfg.max_dist, cfg.max_normal_angle)
        report.correspondences.append(len(corr))
        if len(corr) == 0:
            report.flagged = True
            log.warning("surface refinement: no silhouette correspondences")
            break
        blocks = [graph_contour_block(graph, cam, corr), arap_block(graph, w, scale)]
        x0 = graph.params()
        before = objective(blocks, x0)
        x, _ = lm_minimize(blocks, x0, None, LMOptions(max_iters=cfg.lm_iters, function_tol=cfg.lm_function_tol))
        graph.set_params(x)
        report.objectives.append((before, objective(blocks, x)))
    return apply_graph(graph), report


def surface_graph(vertices: np.ndarray, triangles: np.ndarray, cfg: RefinementConfig,
                  cached: DeformGraph | None = None) -> DeformGraph:
    """Graph for this frame: rebuilt, or the cached one re-anchored on these vertices."""
    if cfg.rebuild_graph_per_frame or cached is None:
        return build_graph(vertices, triangles, cfg.graph_nodes)
    g = DeformGraph(np.asarray(vertices, dtype=float).copy(), cached.triangles, cached.node_vertex,
                    cached.edges, cached.radii, cached.influence,
                    np.zeros_like(cached.rotations), np.zeros_like(cached.translations))
    return g


def temporal_smooth(sequence: np.ndarray, window: int = 5) -> np.ndarray:
    """Centred moving average along axis 0; near the ends the window shrinks symmetrically."""
    X = np.asarray(sequence, dtype=float)
    if window < 1 or window % 2 == 0:
        raise RefineError(f"smoothing window must be odd, got {window}")
    n = len(X)
    csum = np.concatenate([np.zeros((1,) + X.shape[1:]), np.cumsum(X, axis=0)])
    out = np.empty_like(X)
    for f in range(n):
        h = min(window // 2, f, n - 1 - f)
        out[f] = (csum[f + h + 1] - csum[f - h]) / (2 * h + 1)
    return out


# ---------------------------------------------------------------- second segmentation pass

def model_trimap(rig, template, pose, cam, erosion_radius=None, dilation_radius=None,
                 thickness: float = 3.0):
    """Trimap from the skeleton and skinned-mesh renderings of ``pose``."""
    from .segment import build_trimap

    R = render_skeleton_mask(rig, pose, cam, thickness)
    M = render_mask(skin_mesh(template, rig, pose), template.triangles, cam)
    return build_trimap(R, M, erosion_radius, dilation_radius)


def second_pass_segmentation(frame, prev_frame, rig, template, pose, cam, params=None,
                             erosion_radius=None, dilation_radius=None, user_mask=None):
    """Re-segment ``frame`` with a trimap from the refined pose.

    With a user-supplied mask the hook does nothing and returns that mask.
    Returns ``(mask, trimap)``; the trimap is None in bypass mode.
    """
    from .segment import grabcut, motion_weights

    if user_mask is not None:
        return np.asarray(user_mask, dtype=bool), None
    tm = model_trimap(rig, template, pose, cam, erosion_radius, dilation_radius)
    motion = motion_weights(frame, prev_frame)
    return grabcut(frame, tm, motion, params).mask, tm
