"""Batch-based skeleton pose estimation.

The batch parameter vector is frame-major: ``x[f * P:(f + 1) * P]`` is the
33-vector of frame ``f`` in the batch. Metric residuals (3D joint
distances, root translation in the DCT prior) are multiplied by
``length_scale`` so that they are measured in millimetres by default.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .detections import FrameDetections, pck_gate
from .kinematics import (Camera, SkeletonPose, SkeletonRig, joint_jacobian_batch,
                         joint_positions_batch, project_points)
from .rotations import quat_slerp, quat_to_rotvec, rotvec_to_quat
from .solver import BoxConstraints, LMOptions, ResidualBlock, lm_minimize

log = logging.getLogger(__name__)

LENGTH_SCALE = 1000.0


class BatchError(ValueError):
    pass


@dataclass
class LambdaWeights:
    translation: float = 1.0
    rotation: float = 600.0
    angles: float = 600.0

    def vector(self, angle_count: int = 27) -> np.ndarray:
        lam = np.concatenate([np.full(3, self.translation), np.full(3, self.rotation),
                              np.full(angle_count, self.angles)])
        if np.any(lam <= 0):
            raise ValueError("lambda weights must be positive")
        return lam


@dataclass
class DctSubspace:
    basis: np.ndarray      # (K, n), orthonormal rows
    projector: np.ndarray  # (n, n), I - basis^T basis

    @property
    def length(self) -> int:
        return self.basis.shape[1]


def dct_basis(batch_len: int, K: int = 8) -> DctSubspace:
    """The ``K`` lowest-frequency orthonormal DCT-II rows and their nullspace projector."""
    if batch_len < K:
        raise BatchError(f"batch of {batch_len} frames is shorter than the subspace size {K}")
    n = np.arange(batch_len)
    k = np.arange(K)[:, None]
    basis = np.cos(np.pi * (n + 0.5) * k / batch_len) * np.sqrt(2.0 / batch_len)
    basis[0] = np.sqrt(1.0 / batch_len)
    P = np.eye(batch_len) - basis.T @ basis
    return DctSubspace(basis, 0.5 * (P + P.T))


@dataclass
class PoseWeights:
    w_3d: float = 0.1
    w_d: float = 50.0
    lam: LambdaWeights = field(default_factory=LambdaWeights)
    K: int = 8
    length_scale: float = LENGTH_SCALE


@dataclass
class Batch:
    f_start: int
    f_end: int
    poses: list[SkeletonPose]
    gates: np.ndarray | None = None

    def __post_init__(self):
        if len(self.poses) != self.f_end - self.f_start + 1:
            raise BatchError("batch length does not match its frame range")

    def matrix(self) -> np.ndarray:
        """Stacked parameters S_B, one column per frame."""
        return np.stack([p.vector() for p in self.poses], axis=1)


def poses_to_x(poses) -> np.ndarray:
    return np.concatenate([p.vector() for p in poses])


def x_to_poses(x: np.ndarray, num_params: int) -> list[SkeletonPose]:
    return [SkeletonPose.from_vector(v) for v in x.reshape(-1, num_params)]


# ------------------------------------------------------------------ energies

def _lambda_eff(lam: np.ndarray, length_scale: float) -> np.ndarray:
    lam = lam.copy()
    lam[:3] *= length_scale
    return lam


def residual_d(S: np.ndarray, lam: np.ndarray, sub: DctSubspace,
               length_scale: float = 1.0) -> np.ndarray:
    """Row-major residual of ``Lambda S_B N(DCT) / sqrt(|B|)`` for ``S`` of shape (P, |B|)."""
    n = S.shape[1]
    return ((_lambda_eff(lam, length_scale)[:, None] * S) @ sub.projector / np.sqrt(n)).ravel()


def energy_d(S: np.ndarray, lam: np.ndarray, sub: DctSubspace, length_scale: float = 1.0) -> float:
    """DCT trajectory prior (1/|B|) ||Lambda S_B P||_F^2."""
    r = residual_d(S, lam, sub, length_scale)
    return float(r @ r)


def jacobian_d(num_params: int, lam: np.ndarray, sub: DctSubspace,
               length_scale: float = 1.0) -> sp.csr_matrix:
    """Jacobian of ``residual_d`` w.r.t. the frame-major batch vector."""
    n = sub.length
    lam = _lambda_eff(lam, length_scale)
    P = sub.projector
    p_idx, f_idx, g_idx = np.meshgrid(np.arange(num_params), np.arange(n), np.arange(n),
                                      indexing="ij")
    rows = p_idx * n + f_idx
    cols = g_idx * num_params + p_idx
    vals = lam[p_idx] * P[g_idx, f_idx] / np.sqrt(n)
    keep = vals != 0
    return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])),
                         shape=(num_params * n, num_params * n))


class BatchProblem:
    """Residual blocks of E_2d, E_3d and E_d for one batch.

    ``gates`` holds the per-frame 3D weights w_f.
    """

    def __init__(self, dets: list[FrameDetections], rig: SkeletonRig, cam: Camera,
                 gates=None, weights: PoseWeights | None = None, use_prior: bool = True):
        self.dets = dets
        self.rig = rig
        self.cam = cam
        self.weights = weights or PoseWeights()
        self.n = len(dets)
        self.P = rig.num_params
        self.gates = np.ones(self.n) if gates is None else np.asarray(gates, dtype=float)
        self.mask2d = np.stack([d.conf2d > 0 for d in dets]).astype(float)
        self.mask3d = np.stack([d.conf3d > 0 for d in dets]).astype(float)
        self.d2d = np.stack([d.d2d for d in dets])
        self.d3d = np.stack([d.d3d for d in dets])
        self.sub = dct_basis(self.n, self.weights.K) if use_prior else None
        self.lam = self.weights.lam.vector(rig.angle_count)
        self._cache_key = None
        self._cache = None
        self.clamped = 0

    def _fk(self, x, jacobian=True):
        key = x.tobytes()
        if key != self._cache_key or (jacobian and self._cache[1] is None):
            X = x.reshape(self.n, self.P)
            if jacobian:
                self._cache = joint_jacobian_batch(self.rig, X)
            else:
                self._cache = (joint_positions_batch(self.rig, X), None)
            self._cache_key = key
        return self._cache

    # E_2d -----------------------------------------------------------
    def _scale_2d(self):
        return self.mask2d / np.sqrt(self.n * self.rig.num_joints)

    def residual_2d(self, x):
        pos, _ = self._fk(x, jacobian=False)
        uv, clamped = project_points(self.cam, pos)
        self.clamped = int(np.count_nonzero(clamped))
        return ((uv - self.d2d) * self._scale_2d()[..., None]).ravel()

    def jacobian_2d(self, x):
        pos, J = self._fk(x)
        _, _, dproj = project_points(self.cam, pos, jacobian=True)
        blocks = np.einsum("fjab,fjbp->fjap", dproj, J) * self._scale_2d()[..., None, None]
        return sp.block_diag([b.reshape(-1, self.P) for b in blocks], format="csr")

    # E_3d -----------------------------------------------------------
    def _scale_3d(self):
        L = self.weights.length_scale
        return self.mask3d * (L * np.sqrt(self.gates / (self.n * self.rig.num_joints)))[:, None]

    def residual_3d(self, x):
        pos, _ = self._fk(x, jacobian=False)
        t = x.reshape(self.n, self.P)[:, None, :3]
        return ((pos - (self.d3d + t)) * self._scale_3d()[..., None]).ravel()

    def jacobian_3d(self, x):
        _, J = self._fk(x)
        J = J.copy()
        J[:, :, :, :3] -= np.eye(3)
        blocks = J * self._scale_3d()[..., None, None]
        return sp.block_diag([b.reshape(-1, self.P) for b in blocks], format="csr")

    # E_d ------------------------------------------------------------
    def residual_d(self, x):
        S = x.reshape(self.n, self.P).T
        return residual_d(S, self.lam, self.sub, self.weights.length_scale)

    def jacobian_d(self, x):
        if not hasattr(self, "_jd"):
            self._jd = jacobian_d(self.P, self.lam, self.sub, self.weights.length_scale)
        return self._jd

    def blocks(self, w_d: float | None = None) -> list[ResidualBlock]:
        w = self.weights
        out = [ResidualBlock(self.residual_2d, self.jacobian_2d, 1.0, "E_2d"),
               ResidualBlock(self.residual_3d, self.jacobian_3d, w.w_3d, "E_3d")]
        w_d = w.w_d if w_d is None else w_d
        if self.sub is not None and w_d > 0:
            out.append(ResidualBlock(self.residual_d, self.jacobian_d, w_d, "E_d"))
        return out

    def box(self) -> BoxConstraints:
        lo, hi = self.rig.param_bounds()
        return BoxConstraints(np.tile(lo, self.n), np.tile(hi, self.n))


def energy_2d(poses, dets, rig, cam) -> float:
    r = BatchProblem(dets, rig, cam, use_prior=False).residual_2d(poses_to_x(poses))
    return float(r @ r)


def energy_3d(poses, dets, rig, gates, length_scale: float = 1.0) -> float:
    cam = Camera(1.0, 1.0, 0.0, 0.0, 1, 1)
    prob = BatchProblem(dets, rig, cam, gates, PoseWeights(length_scale=length_scale),
                        use_prior=False)
    r = prob.residual_3d(poses_to_x(poses))
    return float(r @ r)


# ------------------------------------------------------------ initialization

def initial_translation(det: FrameDetections, rig: SkeletonRig, cam: Camera) -> np.ndarray:
    """Root translation from similar triangles.

    Depth is the ratio of the 3D detection spread (or the rest skeleton's, if
    no 3D detections) to the 2D detection spread; x and y back-project the
    root's 2D detection at that depth.
    """
    ok2 = det.conf2d > 0
    ok3 = ok2 & (det.conf3d > 0)
    if ok3.sum() >= 2:
        pts3, pts2 = det.d3d[ok3], det.d2d[ok3]
    else:
        pts3, pts2 = rig.rest_positions[ok2], det.d2d[ok2]
    s3 = np.sqrt(np.mean(np.sum((pts3[:, :2] - pts3[:, :2].mean(0)) ** 2, axis=1)))
    s2 = np.sqrt(np.mean(np.sum(((pts2 - pts2.mean(0)) / [cam.fx, cam.fy]) ** 2, axis=1)))
    if s2 <= 0 or s3 <= 0:
        raise BatchError("degenerate detections for translation initialization")
    z = s3 / s2
    if det.conf2d[0] > 0:
        uv, off = det.d2d[0], np.zeros(2)
    else:
        uv = pts2.mean(0)
        off = (pts3.mean(0) if ok3.sum() >= 2 else np.zeros(3))[:2]
    return np.array([(uv[0] - cam.cx) * z / cam.fx - off[0],
                     (uv[1] - cam.cy) * z / cam.fy - off[1], z])


@dataclass
class InitReport:
    flagged: list[int] = field(default_factory=list)
    messages: dict[int, str] = field(default_factory=dict)


def solve_frame(det: FrameDetections, rig: SkeletonRig, cam: Camera, x0,
                weights: PoseWeights | None = None, gate: float = 1.0,
                opts: LMOptions | None = None):
    """Single-frame E_2d + w_3d E_3d solve from ``x0``."""
    prob = BatchProblem([det], rig, cam, [gate], weights, use_prior=False)
    return lm_minimize(prob.blocks(), np.asarray(x0, float), prob.box(),
                       opts or LMOptions(max_iters=200))


def init_poses(dets: list[FrameDetections], rig: SkeletonRig, cam: Camera,
               weights: PoseWeights | None = None, opts: LMOptions | None = None,
               ) -> tuple[list[SkeletonPose], InitReport]:
    """Independent per-frame solves from the rest pose."""
    weights = weights or PoseWeights()
    report = InitReport()
    out: list[SkeletonPose] = []
    for f, det in enumerate(dets):
        if not np.any(det.conf2d > 0) and not np.any(det.conf3d > 0):
            out.append(SkeletonPose.zeros(rig))
            report.flagged.append(f)
            report.messages[f] = "no detections; rest pose"
            continue
        try:
            x0 = SkeletonPose.zeros(rig)
            x0.t = initial_translation(det, rig, cam)
            x, rep = solve_frame(det, rig, cam, x0.vector(), weights, 1.0, opts)
            out.append(SkeletonPose.from_vector(x))
        except Exception as e:  # noqa: BLE001 - any per-frame failure falls back
            prev = out[-1].copy() if out else SkeletonPose.zeros(rig)
            out.append(prev)
            report.flagged.append(f)
            report.messages[f] = f"solver failed ({e}); previous frame reused"
            log.warning("init frame %d failed: %s", f, e)
    return out, report


def compute_gates(dets, poses, cam, rig, thres_pck: float = 0.4) -> np.ndarray:
    return np.array([pck_gate(d, cam, p.t, thres_pck, rig=rig) for d, p in zip(dets, poses)],
                    dtype=float)


# -------------------------------------------------------------- batch solve

@dataclass
class BatchReport:
    initial_objective: float
    final_objective: float
    iterations: int
    converged: bool
    termination: str


def batch_objective(batch: Batch, dets, rig, cam, weights: PoseWeights | None = None) -> float:
    prob = BatchProblem(dets, rig, cam, batch.gates, weights)
    x = poses_to_x(batch.poses)
    return float(sum(b.weight * np.sum(b.residual(x) ** 2) for b in prob.blocks()))


def optimize_batch(batch: Batch, dets: list[FrameDetections], rig: SkeletonRig, cam: Camera,
                   weights: PoseWeights | None = None, opts: LMOptions | None = None,
                   ) -> tuple[Batch, BatchReport]:
    """Joint constrained solve of E_2d + w_3d E_3d + w_d E_d over the batch.

    ``dets`` are the detections of the batch frames only.
    """
    weights = weights or PoseWeights()
    if len(dets) != len(batch.poses):
        raise BatchError("one detection record per batch frame required")
    prob = BatchProblem(dets, rig, cam, batch.gates, weights)
    x0 = poses_to_x(batch.poses)
    x, rep = lm_minimize(prob.blocks(), x0, prob.box(),
                         opts or LMOptions(max_iters=50, function_tol=1e-7))
    out = Batch(batch.f_start, batch.f_end, x_to_poses(x, rig.num_params), batch.gates)
    return out, BatchReport(rep.initial_objective, rep.final_objective, rep.iterations,
                            rep.converged, rep.termination)


# -------------------------------------------------------- partition / blend

def partition(num_frames: int, size: int = 50, overlap: int = 10, K: int = 8
              ) -> list[tuple[int, int]]:
    """Inclusive frame ranges of overlapping batches covering ``[0, num_frames)``."""
    if num_frames < K:
        raise BatchError(f"{num_frames} frames cannot fill a batch of at least {K}")
    if overlap >= size:
        raise BatchError("overlap must be smaller than the batch size")
    out, start = [], 0
    while True:
        end = min(start + size - 1, num_frames - 1)
        if end - start + 1 < K:
            start = end - K + 1
        out.append((start, end))
        if end == num_frames - 1:
            return out
        start = end - overlap + 1


def _blend(a: SkeletonPose, b: SkeletonPose, w: float) -> SkeletonPose:
    """``w * a + (1 - w) * b``; root rotation by shortest-arc slerp."""
    if w == 1.0:
        return a.copy()
    if w == 0.0:
        return b.copy()
    t = w * a.t + (1.0 - w) * b.t
    theta = w * a.theta + (1.0 - w) * b.theta
    if np.array_equal(a.r, b.r):
        r = a.r.copy()
    else:
        q = quat_slerp(rotvec_to_quat(a.r), rotvec_to_quat(b.r), 1.0 - w)
        r = quat_to_rotvec(q)
        # pick the rotation-vector branch closest to the linear blend
        ang = np.linalg.norm(r)
        ref = w * a.r + (1.0 - w) * b.r
        if ang > 1e-12:
            axis = r / ang
            cands = [r, r - 2 * np.pi * axis, r + 2 * np.pi * axis]
            r = min(cands, key=lambda c: np.linalg.norm(c - ref))
    return SkeletonPose(t, r, theta)


def blend_weight(k: int, length: int) -> float:
    """Weight of the earlier batch at the k-th overlap frame (1 -> 0)."""
    if length <= 1:
        return 1.0
    return (length - 1 - k) / (length - 1)


def partition_and_blend(num_frames: int, batches: list[Batch]) -> list[SkeletonPose]:
    """Merge per-batch results; overlaps ramp linearly from the earlier batch to the later."""
    out: list[SkeletonPose | None] = [None] * num_frames
    covered_to = -1
    for b in sorted(batches, key=lambda b: b.f_start):
        if b.f_start > covered_to + 1:
            raise BatchError(f"coverage gap at frame {covered_to + 1}")
        lo, hi = b.f_start, min(covered_to, b.f_end)
        length = hi - lo + 1
        for f in range(b.f_start, b.f_end + 1):
            pose = b.poses[f - b.f_start]
            if f <= covered_to:
                out[f] = _blend(out[f], pose, blend_weight(f - lo, length))
            else:
                out[f] = pose.copy()
        covered_to = max(covered_to, b.f_end)
    if covered_to < num_frames - 1:
        raise BatchError(f"coverage gap at frame {covered_to + 1}")
    return out


def estimate_poses(dets: list[FrameDetections], rig: SkeletonRig, cam: Camera,
                   weights: PoseWeights | None = None, batch_size: int = 50, overlap: int = 10,
                   thres_pck: float = 0.4, gating: bool = True, opts: LMOptions | None = None,
                   init: list[SkeletonPose] | None = None, map_fn=map):
    """init -> gate -> per-batch solve -> blend. Returns a dict of stage outputs."""
    weights = weights or PoseWeights()
    init_report = InitReport()
    if init is None:
        init, init_report = init_poses(dets, rig, cam, weights)
    gates = compute_gates(dets, init, cam, rig, thres_pck) if gating else np.ones(len(dets))
    ranges = partition(len(dets), batch_size, overlap, weights.K)

    def solve(rng):
        s, e = rng
        b = Batch(s, e, [p.copy() for p in init[s:e + 1]], gates[s:e + 1])
        return optimize_batch(b, dets[s:e + 1], rig, cam, weights, opts)

    results = list(map_fn(solve, ranges))
    batches = [r[0] for r in results]
    blended = partition_and_blend(len(dets), batches)
    return {"init": init, "init_report": init_report, "gates": gates, "batches": batches,
            "batch_reports": [r[1] for r in results], "poses": blended}


# -------------------------------------------------------------- pose files

def save_poses(path, poses: list[SkeletonPose]) -> tuple[Path, Path]:
    """Write ``path`` (JSON array of 33-vectors) and ``path.bin`` (little-endian float64, N x 33)."""
    path = Path(path)
    X = np.stack([p.vector() for p in poses]) if poses else np.zeros((0, 0))
    path.write_text(json.dumps([[float(v) for v in row] for row in X]) + "\n")
    sidecar = path.with_suffix(path.suffix + ".bin")
    sidecar.write_bytes(X.astype("<f8").tobytes(order="C"))
    return path, sidecar


def load_poses(path) -> list[SkeletonPose]:
    rows = json.loads(Path(path).read_text())
    return [SkeletonPose.from_vector(np.asarray(r, dtype=float)) for r in rows]


def load_poses_bin(path, num_params: int) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f8").reshape(-1, num_params).copy()
