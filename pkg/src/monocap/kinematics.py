"""Skeleton, forward kinematics, dual-quaternion skinning and projection.

Poses are flattened as ``[t(3), r(3), theta(n)]`` where ``r`` is the root
rotation vector and ``theta`` the joint angles in rig order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .rotations import (dual_quat_apply, dual_quat_apply_jacobian, hat, hat_batch,
                        matrix_to_quat, quat_mul, right_jacobian_batch,
                        rodrigues_batch)

EPS_DEPTH = 1e-6
ROOT_DOF = 6


class RigError(ValueError):
    pass


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int
    offset: np.ndarray
    axes: np.ndarray  # (k, 3) unit vectors in the joint's local frame


@dataclass
class SkeletonRig:
    joints: list[Joint]
    angle_bounds: np.ndarray  # (angle_count, 2)

    def __post_init__(self):
        self.angle_bounds = np.asarray(self.angle_bounds, dtype=float).reshape(-1, 2)
        self._validate()
        starts = np.cumsum([0] + [len(j.axes) for j in self.joints])
        self.angle_slices = [slice(int(a), int(b)) for a, b in zip(starts[:-1], starts[1:])]
        # parameter -> owning joint (-1 for root dofs)
        owner = [-1] * ROOT_DOF
        for j, sl in enumerate(self.angle_slices):
            owner += [j] * (sl.stop - sl.start)
        self.param_owner = np.array(owner)
        self.ancestors = []
        for j, joint in enumerate(self.joints):
            chain, p = {j}, joint.parent
            while p >= 0:
                chain.add(p)
                p = self.joints[p].parent
            self.ancestors.append(chain)
        # affects[j, p]: parameter p moves the frame of joint j
        n = self.num_params
        self.affects = np.zeros((self.num_joints, n), dtype=bool)
        for j in range(self.num_joints):
            for p in range(n):
                o = self.param_owner[p]
                self.affects[j, p] = o < 0 or o in self.ancestors[j]
        self.rest_positions = forward_kinematics(self, SkeletonPose.zeros(self)).positions

    def _validate(self):
        roots = [i for i, j in enumerate(self.joints) if j.parent < 0]
        if roots != [0]:
            raise RigError("rig must have exactly one root and it must be joint 0")
        for i, j in enumerate(self.joints):
            if i > 0 and not 0 <= j.parent < i:
                raise RigError(f"joint {j.name!r}: parent {j.parent} must precede it")
            for a in j.axes:
                if abs(np.linalg.norm(a) - 1.0) > 1e-9:
                    raise RigError(f"joint {j.name!r}: rotation axis {a} is not unit length")
        count = sum(len(j.axes) for j in self.joints)
        if len(self.angle_bounds) != count:
            raise RigError(f"{len(self.angle_bounds)} angle bounds for {count} angles")
        if np.any(self.angle_bounds[:, 0] > self.angle_bounds[:, 1]):
            raise RigError("angle bound with min > max")

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @property
    def angle_count(self) -> int:
        return len(self.angle_bounds)

    @property
    def num_params(self) -> int:
        return ROOT_DOF + self.angle_count

    @property
    def names(self) -> list[str]:
        return [j.name for j in self.joints]

    @property
    def parents(self) -> np.ndarray:
        return np.array([j.parent for j in self.joints])

    @property
    def bone_lengths(self) -> np.ndarray:
        """Length of the bone ending at each joint (0 for the root)."""
        out = np.array([np.linalg.norm(j.offset) for j in self.joints])
        out[0] = 0.0
        return out

    def index(self, name: str) -> int:
        return self.names.index(name)

    def param_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(self.num_params, -np.inf)
        hi = np.full(self.num_params, np.inf)
        lo[ROOT_DOF:] = self.angle_bounds[:, 0]
        hi[ROOT_DOF:] = self.angle_bounds[:, 1]
        return lo, hi


@dataclass
class SkeletonPose:
    t: np.ndarray
    r: np.ndarray
    theta: np.ndarray

    @classmethod
    def zeros(cls, rig: SkeletonRig) -> "SkeletonPose":
        return cls(np.zeros(3), np.zeros(3), np.zeros(rig.angle_count))

    @classmethod
    def from_vector(cls, x) -> "SkeletonPose":
        x = np.asarray(x, dtype=float)
        return cls(x[:3].copy(), x[3:6].copy(), x[6:].copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.r, self.theta])

    def copy(self) -> "SkeletonPose":
        return SkeletonPose.from_vector(self.vector())


@dataclass
class ActorTemplate:
    vertices: np.ndarray   # (V, 3) rest pose
    triangles: np.ndarray  # (T, 3)
    skin_weights: np.ndarray  # (V, num_joints), dense

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.skin_weights = np.asarray(self.skin_weights, dtype=float)
        w = self.skin_weights
        if w.shape[0] != len(self.vertices):
            raise RigError("one skinning weight row per vertex required")
        if np.any(w < 0):
            raise RigError("negative skinning weight")
        bad = np.flatnonzero(np.abs(w.sum(axis=1) - 1.0) > 1e-6)
        if len(bad):
            raise RigError(f"skinning weights of vertex {bad[0]} do not sum to 1")


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("camera focal lengths and image size must be positive")

    def scaled(self, s: float) -> "Camera":
        return Camera(self.fx * s, self.fy * s, self.cx * s, self.cy * s,
                      int(round(self.width * s)), int(round(self.height * s)))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass
class FKResult:
    rotations: np.ndarray  # (J, 3, 3) world rotation of each joint frame
    positions: np.ndarray  # (J, 3)
    # per-parameter world twists: a change dp moves a point x of an affected
    # frame by (omega x x + v) dp
    omega: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)


def _check_dim(rig: SkeletonRig, pose: SkeletonPose):
    if len(pose.t) != 3 or len(pose.r) != 3 or len(pose.theta) != rig.angle_count:
        raise RigError(f"pose has {len(pose.theta)} angles, rig expects {rig.angle_count}")


def _cross(a, b):
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def forward_kinematics_batch(rig: SkeletonRig, X: np.ndarray, twists: bool = False) -> FKResult:
    """Forward kinematics of F pose vectors at once; arrays gain a leading F axis."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != rig.num_params:
        raise RigError(f"pose has {X.shape[1] - ROOT_DOF} angles, rig expects {rig.angle_count}")
    F = len(X)
    nj = rig.num_joints
    n = rig.num_params
    rots = np.empty((F, nj, 3, 3))
    pos = np.empty((F, nj, 3))
    omega = np.zeros((F, n, 3)) if twists else None
    v = np.zeros((F, n, 3)) if twists else None
    t, r, theta = X[:, :3], X[:, 3:6], X[:, ROOT_DOF:]
    R_root = rodrigues_batch(r)
    if twists:
        v[:, :3] = np.eye(3)
        w = np.einsum("fab,fbc->fca", R_root, right_jacobian_batch(r))
        omega[:, 3:6] = w
        v[:, 3:6] = _cross(t[:, None, :], w)
    for j, joint in enumerate(rig.joints):
        if joint.parent < 0:
            R = R_root
            p = t + R_root @ joint.offset
        else:
            R = rots[:, joint.parent]
            p = pos[:, joint.parent] + R @ joint.offset
        sl = rig.angle_slices[j]
        for k, axis in enumerate(joint.axes):
            idx = sl.start + k
            if twists:
                w = R @ axis
                omega[:, ROOT_DOF + idx] = w
                v[:, ROOT_DOF + idx] = _cross(p, w)
            a = theta[:, idx]
            K = hat(axis)
            Ra = (np.eye(3) + np.sin(a)[:, None, None] * K
                  + (1.0 - np.cos(a))[:, None, None] * (K @ K))
            R = R @ Ra
        rots[:, j] = R
        pos[:, j] = p
    return FKResult(rots, pos, omega, v)


def forward_kinematics(rig: SkeletonRig, pose: SkeletonPose, twists: bool = False) -> FKResult:
    """Per-joint world transforms. With ``twists`` also the parameter twists."""
    _check_dim(rig, pose)
    fk = forward_kinematics_batch(rig, pose.vector()[None], twists)
    return FKResult(fk.rotations[0], fk.positions[0],
                    None if fk.omega is None else fk.omega[0], None if fk.v is None else fk.v[0])


def joint_positions(rig: SkeletonRig, pose: SkeletonPose) -> np.ndarray:
    return forward_kinematics(rig, pose).positions


def joint_positions_batch(rig: SkeletonRig, X: np.ndarray) -> np.ndarray:
    return forward_kinematics_batch(rig, X).positions


def joint_jacobian_batch(rig: SkeletonRig, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Joint positions (F, J, 3) and their derivatives w.r.t. each pose vector (F, J, 3, P)."""
    fk = forward_kinematics_batch(rig, X, twists=True)
    # d p_j / d param = omega x p_j + v, for params that move joint j's parent frame
    d = _cross(fk.omega[:, None, :, :], fk.positions[:, :, None, :]) + fk.v[:, None, :, :]
    d *= rig.affects[None, :, :, None]
    return fk.positions, np.swapaxes(d, 2, 3)


def joint_jacobian(rig: SkeletonRig, pose: SkeletonPose) -> tuple[np.ndarray, np.ndarray]:
    """Joint positions (J, 3) and their derivative w.r.t. the pose vector (J, 3, P)."""
    _check_dim(rig, pose)
    pos, J = joint_jacobian_batch(rig, pose.vector()[None])
    return pos[0], J[0]


def _skin_dual_quats(rig: SkeletonRig, fk: FKResult) -> np.ndarray:
    # bone transform maps rest-pose points: x -> R_j (x - rest_j) + p_j
    nj = rig.num_joints
    dq = np.empty((nj, 8))
    for j in range(nj):
        qr = matrix_to_quat(fk.rotations[j])
        tr = fk.positions[j] - fk.rotations[j] @ rig.rest_positions[j]
        dq[j, :4] = qr
        dq[j, 4:] = 0.5 * quat_mul(np.concatenate([[0.0], tr]), qr)
    return dq


def _signed_weights(weights: np.ndarray, dq: np.ndarray) -> np.ndarray:
    # flip every bone quaternion into the hemisphere of the vertex's dominant bone
    dominant = np.argmax(weights, axis=1)
    dots = dq[:, :4] @ dq[:, :4].T
    signs = np.where(dots[dominant] < 0.0, -1.0, 1.0)
    return weights * signs


def skin_mesh(template: ActorTemplate, rig: SkeletonRig, pose: SkeletonPose,
              vertex_ids=None) -> np.ndarray:
    """Dual-quaternion skinned vertex positions."""
    fk = forward_kinematics(rig, pose)
    dq = _skin_dual_quats(rig, fk)
    W = template.skin_weights if vertex_ids is None else template.skin_weights[vertex_ids]
    V = template.vertices if vertex_ids is None else template.vertices[vertex_ids]
    blend = _signed_weights(W, dq) @ dq
    return dual_quat_apply(blend, V)


def skin_jacobian(template: ActorTemplate, rig: SkeletonRig, pose: SkeletonPose,
                  vertex_ids) -> tuple[np.ndarray, np.ndarray]:
    """Skinned positions of ``vertex_ids`` (n, 3) and d/d pose (n, 3, P)."""
    fk = forward_kinematics(rig, pose, twists=True)
    dq = _skin_dual_quats(rig, fk)
    n = rig.num_params
    # d q_j / d p = 1/2 Xi_p (x) q_j, Xi_p = (0, omega) + eps (0, v)
    xi_r = np.concatenate([np.zeros((n, 1)), fk.omega], axis=1)
    xi_d = np.concatenate([np.zeros((n, 1)), fk.v], axis=1)
    qr = dq[:, None, :4]
    qd = dq[:, None, 4:]
    ddq = np.empty((rig.num_joints, n, 8))
    ddq[..., :4] = 0.5 * quat_mul(xi_r[None], qr)
    ddq[..., 4:] = 0.5 * (quat_mul(xi_r[None], qd) + quat_mul(xi_d[None], qr))
    ddq *= rig.affects[:, :, None]

    W = _signed_weights(template.skin_weights[vertex_ids], dq)
    V = template.vertices[vertex_ids]
    blend = W @ dq
    dblend = np.einsum("vj,jpk->vpk", W, ddq)
    x = dual_quat_apply(blend, V)
    dx_db = dual_quat_apply_jacobian(blend, V)
    return x, np.einsum("vck,vpk->vcp", dx_db, dblend)


def project(cam: Camera, p) -> np.ndarray:
    """Perspective projection of one camera-space point to pixels."""
    p = np.asarray(p, dtype=float)
    if p[2] <= EPS_DEPTH:
        raise ProjectionError(f"point {p} is behind the camera")
    return np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])


def project_points(cam: Camera, P: np.ndarray, jacobian: bool = False):
    """Vectorised projection; depths are clamped to ``EPS_DEPTH``.

    Returns ``(uv, clamped)`` or ``(uv, clamped, d uv / d P)`` where
    ``clamped`` flags points that were behind the camera.
    """
    P = np.asarray(P, dtype=float)
    z = P[..., 2]
    clamped = z <= EPS_DEPTH
    z = np.where(clamped, EPS_DEPTH, z)
    uv = np.stack([cam.fx * P[..., 0] / z + cam.cx, cam.fy * P[..., 1] / z + cam.cy], axis=-1)
    if not jacobian:
        return uv, clamped
    J = np.zeros(P.shape[:-1] + (2, 3))
    J[..., 0, 0] = cam.fx / z
    J[..., 0, 2] = -cam.fx * P[..., 0] / z ** 2
    J[..., 1, 1] = cam.fy / z
    J[..., 1, 2] = -cam.fy * P[..., 1] / z ** 2
    J[clamped] = 0.0
    return uv, clamped, J


# ---------------------------------------------------------------- file IO

def rig_from_dict(doc: dict) -> SkeletonRig:
    joints, bounds = [], []
    names = [j["name"] for j in doc["joints"]]
    for j in doc["joints"]:
        parent = j["parent"]
        if isinstance(parent, str):
            parent = names.index(parent)
        axes = np.asarray(j.get("axes", []), dtype=float).reshape(-1, 3)
        axes = axes / np.linalg.norm(axes, axis=1, keepdims=True) if len(axes) else axes
        joints.append(Joint(j["name"], int(parent), np.asarray(j["offset"], dtype=float), axes))
        b = j.get("bounds") or [[-np.pi, np.pi]] * len(axes)
        if len(b) != len(axes):
            raise RigError(f"joint {j['name']!r}: {len(b)} bounds for {len(axes)} axes")
        bounds += b
    return SkeletonRig(joints, np.asarray(bounds, dtype=float).reshape(-1, 2))


def rig_to_dict(rig: SkeletonRig) -> dict:
    out = []
    for j, sl in zip(rig.joints, rig.angle_slices):
        out.append({"name": j.name, "parent": j.parent, "offset": j.offset.tolist(),
                    "axes": j.axes.tolist(), "bounds": rig.angle_bounds[sl].tolist()})
    return {"joints": out}


def load_default_rig() -> SkeletonRig:
    text = resources.files("monocap.data").joinpath("default_rig.json").read_text()
    return rig_from_dict(json.loads(text))


def load_rig(path) -> SkeletonRig:
    return rig_from_dict(json.loads(Path(path).read_text()))


def weights_to_sparse(weights: np.ndarray) -> list[list[list]]:
    return [[[int(j), float(w[j])] for j in np.flatnonzero(w)] for w in weights]


def weights_from_sparse(rows, num_vertices: int, rig: SkeletonRig) -> np.ndarray:
    if len(rows) != num_vertices:
        raise RigError(f"{len(rows)} weight rows for {num_vertices} vertices")
    W = np.zeros((num_vertices, rig.num_joints))
    for i, row in enumerate(rows):
        for joint, w in row:
            if isinstance(joint, str):
                if joint not in rig.names:
                    raise RigError(f"vertex {i}: unknown joint {joint!r}")
                joint = rig.index(joint)
            if not 0 <= joint < rig.num_joints:
                raise RigError(f"vertex {i}: unknown joint {joint}")
            W[i, joint] += w
    return W


def save_rig(path, rig: SkeletonRig, weights: np.ndarray | None = None):
    doc = rig_to_dict(rig)
    if weights is not None:
        doc["weights"] = weights_to_sparse(weights)
    Path(path).write_text(json.dumps(doc))


def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(c) for c in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def save_obj(path, vertices: np.ndarray, triangles: np.ndarray | None = None):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=float).tolist()]
    if triangles is not None:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(triangles).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_template(obj_path, rig_path) -> tuple[ActorTemplate, SkeletonRig]:
    """Template mesh from OBJ plus rig and skinning weights from one JSON document."""
    doc = json.loads(Path(rig_path).read_text())
    rig = rig_from_dict(doc)
    V, F = load_obj(obj_path)
    if "weights" not in doc:
        raise RigError(f"{rig_path}: no 'weights' array")
    W = weights_from_sparse(doc["weights"], len(V), rig)
    return ActorTemplate(V, F, W), rig


def load_camera(path) -> Camera:
    d = json.loads(Path(path).read_text())
    return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                  int(d["width"]), int(d["height"]))


def save_camera(path, cam: Camera):
    Path(path).write_text(json.dumps(cam.to_dict()))
