"""Synthetic actor, motion and detection generator used as a ground-truth oracle."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .batchpose import dct_basis
from .detections import FrameDetections
from .kinematics import (ROOT_DOF, ActorTemplate, Camera, SkeletonPose, SkeletonRig,
                         joint_positions, project_points, skin_mesh)

DEFAULT_CAMERA = Camera(600.0, 600.0, 320.0, 240.0, 640, 480)
DETECTOR_SCALE = 0.9  # synthetic "average bone length" normalisation of d3d


class MotionError(ValueError):
    pass


def _segment_distance(P, a, b):
    ab = b - a
    L2 = float(ab @ ab)
    if L2 == 0.0:
        return np.linalg.norm(P - a, axis=-1)
    t = np.clip((P - a) @ ab / L2, 0.0, 1.0)
    return np.linalg.norm(P - (a + t[..., None] * ab), axis=-1)


def _body_capsules(rig: SkeletonRig):
    """(start, end, radius, skinning joint) for the default rig's body parts."""
    pos = rig.rest_positions
    ix = rig.index
    caps = []

    def add(a, b, r, joint):
        caps.append((np.asarray(a, float), np.asarray(b, float), r, ix(joint)))

    add(pos[ix("pelvis")] + [0, -0.05, 0], pos[ix("neck")] + [0, 0.1, 0], 0.13, "pelvis")
    add(pos[ix("neck")] + [0, 0.08, 0], pos[ix("neck")] + [0, -0.06, 0], 0.06, "neck")
    add(pos[ix("neck")] + [0, -0.16, 0], pos[ix("neck")] + [0, -0.16, 0], 0.1, "neck")
    for s in ("r", "l"):
        sh, el, wr = pos[ix(f"{s}_shoulder")], pos[ix(f"{s}_elbow")], pos[ix(f"{s}_wrist")]
        add(pos[ix("neck")] + [0, 0.06, 0], sh, 0.06, "neck")
        add(sh, el, 0.05, f"{s}_shoulder")
        add(el, wr, 0.042, f"{s}_elbow")
        add(wr, wr + 0.3 * (wr - el), 0.038, f"{s}_wrist")
        hip, kn, an, toe = (pos[ix(f"{s}_{n}")] for n in ("hip", "knee", "ankle", "toe"))
        add(pos[ix("pelvis")], hip, 0.09, "pelvis")
        add(hip, kn, 0.075, f"{s}_hip")
        add(kn, an, 0.055, f"{s}_knee")
        add(an, toe, 0.045, f"{s}_ankle")
    return caps


def make_actor_template(rig: SkeletonRig, spacing: float = 0.03, sigma: float = 0.02
                        ) -> ActorTemplate:
    """Closed surface around capsule limbs of the default rig, with skinning weights.

    The surface is the zero level set of the union of capsule distance fields
    (marching cubes); weights fall off with the distance to each joint's parts.
    """
    from skimage.measure import label, marching_cubes

    caps = _body_capsules(rig)
    pts = np.concatenate([np.stack([a, b]) for a, b, _, _ in caps])
    lo = pts.min(0) - 0.2
    hi = pts.max(0) + 0.2
    axes = [np.arange(lo[k], hi[k] + spacing, spacing) for k in range(3)]
    G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    sdf = np.full(G.shape[:3], np.inf)
    for a, b, r, _ in caps:
        sdf = np.minimum(sdf, _segment_distance(G, a, b) - r)
    # keep the component containing the torso
    inside = sdf < 0
    lab = label(inside, connectivity=1)
    centre = tuple(np.round((rig.rest_positions[0] + [0, -0.2, 0] - lo) / spacing).astype(int))
    sdf = np.where(lab == lab[centre], sdf, np.maximum(sdf, spacing))
    verts, faces, _, _ = marching_cubes(sdf, 0.0, spacing=(spacing,) * 3)
    verts = verts + lo

    d = np.full((len(verts), rig.num_joints), np.inf)
    for a, b, r, j in caps:
        d[:, j] = np.minimum(d[:, j], _segment_distance(verts, a, b) - r)
    dmin = d.min(axis=1, keepdims=True)
    W = np.exp(-((d - dmin) / sigma) ** 2)
    W[W < 1e-3] = 0.0
    W /= W.sum(axis=1, keepdims=True)
    return ActorTemplate(verts, faces.astype(np.int64), W)


def default_base_pose(rig: SkeletonRig, depth: float = 4.0) -> SkeletonPose:
    """Relaxed standing pose: arms lowered, slight knee and elbow flexion."""
    pose = SkeletonPose.zeros(rig)
    pose.t = np.array([0.0, 0.0, depth])
    named = {("r_shoulder", 2): -1.0, ("l_shoulder", 2): 1.0,
             ("r_elbow", 0): 0.4, ("l_elbow", 0): 0.4,
             ("r_knee", 0): 0.15, ("l_knee", 0): 0.15,
             ("r_hip", 0): -0.1, ("l_hip", 0): -0.1}
    for (name, k), v in named.items():
        pose.theta[rig.angle_slices[rig.index(name)].start + k] = v
    return pose


def random_dct_motion(rig: SkeletonRig, num_frames: int, rng: np.random.Generator,
                      base: SkeletonPose | None = None, K: int = 8, amplitude: float = 0.25,
                      translation_amplitude: float = 0.15, margin: float = 0.02) -> np.ndarray:
    """DCT coefficients (P, K) of a random in-bounds motion around ``base``.

    Higher frequencies get smaller amplitudes; the whole non-DC part is
    shrunk until every frame is strictly inside the angle bounds.
    """
    base = base or default_base_pose(rig)
    sub = dct_basis(num_frames, K)
    n = rig.num_params
    decay = 1.0 / (1.0 + np.arange(1, K))
    coef = np.zeros((n, K))
    coef[:, 0] = base.vector() * np.sqrt(num_frames)
    noise = rng.normal(size=(n, K - 1)) * decay
    noise[:3] *= translation_amplitude
    noise[3:6] *= amplitude * 0.5
    noise[ROOT_DOF:] *= amplitude
    lo, hi = rig.param_bounds()
    for _ in range(60):
        c = coef.copy()
        c[:, 1:] = noise * np.sqrt(num_frames) / 2.0
        S = c @ sub.basis
        if np.all(S.T >= lo + margin) and np.all(S.T <= hi - margin):
            return c
        noise *= 0.8
    coef[:, 1:] = 0.0
    return coef


def motion_from_coefficients(coef: np.ndarray, num_frames: int) -> np.ndarray:
    """Per-frame pose vectors (N, P) of DCT coefficients."""
    sub = dct_basis(num_frames, coef.shape[1])
    return (coef @ sub.basis).T


@dataclass
class NoiseSpec:
    sigma_2d: float = 0.0   # pixels
    sigma_3d: float = 0.0   # metres, actor scale
    detector_scale: float = DETECTOR_SCALE


@dataclass
class SynthDataset:
    rig: SkeletonRig
    template: ActorTemplate
    cam: Camera
    poses: list[SkeletonPose]
    joints: np.ndarray          # (N, J, 3)
    vertices: np.ndarray        # (N, V, 3)
    detections: list[FrameDetections]
    masks: np.ndarray | None = None    # (N, H, W) bool
    frames: np.ndarray | None = None   # (N, H, W, 3) uint8
    meta: dict = field(default_factory=dict)


def check_motion(rig: SkeletonRig, X: np.ndarray):
    lo, hi = rig.param_bounds()
    bad = [f for f, x in enumerate(X) if np.any(x < lo) or np.any(x > hi)]
    if bad:
        raise MotionError(f"motion violates angle bounds at frames {bad}")


def synth_generate(rig: SkeletonRig, template: ActorTemplate, cam: Camera, motion,
                   noise: NoiseSpec | None = None, seed: int = 0, render: bool = False,
                   composite: bool = False) -> SynthDataset:
    """Ground-truth motion, detections and (optionally) masks and frames.

    ``motion`` is either a (P, K) array of DCT coefficients together with
    ``num_frames`` as a tuple ``(coef, num_frames)``, or an (N, P) array of
    per-frame pose vectors.
    """
    noise = noise or NoiseSpec()
    rng = np.random.default_rng(seed)
    if isinstance(motion, tuple):
        X = motion_from_coefficients(*motion)
    else:
        X = np.asarray(motion, dtype=float)
    check_motion(rig, X)
    poses = [SkeletonPose.from_vector(x) for x in X]
    joints = np.stack([joint_positions(rig, p) for p in poses])
    verts = np.stack([skin_mesh(template, rig, p) for p in poses])
    dets = []
    nj = rig.num_joints
    for f, J in enumerate(joints):
        uv, _ = project_points(cam, J)
        d2d = uv + rng.normal(scale=noise.sigma_2d, size=uv.shape) if noise.sigma_2d else uv
        rel = J - J[0]
        if noise.sigma_3d:
            rel = rel + rng.normal(scale=noise.sigma_3d, size=rel.shape)
            rel[0] = 0.0
        dets.append(FrameDetections(f, d2d, np.ones(nj), rel * noise.detector_scale, np.ones(nj)))
    ds = SynthDataset(rig, template, cam, poses, joints, verts, dets,
                      meta={"seed": seed, "sigma_2d": noise.sigma_2d, "sigma_3d": noise.sigma_3d})
    if render or composite:
        from .raster import render_mask
        ds.masks = np.stack([render_mask(v, template.triangles, cam) for v in verts])
    if composite:
        ds.frames = composite_frames(ds.masks, rng)
    return ds


def composite_frames(masks: np.ndarray, rng: np.random.Generator,
                     fg_color=(200, 60, 50), bg_color=(40, 110, 190), noise: float = 6.0
                     ) -> np.ndarray:
    """Flat-colour foreground over a flat-colour background, with pixel noise."""
    n, h, w = masks.shape
    img = np.where(masks[..., None], np.asarray(fg_color, float), np.asarray(bg_color, float))
    img = img + rng.normal(scale=noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
