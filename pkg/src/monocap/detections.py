"""Per-frame 2D/3D joint detections: file IO, 3D rescaling and the PCK gate."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .kinematics import Camera, SkeletonRig, project_points

PCK_ALPHA = 0.2
TORSO_JOINTS = ("l_shoulder", "r_hip")


class DetectionFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FrameDetections:
    frame: int
    d2d: np.ndarray      # (J, 2) pixels
    conf2d: np.ndarray   # (J,)
    d3d: np.ndarray      # (J, 3) root-relative
    conf3d: np.ndarray   # (J,)

    @property
    def num_joints(self) -> int:
        return len(self.d2d)

    def out_of_frame(self, cam: Camera) -> np.ndarray:
        u, v = self.d2d[:, 0], self.d2d[:, 1]
        return (u < 0) | (v < 0) | (u > cam.width - 1) | (v > cam.height - 1)


def _parse_joint(entry, width, where):
    if entry is None:
        return [0.0] * (width - 1), 0.0
    if len(entry) != width:
        raise DetectionFormatError(f"{where}: expected {width} values, got {len(entry)}")
    vals = [float(v) for v in entry]
    if not all(np.isfinite(vals)):
        raise DetectionFormatError(f"{where}: non-finite value")
    return vals[:-1], vals[-1]


def detections_from_dict(doc: dict, joint_names: list[str] | None = None) -> list[FrameDetections]:
    frames = doc.get("frames")
    if not isinstance(frames, list):
        raise DetectionFormatError("document has no 'frames' array")
    perm = None
    file_names = doc.get("joint_names")
    if joint_names is not None and file_names is not None:
        missing = [n for n in joint_names if n not in file_names]
        if missing:
            raise DetectionFormatError(f"joints missing from file: {missing}")
        perm = [file_names.index(n) for n in joint_names]
    by_index = {}
    for k, fr in enumerate(frames):
        idx = int(fr.get("frame", k))
        if idx in by_index:
            raise DetectionFormatError(f"duplicate frame {idx}")
        j2, j3 = fr["joints2d"], fr["joints3d"]
        if perm is not None:
            j2, j3 = [j2[p] for p in perm], [j3[p] for p in perm]
        if len(j2) != len(j3):
            raise DetectionFormatError(f"frame {idx}: joints2d/joints3d lengths differ")
        p2, c2, p3, c3 = [], [], [], []
        for i, (a, b) in enumerate(zip(j2, j3)):
            xy, c = _parse_joint(a, 3, f"frame {idx} joint {i} joints2d")
            xyz, cc = _parse_joint(b, 4, f"frame {idx} joint {i} joints3d")
            p2.append(xy)
            c2.append(c)
            p3.append(xyz)
            c3.append(cc)
        by_index[idx] = FrameDetections(idx, np.array(p2), np.array(c2), np.array(p3), np.array(c3))
    if not by_index:
        return []
    n = max(by_index) + 1
    gaps = [i for i in range(n) if i not in by_index]
    if gaps or min(by_index) != 0:
        raise DetectionFormatError("gap at frame " + ", ".join(str(g) for g in gaps))
    return [by_index[i] for i in range(n)]


def detections_to_dict(dets: list[FrameDetections], joint_names: list[str] | None = None) -> dict:
    frames = []
    for d in dets:
        j2 = [[float(x), float(y), float(c)] for (x, y), c in zip(d.d2d, d.conf2d)]
        j3 = [[float(x), float(y), float(z), float(c)] for (x, y, z), c in zip(d.d3d, d.conf3d)]
        frames.append({"frame": int(d.frame), "joints2d": j2, "joints3d": j3})
    doc = {"frames": frames}
    if joint_names is not None:
        doc = {"joint_names": list(joint_names), **doc}
    return doc


def load_detections(path, joint_names: list[str] | None = None) -> list[FrameDetections]:
    """Load a detection JSON file; frames must be contiguous from 0."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DetectionFormatError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    return detections_from_dict(doc, joint_names)


def save_detections(path, dets: list[FrameDetections], joint_names: list[str] | None = None):
    Path(path).write_text(json.dumps(detections_to_dict(dets, joint_names), indent=1) + "\n")


def convert_csv(csv_path, num_joints: int) -> list[FrameDetections]:
    """Rows of ``frame, joint, x, y, c, X, Y, Z, c3d``; absent joints get confidence 0."""
    rows = {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            if lineno == 1 and not row[0].strip().lstrip("-").isdigit():
                continue  # header
            if len(row) != 9:
                raise DetectionFormatError(f"{csv_path}: line {lineno}: expected 9 columns")
            f, j = int(row[0]), int(row[1])
            if not 0 <= j < num_joints:
                raise DetectionFormatError(f"{csv_path}: line {lineno}: joint {j} out of range")
            rows.setdefault(f, {})[j] = [float(v) for v in row[2:]]
    frames = []
    for f in sorted(rows):
        d2, c2 = np.zeros((num_joints, 2)), np.zeros(num_joints)
        d3, c3 = np.zeros((num_joints, 3)), np.zeros(num_joints)
        for j, (x, y, c, X, Y, Z, cc) in rows[f].items():
            d2[j], c2[j], d3[j], c3[j] = (x, y), c, (X, Y, Z), cc
        frames.append({"frame": f, "joints2d": np.column_stack([d2, c2]).tolist(),
                       "joints3d": np.column_stack([d3, c3]).tolist()})
    return detections_from_dict({"frames": frames})


def _bone_pairs(rig: SkeletonRig):
    return [(i, j.parent) for i, j in enumerate(rig.joints) if j.parent >= 0]


def d3d_scale(dets: FrameDetections, rig: SkeletonRig) -> float:
    """Actor total bone length over detected total bone length (confident bones only)."""
    pairs = [(c, p) for c, p in _bone_pairs(rig) if dets.conf3d[c] > 0 and dets.conf3d[p] > 0]
    actor = sum(rig.bone_lengths[c] for c, _ in pairs)
    detected = sum(np.linalg.norm(dets.d3d[c] - dets.d3d[p]) for c, p in pairs)
    if detected < 1e-6:
        raise ValueError(f"frame {dets.frame}: detected skeleton has no length")
    if actor <= 0:
        raise ValueError("rig bone lengths must be positive")
    return float(actor / detected)


def rescale_d3d(dets: FrameDetections, rig: SkeletonRig) -> FrameDetections:
    s = d3d_scale(dets, rig)
    return replace(dets, d3d=dets.d3d * s)


def rescale_sequence(dets: list[FrameDetections], rig: SkeletonRig) -> list[FrameDetections]:
    """Per-frame rescale; frames without a usable 3D skeleton pass through unchanged."""
    out = []
    for d in dets:
        try:
            out.append(rescale_d3d(d, rig))
        except ValueError:
            out.append(d)
    return out


def pck_error(dets: FrameDetections, cam: Camera, root_t, alpha: float = PCK_ALPHA,
              names: list[str] | None = None, rig: SkeletonRig | None = None) -> float:
    """Fraction of joints whose projected 3D detection misses the 2D detection.

    A joint is wrong when the pixel distance exceeds ``alpha`` times the 2D
    torso diameter (left shoulder to right hip). Returns NaN when the torso
    is not detected.
    """
    if rig is not None:
        names = rig.names
    ls, rh = (names.index(n) for n in TORSO_JOINTS) if names else (5, 8)
    if min(dets.conf2d[ls], dets.conf2d[rh]) <= 0:
        return float("nan")
    torso = np.linalg.norm(dets.d2d[ls] - dets.d2d[rh])
    if torso <= 0:
        return float("nan")
    valid = (dets.conf2d > 0) & (dets.conf3d > 0)
    if not valid.any():
        return float("nan")
    uv, behind = project_points(cam, dets.d3d + np.asarray(root_t, float))
    dist = np.linalg.norm(uv - dets.d2d, axis=1)
    wrong = (dist > alpha * torso) | behind
    return float(np.count_nonzero(wrong & valid) / np.count_nonzero(valid))


def pck_gate(dets: FrameDetections, cam: Camera, root_t, thres_pck: float = 0.4,
             alpha: float = PCK_ALPHA, rig: SkeletonRig | None = None) -> int:
    """Binary 3D-trust weight w_f: 1 iff the PCK error is below ``thres_pck``."""
    e = pck_error(dets, cam, root_t, alpha, rig=rig)
    if not np.isfinite(e):
        return 0
    return int(e < thres_pck)
