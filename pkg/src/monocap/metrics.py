"""Evaluation metrics: aligned joint errors, vertex error, silhouette IoU, and reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .raster import mask_iou

MM = 1000.0


class MetricsError(ValueError):
    pass


@dataclass
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    degenerate: bool = False

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(X, float) @ self.rotation.T + self.translation


def similarity_align(X: np.ndarray, Y: np.ndarray, with_scale: bool = True) -> Similarity:
    """Least-squares ``s R X + t ~ Y`` (Umeyama's closed form).

    Point sets with collinear or coincident points do not fix the rotation;
    those come back flagged ``degenerate`` with the translation-only fit.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise MetricsError(f"point sets must both be (n, 3), got {X.shape} and {Y.shape}")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    sx = np.linalg.svd(Xc, compute_uv=False)
    sy = np.linalg.svd(Yc, compute_uv=False)
    tol = 1e-9 * max(sx[0] if len(sx) else 0.0, sy[0] if len(sy) else 0.0, 1e-12)
    if min(np.sum(sx > tol), np.sum(sy > tol)) < 2:
        return Similarity(1.0, np.eye(3), my - mx, degenerate=True)
    U, S, Vt = np.linalg.svd(Yc.T @ Xc)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = U @ np.diag(D) @ Vt
    s = float(S @ D / np.sum(Xc ** 2)) if with_scale else 1.0
    return Similarity(s, R, my - s * R @ mx)


def joint_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance over corresponding points."""
    return float(np.mean(np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=-1)))


@dataclass
class MetricsReport:
    frames: list[int]
    joint_similarity: np.ndarray     # mm, per-frame similarity alignment
    joint_procrustes: np.ndarray     # mm, one similarity over the whole sequence
    joint_raw: np.ndarray            # mm, no alignment
    vertex: np.ndarray | None = None  # mm, per-frame translation alignment
    iou: np.ndarray | None = None
    skipped: list[int] = field(default_factory=list)
    runtime: dict[str, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    def columns(self) -> dict[str, np.ndarray]:
        cols = {"joint_similarity_mm": self.joint_similarity,
                "joint_procrustes_mm": self.joint_procrustes,
                "joint_raw_mm": self.joint_raw}
        if self.vertex is not None:
            cols["vertex_mm"] = self.vertex
        if self.iou is not None:
            cols["iou"] = self.iou
        return cols

    def means(self) -> dict[str, float]:
        keep = np.array([f not in set(self.skipped) for f in self.frames], dtype=bool)
        out = {}
        for name, v in self.columns().items():
            vals = np.asarray(v, float)[keep]
            out[name] = float(np.mean(vals)) if len(vals) else math.nan
        return out


def evaluate(pred_joints, gt_joints, pred_vertices=None, gt_vertices=None,
             pred_masks=None, gt_masks=None, runtime: dict | None = None) -> MetricsReport:
    """Joint, vertex and silhouette metrics of a predicted sequence (inputs in metres)."""
    P = np.asarray(pred_joints, dtype=float)
    G = np.asarray(gt_joints, dtype=float)
    if P.shape != G.shape or P.ndim != 3:
        raise MetricsError(f"joint arrays differ in shape: {P.shape} vs {G.shape}")
    n = len(P)
    sim = np.zeros(n)
    skipped = []
    for f in range(n):
        T = similarity_align(P[f], G[f])
        if T.degenerate:
            skipped.append(f)
            sim[f] = math.nan
        else:
            sim[f] = MM * joint_error(T.apply(P[f]), G[f])
    proc = np.zeros(n)
    if n:
        seq = similarity_align(P.reshape(-1, 3), G.reshape(-1, 3))
        proc = np.array([MM * joint_error(seq.apply(P[f]), G[f]) for f in range(n)])
    raw = np.array([MM * joint_error(P[f], G[f]) for f in range(n)])

    vert = None
    if pred_vertices is not None and gt_vertices is not None:
        PV = np.asarray(pred_vertices, dtype=float)
        GV = np.asarray(gt_vertices, dtype=float)
        if PV.shape != GV.shape or len(PV) != n:
            raise MetricsError(f"vertex arrays differ in shape: {PV.shape} vs {GV.shape}")
        vert = np.array([MM * joint_error(PV[f] - PV[f].mean(0) + GV[f].mean(0), GV[f])
                         for f in range(n)])
    iou = None
    if pred_masks is not None and gt_masks is not None:
        if len(pred_masks) != n or len(gt_masks) != n:
            raise MetricsError("one mask per frame required")
        iou = np.array([mask_iou(a, b) for a, b in zip(pred_masks, gt_masks)])
    return MetricsReport(list(range(n)), sim, proc, raw, vert, iou, skipped, dict(runtime or {}))


# ---------------------------------------------------------------- output

def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.6f}"


def metrics_csv(report: MetricsReport) -> str:
    """Per-frame table; skipped frames are marked and excluded from the means."""
    cols = report.columns()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", *cols, "skipped"])
    skipped = set(report.skipped)
    for i, f in enumerate(report.frames):
        w.writerow([f, *(_fmt(float(c[i])) for c in cols.values()), int(f in skipped)])
    return buf.getvalue()


def load_metrics_csv(path) -> MetricsReport:
    """Inverse of :func:`metrics_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise MetricsError(f"{path}: no rows")
    col = {k: np.array([float(r[k]) for r in rows]) for k in rows[0] if k not in ("frame", "skipped")}
    frames = [int(r["frame"]) for r in rows]
    skipped = [int(r["frame"]) for r in rows if r.get("skipped", "0") == "1"]
    try:
        return MetricsReport(frames, col["joint_similarity_mm"], col["joint_procrustes_mm"],
                             col["joint_raw_mm"], col.get("vertex_mm"), col.get("iou"), skipped)
    except KeyError as e:
        raise MetricsError(f"{path}: missing column {e}") from e


def summary_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "mean"])
    for k, v in report.means().items():
        w.writerow([k, _fmt(v)])
    return buf.getvalue()


def render_report(report: MetricsReport, out_dir) -> list[Path]:
    """Per-frame error curves as SVG (mean in the legend) plus CSV tables."""
    if len(report) == 0:
        raise MetricsError("cannot render an empty report")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in (("metrics.csv", metrics_csv(report)), ("summary.csv", summary_csv(report))):
        (out / name).write_text(text)
        written.append(out / name)
    means = report.means()
    with matplotlib.rc_context({"svg.hashsalt": "monocap", "svg.fonttype": "path"}):
        for name, values in report.columns().items():
            fig, ax = plt.subplots(figsize=(6, 3))
            ax.plot(report.frames, values, marker="o" if len(report) == 1 else None,
                    label=f"{name} (mean {means[name]:.3f})")
            ax.set_xlabel("frame")
            ax.set_ylabel(name)
            ax.legend(loc="upper right")
            fig.tight_layout()
            path = out / f"{name}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written
