"""Binary rasterization of meshes and skeletons, silhouette contours and correspondences.

Pixel ``(x, y)`` has its centre at integer coordinates, ``x`` the column and
``y`` the row, matching the projection in :mod:`monocap.kinematics`.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .kinematics import EPS_DEPTH, Camera, SkeletonPose, SkeletonRig, joint_positions

log = logging.getLogger(__name__)

# triangles whose bounding box fits in this many pixels are rasterized in one vectorised pass
_SMALL_TILE = 8


@dataclass
class Contour:
    points: np.ndarray    # (n, 2) pixel positions (x, y)
    normals: np.ndarray   # (n, 2) outward unit normals

    def __len__(self):
        return len(self.points)

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "normals": self.normals.tolist()}


@dataclass
class ModelBoundary:
    vertex_ids: np.ndarray  # (n,)
    points: np.ndarray      # (n, 2) projected vertex positions
    normals: np.ndarray     # (n, 2) normal of the nearest rendered contour point

    def __len__(self):
        return len(self.vertex_ids)


@dataclass
class CorrespondenceSet:
    vertex_ids: np.ndarray  # (n,)
    targets: np.ndarray     # (n, 2) silhouette points s_k
    normals: np.ndarray     # (n, 2) silhouette normals n_k
    distances: np.ndarray   # (n,)

    def __len__(self):
        return len(self.vertex_ids)


def _empty_mask(cam: Camera) -> np.ndarray:
    return np.zeros((cam.height, cam.width), dtype=bool)


def _is_top_left(dx, dy):
    # clockwise winding in y-down image coordinates
    return (dy < 0) | ((dy == 0) & (dx > 0))


def _edge_setup(tri2d):
    """Edge vectors and top-left flags for (T, 3, 2) clockwise triangles."""
    a = tri2d
    b = np.roll(tri2d, -1, axis=1)
    d = b - a
    return a, d, _is_top_left(d[..., 0], d[..., 1])


def _inside(px, py, a, d, tl):
    """Coverage of points (px, py) by triangles; broadcast over leading axes."""
    ok = None
    for k in range(3):
        e = d[..., k, 0] * (py - a[..., k, 1]) - d[..., k, 1] * (px - a[..., k, 0])
        inc = (e > 0) | ((e == 0) & tl[..., k])
        ok = inc if ok is None else ok & inc
    return ok


def rasterize_triangles(tri2d: np.ndarray, width: int, height: int) -> np.ndarray:
    """Coverage mask of 2D triangles (T, 3, 2) with a top-left fill rule.

    A pixel centre is covered when every edge function is positive, or zero on
    a top or left edge. Degenerate triangles cover nothing.
    """
    mask = np.zeros((height, width), dtype=bool)
    tri2d = np.asarray(tri2d, dtype=float).reshape(-1, 3, 2)
    if len(tri2d) == 0:
        return mask
    e1 = tri2d[:, 1] - tri2d[:, 0]
    e2 = tri2d[:, 2] - tri2d[:, 0]
    area = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    keep = area != 0
    tri2d = tri2d[keep]
    area = area[keep]
    # make every triangle clockwise on screen (positive signed area with y down)
    flip = area < 0
    tri2d[flip] = tri2d[flip][:, ::-1]
    lo = np.ceil(tri2d.min(axis=1)).astype(np.int64)
    hi = np.floor(tri2d.max(axis=1)).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [width - 1, height - 1])
    vis = np.all(hi >= lo, axis=1)
    tri2d, lo, hi = tri2d[vis], lo[vis], hi[vis]
    if len(tri2d) == 0:
        return mask
    size = hi - lo + 1
    small = np.all(size <= _SMALL_TILE, axis=1)

    if np.any(small):
        ts, ls = tri2d[small], lo[small]
        a, d, tl = _edge_setup(ts)
        off = np.arange(_SMALL_TILE)
        px = (ls[:, 0, None, None] + off[None, None, :]).astype(float)
        py = (ls[:, 1, None, None] + off[None, :, None]).astype(float)
        inside = _inside(px, py, a[:, None, None], d[:, None, None], tl[:, None, None])
        inside &= (px <= hi[small][:, 0, None, None]) & (py <= hi[small][:, 1, None, None])
        t, yy, xx = np.nonzero(inside)
        mask[ls[t, 1] + yy, ls[t, 0] + xx] = True

    for tri, l, h in zip(tri2d[~small], lo[~small], hi[~small]):
        a, d, tl = _edge_setup(tri[None])
        ys, xs = np.mgrid[l[1]:h[1] + 1, l[0]:h[0] + 1]
        inside = _inside(xs.astype(float), ys.astype(float), a[0], d[0], tl[0])
        mask[l[1]:h[1] + 1, l[0]:h[0] + 1] |= inside
    return mask


def render_mask(vertices: np.ndarray, triangles: np.ndarray, cam: Camera) -> np.ndarray:
    """Binary silhouette (H, W) of a camera-space mesh.

    Triangles with any vertex at depth <= EPS_DEPTH are skipped.
    """
    V = np.asarray(vertices, dtype=float).reshape(-1, 3)
    F = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(V) == 0 or len(F) == 0:
        return _empty_mask(cam)
    front = V[:, 2] > EPS_DEPTH
    F = F[np.all(front[F], axis=1)]
    if len(F) == 0:
        return _empty_mask(cam)
    z = np.where(front, V[:, 2], 1.0)
    uv = np.column_stack([cam.fx * V[:, 0] / z + cam.cx, cam.fy * V[:, 1] / z + cam.cy])
    return rasterize_triangles(uv[F], cam.width, cam.height)


def _segment_distance_2d(px, py, a, b):
    ab = b - a
    L2 = float(ab @ ab)
    if L2 == 0.0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / L2, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def draw_segment(mask: np.ndarray, a, b, thickness: float = 3.0) -> None:
    """Set pixels within ``thickness / 2`` of segment ab (in place).

    A zero-length segment draws a disc of radius ``ceil(thickness / 2)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    h, w = mask.shape
    radius = thickness / 2.0
    if np.array_equal(a, b):
        radius = float(np.ceil(radius))
    lo = np.floor(np.minimum(a, b) - radius).astype(int)
    hi = np.ceil(np.maximum(a, b) + radius).astype(int)
    x0, y0 = max(lo[0], 0), max(lo[1], 0)
    x1, y1 = min(hi[0], w - 1), min(hi[1], h - 1)
    if x1 < x0 or y1 < y0:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    mask[y0:y1 + 1, x0:x1 + 1] |= _segment_distance_2d(xs, ys, a, b) <= radius


def render_skeleton_mask(rig: SkeletonRig, pose: SkeletonPose, cam: Camera,
                         thickness: float = 3.0, skipped: list | None = None) -> np.ndarray:
    """Every bone drawn as a thick 2D segment between its projected joints.

    Bones with a joint behind the camera are left out; their child joint
    indices are appended to ``skipped`` when given.
    """
    mask = _empty_mask(cam)
    P = joint_positions(rig, pose)
    for j in range(1, rig.num_joints):
        p, c = P[rig.parents[j]], P[j]
        if p[2] <= EPS_DEPTH or c[2] <= EPS_DEPTH:
            log.warning("bone %s skipped: joint behind the camera", rig.names[j])
            if skipped is not None:
                skipped.append(j)
            continue
        a = (cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy)
        b = (cam.fx * c[0] / c[2] + cam.cx, cam.fy * c[1] / c[2] + cam.cy)
        draw_segment(mask, a, b, thickness)
    return mask


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour; outside the image is background."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def extract_contour(mask: np.ndarray) -> Contour:
    """Boundary pixels in raster order with outward normals.

    Normals are the negated Sobel gradient of the occupancy; pixels where
    that gradient vanishes (isolated pixels, one-pixel lines) are dropped.
    """
    m = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(boundary_pixels(m))
    if len(ys) == 0:
        return Contour(np.zeros((0, 2)), np.zeros((0, 2)))
    occ = m.astype(float)
    gx = ndimage.sobel(occ, axis=1, mode="constant", cval=0.0)[ys, xs]
    gy = ndimage.sobel(occ, axis=0, mode="constant", cval=0.0)[ys, xs]
    norm = np.hypot(gx, gy)
    ok = norm > 1e-9
    n = -np.column_stack([gx[ok], gy[ok]]) / norm[ok, None]
    pts = np.column_stack([xs[ok], ys[ok]]).astype(float)
    return Contour(pts, n)


def edge_offset(normals: np.ndarray) -> np.ndarray:
    """Mean distance from a boundary pixel centre out to the true outline.

    A pixel whose centre lies ``d`` inside an edge with unit normal ``n`` has
    a background 4-neighbour iff ``d < max(|n_x|, |n_y|)``; averaging over
    uniformly spread centres gives half of that.
    """
    return 0.5 * np.max(np.abs(normals), axis=-1)


def outline_points(contour: Contour) -> np.ndarray:
    """Contour pixel centres moved out by :func:`edge_offset` along their normals."""
    return contour.points + edge_offset(contour.normals)[:, None] * contour.normals


def rim_vertices(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Boolean mask of vertices on the contour generator seen from the camera centre.

    A rim edge separates a front-facing from a back-facing triangle, or has
    only one triangle. Silhouette outlines are made of projected rim edges.
    """
    V = np.asarray(vertices, dtype=float)
    F = np.asarray(triangles, dtype=np.int64)
    out = np.zeros(len(V), dtype=bool)
    if len(F) == 0:
        return out
    tri = V[F]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    front = np.einsum("ta,ta->t", n, tri.mean(axis=1)) < 0
    e = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
    e.sort(axis=1)
    facing = np.tile(front, 3).astype(np.int64)
    uniq, inv, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    nfront = np.bincount(inv, weights=facing, minlength=len(uniq))
    rim = (counts == 1) | ((nfront > 0) & (nfront < counts))
    out[uniq[rim].ravel()] = True
    return out


def model_boundary_vertices(vertices: np.ndarray, triangles: np.ndarray, cam: Camera,
                            max_dist: float = 1.0, mask: np.ndarray | None = None,
                            rim_only: bool = True) -> ModelBoundary:
    """Vertices projecting within ``max_dist`` px of the rendered silhouette outline.

    Distance is measured to the unit squares of the boundary pixels, i.e. to
    the edge of the rendered pixel region, so a vertex exactly on a bottom or
    right edge is not penalised by the fill rule.
    By default only rim vertices qualify, so interior vertices that merely
    project near the outline are left out. Each vertex takes the normal of
    its nearest contour point. ``mask`` may pass a precomputed rendering of
    the same mesh.
    """
    V = np.asarray(vertices, dtype=float)
    F = np.asarray(triangles, dtype=np.int64)
    if mask is None:
        mask = render_mask(V, F, cam)
    contour = extract_contour(mask)
    empty = ModelBoundary(np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros((0, 2)))
    if len(contour) == 0 or len(V) == 0:
        return empty
    ok = V[:, 2] > EPS_DEPTH
    if rim_only:
        ok &= rim_vertices(V, F)
    front = np.flatnonzero(ok)
    Vf = V[front]
    uv = np.column_stack([cam.fx * Vf[:, 0] / Vf[:, 2] + cam.cx,
                          cam.fy * Vf[:, 1] / Vf[:, 2] + cam.cy])
    k = min(9, len(contour))
    _, nn = cKDTree(contour.points).query(uv, k=k)
    nn = nn.reshape(len(uv), k)
    gap = np.maximum(np.abs(uv[:, None, :] - contour.points[nn]) - 0.5, 0.0)
    d = np.hypot(gap[..., 0], gap[..., 1])
    best = np.argmin(d, axis=1)
    dist = d[np.arange(len(uv)), best]
    idx = nn[np.arange(len(uv)), best]
    keep = dist <= max_dist
    if not np.any(keep):
        return empty
    return ModelBoundary(front[keep], uv[keep], contour.normals[idx[keep]])


def boundary_from_contour(contour: Contour) -> ModelBoundary:
    """Treat contour points as model boundary points (ids are contour indices)."""
    return ModelBoundary(np.arange(len(contour)), contour.points.copy(), contour.normals.copy())


def find_correspondences(boundary: ModelBoundary, target: Contour, max_dist: float = 30.0,
                         max_normal_angle: float = 45.0, chunk: int = 512) -> CorrespondenceSet:
    """Nearest normal-compatible silhouette point for every boundary vertex.

    Candidates are target points whose normal is within ``max_normal_angle``
    degrees of the vertex normal; the nearest one (lowest index on ties) is
    kept when it lies within ``max_dist`` pixels.
    """
    empty = CorrespondenceSet(np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros((0, 2)),
                              np.zeros(0))
    if len(boundary) == 0 or len(target) == 0:
        return empty
    cos_max = np.cos(np.deg2rad(max_normal_angle))
    ids, tgt, nrm, dist = [], [], [], []
    for s in range(0, len(boundary), chunk):
        P = boundary.points[s:s + chunk]
        N = boundary.normals[s:s + chunk]
        d2 = np.sum((P[:, None, :] - target.points[None]) ** 2, axis=2)
        compatible = N @ target.normals.T >= cos_max
        d2 = np.where(compatible, d2, np.inf)
        best = np.argmin(d2, axis=1)
        bd = np.sqrt(d2[np.arange(len(P)), best])
        ok = bd <= max_dist
        ids.append(boundary.vertex_ids[s:s + chunk][ok])
        tgt.append(target.points[best[ok]])
        nrm.append(target.normals[best[ok]])
        dist.append(bd[ok])
    return CorrespondenceSet(np.concatenate(ids), np.concatenate(tgt), np.concatenate(nrm),
                             np.concatenate(dist))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def save_mask_png(path, mask: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    """Read a mask image; any pixel above 127 (after greyscale conversion) is foreground."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def save_contour_json(path, contour: Contour) -> None:
    Path(path).write_text(json.dumps(contour.to_dict()))
