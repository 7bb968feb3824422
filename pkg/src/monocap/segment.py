"""Model-guided trimaps and GrabCut segmentation with a motion-aware smoothness term."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.cluster.vq import kmeans2
from scipy.sparse.csgraph import breadth_first_order, maximum_flow

log = logging.getLogger(__name__)

T_B, T_UB, T_UF, T_F = 0, 1, 2, 3
# debug colours: T_b red, T_ub blue, T_uf yellow, T_f green
TRIMAP_COLORS = np.array([[255, 0, 0], [0, 0, 255], [255, 255, 0], [0, 255, 0]], dtype=np.uint8)

COV_REG = 1e-5
_INT_CAP = 2 ** 30
_NEIGHBOURS = ((0, 1, 1.0), (1, 0, 1.0), (1, 1, np.sqrt(2.0)), (1, -1, np.sqrt(2.0)))


class SegmentationError(ValueError):
    pass


@dataclass
class Trimap:
    labels: np.ndarray          # (H, W) uint8 in {T_B, T_UB, T_UF, T_F}
    flagged: bool = False

    @property
    def fg(self):
        return self.labels == T_F

    @property
    def bg(self):
        return self.labels == T_B

    @property
    def unknown(self):
        return (self.labels == T_UF) | (self.labels == T_UB)

    def initial_foreground(self):
        return self.labels >= T_UF

    def to_rgb(self) -> np.ndarray:
        return TRIMAP_COLORS[self.labels]


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def bbox_diagonal(mask: np.ndarray) -> float:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return 0.0
    return float(np.hypot(xs.max() - xs.min() + 1, ys.max() - ys.min() + 1))


def build_trimap(skel_mask: np.ndarray, mesh_mask: np.ndarray, erosion_radius: int | None = None,
                 dilation_radius: int | None = None) -> Trimap:
    """Four-label trimap from the skeleton mask R and the model mask M.

    T_f = R | erode(M), T_b = ~dilate(M), the rest of M is T_uf and the rest of
    the dilated band is T_ub. Radii default to 3% and 6% of M's bounding-box
    diagonal. The image border does not erode M.
    """
    R = np.asarray(skel_mask, dtype=bool)
    M = np.asarray(mesh_mask, dtype=bool)
    if R.shape != M.shape:
        raise SegmentationError(f"mask shapes differ: {R.shape} vs {M.shape}")
    if not M.any():
        log.warning("empty model mask: trimap is all background")
        return Trimap(np.full(M.shape, T_B, dtype=np.uint8), flagged=True)
    diag = bbox_diagonal(M)
    er = int(round(0.03 * diag)) if erosion_radius is None else int(erosion_radius)
    di = int(round(0.06 * diag)) if dilation_radius is None else int(dilation_radius)
    eroded = ndimage.binary_erosion(M, disc(er), border_value=1) if er > 0 else M
    dilated = ndimage.binary_dilation(M, disc(di)) if di > 0 else M
    labels = np.full(M.shape, T_B, dtype=np.uint8)
    labels[dilated] = T_UB
    labels[M] = T_UF
    labels[R | eroded] = T_F
    return Trimap(labels)


def motion_weights(frame: np.ndarray, prev: np.ndarray | None) -> np.ndarray:
    """Per-pixel colour change to the previous frame, scaled to [0, 1].

    The scale is the 95th percentile of the change, or its maximum when that
    percentile is zero.
    """
    cur = np.asarray(frame, dtype=float)
    shape = cur.shape[:2]
    if prev is None:
        return np.zeros(shape)
    prev = np.asarray(prev, dtype=float)
    if prev.shape != cur.shape:
        raise SegmentationError(f"frame shapes differ: {prev.shape} vs {cur.shape}")
    diff = cur - prev
    d = np.sqrt(np.sum(diff.reshape(shape + (-1,)) ** 2, axis=-1))
    scale = np.percentile(d, 95)
    if scale <= 0:
        scale = d.max()
    if scale <= 0:
        return np.zeros(shape)
    return np.clip(d / scale, 0.0, 1.0)


# -------------------------------------------------------------------- colour models

@dataclass
class GaussianMixture:
    weights: np.ndarray     # (k,)
    means: np.ndarray       # (k, 3)
    covs: np.ndarray        # (k, 3, 3)

    @property
    def k(self):
        return len(self.weights)

    def component_costs(self, X: np.ndarray) -> np.ndarray:
        """-log(pi_k N(x | mu_k, Sigma_k)) for every sample and component, (n, k)."""
        X = np.asarray(X, dtype=float)
        out = np.empty((len(X), self.k))
        for c in range(self.k):
            L = np.linalg.cholesky(self.covs[c])
            z = (X - self.means[c]) @ np.linalg.inv(L).T
            maha = np.einsum("ij,ij->i", z, z)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            out[:, c] = (-np.log(self.weights[c]) + 0.5 * logdet + 0.5 * maha
                         + 0.5 * X.shape[1] * np.log(2 * np.pi))
        return out

    def costs(self, X):
        return self.component_costs(X).min(axis=1)


def fit_gmm(X: np.ndarray, assign: np.ndarray, k: int) -> GaussianMixture:
    """Maximum-likelihood mixture from hard component assignments."""
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    w, mu, cov = [], [], []
    for c in range(k):
        Xc = X[assign == c]
        if len(Xc) == 0:
            continue
        m = Xc.mean(axis=0)
        C = (Xc - m).T @ (Xc - m) / len(Xc) + COV_REG * np.eye(d)
        w.append(len(Xc) / len(X))
        mu.append(m)
        cov.append(C)
    return GaussianMixture(np.array(w), np.array(mu), np.array(cov))


def init_gmm(X: np.ndarray, k: int, seed: int = 0) -> tuple[GaussianMixture, int]:
    """k-means initialised mixture; k shrinks for regions with fewer than k pixels."""
    X = np.asarray(X, dtype=float)
    k = max(1, min(k, len(X)))
    if len(X) == 0:
        raise SegmentationError("cannot fit a colour model to an empty region")
    if k == 1:
        labels = np.zeros(len(X), dtype=int)
    else:
        _, labels = kmeans2(X, k, minit="++", seed=np.random.default_rng(seed))
    return fit_gmm(X, labels, k), k


def refit_gmm(gmm: GaussianMixture, X: np.ndarray) -> GaussianMixture:
    """One GrabCut update: assign each sample to its cheapest component, refit.

    Components left without samples are dropped.
    """
    if len(X) == 0:
        return gmm
    assign = np.argmin(gmm.component_costs(X), axis=1)
    return fit_gmm(X, assign, gmm.k)


# -------------------------------------------------------------------- graph

@dataclass
class PairwiseTerms:
    edges: np.ndarray     # (E, 2) flat pixel indices
    weights: np.ndarray   # (E,)


def contrast_beta(image: np.ndarray) -> float:
    img = np.asarray(image, dtype=float)
    sums, count = 0.0, 0
    for dy, dx, _ in _NEIGHBOURS:
        a, b = _shifted_pair(img, dy, dx)
        sums += float(np.sum((a - b) ** 2))
        count += a.shape[0] * a.shape[1]
    mean = sums / max(count, 1)
    return 0.0 if mean == 0 else 1.0 / (2.0 * mean)


def _shifted_pair(arr, dy, dx):
    h, w = arr.shape[:2]
    if dx >= 0:
        a = arr[0:h - dy, 0:w - dx]
        b = arr[dy:h, dx:w]
    else:
        a = arr[0:h - dy, -dx:w]
        b = arr[dy:h, 0:w + dx]
    return a, b


def pairwise_terms(image: np.ndarray, motion: np.ndarray | None = None, gamma: float = 50.0,
                   mu: float = 1.0, sigma_m: float = 0.1) -> PairwiseTerms:
    """8-connected smoothness weights.

    w = gamma / dist * exp(-beta |c_i - c_j|^2) * (1 + mu * exp(-m_ij / sigma_m)),
    where m_ij is the larger motion value of the two pixels.
    """
    img = np.asarray(image, dtype=float)
    h, w = img.shape[:2]
    beta = contrast_beta(img)
    idx = np.arange(h * w).reshape(h, w)
    mot = np.zeros((h, w)) if motion is None else np.asarray(motion, dtype=float)
    edges, weights = [], []
    for dy, dx, dist in _NEIGHBOURS:
        a, b = _shifted_pair(img, dy, dx)
        ia, ib = _shifted_pair(idx, dy, dx)
        ma, mb = _shifted_pair(mot, dy, dx)
        diff = np.sum((a - b).reshape(a.shape[:2] + (-1,)) ** 2, axis=-1)
        wt = gamma / dist * np.exp(-beta * diff) * (1.0 + mu * np.exp(-np.maximum(ma, mb) / sigma_m))
        edges.append(np.column_stack([ia.ravel(), ib.ravel()]))
        weights.append(wt.ravel())
    return PairwiseTerms(np.concatenate(edges), np.concatenate(weights))


def labelling_energy(fg: np.ndarray, cost_fg: np.ndarray, cost_bg: np.ndarray,
                     pairs: PairwiseTerms) -> float:
    """Sum of unary costs of the chosen labels plus weights of cut pairs."""
    fg = np.asarray(fg, dtype=bool).ravel()
    unary = np.where(fg, cost_fg.ravel(), cost_bg.ravel()).sum()
    cut = fg[pairs.edges[:, 0]] != fg[pairs.edges[:, 1]]
    return float(unary + pairs.weights[cut].sum())


def min_cut(cost_fg: np.ndarray, cost_bg: np.ndarray, edges: np.ndarray, weights: np.ndarray,
            fixed: np.ndarray | None = None, scale: float | None = None):
    """Binary labelling minimising unary plus cut-pair costs via max-flow.

    ``fixed`` holds -1 for free nodes, 1 for forced foreground and 0 for forced
    background; forced nodes are merged into the terminals. Capacities are
    rounded to integers after multiplying by ``scale`` (chosen automatically
    to fit int32 when omitted). Returns ``(fg, flow_value, scale)`` where the
    flow value is in scaled integer units.
    """
    cost_fg = np.asarray(cost_fg, dtype=float).ravel()
    cost_bg = np.asarray(cost_bg, dtype=float).ravel()
    n = len(cost_fg)
    fixed = np.full(n, -1, dtype=np.int8) if fixed is None else np.asarray(fixed).ravel()
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    weights = np.asarray(weights, dtype=float).ravel()
    free = np.flatnonzero(fixed < 0)
    fg = fixed == 1
    if len(free) == 0:
        return fg, 0, 1.0 if scale is None else scale

    # source = foreground side: cutting s->i costs the bg label, i->t the fg label
    src = cost_bg.copy()
    snk = cost_fg.copy()
    fa, fb = fixed[edges[:, 0]], fixed[edges[:, 1]]
    # pairs with one forced end become unary terms on the free end
    for here, there, col in ((fa, fb, 0), (fb, fa, 1)):
        sel = (here < 0) & (there == 1)
        np.add.at(src, edges[sel, col], weights[sel])
        sel = (here < 0) & (there == 0)
        np.add.at(snk, edges[sel, col], weights[sel])
    base = np.minimum(src, snk)
    src = (src - base)[free]
    snk = (snk - base)[free]
    inner = (fa < 0) & (fb < 0)
    pos = np.full(n, -1, dtype=np.int64)
    pos[free] = np.arange(len(free))
    pe = pos[edges[inner]]
    pw = weights[inner]

    if scale is None:
        total = max(src.sum(), snk.sum()) + 2.0 * pw.sum()
        scale = min(1e6, _INT_CAP / max(total, 1e-12))
    cs = np.rint(src * scale).astype(np.int64)
    ct = np.rint(snk * scale).astype(np.int64)
    cw = np.rint(pw * scale).astype(np.int64)
    m = len(free)
    S, T = m, m + 1
    rows = np.concatenate([np.full(m, S), np.arange(m), pe[:, 0], pe[:, 1]])
    cols = np.concatenate([np.arange(m), np.full(m, T), pe[:, 1], pe[:, 0]])
    caps = np.concatenate([cs, ct, cw, cw])
    keep = caps > 0
    cap = sp.csr_matrix((caps[keep], (rows[keep], cols[keep])), shape=(m + 2, m + 2))
    cap.sum_duplicates()
    if cap.nnz and cap.data.max() > np.iinfo(np.int32).max:
        raise SegmentationError("graph capacities overflow int32")
    cap = cap.astype(np.int32)
    res = maximum_flow(cap, S, T)
    residual = (cap.astype(np.int64) - res.flow.astype(np.int64)).tocsr()
    residual.data[residual.data < 0] = 0
    residual.eliminate_zeros()
    reach = breadth_first_order(residual, S, directed=True, return_predecessors=False)
    side = np.zeros(m + 2, dtype=bool)
    side[reach] = True
    fg = fg.copy()
    fg[free] = side[:m]
    return fg, int(res.flow_value), scale


# -------------------------------------------------------------------- grabcut

@dataclass
class GrabCutParams:
    k: int = 5
    gamma: float = 50.0
    mu: float = 1.0
    sigma_m: float = 0.1
    iters: int = 5
    seed: int = 0


@dataclass
class GrabCutResult:
    mask: np.ndarray
    energies: list[float] = field(default_factory=list)
    iterations: int = 0


def grabcut(image: np.ndarray, trimap: Trimap, motion: np.ndarray | None = None,
            params: GrabCutParams | None = None) -> GrabCutResult:
    """Iterated colour-model fitting and graph cuts over the uncertain trimap region.

    ``energies[i]`` is the total energy after iteration ``i``; a step that
    would raise it is rolled back, so the sequence never increases.
    """
    p = params or GrabCutParams()
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    h, w = trimap.labels.shape
    if img.shape[:2] != (h, w):
        raise SegmentationError(f"image {img.shape[:2]} and trimap {(h, w)} differ in size")
    hard_fg, hard_bg = trimap.fg, trimap.bg
    if not hard_fg.any() or not hard_bg.any():
        raise SegmentationError("trimap needs nonempty known foreground and background")
    fg = trimap.initial_foreground()
    result = GrabCutResult(fg.copy())
    if not trimap.unknown.any():
        return result

    X = img.reshape(h * w, -1)
    fixed = np.full(h * w, -1, dtype=np.int8)
    fixed[hard_fg.ravel()] = 1
    fixed[hard_bg.ravel()] = 0
    pairs = pairwise_terms(img, motion, p.gamma, p.mu, p.sigma_m)
    gmm_f, _ = init_gmm(X[fg.ravel()], p.k, p.seed)
    gmm_b, _ = init_gmm(X[~fg.ravel()], p.k, p.seed + 1)

    cf, cb = gmm_f.costs(X), gmm_b.costs(X)
    cur = labelling_energy(fg, cf, cb, pairs)
    for it in range(p.iters):
        nf = refit_gmm(gmm_f, X[fg.ravel()])
        nb = refit_gmm(gmm_b, X[~fg.ravel()])
        ncf, ncb = nf.costs(X), nb.costs(X)
        e_fit = labelling_energy(fg, ncf, ncb, pairs)
        if e_fit <= cur:
            gmm_f, gmm_b, cf, cb, cur = nf, nb, ncf, ncb, e_fit
        lab, _, _ = min_cut(cf, cb, pairs.edges, pairs.weights, fixed)
        lab = lab.reshape(h, w)
        e_cut = labelling_energy(lab, cf, cb, pairs)
        if e_cut <= cur:
            fg, cur = lab, e_cut
        result.energies.append(cur)
        result.iterations = it + 1
        if len(result.energies) > 1 and result.energies[-2] - cur <= 1e-9 * abs(cur):
            break
    result.mask = fg
    return result


def grabcut_segment(image, trimap: Trimap, motion=None, iters: int = 5,
                    params: GrabCutParams | None = None) -> np.ndarray:
    p = params or GrabCutParams(iters=iters)
    return grabcut(image, trimap, motion, p).mask


def save_trimap_png(path, trimap: Trimap) -> None:
    from PIL import Image

    Image.fromarray(trimap.to_rgb(), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    """RGB uint8 array from any image Pillow reads (PNG, PPM, ...)."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)
