"""Geometric verification of dense correspondence maps.

Fits a planar homography to a dense map with seeded RANSAC, extracts the
cyclically consistent subset of its inliers, and computes the similarity
scores used for re-ranking:

* ``S  = (|C|/|I|) * exp(-beta/|C|)`` with beta the working-resolution pixel
  count, evaluated in both directions and combined by max;
* ``S_L`` the masked cosine similarity between warped and target
  hypercolumn descriptors;
* ``G`` the Euclidean distance between global descriptors;
* ``S_F = log10(S_L * S) * 10**(-G)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import CorrespondenceMap, FeatureMap, GlobalDescriptor, Mask, sample_map
from .rng import Lcg64

DEFAULT_CYCLIC_EPSILON = 2.0


class DegenerateModelError(ValueError):
    """Point configuration does not determine a homography."""


# ---------------------------------------------------------------------------
# homography estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Homography:
    """3x3 projective transform, normalized to H[2,2] = 1 when possible."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).copy()
        if m.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        if not np.isfinite(m).all():
            raise ValueError("homography entries must be finite")
        if abs(m[2, 2]) > 1e-8:
            m /= m[2, 2]
        else:
            m /= np.linalg.norm(m)
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DegenerateModelError("homography is singular")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Project (N, 2) points; rows with w <= 1e-12 come back as nan."""
        pts = np.asarray(pts, dtype=np.float64)
        h = self.matrix
        w = h[2, 0] * pts[:, 0] + h[2, 1] * pts[:, 1] + h[2, 2]
        x = h[0, 0] * pts[:, 0] + h[0, 1] * pts[:, 1] + h[0, 2]
        y = h[1, 0] * pts[:, 0] + h[1, 1] * pts[:, 1] + h[1, 2]
        bad = np.abs(w) <= 1e-12
        w = np.where(bad, 1.0, w)
        out = np.stack([x / w, y / w], axis=1)
        out[bad] = np.nan
        return out

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


def _hartley_normalize(pts: np.ndarray):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise DegenerateModelError("coincident points")
    s = math.sqrt(2.0) / d
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    pn = (pts - c) * s
    return pn, T


def fit_homography_dlt(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Least-squares homography with src -> dst, Hartley-normalized DLT.

    Exact for 4 pairs in general position; raises DegenerateModelError when
    the configuration (e.g. collinear points) leaves the model ambiguous.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2 or len(src) < 4:
        raise ValueError("need matching (N, 2) arrays with N >= 4")
    sn, Ts = _hartley_normalize(src)
    dn, Td = _hartley_normalize(dst)
    n = len(src)
    A = np.zeros((2 * n, 9))
    x, y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    A[0::2, 0] = x
    A[0::2, 1] = y
    A[0::2, 2] = 1.0
    A[0::2, 6] = -u * x
    A[0::2, 7] = -u * y
    A[0::2, 8] = -u
    A[1::2, 3] = x
    A[1::2, 4] = y
    A[1::2, 5] = 1.0
    A[1::2, 6] = -v * x
    A[1::2, 7] = -v * y
    A[1::2, 8] = -v
    _, sing, Vt = np.linalg.svd(A, full_matrices=False)
    # a (near-)2-dimensional nullspace means the points do not pin the model
    if sing[6] < 1e-9 * max(sing[0], 1e-30):
        raise DegenerateModelError("degenerate point configuration")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    return Homography(H)


def symmetric_transfer_error(h: Homography, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """max(forward, backward) transfer distance per correspondence."""
    fwd = h.apply(src)
    bwd = h.inverse().apply(dst)
    with np.errstate(invalid="ignore"):
        ef = np.linalg.norm(fwd - dst, axis=1)
        eb = np.linalg.norm(bwd - src, axis=1)
        err = np.maximum(ef, eb)
    return np.where(np.isfinite(err), err, np.inf)


# ---------------------------------------------------------------------------
# RANSAC over a dense correspondence map
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RansacConfig:
    """Seeded homography RANSAC on a dense map.

    Hypotheses are scored on a sample_stride-subsampled grid; with
    prescreening enabled every hypothesis is first counted on a sparse probe
    subset and only the prescreen_keep best are scored on the full subgrid
    (a deterministic, order-preserving speedup for smooth dense maps).
    """

    iterations: int = 1000
    inlier_threshold: float = 3.0
    min_inliers: int = 20
    seed: int = 0
    sample_stride: int = 2
    prescreen: bool = True
    prescreen_target: int = 1800
    prescreen_keep: int = 48

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if self.sample_stride < 1:
            raise ValueError("sample_stride must be >= 1")


def _map_correspondences(cmap: CorrespondenceMap, stride: int):
    """(target grid points, source coords) over valid pixels of a subgrid."""
    v = cmap.valid[::stride, ::stride]
    ys, xs = np.nonzero(v)
    coords = cmap.coords[::stride, ::stride][ys, xs]
    pts = np.stack([xs * stride, ys * stride], axis=1).astype(np.float64)
    return pts, coords


def _batch_dlt_4pt(src_quads: np.ndarray, dst_quads: np.ndarray) -> np.ndarray:
    """Homographies for (K, 4, 2) quad batches; nan-filled rows when degenerate."""
    k = len(src_quads)
    out = np.full((k, 3, 3), np.nan)
    s_mean = src_quads.mean(axis=1, keepdims=True)
    d_mean = dst_quads.mean(axis=1, keepdims=True)
    s_scale = np.linalg.norm(src_quads - s_mean, axis=2).mean(axis=1)
    d_scale = np.linalg.norm(dst_quads - d_mean, axis=2).mean(axis=1)
    ok = (s_scale > 1e-9) & (d_scale > 1e-9)
    sn = (src_quads - s_mean) * np.where(ok, math.sqrt(2) / np.maximum(s_scale, 1e-12), 0.0)[:, None, None]
    dn = (dst_quads - d_mean) * np.where(ok, math.sqrt(2) / np.maximum(d_scale, 1e-12), 0.0)[:, None, None]

    A = np.zeros((k, 8, 9))
    x, y = sn[..., 0], sn[..., 1]
    u, v = dn[..., 0], dn[..., 1]
    A[:, 0::2, 0] = x
    A[:, 0::2, 1] = y
    A[:, 0::2, 2] = 1.0
    A[:, 0::2, 6] = -u * x
    A[:, 0::2, 7] = -u * y
    A[:, 0::2, 8] = -u
    A[:, 1::2, 3] = x
    A[:, 1::2, 4] = y
    A[:, 1::2, 5] = 1.0
    A[:, 1::2, 6] = -v * x
    A[:, 1::2, 7] = -v * y
    A[:, 1::2, 8] = -v
    _, sing, Vt = np.linalg.svd(A, full_matrices=False)
    good = ok & (sing[:, 6] >= 1e-9 * np.maximum(sing[:, 0], 1e-30))
    if not good.any():
        return out
    Hn = Vt[good, -1].reshape(-1, 3, 3)
    # denormalize: inv(Td) @ Hn @ Ts
    idx = np.nonzero(good)[0]
    for j, i in enumerate(idx):
        ss = math.sqrt(2) / s_scale[i]
        sd = math.sqrt(2) / d_scale[i]
        Ts = np.array([[ss, 0, -ss * s_mean[i, 0, 0]], [0, ss, -ss * s_mean[i, 0, 1]], [0, 0, 1.0]])
        Td_inv = np.array(
            [[1 / sd, 0, d_mean[i, 0, 0]], [0, 1 / sd, d_mean[i, 0, 1]], [0, 0, 1.0]]
        )
        H = Td_inv @ Hn[j] @ Ts
        if abs(H[2, 2]) > 1e-12 and abs(np.linalg.det(H / H[2, 2])) > 1e-12:
            out[i] = H / H[2, 2]
    return out


def _batch_symmetric_errors(models: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """(K, N) symmetric transfer errors; nan models give inf rows."""
    k = len(models)
    n = len(src)
    errs = np.full((k, n), np.inf)
    finite = np.isfinite(models).all(axis=(1, 2))
    if not finite.any():
        return errs
    Hs = models[finite]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        dets = np.linalg.det(Hs)
        inv_ok = np.abs(dets) > 1e-12
        Hinv = np.full_like(Hs, np.nan)
        if inv_ok.any():
            Hinv[inv_ok] = np.linalg.inv(Hs[inv_ok])
        src_h = np.concatenate([src, np.ones((n, 1))], axis=1)
        dst_h = np.concatenate([dst, np.ones((n, 1))], axis=1)
        pf = np.einsum("kab,nb->kna", Hs, src_h)
        pb = np.einsum("kab,nb->kna", Hinv, dst_h)
        wf = pf[..., 2]
        wb = pb[..., 2]
        ef = np.hypot(pf[..., 0] / wf - dst[:, 0], pf[..., 1] / wf - dst[:, 1])
        eb = np.hypot(pb[..., 0] / wb - src[:, 0], pb[..., 1] / wb - src[:, 1])
        e = np.maximum(ef, eb)
        e = np.where(np.isfinite(e) & (np.abs(wf) > 1e-12) & (np.abs(wb) > 1e-12), e, np.inf)
    errs[finite] = e
    return errs


def ransac_homography(cmap: CorrespondenceMap, config: RansacConfig):
    """Robust homography fit over a dense map's valid correspondences.

    Returns (Homography or None, inlier Mask over the full grid).  Sampling
    is driven by a portable 64-bit LCG so results are bit-stable for a given
    seed.  The best hypothesis (by subgrid inlier count, ties to the earlier
    iteration) is refit with DLT on its inliers; the reported mask holds the
    refit model's inliers over all valid pixels.
    """
    empty = Mask(np.zeros((cmap.height, cmap.width), dtype=bool))
    pts, coords = _map_correspondences(cmap, config.sample_stride)
    n = len(pts)
    if n < max(4, config.min_inliers):
        return None, empty

    rng = Lcg64(config.seed)
    quads = np.empty((config.iterations, 4), dtype=np.int64)
    for i in range(config.iterations):
        quads[i] = rng.sample_distinct(n, 4)
    src_quads = pts[quads]       # RANSAC model maps target grid -> source coords
    dst_quads = coords[quads]
    models = _batch_dlt_4pt(src_quads, dst_quads)

    if config.prescreen and n > 2 * config.prescreen_target:
        step = int(np.ceil(n / config.prescreen_target))
        probe_idx = np.arange(0, n, step)
        probe_errs = _batch_symmetric_errors(models, pts[probe_idx], coords[probe_idx])
        probe_counts = (probe_errs <= config.inlier_threshold).sum(axis=1)
        keep = min(config.prescreen_keep, config.iterations)
        # stable sort keeps earlier iterations first among equal counts;
        # re-sorting the kept set preserves the ties-to-earliest rule below
        order = np.argsort(-probe_counts, kind="stable")[:keep]
        cand_models = models[np.sort(order)]
    else:
        cand_models = models

    errs = _batch_symmetric_errors(cand_models, pts, coords)
    counts = (errs <= config.inlier_threshold).sum(axis=1)
    best_j = int(np.argmax(counts))  # first occurrence = earliest iteration
    best_count = int(counts[best_j])
    if best_count < config.min_inliers:
        return None, empty

    best_model = Homography(cand_models[best_j])
    inl = errs[best_j] <= config.inlier_threshold
    try:
        refit = fit_homography_dlt(pts[inl], coords[inl])
    except DegenerateModelError:
        refit = best_model

    ys, xs = np.nonzero(cmap.valid)
    grid_pts = np.stack([xs, ys], axis=1).astype(np.float64)
    grid_err = symmetric_transfer_error(refit, grid_pts, cmap.coords[ys, xs])
    bits = np.zeros((cmap.height, cmap.width), dtype=bool)
    bits[ys, xs] = grid_err <= config.inlier_threshold
    return refit, Mask(bits)


# ---------------------------------------------------------------------------
# cyclic consistency
# ---------------------------------------------------------------------------

def cyclic_mask(o_ab: CorrespondenceMap, o_ba: CorrespondenceMap,
                epsilon: float = DEFAULT_CYCLIC_EPSILON) -> Mask:
    """Pixels of o_ab's grid whose forward-backward composition returns home.

    Pixel p is set iff o_ab[p] is valid, o_ba can be sampled at o_ab[p]
    (in bounds, all contributing pixels valid), and the composed coordinate
    lies within epsilon of p.
    """
    h, w = o_ab.height, o_ab.width
    back, ok = sample_map(o_ba, o_ab.coords[..., 0], o_ab.coords[..., 1])
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dist = np.hypot(back[..., 0] - gx, back[..., 1] - gy)
    bits = o_ab.valid & ok & (dist <= epsilon)
    return Mask(bits)


# ---------------------------------------------------------------------------
# similarity scores
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VerificationResult:
    """One direction of RANSAC + cyclic verification."""

    direction: str                      # "AB" (map on B's grid) or "BA"
    homography: Optional[Homography]
    inlier_mask: Mask                   # I
    consistent_mask: Mask               # C = cyclic AND I
    cyclic: Mask                        # raw cyclic-consistency mask

    def __post_init__(self):
        if (self.consistent_mask.bits & ~self.inlier_mask.bits).any():
            raise ValueError("consistent mask must be a subset of the inlier mask")

    @property
    def num_inliers(self) -> int:
        return self.inlier_mask.count()

    @property
    def num_consistent(self) -> int:
        return self.consistent_mask.count()


@dataclass(frozen=True)
class SimilarityScores:
    """Scores for one query-database pair."""

    G: float
    S: float
    S_L: float
    S_F: float
    S_A: float = 0.0
    S_B: float = 0.0
    # Eq. 3 inverts its intended ordering when 0 < S_L*S < 1; flagged here
    s_f_damped_regime: bool = False


def score_s(num_inliers: int, num_consistent: int, beta: float) -> float:
    """Structural similarity (|C|/|I|) * exp(-beta/|C|); 0 on empty sets."""
    if num_inliers <= 0 or num_consistent <= 0:
        return 0.0
    return (num_consistent / num_inliers) * math.exp(-beta / num_consistent)


def score_g(g_query: GlobalDescriptor, g_db: GlobalDescriptor) -> float:
    """Euclidean distance between unit global descriptors, in [0, 2]."""
    if g_query.dim != g_db.dim:
        raise ValueError("descriptor dimensions differ")
    return float(np.linalg.norm(g_query.values - g_db.values))


def score_s_l(hyper_a: FeatureMap, hyper_b: FeatureMap, o_ab: CorrespondenceMap,
              mask: Mask) -> float:
    """Masked cosine-similarity sum between warped and target hypercolumns.

    o_ab and mask live on hyper_b's grid with coordinates scaled to
    hyper_a's frame; sampled descriptors are renormalized after
    interpolation.  Pixels whose sample is invalid contribute 0.
    """
    if (o_ab.height, o_ab.width) != (hyper_b.height, hyper_b.width):
        raise ValueError("correspondence map grid must match hyper_b")
    if (mask.height, mask.width) != (hyper_b.height, hyper_b.width):
        raise ValueError("mask grid must match hyper_b")
    if hyper_a.channels != hyper_b.channels:
        raise ValueError("hypercolumn channel counts differ")
    sel = mask.bits & o_ab.valid
    if not sel.any():
        return 0.0
    ys, xs = np.nonzero(sel)
    coords = o_ab.coords[ys, xs]
    sampled, ok = _sample_features(hyper_a.values, coords[:, 0], coords[:, 1])
    if not ok.any():
        return 0.0
    norms = np.linalg.norm(sampled, axis=1)
    good = ok & (norms > 1e-12)
    target = hyper_b.values[ys[good], xs[good]].astype(np.float64)
    dots = np.einsum("nc,nc->n", sampled[good] / norms[good, None], target)
    return float(dots.sum())


def _sample_features(values: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Bilinear feature sampling at scattered points, float64 accumulators."""
    h, w = values.shape[:2]
    ok = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    cx = np.where(ok, xs, 0.0)
    cy = np.where(ok, ys, 0.0)
    x0 = np.minimum(cx.astype(np.int64), w - 2 if w > 1 else 0)
    y0 = np.minimum(cy.astype(np.int64), h - 2 if h > 1 else 0)
    fx = (cx - x0)[:, None]
    fy = (cy - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    v = values
    top = v[y0, x0] * (1 - fx) + v[y0, x1] * fx
    bot = v[y1, x0] * (1 - fx) + v[y1, x1] * fx
    out = (top * (1 - fy) + bot * fy).astype(np.float64)
    out[~ok] = 0.0
    return out, ok


def score_s_f(s_l: float, s: float, g: float):
    """Fused similarity log10(S_L*S) * 10**(-G).

    Returns (value, damped_regime).  A non-positive S_L*S product yields
    -inf, ranking the pair last; products in (0, 1) give negative scores
    that large G damps instead of amplifying, flagged via damped_regime.
    """
    prod = s_l * s
    if prod <= 0.0:
        return float("-inf"), False
    return math.log10(prod) * 10.0 ** (-g), prod < 1.0


def beta_for_working_size(height: int, width: int) -> float:
    """Eq-1 constant: the maximum possible |C| at the working resolution."""
    return float(height * width)


def verify_direction(o_fwd: CorrespondenceMap, o_bwd: CorrespondenceMap,
                     direction: str, ransac: RansacConfig,
                     epsilon: float = DEFAULT_CYCLIC_EPSILON) -> VerificationResult:
    """RANSAC + cyclic consistency for one map direction."""
    model, inliers = ransac_homography(o_fwd, ransac)
    cyc = cyclic_mask(o_fwd, o_bwd, epsilon)
    consistent = Mask(cyc.bits & inliers.bits)
    return VerificationResult(direction, model, inliers, consistent, cyc)


def score_pair_s(o_ab: CorrespondenceMap, o_ba: CorrespondenceMap,
                 ransac: RansacConfig,
                 epsilon: float = DEFAULT_CYCLIC_EPSILON):
    """Direction-max structural similarity S = max(S_A, S_B).

    Returns (S, result_AB, result_BA).  Each direction owns an independent
    LCG seeded with the same configured value, which keeps the score exactly
    symmetric under swapping the input pair.
    """
    beta = beta_for_working_size(o_ab.height, o_ab.width)
    r_ab = verify_direction(o_ab, o_ba, "AB", ransac, epsilon)
    r_ba = verify_direction(o_ba, o_ab, "BA", ransac, epsilon)
    s_ab = score_s(r_ab.num_inliers, r_ab.num_consistent, beta)
    s_ba = score_s(r_ba.num_inliers, r_ba.num_consistent, beta)
    return max(s_ab, s_ba), r_ab, r_ba


# ---------------------------------------------------------------------------
# ablation scoring variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VariantInputs:
    num_inliers: int
    num_consistent: int
    s: float
    s_l: float
    g: float
    beta: float


_R_VARIANTS = {
    "S_L_only": lambda v: v.s_l,
    "S_L_times_S": lambda v: v.s_l * v.s,
    "log_S_L_S": lambda v: math.log10(v.s_l * v.s) if v.s_l * v.s > 0 else float("-inf"),
}

_Q_VARIANTS = {
    "Q_5_over_G": lambda v: 5.0 / v.g if v.g > 0 else float("inf"),
    "Q_pow10": lambda v: 10.0 ** (-v.g),
}

_SCALAR_VARIANTS = {
    "I": lambda v: float(v.num_inliers),
    "C": lambda v: float(v.num_consistent),
    "C_over_I": lambda v: v.num_consistent / v.num_inliers if v.num_inliers else 0.0,
    "S": lambda v: score_s(v.num_inliers, v.num_consistent, v.beta),
}


def score_variant(name: str, inputs: VariantInputs) -> float:
    """Appendix scoring variants; R and Q factors compose as "R*Q"."""
    if "*" in name:
        r_name, q_name = name.split("*", 1)
        if r_name not in _R_VARIANTS or q_name not in _Q_VARIANTS:
            raise ValueError(f"unknown variant combination {name!r}")
        r = _R_VARIANTS[r_name](inputs)
        q = _Q_VARIANTS[q_name](inputs)
        if math.isinf(r) and r < 0:
            return float("-inf")
        return r * q
    if name in _SCALAR_VARIANTS:
        return _SCALAR_VARIANTS[name](inputs)
    if name in _R_VARIANTS:
        return _R_VARIANTS[name](inputs)
    if name in _Q_VARIANTS:
        return _Q_VARIANTS[name](inputs)
    raise ValueError(f"unknown scoring variant {name!r}")
