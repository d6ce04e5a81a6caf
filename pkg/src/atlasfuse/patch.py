"""Patch-based label fusion with multi-point aggregation.

For every uncertain target voxel a cuboid intensity patch (and, in combined
mode, the label patch from the preceding fusion stage) is compared against
all patches inside a search cuboid of every aligned atlas.  Candidates that
survive a structural pre-selection vote with exponential weights whose
bandwidths adapt to the closest patch in the whole search window; the
weighted mean label patch is scattered over the patch footprint and the
overlapping estimates are majority-voted per voxel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .volume import LabelMap, Volume, _require_same_grid

EPS_SIGMA = 1e-6
VOTE_CHUNKS = 8


@dataclass(frozen=True)
class PatchConfig:
    patch_radius_mm: float = 1.5
    search_radius_mm: float = 4.0
    threshold: float = 0.85  # structural pre-selection level
    beta_intensity: float = 0.5
    beta_label: float = 1.0
    eps_intensity: float = 1e-6
    eps_label: float = 1e-6
    mode: str = "combined"

    def __post_init__(self):
        # radius zero degenerates to a single-voxel patch (single-point mode)
        if self.patch_radius_mm < 0.0:
            raise ValueError("patch radius must be non-negative")
        if self.search_radius_mm <= 0.0:
            raise ValueError("search radius must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("pre-selection threshold must lie in (0, 1)")
        if self.beta_intensity <= 0.0 or self.beta_label <= 0.0:
            raise ValueError("bandwidth factors must be positive")
        if self.eps_intensity <= 0.0 or self.eps_label <= 0.0:
            raise ValueError("stability constants must be positive")
        if self.mode not in ("conventional", "combined"):
            raise ValueError("mode must be conventional or combined")


def half_sizes(radius_mm: float, spacing) -> tuple:
    if radius_mm < 0.0:
        raise ValueError("radius must be non-negative")
    return tuple(int(math.ceil(radius_mm / s)) for s in spacing)


def patch_geometry(radius_mm: float, spacing) -> tuple:
    """Per-axis cuboid sizes 2*ceil(r/spacing)+1."""
    return tuple(2 * h + 1 for h in half_sizes(radius_mm, spacing))


def extract_patch(data: np.ndarray, center, halves) -> np.ndarray:
    """Flattened cuboid around center, mirror-padded at the borders."""
    data = np.asarray(data)
    pads = [(h, h) for h in halves]
    padded = np.pad(data, pads, mode="reflect")
    sl = tuple(slice(c, c + 2 * h + 1) for c, h in zip(center, halves))
    return padded[sl].astype(np.float64).ravel()


def patch_stats(values) -> tuple:
    """Mean and population standard deviation; tiny variances collapse to
    zero so constant patches are recognized exactly."""
    values = np.asarray(values, dtype=np.float64).ravel()
    n = values.size
    if n == 0:
        raise ValueError("empty patch")
    mu = float(values.sum()) / n
    mean_sq = float((values * values).sum()) / n
    var = mean_sq - mu * mu
    if var <= 1e-12 * max(1.0, mean_sq):
        var = 0.0
    return mu, math.sqrt(var)


@njit(cache=True)
def _stat_factor(mu_a, sd_a, mu_b, sd_b, eps_sigma):
    if sd_a == 0.0 and sd_b == 0.0 and mu_a == mu_b:
        return 1.0
    if (sd_a == 0.0) != (sd_b == 0.0):
        return 0.0
    sa = sd_a + eps_sigma
    sb = sd_b + eps_sigma
    num = (4.0 * mu_a * mu_b) * (sa * sb)
    den = (mu_a * mu_a + mu_b * mu_b) * (sa * sa + sb * sb)
    if den == 0.0:
        return 0.0
    return num / den


def stat_factor(mu_a: float, sd_a: float, mu_b: float, sd_b: float,
                eps_sigma: float = EPS_SIGMA) -> float:
    """Regularized mean/spread agreement in (0, 1]; identical constants give
    one, a constant against a varying patch gives zero."""
    return float(_stat_factor(mu_a, sd_a, mu_b, sd_b, eps_sigma))


def intensity_similarity(patch_a, patch_b, eps_sigma: float = EPS_SIGMA) -> float:
    mu_a, sd_a = patch_stats(patch_a)
    mu_b, sd_b = patch_stats(patch_b)
    return stat_factor(mu_a, sd_a, mu_b, sd_b, eps_sigma)


def structural_similarity(intensity_x, labels_x, intensity_y, labels_y,
                          eps_sigma: float = EPS_SIGMA) -> float:
    """Product of the intensity-statistics and label-statistics factors."""
    return intensity_similarity(intensity_x, intensity_y, eps_sigma) * \
        intensity_similarity(labels_x, labels_y, eps_sigma)


def bandwidth(min_distance_sq: float, beta: float, eps: float) -> float:
    """Adaptive squared kernel width from the closest search-window patch."""
    if min_distance_sq < 0.0 or beta <= 0.0 or eps <= 0.0:
        raise ValueError("bad bandwidth inputs")
    return beta * min_distance_sq + eps


def candidate_weight(d_intensity_sq: float, h_intensity_sq: float,
                     d_label_sq: float = 0.0, h_label_sq: float | None = None) -> float:
    """Exponential candidate weight; pass a label bandwidth for combined
    mode, leave it None for intensity-only weighting."""
    w = math.exp(-d_intensity_sq / h_intensity_sq)
    if h_label_sq is not None:
        w *= math.exp(-d_label_sq / h_label_sq)
    return w


def aggregate_votes(votes_fg: np.ndarray, votes_n: np.ndarray,
                    base: LabelMap, uncertain: LabelMap) -> LabelMap:
    """Majority vote of the covering estimates at each uncertain voxel;
    uncovered voxels and certain voxels keep the base label.  Ties go to
    background."""
    out = base.data.copy()
    unc = uncertain.data.astype(bool)
    decided = unc & (votes_n > 0)
    out[decided] = (2 * votes_fg[decided] > votes_n[decided]).astype(np.uint8)
    return LabelMap(out, base.spacing, base.origin)


def _integral(arr: np.ndarray) -> np.ndarray:
    out = np.zeros(tuple(s + 1 for s in arr.shape), dtype=np.float64)
    out[1:, 1:, 1:] = arr.astype(np.float64).cumsum(0).cumsum(1).cumsum(2)
    return out


@njit(cache=True, inline="always")
def _box_sum(s, a0, b0, a1, b1, a2, b2):
    return (s[b0, b1, b2] - s[a0, b1, b2] - s[b0, a1, b2] - s[b0, b1, a2]
            + s[a0, a1, b2] + s[a0, b1, a2] + s[b0, a1, a2] - s[a0, a1, a2])


@njit(cache=True, inline="always")
def _intensity_stats(s1, s2, a0, b0, a1, b1, a2, b2, inv_n):
    mu = _box_sum(s1, a0, b0, a1, b1, a2, b2) * inv_n
    mean_sq = _box_sum(s2, a0, b0, a1, b1, a2, b2) * inv_n
    var = mean_sq - mu * mu
    limit = 1e-12 if mean_sq <= 1.0 else 1e-12 * mean_sq
    if var <= limit:
        var = 0.0
    return mu, math.sqrt(var)


@njit(cache=True, inline="always")
def _label_stats(s1, a0, b0, a1, b1, a2, b2, inv_n):
    mu = _box_sum(s1, a0, b0, a1, b1, a2, b2) * inv_n
    var = mu - mu * mu
    if var < 0.0:
        var = 0.0
    return mu, math.sqrt(var)


@njit(cache=True, parallel=True)
def _fuse_kernel(coords, tgt_pad, tgt_lab_pad, atl_pad, atl_lab_pad,
                 t_s1, t_s2, tl_s1, a_s1, a_s2, al_s1,
                 hp0, hp1, hp2, hs0, hs1, hs2, n0, n1, n2,
                 combined, threshold, beta_i, beta_s, eps_i, eps_s, eps_sigma,
                 cand_di, cand_ds, cand_y0, cand_y1, cand_y2, cand_atlas,
                 num_buf, votes_fg_part, votes_n_part):
    n_atlas = atl_pad.shape[0]
    p0 = 2 * hp0 + 1
    p1 = 2 * hp1 + 1
    p2 = 2 * hp2 + 1
    inv_n = 1.0 / (p0 * p1 * p2)
    thr_sq = threshold * threshold
    n_chunks = votes_fg_part.shape[0]
    n_coords = coords.shape[0]
    for chunk in prange(n_chunks):
        for m in range(chunk, n_coords, n_chunks):
            cx = coords[m, 0]
            cy = coords[m, 1]
            cz = coords[m, 2]
            mu_tx, sd_tx = _intensity_stats(
                t_s1, t_s2, cx, cx + p0, cy, cy + p1, cz, cz + p2, inv_n)
            mu_sx = 0.0
            sd_sx = 0.0
            if combined:
                mu_sx, sd_sx = _label_stats(
                    tl_s1, cx, cx + p0, cy, cy + p1, cz, cz + p2, inv_n)
            lo0 = cx - hs0 if cx - hs0 > 0 else 0
            hi0 = cx + hs0 if cx + hs0 < n0 - 1 else n0 - 1
            lo1 = cy - hs1 if cy - hs1 > 0 else 0
            hi1 = cy + hs1 if cy + hs1 < n1 - 1 else n1 - 1
            lo2 = cz - hs2 if cz - hs2 > 0 else 0
            hi2 = cz + hs2 if cz + hs2 < n2 - 1 else n2 - 1
            n_cand = 0
            min_di = np.inf
            min_ds = np.inf
            for i in range(n_atlas):
                for y0 in range(lo0, hi0 + 1):
                    for y1 in range(lo1, hi1 + 1):
                        for y2 in range(lo2, hi2 + 1):
                            di = 0.0
                            for d0 in range(p0):
                                for d1 in range(p1):
                                    for d2 in range(p2):
                                        diff = (tgt_pad[cx + d0, cy + d1, cz + d2]
                                                - atl_pad[i, y0 + d0, y1 + d1, y2 + d2])
                                        di += diff * diff
                            if di < min_di:
                                min_di = di
                            ds = 0.0
                            if combined:
                                for d0 in range(p0):
                                    for d1 in range(p1):
                                        for d2 in range(p2):
                                            ld = (float(tgt_lab_pad[cx + d0, cy + d1, cz + d2])
                                                  - float(atl_lab_pad[i, y0 + d0, y1 + d1, y2 + d2]))
                                            ds += ld * ld
                                if ds < min_ds:
                                    min_ds = ds
                            cand_di[chunk, n_cand] = di
                            cand_ds[chunk, n_cand] = ds
                            cand_y0[chunk, n_cand] = y0
                            cand_y1[chunk, n_cand] = y1
                            cand_y2[chunk, n_cand] = y2
                            cand_atlas[chunk, n_cand] = i
                            n_cand += 1
            h_i = beta_i * min_di + eps_i
            h_s = beta_s * min_ds + eps_s
            for f in range(p0 * p1 * p2):
                num_buf[chunk, f] = 0.0
            w_sum = 0.0
            for c in range(n_cand):
                i = cand_atlas[chunk, c]
                y0 = cand_y0[chunk, c]
                y1 = cand_y1[chunk, c]
                y2 = cand_y2[chunk, c]
                mu_iy, sd_iy = _intensity_stats(
                    a_s1[i], a_s2[i], y0, y0 + p0, y1, y1 + p1, y2, y2 + p2, inv_n)
                f_i = _stat_factor(mu_tx, sd_tx, mu_iy, sd_iy, eps_sigma)
                if combined:
                    mu_sy, sd_sy = _label_stats(
                        al_s1[i], y0, y0 + p0, y1, y1 + p1, y2, y2 + p2, inv_n)
                    f_s = _stat_factor(mu_sx, sd_sx, mu_sy, sd_sy, eps_sigma)
                    if f_i * f_s <= thr_sq:
                        continue
                    w = math.exp(-cand_di[chunk, c] / h_i) * \
                        math.exp(-cand_ds[chunk, c] / h_s)
                else:
                    if f_i <= threshold:
                        continue
                    w = math.exp(-cand_di[chunk, c] / h_i)
                w_sum += w
                f = 0
                for d0 in range(p0):
                    for d1 in range(p1):
                        for d2 in range(p2):
                            num_buf[chunk, f] += w * atl_lab_pad[i, y0 + d0, y1 + d1, y2 + d2]
                            f += 1
            if w_sum > 0.0:
                f = 0
                for d0 in range(p0):
                    z0 = cx + d0 - hp0
                    for d1 in range(p1):
                        z1 = cy + d1 - hp1
                        for d2 in range(p2):
                            z2 = cz + d2 - hp2
                            if 0 <= z0 < n0 and 0 <= z1 < n1 and 0 <= z2 < n2:
                                est = num_buf[chunk, f] / w_sum
                                votes_n_part[chunk, z0, z1, z2] += 1
                                if est > 0.5:
                                    votes_fg_part[chunk, z0, z1, z2] += 1
                            f += 1


@dataclass
class PatchFusionResult:
    labels: LabelMap
    n_uncertain: int
    n_fallback: int  # uncertain voxels no estimate reached
    votes_fg: np.ndarray | None = None
    votes_n: np.ndarray | None = None


def fuse_patches(target: Volume, base: LabelMap, uncertain: LabelMap,
                 atlas_intensities, atlas_labels,
                 config: PatchConfig | None = None,
                 keep_votes: bool = False) -> PatchFusionResult:
    """Re-decide the uncertain voxels by multi-point patch fusion.

    ``base`` supplies the target's label patches in combined mode and the
    per-voxel fallback wherever no estimate lands; certain voxels always keep
    their ``base`` label.  Atlases must already be aligned to the target grid
    (and intensity-matched by the caller when appropriate).
    """
    if config is None:
        config = PatchConfig()
    atlas_intensities = list(atlas_intensities)
    atlas_labels = list(atlas_labels)
    if len(atlas_intensities) != len(atlas_labels) or not atlas_intensities:
        raise ValueError("need paired atlas intensities and labels")
    _require_same_grid([target, base, uncertain] + atlas_intensities + atlas_labels)

    dims = target.dims
    hp = half_sizes(config.patch_radius_mm, target.spacing)
    hs = half_sizes(config.search_radius_mm, target.spacing)
    for d, h in zip(dims, hp):
        if h >= d:
            raise ValueError("patch radius too large for the volume")

    coords = np.argwhere(uncertain.data.astype(bool)).astype(np.int64)
    n_uncertain = coords.shape[0]
    if n_uncertain == 0:
        return PatchFusionResult(labels=LabelMap(base.data.copy(), base.spacing, base.origin),
                                 n_uncertain=0, n_fallback=0)

    pads = [(h, h) for h in hp]
    tgt_pad = np.pad(target.data, pads, mode="reflect")
    tgt_lab_pad = np.pad(base.data, pads, mode="reflect")
    atl_pad = np.stack([np.pad(v.data, pads, mode="reflect") for v in atlas_intensities])
    atl_lab_pad = np.stack([np.pad(l.data, pads, mode="reflect") for l in atlas_labels])

    t_s1 = _integral(tgt_pad)
    t_s2 = _integral(tgt_pad * tgt_pad)
    tl_s1 = _integral(tgt_lab_pad)
    a_s1 = np.stack([_integral(a) for a in atl_pad])
    a_s2 = np.stack([_integral(a * a) for a in atl_pad])
    al_s1 = np.stack([_integral(l) for l in atl_lab_pad])

    n_atlas = len(atlas_intensities)
    max_cand = n_atlas * int(np.prod([2 * h + 1 for h in hs]))
    n_chunks = min(VOTE_CHUNKS, n_uncertain)
    cand_di = np.empty((n_chunks, max_cand), dtype=np.float64)
    cand_ds = np.empty((n_chunks, max_cand), dtype=np.float64)
    cand_y0 = np.empty((n_chunks, max_cand), dtype=np.int64)
    cand_y1 = np.empty((n_chunks, max_cand), dtype=np.int64)
    cand_y2 = np.empty((n_chunks, max_cand), dtype=np.int64)
    cand_atlas = np.empty((n_chunks, max_cand), dtype=np.int64)
    patch_len = int(np.prod([2 * h + 1 for h in hp]))
    num_buf = np.empty((n_chunks, patch_len), dtype=np.float64)
    votes_fg_part = np.zeros((n_chunks,) + dims, dtype=np.int32)
    votes_n_part = np.zeros((n_chunks,) + dims, dtype=np.int32)

    _fuse_kernel(coords, tgt_pad, tgt_lab_pad, atl_pad, atl_lab_pad,
                 t_s1, t_s2, tl_s1, a_s1, a_s2, al_s1,
                 hp[0], hp[1], hp[2], hs[0], hs[1], hs[2],
                 dims[0], dims[1], dims[2],
                 config.mode == "combined", config.threshold,
                 config.beta_intensity, config.beta_label,
                 config.eps_intensity, config.eps_label, EPS_SIGMA,
                 cand_di, cand_ds, cand_y0, cand_y1, cand_y2, cand_atlas,
                 num_buf, votes_fg_part, votes_n_part)

    votes_fg = votes_fg_part.sum(axis=0, dtype=np.int64)
    votes_n = votes_n_part.sum(axis=0, dtype=np.int64)

    labels = aggregate_votes(votes_fg, votes_n, base, uncertain)
    n_fallback = int((uncertain.data.astype(bool) & (votes_n == 0)).sum())
    return PatchFusionResult(labels=labels, n_uncertain=n_uncertain,
                             n_fallback=n_fallback,
                             votes_fg=votes_fg if keep_votes else None,
                             votes_n=votes_n if keep_votes else None)
