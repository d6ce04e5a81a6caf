import math

import numpy as np
import pytest

from atlasfuse.patch import (
    PatchConfig,
    aggregate_votes,
    bandwidth,
    candidate_weight,
    extract_patch,
    fuse_patches,
    half_sizes,
    intensity_similarity,
    patch_geometry,
    patch_stats,
    stat_factor,
    structural_similarity,
)
from atlasfuse.volume import LabelMap, Volume


def vol(arr, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(arr, dtype=np.float64), spacing)


def lmap(arr, spacing=(1.0, 1.0, 1.0)):
    return LabelMap(np.asarray(arr, dtype=np.uint8), spacing)


class ReferenceFusion:
    """Plain-loop re-implementation used as the oracle for the kernel."""

    def __init__(self, target, base, uncertain, atlas_ints, atlas_labels, config):
        self.target = target
        self.base = base
        self.uncertain = uncertain
        self.atlas_ints = atlas_ints
        self.atlas_labels = atlas_labels
        self.config = config
        self.hp = half_sizes(config.patch_radius_mm, target.spacing)
        self.hs = half_sizes(config.search_radius_mm, target.spacing)

    def window(self, x):
        dims = self.target.dims
        ranges = [range(max(0, c - h), min(n - 1, c + h) + 1)
                  for c, h, n in zip(x, self.hs, dims)]
        for y0 in ranges[0]:
            for y1 in ranges[1]:
                for y2 in ranges[2]:
                    yield (y0, y1, y2)

    def candidates(self, x):
        """All window candidates with distances, similarity, and weight."""
        cfg = self.config
        pi_x = extract_patch(self.target.data, x, self.hp)
        ps_x = extract_patch(self.base.data, x, self.hp)
        rows = []
        min_di = math.inf
        min_ds = math.inf
        for i, (av, al) in enumerate(zip(self.atlas_ints, self.atlas_labels)):
            for y in self.window(x):
                pi_y = extract_patch(av.data, y, self.hp)
                ps_y = extract_patch(al.data, y, self.hp)
                di = float(((pi_x - pi_y) ** 2).sum())
                ds = float(((ps_x - ps_y) ** 2).sum())
                min_di = min(min_di, di)
                min_ds = min(min_ds, ds)
                rows.append([i, y, di, ds, pi_y, ps_y])
        h_i = bandwidth(min_di, cfg.beta_intensity, cfg.eps_intensity)
        h_s = bandwidth(min_ds, cfg.beta_label, cfg.eps_label)
        out = []
        for i, y, di, ds, pi_y, ps_y in rows:
            if cfg.mode == "combined":
                ss = structural_similarity(pi_x, ps_x, pi_y, ps_y)
                if ss <= cfg.threshold ** 2:
                    continue
                w = candidate_weight(di, h_i, ds, h_s)
            else:
                if intensity_similarity(pi_x, pi_y) <= cfg.threshold:
                    continue
                w = candidate_weight(di, h_i)
            out.append((i, y, w, ps_y))
        return out, h_i, h_s

    def run(self):
        dims = self.target.dims
        votes_fg = np.zeros(dims, dtype=np.int64)
        votes_n = np.zeros(dims, dtype=np.int64)
        sizes = tuple(2 * h + 1 for h in self.hp)
        for x in map(tuple, np.argwhere(self.uncertain.data.astype(bool))):
            cands, _, _ = self.candidates(x)
            if not cands:
                continue
            w_sum = sum(w for _, _, w, _ in cands)
            est = np.zeros(sizes, dtype=np.float64)
            for i, y, w, ps_y in cands:
                lab_patch = extract_patch(self.atlas_labels[i].data, y, self.hp)
                est += w * lab_patch.reshape(sizes)
            est /= w_sum
            for d0 in range(sizes[0]):
                for d1 in range(sizes[1]):
                    for d2 in range(sizes[2]):
                        z = (x[0] + d0 - self.hp[0], x[1] + d1 - self.hp[1],
                             x[2] + d2 - self.hp[2])
                        if all(0 <= zi < n for zi, n in zip(z, dims)):
                            votes_n[z] += 1
                            if est[d0, d1, d2] > 0.5:
                                votes_fg[z] += 1
        labels = aggregate_votes(votes_fg, votes_n, self.base, self.uncertain)
        return labels, votes_fg, votes_n


def smooth_noise(rng, dims, sigma=2.0):
    from scipy import ndimage
    return ndimage.gaussian_filter(rng.normal(size=dims), sigma)


def make_cohort(rng, dims=(10, 9, 8), spacing=(1.0, 1.2, 0.9), n_atlas=3):
    x, y, z = np.meshgrid(*[np.arange(d, dtype=float) for d in dims], indexing="ij")
    cx, cy, cz = [(d - 1) / 2.0 for d in dims]
    truth = (((x - cx) / 3.2) ** 2 + ((y - cy) / 2.8) ** 2
             + ((z - cz) / 2.5) ** 2 <= 1.0).astype(np.uint8)
    target = vol(truth * 80.0 + 20.0 + 6.0 * smooth_noise(rng, dims)
                 + rng.normal(scale=2.0, size=dims), spacing)
    atl_ints, atl_labels = [], []
    for _ in range(n_atlas):
        flip = rng.random(dims) < 0.06
        lab = np.where(flip, 1 - truth, truth).astype(np.uint8)
        atl_labels.append(lmap(lab, spacing))
        atl_ints.append(vol(lab * 80.0 + 20.0 + 6.0 * smooth_noise(rng, dims)
                            + rng.normal(scale=2.0, size=dims), spacing))
    stacked = np.stack([a.data for a in atl_labels])
    votes = stacked.sum(axis=0)
    base = lmap((2 * votes > len(atl_labels)).astype(np.uint8), spacing)
    uncertain = lmap(((votes > 0) & (votes < len(atl_labels))).astype(np.uint8), spacing)
    return target, base, uncertain, atl_ints, atl_labels, lmap(truth, spacing)


class TestGeometry:
    def test_reference_anisotropic_case(self):
        assert patch_geometry(1.5, (0.9375, 1.5, 0.9375)) == (5, 3, 5)

    def test_isotropic(self):
        assert patch_geometry(1.5, (1.0, 1.0, 1.0)) == (5, 5, 5)

    def test_minimal(self):
        assert patch_geometry(0.5, (1.0, 1.0, 1.0)) == (3, 3, 3)

    def test_zero_radius_single_voxel(self):
        assert patch_geometry(0.0, (1.0, 1.0, 1.0)) == (1, 1, 1)

    def test_random_pairs_match_formula(self):
        rng = np.random.default_rng(71)
        for _ in range(200):
            r = float(rng.uniform(0.2, 6.0))
            spacing = tuple(rng.uniform(0.4, 3.0, size=3).tolist())
            sizes = patch_geometry(r, spacing)
            for s, v in zip(sizes, spacing):
                assert s == 2 * math.ceil(r / v) + 1
                assert s % 2 == 1

    def test_negative_radius_rejected(self):
        with pytest.raises(ValueError):
            patch_geometry(-0.1, (1.0, 1.0, 1.0))


class TestExtractPatch:
    def test_interior(self):
        data = np.arange(27.0).reshape(3, 3, 3)
        patch = extract_patch(data, (1, 1, 1), (1, 1, 1))
        assert np.array_equal(patch, data.ravel())

    def test_mirror_1d_structure(self):
        data = np.zeros((3, 1, 1))
        data[:, 0, 0] = [4.0, 7.0, 9.0]
        patch = extract_patch(data, (0, 0, 0), (1, 0, 0))
        # mirror without edge repeat: [7, 4, 7]
        assert patch.tolist() == [7.0, 4.0, 7.0]

    def test_corner_against_numpy(self):
        rng = np.random.default_rng(3)
        data = rng.normal(size=(4, 5, 6))
        patch = extract_patch(data, (0, 0, 0), (2, 2, 2))
        padded = np.pad(data, 2, mode="reflect")
        assert np.array_equal(patch, padded[0:5, 0:5, 0:5].ravel())


class TestStats:
    def test_hand_values(self):
        mu, sd = patch_stats([8.0, 12.0, 8.0, 12.0])
        assert mu == 10.0
        assert sd == 2.0

    def test_constant_exact_zero(self):
        mu, sd = patch_stats(np.full(27, 5.5))
        assert mu == 5.5
        assert sd == 0.0

    def test_near_constant_collapses(self):
        vals = 5.0 + 1e-9 * np.array([1.0, -1.0, 0.5, -0.5])
        _, sd = patch_stats(vals)
        assert sd == 0.0


class TestStatFactor:
    def test_identical_stats_exact_one(self):
        assert stat_factor(10.0, 2.0, 10.0, 2.0) == 1.0
        assert stat_factor(-3.7, 0.4, -3.7, 0.4) == 1.0

    def test_mean_mismatch_hand_value(self):
        f = stat_factor(10.0, 2.0, 20.0, 2.0)
        assert f == pytest.approx(0.8, rel=1e-9)

    def test_identical_constants(self):
        assert stat_factor(3.0, 0.0, 3.0, 0.0) == 1.0
        assert stat_factor(0.0, 0.0, 0.0, 0.0) == 1.0

    def test_one_constant_rejected(self):
        assert stat_factor(3.0, 0.0, 3.0, 1.0) == 0.0
        assert stat_factor(5.0, 2.0, 5.0, 0.0) == 0.0

    def test_distinct_constants(self):
        f = stat_factor(5.0, 0.0, 7.0, 0.0)
        assert f == pytest.approx(2 * 35.0 / 74.0, rel=1e-9)


class TestStructuralSimilarity:
    def test_identical_patches(self):
        rng = np.random.default_rng(5)
        pi = rng.normal(size=27) * 3 + 10
        ps = (rng.random(27) < 0.5).astype(float)
        assert structural_similarity(pi, ps, pi.copy(), ps.copy()) == 1.0

    def test_mean_mismatch_case(self):
        pi_x = np.array([8.0, 12.0, 8.0, 12.0])
        pi_y = pi_x + 10.0  # stats (10,2) vs (20,2)
        ps = np.array([0.0, 1.0, 0.0, 1.0])
        ss = structural_similarity(pi_x, ps, pi_y, ps.copy())
        assert ss == pytest.approx(0.8, rel=1e-9)

    def test_structureless_label_patch_rejected(self):
        pi = np.array([8.0, 12.0, 8.0, 12.0])
        ps_zero = np.zeros(4)
        ps_mixed = np.array([0.0, 1.0, 0.0, 1.0])
        assert structural_similarity(pi, ps_zero, pi.copy(), ps_mixed) == 0.0


class TestBandwidthAndWeight:
    def test_zero_min_gives_eps(self):
        assert bandwidth(0.0, 0.5, 1e-6) == 1e-6

    def test_hand_value(self):
        assert bandwidth(4.0, 0.5, 1e-6) == pytest.approx(2.0 + 1e-6, rel=1e-15)

    def test_zero_distance_unit_weight(self):
        assert candidate_weight(0.0, 1e-6) == 1.0

    def test_minimal_candidate_intensity_weight(self):
        # at the minimal distance the exponent collapses to 1/beta
        d = 2.0e4
        h = bandwidth(d, 0.5, 1e-6)
        assert candidate_weight(d, h) == pytest.approx(math.exp(-2.0), rel=1e-9)

    def test_minimal_candidate_combined_weight(self):
        d_i, d_s = 2.0e4, 3.0e4
        h_i = bandwidth(d_i, 0.5, 1e-6)
        h_s = bandwidth(d_s, 1.0, 1e-6)
        w = candidate_weight(d_i, h_i, d_s, h_s)
        assert w == pytest.approx(math.exp(-3.0), rel=1e-9)


class TestAggregate:
    def _maps(self, dims=(2, 2, 1)):
        base = lmap(np.zeros(dims))
        unc = np.zeros(dims, dtype=np.uint8)
        unc[0, 0, 0] = 1
        unc[1, 0, 0] = 1
        return base, lmap(unc)

    def test_single_estimate_foreground(self):
        base, unc = self._maps()
        votes_fg = np.zeros((2, 2, 1), dtype=np.int64)
        votes_n = np.zeros((2, 2, 1), dtype=np.int64)
        votes_fg[0, 0, 0] = 1
        votes_n[0, 0, 0] = 1
        out = aggregate_votes(votes_fg, votes_n, base, unc)
        assert out.data[0, 0, 0] == 1

    def test_one_of_three_background(self):
        base, unc = self._maps()
        votes_fg = np.zeros((2, 2, 1), dtype=np.int64)
        votes_n = np.zeros((2, 2, 1), dtype=np.int64)
        votes_fg[0, 0, 0] = 1
        votes_n[0, 0, 0] = 3
        out = aggregate_votes(votes_fg, votes_n, base, unc)
        assert out.data[0, 0, 0] == 0

    def test_tie_background(self):
        base, unc = self._maps()
        votes_fg = np.full((2, 2, 1), 0, dtype=np.int64)
        votes_n = np.zeros((2, 2, 1), dtype=np.int64)
        votes_fg[0, 0, 0] = 2
        votes_n[0, 0, 0] = 4
        out = aggregate_votes(votes_fg, votes_n, base, unc)
        assert out.data[0, 0, 0] == 0

    def test_uncovered_keeps_base_and_certain_ignores_votes(self):
        base = lmap(np.ones((2, 2, 1)))
        unc = np.zeros((2, 2, 1), dtype=np.uint8)
        unc[0, 0, 0] = 1
        votes_fg = np.zeros((2, 2, 1), dtype=np.int64)
        votes_n = np.zeros((2, 2, 1), dtype=np.int64)
        # votes against a certain voxel must not flip it
        votes_n[1, 1, 0] = 3
        out = aggregate_votes(votes_fg, votes_n, base, lmap(unc))
        assert out.data[0, 0, 0] == 1  # uncovered uncertain: base
        assert out.data[1, 1, 0] == 1


class TestMultipointExamples:
    def _single_voxel_setup(self, labels_list, weights_rig):
        """One uncertain voxel, window restricted to the center voxel of
        each atlas so candidate weights can be rigged via intensities."""
        dims = (3, 3, 3)
        target = vol(np.zeros(dims))
        base = lmap(np.zeros(dims))
        unc = np.zeros(dims, dtype=np.uint8)
        unc[1, 1, 1] = 1
        return dims, target, base, lmap(unc)

    def test_single_candidate_reproduces_label_patch(self):
        # atlas identical to target, intensities a 3-axis ramp: every shifted
        # candidate's patch mean moves by >= 10, so only the aligned candidate
        # reaches similarity 1.0 and survives a near-one threshold
        rng = np.random.default_rng(11)
        dims = (5, 5, 5)
        spacing = (1.0, 1.0, 1.0)
        gx, gy, gz = np.meshgrid(*[np.arange(d, dtype=float) for d in dims],
                                 indexing="ij")
        target = vol(1000.0 * gx + 100.0 * gy + 10.0 * gz + 500.0, spacing)
        atlas_int = vol(target.data.copy(), spacing)
        lab = (rng.random(dims) < 0.5).astype(np.uint8)
        atlas_lab = lmap(lab, spacing)
        base = lmap(np.zeros(dims), spacing)
        unc = np.zeros(dims, dtype=np.uint8)
        unc[2, 2, 2] = 1
        cfg = PatchConfig(mode="conventional", patch_radius_mm=1.0,
                          search_radius_mm=0.5, threshold=1.0 - 1e-7)
        ref = ReferenceFusion(target, base, lmap(unc, spacing), [atlas_int],
                              [atlas_lab], cfg)
        cands, _, _ = ref.candidates((2, 2, 2))
        assert len(cands) == 1
        labels, votes_fg, votes_n = ref.run()
        hp = half_sizes(cfg.patch_radius_mm, spacing)
        patch = extract_patch(lab, (2, 2, 2), hp).reshape([2 * h + 1 for h in hp])
        # estimate equals the candidate's label patch, so each covered voxel
        # votes exactly that label
        core = votes_fg[1:4, 1:4, 1:4]
        assert np.array_equal(core, patch.astype(np.int64))

    def test_symmetric_pair_estimate_half(self):
        pi = np.zeros(27)
        w = [1.0, 1.0]
        patches = [np.ones(27), np.zeros(27)]
        est = (w[0] * patches[0] + w[1] * patches[1]) / sum(w)
        assert np.all(est == 0.5)
        # a 0.5 estimate is not strictly above one half: background vote
        assert not np.any(est > 0.5)

    def test_three_candidate_center(self):
        w = [0.5, 0.25, 0.25]
        centers = [1.0, 1.0, 0.0]
        est = sum(wi * ci for wi, ci in zip(w, centers)) / sum(w)
        assert est == pytest.approx(0.75, rel=1e-12)


class TestFuseAgainstReference:
    @pytest.mark.parametrize("mode", ["conventional", "combined"])
    def test_kernel_matches_reference(self, mode):
        rng = np.random.default_rng(83)
        target, base, uncertain, atl_ints, atl_labels, _ = make_cohort(rng)
        cfg = PatchConfig(mode=mode, patch_radius_mm=1.5, search_radius_mm=2.0)
        res = fuse_patches(target, base, uncertain, atl_ints, atl_labels, cfg,
                           keep_votes=True)
        ref_labels, ref_fg, ref_n = ReferenceFusion(
            target, base, uncertain, atl_ints, atl_labels, cfg).run()
        assert np.array_equal(res.votes_n, ref_n)
        assert np.array_equal(res.votes_fg, ref_fg)
        assert np.array_equal(res.labels.data, ref_labels.data)

    def test_single_point_mode_matches_reference(self):
        rng = np.random.default_rng(89)
        target, base, uncertain, atl_ints, atl_labels, _ = make_cohort(rng)
        cfg = PatchConfig(mode="conventional", patch_radius_mm=0.0,
                          search_radius_mm=2.0, threshold=0.5)
        res = fuse_patches(target, base, uncertain, atl_ints, atl_labels, cfg,
                           keep_votes=True)
        ref_labels, ref_fg, ref_n = ReferenceFusion(
            target, base, uncertain, atl_ints, atl_labels, cfg).run()
        assert np.array_equal(res.labels.data, ref_labels.data)
        # single-voxel patches: every estimate lands on its own voxel only
        assert res.votes_n[uncertain.data.astype(bool)].max() <= 1

    def test_empty_uncertain_returns_base(self):
        rng = np.random.default_rng(97)
        target, base, _, atl_ints, atl_labels, _ = make_cohort(rng)
        empty = lmap(np.zeros(target.dims), target.spacing)
        res = fuse_patches(target, base, empty, atl_ints, atl_labels)
        assert np.array_equal(res.labels.data, base.data)
        assert res.n_uncertain == 0

    def test_validation_errors(self):
        rng = np.random.default_rng(101)
        target, base, uncertain, atl_ints, atl_labels, _ = make_cohort(rng)
        with pytest.raises(ValueError):
            fuse_patches(target, base, uncertain, atl_ints, atl_labels[:-1])
        with pytest.raises(ValueError):
            fuse_patches(target, base, uncertain, [], [])
        big = PatchConfig(patch_radius_mm=50.0)
        with pytest.raises(ValueError):
            fuse_patches(target, base, uncertain, atl_ints, atl_labels, big)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PatchConfig(search_radius_mm=0.0)
        with pytest.raises(ValueError):
            PatchConfig(threshold=1.0)
        with pytest.raises(ValueError):
            PatchConfig(mode="other")


class TestWeightProperties:
    def test_combined_equals_conventional_when_labels_match(self):
        # all label volumes identical and flat: every label distance is zero
        rng = np.random.default_rng(103)
        dims = (8, 8, 8)
        target = vol(rng.normal(size=dims) * 5 + 50)
        atl_ints = [vol(rng.normal(size=dims) * 5 + 50) for _ in range(2)]
        zeros = lmap(np.zeros(dims))
        unc = np.zeros(dims, dtype=np.uint8)
        unc[3:5, 3:5, 3:5] = 1
        unc_map = lmap(unc)
        cfg_comb = PatchConfig(mode="combined", search_radius_mm=1.5)
        ref = ReferenceFusion(target, zeros, unc_map, atl_ints, [zeros, zeros], cfg_comb)
        cands, h_i, h_s = ref.candidates((3, 4, 3))
        assert h_s == cfg_comb.eps_label
        cfg_conv = PatchConfig(mode="conventional", search_radius_mm=1.5,
                               threshold=cfg_comb.threshold ** 2)
        ref_conv = ReferenceFusion(target, zeros, unc_map, atl_ints,
                                   [zeros, zeros], cfg_conv)
        cands_conv, _, _ = ref_conv.candidates((3, 4, 3))
        assert len(cands) == len(cands_conv) > 0
        for (i, y, w, _), (ic, yc, wc, _) in zip(cands, cands_conv):
            assert (i, y) == (ic, yc)
            assert w == wc  # exp(0) factor is exactly one

    def test_ranking_invariant_under_intensity_scaling(self):
        rng = np.random.default_rng(107)
        target, base, uncertain, atl_ints, atl_labels, _ = make_cohort(rng)
        cfg = PatchConfig(mode="conventional", search_radius_mm=1.5)
        x = tuple(np.argwhere(uncertain.data.astype(bool))[0])
        ref = ReferenceFusion(target, base, uncertain, atl_ints, atl_labels, cfg)
        cands, _, _ = ref.candidates(x)
        scale = 7.3
        target_s = Volume(target.data * scale, target.spacing)
        atl_s = [Volume(a.data * scale, a.spacing) for a in atl_ints]
        ref_s = ReferenceFusion(target_s, base, uncertain, atl_s, atl_labels, cfg)
        cands_s, _, _ = ref_s.candidates(x)
        ids = [(i, y) for i, y, _, _ in cands]
        ids_s = [(i, y) for i, y, _, _ in cands_s]
        assert ids == ids_s
        order = np.argsort([-w for _, _, w, _ in cands], kind="stable")
        order_s = np.argsort([-w for _, _, w, _ in cands_s], kind="stable")
        assert np.array_equal(order, order_s)

    def test_weight_scaling_leaves_labels_unchanged(self):
        # aggregate consumes votes only; scaling all weights rescales the
        # estimates' numerator and denominator together
        w = np.array([0.3, 0.9, 0.1])
        patches = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
        est = (w[:, None] * patches).sum(0) / w.sum()
        est_scaled = ((5.0 * w)[:, None] * patches).sum(0) / (5.0 * w).sum()
        assert np.allclose(est, est_scaled, rtol=1e-12)
