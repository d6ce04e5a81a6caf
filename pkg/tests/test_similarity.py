import numpy as np
import pytest

from atlasfuse.similarity import mutual_information, rank_atlases, semi_global_weight, ssd
from atlasfuse.volume import LabelMap, Volume


def vol(data):
    return Volume(np.asarray(data, dtype=float), (1, 1, 1))


# ------------------------------------------------------------- oracles

def mi_oracle(av, bv, bins):
    """Joint histogram MI with explicit loops, nats."""
    a_lo, a_hi = av.min(), av.max()
    b_lo, b_hi = bv.min(), bv.max()
    counts = np.zeros((bins, bins))
    for x, y in zip(av, bv):
        i = min(int((x - a_lo) / (a_hi - a_lo) * bins), bins - 1)
        j = min(int((y - b_lo) / (b_hi - b_lo) * bins), bins - 1)
        counts[i, j] += 1
    p = counts / counts.sum()
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    mi = 0.0
    for i in range(bins):
        for j in range(bins):
            if p[i, j] > 0:
                mi += p[i, j] * np.log(p[i, j] / (px[i] * py[j]))
    return mi


def entropy_oracle(values, bins):
    counts, _ = np.histogram(values, bins=bins)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------- MI

def test_mi_self_equals_marginal_entropy():
    rng = np.random.default_rng(101)
    v = vol(rng.normal(size=(8, 8, 8)))
    h = entropy_oracle(v.data.ravel(), 32)
    assert h > 0
    assert abs(mutual_information(v, v) - h) < 1e-12


def test_mi_with_constant_is_zero():
    rng = np.random.default_rng(102)
    v = vol(rng.normal(size=(6, 6, 6)))
    flat = vol(np.full((6, 6, 6), 3.25))
    assert mutual_information(v, flat) == 0.0
    assert mutual_information(flat, v) == 0.0


def test_mi_independent_uniform_is_small_and_matches_oracle():
    rng = np.random.default_rng(103)
    a = rng.random((32, 32, 32))
    b = rng.random((32, 32, 32))
    got = mutual_information(vol(a), vol(b))
    assert got < 0.05
    assert abs(got - mi_oracle(a.ravel(), b.ravel(), 32)) < 1e-12


def test_mi_symmetry_and_nonnegativity():
    rng = np.random.default_rng(104)
    for _ in range(5):
        a = vol(rng.normal(size=(6, 5, 4)))
        b = vol(rng.normal(size=(6, 5, 4)) + 0.5 * a.data)
        m_ab = mutual_information(a, b)
        m_ba = mutual_information(b, a)
        assert m_ab >= 0.0
        assert abs(m_ab - m_ba) < 1e-12


def test_mi_masked_matches_oracle_and_requires_enough_voxels():
    rng = np.random.default_rng(105)
    a = rng.normal(size=(8, 8, 8))
    b = a + rng.normal(scale=0.3, size=a.shape)
    mask = rng.random(a.shape) < 0.5
    lab = LabelMap(mask, (1, 1, 1))
    got = mutual_information(vol(a), vol(b), mask=lab)
    assert abs(got - mi_oracle(a[mask], b[mask], 32)) < 1e-12

    tiny = np.zeros_like(mask)
    tiny[0, 0, 0] = True
    with pytest.raises(ValueError):
        mutual_information(vol(a), vol(b), mask=LabelMap(tiny, (1, 1, 1)))


# ---------------------------------------------------------------- SSD

def test_ssd_examples():
    rng = np.random.default_rng(111)
    a = rng.normal(size=(5, 5, 5))
    assert ssd(vol(a), vol(a)) == 0.0

    b = a.copy()
    b[2, 2, 2] += 3.0
    mask = np.zeros_like(a, dtype=bool)
    mask[2, 2, 2] = True
    assert ssd(vol(a), vol(b), mask=LabelMap(mask, (1, 1, 1))) == 9.0

    c = rng.normal(size=a.shape)
    brute = 0.0
    for x, y in zip(a.ravel(), c.ravel()):
        brute += (x - y) ** 2
    assert np.isclose(ssd(vol(a), vol(c)), brute, rtol=1e-12, atol=0)


# ------------------------------------------------------------- ranking

def test_rank_atlases_exact_copy_first():
    rng = np.random.default_rng(121)
    target = vol(rng.normal(size=(8, 8, 8)))
    others = [vol(rng.normal(size=(8, 8, 8))) for _ in range(3)]
    atlases = [others[0], vol(target.data.copy()), others[1], others[2]]
    for metric in ("mi", "ssd"):
        ranked = rank_atlases(target, atlases, metric=metric)
        assert ranked.ids[0] == 1
        assert sorted(ranked.ids) == [0, 1, 2, 3]


def test_rank_atlases_prefers_low_noise_copy():
    rng = np.random.default_rng(122)
    base = rng.normal(100.0, 30.0, size=(10, 10, 10))
    target = vol(base)
    low = vol(base + rng.normal(scale=1.0, size=base.shape))
    high = vol(base + rng.normal(scale=10.0, size=base.shape))
    ranked = rank_atlases(target, [high, low], metric="mi", ids=["noisy", "clean"])
    assert ranked.ids == ("clean", "noisy")


def test_rank_ssd_ignores_mask_exterior():
    rng = np.random.default_rng(123)
    target = vol(rng.normal(size=(6, 6, 6)))
    inside = rng.random((6, 6, 6)) < 0.5
    mask = LabelMap(inside, (1, 1, 1))
    a = target.data + rng.normal(scale=0.1, size=target.dims)
    b = a.copy()
    b[~inside] += 1000.0
    ranked = rank_atlases(target, [vol(a), vol(b)], metric="ssd", mask=mask)
    scores = dict(ranked.entries)
    assert scores[0] == scores[1]
    # equal scores fall back to ascending id
    assert ranked.ids == (0, 1)


def test_rank_is_stable_under_reordering():
    rng = np.random.default_rng(124)
    target = vol(rng.normal(size=(8, 8, 8)))
    atlases = [vol(target.data + rng.normal(scale=s, size=target.dims))
               for s in (0.5, 1.0, 2.0, 4.0)]
    ids = ["a", "b", "c", "d"]
    ranked = rank_atlases(target, atlases, metric="mi", ids=ids)
    perm = [2, 0, 3, 1]
    ranked_perm = rank_atlases(target, [atlases[i] for i in perm],
                               metric="mi", ids=[ids[i] for i in perm])
    assert ranked.ids == ranked_perm.ids


# ------------------------------------------------- semi-global weights

def test_semi_global_weight_behaviour():
    rng = np.random.default_rng(131)
    base = rng.normal(80.0, 25.0, size=(10, 10, 10))
    target = vol(base)
    mask = LabelMap(rng.random(base.shape) < 0.7, (1, 1, 1))

    intact = vol(base.copy())
    noisy = vol(base + rng.normal(scale=5.0, size=base.shape))
    flat = vol(np.full(base.shape, 7.0))

    w_intact = semi_global_weight(target, intact, mask)
    w_noisy = semi_global_weight(target, noisy, mask)
    w_flat = semi_global_weight(target, flat, mask)
    assert w_flat == 0.0
    assert w_intact > w_noisy > w_flat

    shuffled = base.copy().ravel()
    half = shuffled.size // 2
    rng.shuffle(shuffled[:half])
    w_half = semi_global_weight(target, vol(shuffled.reshape(base.shape)), mask)
    assert w_half < w_intact

    with pytest.raises(ValueError):
        semi_global_weight(target, intact, None)
