import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from augref import augmenter as A
from augref import tensor as T
from augref.extractor import FeatureBatch
from augref.gradcheck import grad_check
from augref.tensor import Tensor


def brute_force_pairs(s, labels):
    """O(N^2) scan; strict comparisons keep the first (smallest) index on ties."""
    n = len(labels)
    out = {k: [A.ABSENT] * n for k in ("inner_hard", "inter_hard", "inner_easy", "inter_easy")}
    for a in range(n):
        best = {k: None for k in out}
        for j in range(n):
            if j == a:
                continue
            v = s[a][j]
            if labels[j] == labels[a]:
                if best["inner_hard"] is None or v < s[a][best["inner_hard"]]:
                    best["inner_hard"] = j
                if best["inner_easy"] is None or v > s[a][best["inner_easy"]]:
                    best["inner_easy"] = j
            else:
                if best["inter_hard"] is None or v > s[a][best["inter_hard"]]:
                    best["inter_hard"] = j
                if best["inter_easy"] is None or v < s[a][best["inter_easy"]]:
                    best["inter_easy"] = j
        for k, j in best.items():
            if j is not None:
                out[k][a] = j
    return out


def random_batch(rng, n, k, dim=6, ties=False):
    labels = rng.integers(0, k, size=n)
    if ties:
        # coarse symmetric similarities force many exact ties
        s = rng.integers(-2, 3, size=(n, n)).astype(float) / 2
        s = np.triu(s, 1) + np.triu(s, 1).T + np.eye(n)
        return Tensor(s), labels
    e = T.l2_normalize(Tensor(rng.normal(size=(n, dim))), axis=1)
    return A.similarity_matrix(e), labels


def assert_matches_oracle(sim, labels):
    pairs = A.search_pairs(sim, labels)
    oracle = brute_force_pairs(sim.data.tolist(), labels.tolist())
    for k, idx in oracle.items():
        assert list(getattr(pairs, k)) == idx, k


def _pairs(s_ih, s_xh, s_ie, s_xe):
    one = np.array([1])
    arr = lambda v: np.array([v], dtype=float)  # noqa: E731
    return A.PairAssignment(one, one, one, one, arr(s_ih), arr(s_xh), arr(s_ie), arr(s_xe))


# ---------------------------------------------------------------- similarity and pair search


def test_similarity_examples():
    e = Tensor(np.ones((3, 4)) / 2)
    assert np.allclose(A.similarity_matrix(e).data, 1.0, rtol=0, atol=1e-15)
    assert np.array_equal(A.similarity_matrix(Tensor(np.eye(3))).data, np.eye(3))
    assert A.similarity_matrix(Tensor([[0.6, 0.8], [1.0, 0.0]])).data[0, 1] == pytest.approx(0.6, abs=1e-15)


def test_two_same_label_samples():
    p = A.search_pairs(Tensor([[1.0, 0.3], [0.3, 1.0]]), [5, 5])
    assert list(p.inter_hard) == [A.ABSENT, A.ABSENT] and list(p.inter_easy) == [A.ABSENT, A.ABSENT]
    assert list(p.inner_hard) == [1, 0] and list(p.inner_easy) == [1, 0]
    assert np.all(np.isnan(p.s_inter_hard))


def test_hand_set_two_by_two():
    e = T.l2_normalize(Tensor([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [-0.6, 0.8]]), axis=1)
    labels = np.array([0, 0, 1, 1])
    sim = A.similarity_matrix(e)
    assert_matches_oracle(sim, labels)
    p = A.search_pairs(sim, labels)
    assert list(p.inter_hard) == [2, 2, 1, 1]


def test_pair_search_needs_two_samples():
    with pytest.raises(ValueError):
        A.search_pairs(Tensor([[1.0]]), [0])
    with pytest.raises(T.ShapeError):
        A.search_pairs(Tensor(np.eye(3)), [0, 1])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 64), st.integers(1, 8), st.booleans(), st.integers(0, 2**31))
def test_pair_search_matches_brute_force(n, k, ties, seed):
    sim, labels = random_batch(np.random.default_rng(seed), n, k, ties=ties)
    assert_matches_oracle(sim, labels)


def test_permuting_batch_permutes_assignment():
    rng = np.random.default_rng(1)
    sim, labels = random_batch(rng, 12, 3)
    perm = rng.permutation(12)
    inv = np.argsort(perm)
    p = A.search_pairs(sim, labels)
    q = A.search_pairs(Tensor(sim.data[np.ix_(perm, perm)]), labels[perm])
    for k in ("inner_hard", "inter_hard", "inner_easy", "inter_easy"):
        mapped = np.where(getattr(q, k) == A.ABSENT, A.ABSENT, perm[np.maximum(getattr(q, k), 0)])
        assert np.array_equal(mapped[inv], getattr(p, k))
        sk = "s_" + k
        assert np.array_equal(getattr(q, sk)[inv], getattr(p, sk), equal_nan=True)


# ---------------------------------------------------------------- virtual features


def _batch(n=4, seed=0):
    rng = np.random.default_rng(seed)
    maps = Tensor(rng.normal(size=(n, 3, 2, 2)))
    labels = np.array([0, 0, 1, 1][:n])
    return FeatureBatch(maps, None, labels, list(range(n)))


def test_virtual_endpoints_and_midpoint():
    batch = _batch()
    pairs = A.search_pairs(A.similarity_matrix(T.l2_normalize(T.reshape(batch.maps, (4, -1)), axis=1)), batch.labels)
    rng = np.random.default_rng(0)
    for v in A.synthesize_virtual(batch, pairs, rng, alpha=1.0):
        assert np.array_equal(v.map.data, batch.maps.data[v.anchor])
    for v in A.synthesize_virtual(batch, pairs, rng, alpha=0.0):
        assert np.array_equal(v.map.data, batch.maps.data[v.partner])
    for v in A.synthesize_virtual(batch, pairs, rng, alpha=0.5):
        mid = (batch.maps.data[v.anchor] + batch.maps.data[v.partner]) / 2
        assert np.allclose(v.map.data, mid, rtol=0, atol=1e-15)


def test_virtual_labels_and_deduplication():
    batch = _batch()
    pairs = A.search_pairs(A.similarity_matrix(T.l2_normalize(T.reshape(batch.maps, (4, -1)), axis=1)), batch.labels)
    virtuals = A.synthesize_virtual(batch, pairs, np.random.default_rng(0))
    keys = [(min(v.anchor, v.partner), max(v.anchor, v.partner), v.kind) for v in virtuals]
    assert len(keys) == len(set(keys))
    for v in virtuals:
        assert v.label_a == batch.labels[v.anchor] and v.label_b == batch.labels[v.partner]
        assert (v.kind == "inner") == (v.label_a == v.label_b)
        assert 0.0 <= v.alpha <= 1.0


def test_beta_mixing_weight_mean():
    draws = np.random.default_rng(0).beta(A.MIX_BETA, A.MIX_BETA, size=100_000)
    assert abs(draws.mean() - 0.5) <= 0.01


# ---------------------------------------------------------------- recognition loss


def test_recognition_loss_examples():
    onehot = Tensor(np.eye(3))
    assert A.recognition_loss(onehot, [0, 1, 2]).item() <= 1e-10
    uniform = Tensor(np.full((4, 10), 0.1))
    assert A.recognition_loss(uniform, [0, 3, 5, 9]).item() == pytest.approx(math.log(10), abs=1e-12)


def test_recognition_loss_virtual_example():
    real = Tensor(np.eye(2))
    virt = Tensor([[0.5, 0.25, 0.25]])
    real3 = Tensor(np.eye(3)[:2])
    v = A.VirtualFeature(Tensor(np.zeros(1)), 0, 1, 0.3, 0, 1, "inter")
    got = A.recognition_loss(real3, [0, 1], virt, [v]).item()
    expected = -(0.3 * math.log(0.5) + 0.7 * math.log(0.25))
    assert got == pytest.approx(expected, abs=1e-12)
    # 0.3 ln 2 + 1.4 ln 2 = 1.7 ln 2
    assert expected == pytest.approx(1.7 * math.log(2), abs=1e-15)
    assert got == pytest.approx(1.178350, abs=1e-6)
    with pytest.raises(ValueError):
        A.recognition_loss(real, [0, 1], virt, [])


# ---------------------------------------------------------------- benchmark distance, intensity, adaptive loss


def test_benchmark_distance_examples():
    assert A.benchmark_distance(_pairs(0, 0, 0.4, 0.4))[0] == 0.0
    assert A.benchmark_distance(_pairs(0, 0, 0.95, -0.5))[0] == pytest.approx(-1.45, abs=1e-9)
    assert A.benchmark_distance(_pairs(0, 0, 0.8, 0.0))[0] == pytest.approx(-0.8, abs=1e-9)


def test_dynamic_intensity_examples():
    p1 = _pairs(0.2, 0.9, 0.95, -0.5)
    assert A.intensity_base(0.2, 0.9) == pytest.approx(0.675, abs=1e-12)
    psi1 = A.dynamic_intensity(p1, A.benchmark_distance(p1), 1.0)[0]
    assert psi1 == pytest.approx(-0.97875, abs=1e-9)
    p2 = _pairs(0.1, 0.9, 0.8, 0.0)
    assert A.intensity_base(0.1, 0.9) == pytest.approx(0.7, abs=1e-12)
    psi2 = A.dynamic_intensity(p2, A.benchmark_distance(p2), 1.0)[0]
    assert psi2 == pytest.approx(-0.56, abs=1e-9)
    d = A.benchmark_distance(p1)
    assert np.array_equal(A.dynamic_intensity(p1, d, 0.0), d)
    with pytest.raises(ValueError):
        A.dynamic_intensity(p1, d, -1.0)


def test_adaptive_loss_examples():
    assert A.adaptive_loss(_pairs(0.1, 0.9, 0, 0), np.array([-0.56])).item() == pytest.approx(0.24, abs=1e-9)
    assert A.adaptive_loss(_pairs(0.2, 0.9, 0, 0), np.array([-0.97875])).item() == 0.0
    assert A.adaptive_loss(_pairs(0.9, 0.1, 0, 0), np.array([0.5])).item() == 0.0


def test_adaptive_loss_skips_absent_partners():
    p = A.search_pairs(Tensor([[1.0, 0.3], [0.3, 1.0]]), [0, 0])
    psi = A.dynamic_intensity(p, A.benchmark_distance(p))
    assert A.eligible_anchors(p, psi).size == 0
    assert A.adaptive_loss(p, psi).item() == 0.0


def test_total_loss_examples():
    out = A.total_loss(Tensor(2.0), Tensor(0.5), 1.0, 0.8)
    assert out.l_total.item() == pytest.approx(2.4, abs=1e-12)
    assert A.total_loss(Tensor(1.3), Tensor(0.7), 1.0, 0.0).l_total.item() == 1.3
    assert A.total_loss(Tensor(0.0), Tensor(0.0)).l_total.item() == 0.0
    with pytest.raises(T.NonFiniteError):
        A.total_loss(Tensor(float("nan")), Tensor(0.0))


sims = st.floats(-1, 1, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(sims, sims, sims, sims, st.floats(0, 8), st.floats(0, 8))
def test_intensity_properties(s_ih, s_xh, s_ie, s_xe, rho_a, rho_b):
    base = A.intensity_base(s_ih, s_xh)
    assert 0.0 <= base <= 1.0
    p = _pairs(s_ih, s_xh, s_ie, s_xe)
    d = A.benchmark_distance(p)
    lo, hi = sorted((rho_a, rho_b))
    assert abs(A.dynamic_intensity(p, d, hi)[0]) <= abs(A.dynamic_intensity(p, d, lo)[0]) + 1e-15
    assert A.adaptive_loss(p, A.dynamic_intensity(p, d, lo)).item() >= 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 32), st.integers(1, 5), st.integers(-4, 4), st.integers(0, 2**31))
def test_cosine_scale_invariance(n, k, power, seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n, 5))
    labels = rng.integers(0, k, size=n)

    def chain(v):
        sim = A.similarity_matrix(T.l2_normalize(Tensor(v), axis=1))
        pairs = A.search_pairs(sim, labels)
        d = A.benchmark_distance(pairs)
        psi = A.dynamic_intensity(pairs, d)
        return sim.data, pairs, d, psi, A.adaptive_loss(pairs, psi).item()

    # power-of-two scales are exact, so everything downstream is bit-identical
    a, b = chain(raw), chain(raw * 2.0**power)
    assert np.array_equal(a[0], b[0])
    for key in ("inner_hard", "inter_hard", "inner_easy", "inter_easy"):
        assert np.array_equal(getattr(a[1], key), getattr(b[1], key))
    assert np.array_equal(a[2], b[2], equal_nan=True) and np.array_equal(a[3], b[3], equal_nan=True)
    assert a[4] == b[4]
    c = chain(raw * rng.uniform(0.01, 100))
    assert np.allclose(a[0], c[0], rtol=0, atol=1e-12)


def test_adaptive_loss_gradient_with_active_hinge():
    rng = np.random.default_rng(3)
    labels = np.array([0, 0, 0, 1, 1, 2, 2, 2])
    for _ in range(200):
        e0 = rng.normal(size=(8, 5))
        pairs = A.search_pairs(A.similarity_matrix(T.l2_normalize(Tensor(e0), axis=1)), labels)
        psi = A.dynamic_intensity(pairs, A.benchmark_distance(pairs))
        idx = A.eligible_anchors(pairs, psi)
        margin = pairs.s_inter_hard[idx] + psi[idx] - pairs.s_inner_hard[idx]
        srt = np.sort(A.similarity_matrix(T.l2_normalize(Tensor(e0), axis=1)).data, axis=1)
        if np.any(margin > 1e-3) and np.all(np.abs(margin) > 1e-3) and np.min(np.diff(srt, axis=1)) > 1e-4:
            break

    def fn(t):
        p = A.search_pairs(A.similarity_matrix(T.l2_normalize(t, axis=1)), labels)
        return A.adaptive_loss(p, psi)  # margin frozen at the base point

    assert grad_check(fn, Tensor(e0), tol=1e-4).passed
