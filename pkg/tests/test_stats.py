import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.stats import norm

from trustbench.stats import (
    ANOMALOUS,
    HONEST,
    Pmf,
    SourceProfile,
    batch_averages,
    build_features,
    detection_metrics,
    ecdf_and_ks,
    estimate_pmf,
    knn_classify,
    ks_statistic,
    tv_distance,
    uniform_grid,
)


def prof(sid, events):
    p = SourceProfile(sid)
    for seq, valid, delta in events:
        p.record(seq, valid, delta)
    return p


def test_batch_average_arithmetic():
    p = prof("a", [(0, True, 1.0), (1, True, 2.0), (2, False, 6.0)])
    av, ad = batch_averages({"a": p}, [0, 3])["a"]
    assert av == [pytest.approx(-1 / 3)] and ad == [pytest.approx(3.0)]


def test_uncalled_batch_omitted():
    p = prof("a", [(0, True, 1.0), (7, False, 2.0)])
    av, _ = batch_averages({"a": p}, [0, 3, 6, 9])["a"]
    assert av == [-1.0, 1.0]


def test_two_batch_hand_replay():
    profiles = {
        "a": prof("a", [(0, True, 0.5), (1, False, 2.5), (2, True, 1.0), (3, False, 3.0)]),
        "b": prof("b", [(1, False, 2.5), (3, False, 3.0)]),
    }
    out = batch_averages(profiles, [0, 2, 4])
    assert out["a"] == ([0.0, 0.0], [1.5, 2.0])
    assert out["b"] == ([1.0, 1.0], [2.5, 3.0])
    with pytest.raises(ValueError):
        batch_averages(profiles, [0, 2, 2, 4])


def test_profile_roundtrip():
    p = prof("a", [(0, True, 0.5), (4, False, 2.5)])
    q = SourceProfile.from_dict(p.to_dict())
    assert (q.V, q.n, q.deviations, q.events) == (p.V, p.n, p.deviations, p.events)
    assert q.per_call_V == 0.0


def test_pmf_basic():
    g = uniform_grid(0, 4, 4)
    assert estimate_pmf([2.2], g).masses.tolist() == [0, 0, 1, 0]
    assert estimate_pmf([0.5, 1.5, 2.5, 3.5], g).masses.tolist() == [0.25] * 4
    # out of range goes to the end bins
    assert estimate_pmf([-3, 9], g).masses.tolist() == [0.5, 0, 0, 0.5]
    with pytest.raises(ValueError):
        estimate_pmf([], g)


def test_pmf_gaussian_bin_integrals():
    rng = np.random.default_rng(0)
    n = 10_000
    g = uniform_grid(-4, 4, 64)
    pm = estimate_pmf(rng.standard_normal(n), g)
    exact = np.diff(norm.cdf(g))
    exact[0] += norm.cdf(-4)
    exact[-1] += norm.sf(4)
    se = np.sqrt(exact * (1 - exact) / n)
    assert np.all(np.abs(pm.masses - exact) <= 4 * se + 1e-12)


def brute_ks(a, b):
    best = 0.0
    for x in list(a) + list(b):
        fa = sum(1 for v in a if v <= x) / len(a)
        fb = sum(1 for v in b if v <= x) / len(b)
        best = max(best, abs(fa - fb))
    return best


def kolmogorov_series(lam, terms=200):
    if lam <= 0:
        return 1.0
    return 2 * sum((-1) ** (k - 1) * math.exp(-2 * k * k * lam * lam) for k in range(1, terms + 1))


def test_ks_trivial():
    r = ecdf_and_ks([1, 2, 3], [1, 2, 3])
    assert r.statistic == 0 and r.p_value == 1.0
    assert ks_statistic([1, 2, 3], [4, 5, 6]) == 1.0


def test_ks_brute_and_series():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=200), rng.normal(0.3, 1, size=200)
    r = ecdf_and_ks(a, b)
    assert abs(r.statistic - brute_ks(a, b)) < 1e-12
    lam = math.sqrt(200 * 200 / 400) * r.statistic
    assert abs(r.p_value - kolmogorov_series(lam)) < 1e-6


def test_ks_with_ties():
    a, b = [1, 1, 2, 2, 3], [2, 2, 2, 3, 3, 4]
    assert ks_statistic(a, b) == pytest.approx(brute_ks(a, b), abs=1e-15)


samples = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=30)


@given(samples, samples)
def test_ks_invariant_under_increasing_transform(a, b):
    a, b = np.asarray(a) / 50, np.asarray(b) / 50
    base = ks_statistic(a, b)
    assert 0.0 <= base <= 1.0
    pooled = np.unique(np.concatenate([a, b]))
    for f in (np.exp, lambda x: 3 * x + 7, np.arctan, lambda x: x**3 + x):
        # only transforms that stay strictly increasing on these floats qualify
        assume(np.all(np.diff(f(pooled)) > 0))
        assert ks_statistic(f(a), f(b)) == base


def pmf(masses, grid=None):
    m = np.asarray(masses, dtype=float)
    return Pmf(grid if grid is not None else np.arange(m.size + 1.0), m / m.sum())


def test_tv_examples():
    p = pmf([0.5, 0.5])
    assert tv_distance(p, p) == 0
    assert tv_distance(pmf([1, 0]), pmf([0, 1])) == 1
    assert tv_distance(p, pmf([0.8, 0.2])) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        tv_distance(p, pmf([1, 1, 1]))


weights = st.lists(st.floats(0.0, 1.0), min_size=5, max_size=5).filter(lambda w: sum(w) > 1e-6)


@settings(max_examples=300)
@given(weights, weights, weights)
def test_tv_metric_axioms(x, y, z):
    p, q, r = pmf(x), pmf(y), pmf(z)
    pq = tv_distance(p, q)
    assert 0 <= pq <= 1 + 1e-12
    assert pq == pytest.approx(tv_distance(q, p), abs=1e-15)
    assert tv_distance(p, r) <= pq + tv_distance(q, r) + 1e-12
    assert tv_distance(p, p) == 0


GRID = np.arange(4.0)


def feat(v, d):
    return (pmf(v, GRID), pmf(d, GRID))


def test_knn_trivial_cases():
    feats = {"a": feat([1, 0, 0], [1, 0, 0]), "b": feat([1, 0, 0], [1, 0, 0]), "c": feat([0, 0, 1], [0, 0, 1])}
    labels = {"a": HONEST, "b": HONEST, "c": ANOMALOUS}
    assert knn_classify(feats, labels, 1)["a"] == HONEST
    all_h = {s: HONEST for s in feats}
    assert set(knn_classify(feats, all_h, 1).values()) == {HONEST}
    with pytest.raises(ValueError):
        knn_classify(feats, labels, 2)
    with pytest.raises(ValueError):
        knn_classify(feats, labels, 3)


def test_knn_six_source_hand_oracle():
    feats = {
        "s1": feat([6, 3, 1], [7, 2, 1]),
        "s2": feat([5, 4, 1], [6, 3, 1]),
        "s3": feat([7, 2, 1], [5, 4, 1]),
        "s4": feat([1, 3, 6], [1, 2, 7]),
        "s5": feat([2, 3, 5], [1, 4, 5]),
        "s6": feat([5, 3, 2], [2, 3, 5]),
    }
    labels = {"s1": HONEST, "s2": HONEST, "s3": HONEST, "s4": ANOMALOUS, "s5": ANOMALOUS, "s6": ANOMALOUS}
    ids = sorted(feats)

    def dist(a, b):
        return sum(0.5 * sum(abs(x - y) for x, y in zip(feats[a][i].masses, feats[b][i].masses)) for i in (0, 1))

    expected = {}
    for s in ids:
        others = sorted((dist(s, o), o) for o in ids if o != s)
        votes = [labels[o] for _, o in others[:3]]
        expected[s] = ANOMALOUS if votes.count(ANOMALOUS) >= 2 else HONEST
    got = knn_classify(feats, labels, 3)
    assert got == expected
    assert got == knn_classify(dict(reversed(list(feats.items()))), labels, 3)


def test_knn_tie_breaks_to_smaller_id():
    feats = {"a": feat([1, 0, 0], [1, 0, 0]), "b": feat([0, 1, 0], [1, 0, 0]), "c": feat([0, 1, 0], [1, 0, 0])}
    # a is equidistant from b and c; k=1 must pick b
    assert knn_classify(feats, {"a": HONEST, "b": ANOMALOUS, "c": HONEST}, 1)["a"] == ANOMALOUS
    assert knn_classify(feats, {"a": HONEST, "b": HONEST, "c": ANOMALOUS}, 1)["a"] == HONEST


def test_detection_metrics_cases():
    truth = {f"h{i}": HONEST for i in range(10)} | {"x0": ANOMALOUS, "x1": ANOMALOUS}
    m = detection_metrics(truth, truth)
    assert (m.false_alarm_pct, m.miss_detection_pct) == (0.0, 0.0)
    m = detection_metrics({s: HONEST for s in truth}, truth)
    assert (m.false_alarm_pct, m.miss_detection_pct) == (0.0, 100.0)
    pred = dict(truth, h3=ANOMALOUS, x1=HONEST)
    m = detection_metrics(pred, truth)
    assert (m.false_alarm_pct, m.miss_detection_pct) == (10.0, 50.0)
    m = detection_metrics({"h": HONEST}, {"h": HONEST})
    assert m.miss_detection_pct is None


def test_build_features_shared_grids():
    avgs = {"a": ([-1.0, -0.5], [0.2, 0.4]), "b": ([0.5], [3.0]), "c": ([], [])}
    feats, vg, dg = build_features(avgs)
    assert set(feats) == {"a", "b"}
    assert vg[0] == -1 and vg[-1] == 1 and len(vg) == 42
    assert len(dg) == 65 and dg[0] == 0
    assert all(np.array_equal(f[1].bin_edges, dg) for f in feats.values())


def test_anomalous_ecdf_shifted(small_run):
    a = small_run.analysis
    bad = [a.per_call_V[s] for s in a.per_call_V if a.labels[s] == ANOMALOUS]
    good = [a.per_call_V[s] for s in a.per_call_V if a.labels[s] == HONEST]
    assert np.mean(bad) > np.mean(good)
