import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from negmgan.imeans import (
    BetaParams,
    ClusterState,
    IMeans,
    IMeansConfig,
    theta_map,
    three_sigma_coverage,
    update_known,
)


def line_clusters():
    return [ClusterState(np.array([0.0]), np.array([1.0]), 2),
            ClusterState(np.array([10.0]), np.array([1.0]), 2)]


def test_from_labeled_matches_class_means():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((80, 3))
    labels = np.repeat([str(i) for i in range(8)], 10)
    im = IMeans.from_labeled(x, labels)
    assert im.n_clusters == 8 and im.k_new == 0
    for i in range(8):
        np.testing.assert_allclose(im.clusters[i].mean, x[labels == str(i)].mean(axis=0), rtol=0, atol=1e-12)


def test_from_labeled_rejects_empty_and_warns_on_singletons():
    with pytest.raises(ValueError):
        IMeans.from_labeled(np.zeros((0, 2)), [], [])
    with pytest.warns(UserWarning):
        im = IMeans.from_labeled(np.array([[1.0, 2.0]]), ["a"])
    np.testing.assert_array_equal(im.clusters[0].sigma, [0.0, 0.0])


def test_nearest_cluster_examples():
    im = IMeans(line_clusters())
    assert im.nearest_cluster(np.array([4.0])) == (4.0, 0)
    assert im.nearest_cluster(np.array([10.0])) == (0.0, 1)
    assert im.nearest_cluster(np.array([5.0])) == (5.0, 0)


def test_warmup_point_at_mean_counts_as_inlier():
    im = IMeans(line_clusters()).warmup(np.array([[0.0]]))
    assert im.beta[0].b0 == 1 and im.beta[0].a0 == 0


def test_warmup_counts_sum_to_instances():
    pts = np.random.default_rng(1).uniform(-5, 15, (57, 1))
    im = IMeans(line_clusters()).warmup(pts)
    assert sum(b.a0 + b.b0 for b in im.beta) == 57


def test_warmup_zero_sigma_counts_any_offset_as_outlier():
    im = IMeans([ClusterState(np.zeros(2), np.zeros(2), 1)]).warmup(np.array([[0.0, 0.0], [0.0, 1e-9]]))
    assert (im.beta[0].a0, im.beta[0].b0) == (1, 1)


def test_standard_normal_warmup_inlier_share():
    rng = np.random.default_rng(2)
    p = 8
    pts = rng.standard_normal((10_000, p))
    cluster = ClusterState(np.zeros(p), np.full(p, 9_999.0), 10_000)
    im = IMeans([cluster]).warmup(pts)
    b = im.beta[0]
    assert b.b0 / (b.a0 + b.b0) >= 0.99


def test_theta_examples():
    assert theta_map(BetaParams(1, 9, 0, 0)) == 0.1
    with pytest.raises(ValueError):
        theta_map(BetaParams())


@settings(max_examples=300, deadline=None)
@given(*(st.integers(0, 10**6) for _ in range(4)))
def test_theta_is_exact_ratio(a0, b0, a, b):
    if a0 + b0 + a + b == 0:
        return
    exact = Fraction(a0 + a, a0 + a + b0 + b)
    assert theta_map(BetaParams(a0, b0, a, b)) == float(exact)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 50), st.integers(1, 50))
def test_theta_rises_with_online_spawns(a0, b0):
    thetas = [theta_map(BetaParams(a0, b0, a, 0)) for a in range(0, 200, 10)]
    assert all(x < y for x, y in zip(thetas, thetas[1:]))
    assert thetas[-1] < 1.0


def test_welford_single_step():
    c = update_known(ClusterState(np.zeros(1), np.zeros(1), 1), np.array([2.0]))
    assert c.mean[0] == 1.0 and c.count == 2


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 200), st.integers(1, 5))
def test_welford_matches_batch_statistics(seed, n, p):
    rng = np.random.default_rng(seed)
    x = rng.normal(rng.uniform(-50, 50), rng.uniform(0.1, 20), (n, p))
    c = ClusterState(x[0].copy(), np.zeros(p), 1)
    for row in x[1:]:
        c = update_known(c, row)
    mean, sd = x.mean(axis=0), x.std(axis=0, ddof=1)
    assert np.all(np.abs(c.mean - mean) <= 1e-10 * np.maximum(np.abs(mean), 1e-300) + 1e-12)
    assert np.all(np.abs(c.sigma - sd) <= 1e-10 * sd + 1e-300)


def pinned(theta_a0, theta_b0, clusters=None, **cfg):
    im = IMeans(clusters or line_clusters(), IMeansConfig(**cfg))
    for b in im.beta:
        b.a0, b.b0 = theta_a0, theta_b0
    im.warmed_up = True
    return im


def test_theta_zero_is_nearest_mean_assignment():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-20, 30, (300, 1))
    im = pinned(0, 5, gate=False)
    delta, decisions = im.run_batch(pts)
    assert delta == 0 and im.k_new == 0
    # Oracle: plain nearest-mean with running means.
    means = [0.0, 10.0]
    counts = [2, 2]
    for x, d in zip(pts[:, 0], decisions):
        k = int(np.argmin([abs(x - m) for m in means]))
        assert d.cluster == k
        counts[k] += 1
        means[k] += (x - means[k]) / counts[k]
    np.testing.assert_allclose([c.mean[0] for c in im.clusters], means, rtol=1e-12)


def test_theta_one_spawns_everything():
    pts = np.random.default_rng(4).uniform(-5, 5, (25, 1))
    im = pinned(5, 0, gate=False)
    # Spawned clusters take (1, mean known b0) = (1, 0), so theta stays 1.
    delta, _ = im.run_batch(pts)
    assert delta == 25 == im.k_new
    assert im.n_clusters == im.k0 + im.k_new


def test_spawned_cluster_starts_at_point_with_zero_sigma():
    im = pinned(5, 0, gate=False)
    x = np.array([3.25])
    d = im.process_instance(x)
    assert d.spawned
    new = im.clusters[d.cluster]
    np.testing.assert_array_equal(new.mean, x)
    np.testing.assert_array_equal(new.sigma, [0.0])
    assert new.origin == "spawned"


def test_spawn_prior_rounds_mean_known_b0():
    im = IMeans(line_clusters())
    im.beta[0].b0, im.beta[1].b0 = 4, 7
    assert im.spawn_prior() == BetaParams(1, 6, 0, 0)


def test_join_theta_rule_inverts_branch():
    for seed in range(20):
        x = np.array([3.0 + seed])
        assert not pinned(5, 0, rule="join-theta", gate=False, seed=seed).process_instance(x).spawned
        assert pinned(0, 5, rule="join-theta", gate=False, seed=seed).process_instance(x).spawned
        assert pinned(5, 0, rule="spawn-theta", gate=False, seed=seed).process_instance(x).spawned
        assert not pinned(0, 5, rule="spawn-theta", gate=False, seed=seed).process_instance(x).spawned


def test_non_finite_point_rejected():
    with pytest.raises(ValueError):
        pinned(1, 1).process_instance(np.array([np.nan]))


def test_empty_batch():
    assert pinned(1, 1).run_batch(np.zeros((0, 1)))[0] == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10), st.integers(0, 10), st.booleans())
def test_bookkeeping_invariants(seed, a0, b0, gate):
    if a0 + b0 == 0:
        b0 = 1
    rng = np.random.default_rng(seed)
    im = pinned(a0, b0, gate=gate, seed=seed)
    pts = rng.uniform(-20, 30, (60, 1))
    nearest = {}
    for x in pts:
        d = im.process_instance(x)
        nearest[d.nearest] = nearest.get(d.nearest, 0) + 1
        assert im.n_clusters == im.k0 + im.k_new
    for k, b in enumerate(im.beta):
        assert b.a + b.b == nearest.get(k, 0)


def test_two_separated_blobs_recovered():
    # Blobs sit 20 sigma-norms from the knowns and from each other; the first
    # 200 flagged points of the stream form the warm-up set.
    p = 4
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        knowns = [rng.standard_normal((200, p)) + c for c in (np.zeros(p), np.full(p, 40.0))]
        im = IMeans.from_labeled(np.vstack(knowns), np.repeat(["a", "b"], 200),
                                 config=IMeansConfig(warmup_size=200, seed=seed))
        centers = (np.full(p, -40.0), np.array([40.0, -40, 40, -40]))
        stream = np.vstack([rng.standard_normal((250, p)) + c for c in centers])
        delta, _ = im.feed(stream[rng.permutation(len(stream))])
        hits += delta == 2
    assert hits >= 8


def test_json_round_trip_preserves_decisions():
    rng = np.random.default_rng(6)
    im = pinned(2, 3, gate=False, seed=4)
    im.run_batch(rng.uniform(-5, 15, (10, 1)))
    clone = IMeans.from_json(im.to_json())
    pts = rng.uniform(-5, 15, (20, 1))
    a = [d.cluster for d in im.run_batch(pts)[1]]
    b = [d.cluster for d in clone.run_batch(pts)[1]]
    assert a == b
    assert json.loads(im.to_json())["k_new"] == im.k_new


def test_three_sigma_coverage_on_gaussians():
    rng = np.random.default_rng(7)
    pts = rng.standard_normal((10_000, 1))
    cov = three_sigma_coverage(pts, np.zeros(1), np.ones(1))
    assert abs(cov[1] - 0.6827) < 0.02 and abs(cov[2] - 0.9545) < 0.01 and cov[3] > 0.99


def test_hold_outliers_needs_gate_and_min_size_positive():
    with pytest.raises(ValueError):
        IMeansConfig(gate=False, hold_outliers=True)
    with pytest.raises(ValueError):
        IMeansConfig(min_size=0)


def test_held_outlier_is_not_merged():
    im = pinned(0, 5, hold_outliers=True)
    before = im.clusters[0]
    d = im.process_instance(np.array([4.0]))  # 3-sigma radius of cluster 0 is 3
    assert not d.spawned and d.cluster == -1 and d.nearest == 0
    assert im.clusters[0] is before
    assert im.beta[0].a == 1 and im.beta[0].b == 0
    d = im.process_instance(np.array([1.0]))
    assert d.cluster == 0 and im.beta[0].b == 1


def test_spawns_count_once_they_reach_min_size():
    im = pinned(5, 0, min_size=3)
    assert im.process_instance(np.array([50.0])).spawned
    assert im.k_new == 0 and im.n_spawned == 1
    im.process_instance(np.array([50.1]))
    assert im.k_new == 0
    im.process_instance(np.array([49.9]))
    assert im.k_new == 1 and im.confirmed == [2]
    im.process_instance(np.array([50.0]))
    assert im.k_new == 1


def test_held_outliers_stop_a_grown_cluster_absorbing_a_new_blob():
    # A spawned cluster that has many joins has theta near zero.  Under the
    # plain rule points of a second far blob lose the draw and merge into it;
    # held back, they pile up outlier evidence until one spawns.
    p = 8
    rng = np.random.default_rng(0)
    knowns = rng.standard_normal((400, p)) * 0.5
    first = rng.standard_normal((300, p)) * 0.5 + 20.0
    second = rng.standard_normal((300, p)) * 0.5 + np.r_[32.0, 20, 20, 20, 20, 20, 20, 20]

    def run(hold):
        im = IMeans.from_labeled(knowns, np.repeat(["a", "b"], 200),
                                 config=IMeansConfig(hold_outliers=hold, min_size=5, seed=1))
        for b in im.beta:
            b.a0, b.b0 = 5, 0
        im.warmed_up = True
        im.run_batch(first)
        im.run_batch(second)
        return im.k_new

    assert run(True) == 2
    assert run(False) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10), st.integers(1, 10), st.booleans(),
       st.integers(1, 4))
def test_counting_invariants_with_hold_and_min_size(seed, a0, b0, hold, m):
    rng = np.random.default_rng(seed)
    im = pinned(a0, b0, hold_outliers=hold, min_size=m, seed=seed)
    nearest = {}
    for x in rng.uniform(-20, 30, (60, 1)):
        d = im.process_instance(x)
        nearest[d.nearest] = nearest.get(d.nearest, 0) + 1
        assert im.n_clusters == im.k0 + im.n_spawned
        assert im.k_new == sum(c.count >= m for c in im.clusters[im.k0:])
    for k, b in enumerate(im.beta):
        assert b.a + b.b == nearest.get(k, 0)
    assert sorted(im.confirmed) == [k for k in range(im.k0, im.n_clusters)
                                    if im.clusters[k].count >= m]
