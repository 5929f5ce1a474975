import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import finite_diff, relerr
from off2on.data import Dataset, Transition
from off2on.nn import ContractError
from off2on.replay import (OFFLINE, ONLINE, PRIORITY_FLOOR, DensityRatioEstimator, PriorityBuffer,
                           SampleStats, SumTree, dr_loss, f_prime, f_star_of_f_prime,
                           initial_default_priority, js_objective, js_objective_gan_form, self_normalize)


def _dataset(m, obs_dim=2, act_dim=1, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset("toy", obs_dim, act_dim, rng.normal(size=(m, obs_dim)), rng.uniform(-1, 1, (m, act_dim)),
                   rng.normal(size=m), rng.normal(size=(m, obs_dim)), np.zeros(m, dtype=bool))


def _transition(rng, obs_dim=2, act_dim=1):
    return Transition(rng.normal(size=obs_dim), rng.uniform(-1, 1, act_dim), 0.0, rng.normal(size=obs_dim), False)


def test_unit_ratio_gives_zero_objective():
    assert f_prime(np.ones(3)).tolist() == [0.0] * 3
    assert f_star_of_f_prime(np.ones(3)).tolist() == [0.0] * 3
    assert js_objective(np.ones(10), np.ones(7)) == 0.0


def test_conjugate_composition_matches_definition():
    # f*(t) = -log(2 - e^t) evaluated at t = f'(w)
    w = np.random.default_rng(0).uniform(0.01, 50, 1000)
    np.testing.assert_allclose(f_star_of_f_prime(w), -np.log(2 - np.exp(f_prime(w))), rtol=1e-10, atol=1e-12)


def test_objective_forms_agree():
    rng = np.random.default_rng(0)
    w = np.exp(rng.uniform(-8, 8, 10_000))
    wn, wd = w[:5000], w[5000:]
    assert abs(js_objective(wn, wd) - js_objective_gan_form(wn, wd)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=20),
       st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=20))
def test_objective_forms_agree_property(wn, wd):
    assert js_objective(np.array(wn), np.array(wd)) == pytest.approx(
        js_objective_gan_form(np.array(wn), np.array(wd)), abs=1e-9)


def test_objective_rejects_nonpositive_ratio():
    with pytest.raises(ContractError):
        js_objective(np.array([1.0, 0.0]), np.ones(2))


def test_grid_search_recovers_two_point_ratio():
    # P and Q on {0, 1}; per-point constant w, brute-force maximization
    p, q = np.array([0.7, 0.3]), np.array([0.4, 0.6])
    grid = np.exp(np.linspace(-4, 4, 8001))

    def objective(w0, w1):
        return p[0] * f_prime(w0) + p[1] * f_prime(w1) - q[0] * f_star_of_f_prime(w0) - q[1] * f_star_of_f_prime(w1)
    # the objective separates per point
    best = [grid[np.argmax(p[i] * f_prime(grid) - q[i] * f_star_of_f_prime(grid))] for i in range(2)]
    np.testing.assert_allclose(best, p / q, atol=1e-2)
    assert objective(*best) >= objective(1.0, 1.0)


def test_self_normalize_examples():
    r = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(self_normalize(r, r, 1.0), [0.5, 1.0, 1.5])
    np.testing.assert_allclose(self_normalize(r, r, 1e12), 1.0, atol=1e-11)
    with pytest.raises(ContractError):
        self_normalize(r, r, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=50), st.floats(0.5, 10.0))
def test_self_normalize_has_unit_mean_on_reference(ratios, temperature):
    r = np.array(ratios)
    assert self_normalize(r, r, temperature).mean() == pytest.approx(1.0, rel=1e-9)


def test_dr_loss_gradient_matches_finite_differences():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        est = DensityRatioEstimator(2, 1, (8, 8), rng=rng)
        xn, xd = rng.normal(size=(6, 3)), rng.normal(size=(7, 3))
        value, g = dr_loss(est, xn, xd)
        num = finite_diff(est.net, lambda: -dr_loss(est, xn, xd)[0])
        assert relerr(g.flat(), num) < 1e-4
        assert value == pytest.approx(js_objective(est.ratio(xn), est.ratio(xd)))


def test_estimator_output_positive_and_normalizer_required():
    rng = np.random.default_rng(0)
    est = DensityRatioEstimator(2, 1, (8,), rng=rng)
    x = rng.normal(size=(50, 3)) * 100
    assert (est.ratio(x) > 0).all()
    with pytest.raises(ContractError):
        est.normalized(x)
    est.train_step(x[:10], x[10:20], x[20:])
    assert est.normalized(x[20:]).mean() == pytest.approx(1.0)
    with pytest.raises(ContractError):
        DensityRatioEstimator(2, 1, temperature=0.0)
    with pytest.raises(ContractError):
        DensityRatioEstimator(2, 1, denominator_mode="both")


def test_equal_distributions_keep_ratio_near_one():
    rng = np.random.default_rng(0)
    est = DensityRatioEstimator(0, 0, (32, 32), temperature=1.0, lr=1e-3, rng=rng, in_dim=1)
    for _ in range(1500):
        est.train_step(rng.normal(size=(128, 1)), rng.normal(size=(128, 1)))
    w = est.ratio(np.linspace(-2, 2, 41)[:, None])
    assert 0.8 <= w.min() and w.max() <= 1.25


# -- sum tree -------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.lists(st.tuples(st.integers(0, 10**6), st.floats(1e-8, 1e4)), max_size=200))
def test_root_equals_leaf_sum_after_writes(capacity, writes):
    tree = SumTree(capacity)
    leaves = np.zeros(capacity)
    for i, v in writes:
        tree.set(i % capacity, v)
        leaves[i % capacity] = v
    assert tree.total == pytest.approx(leaves.sum(), rel=1e-9, abs=1e-12)
    np.testing.assert_array_equal(tree.leaves(capacity), leaves)
    tree.rebuild()
    assert tree.total == pytest.approx(leaves.sum(), rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 100.0), min_size=1, max_size=64), st.data())
def test_find_inverts_cumulative_sum(priorities, data):
    p = np.array(priorities)
    tree = SumTree(len(p))
    tree.set(np.arange(len(p)), p)
    u = data.draw(st.floats(0.0, float(p.sum()) * (1 - 1e-12)))
    got = int(tree.find(np.array([u]), len(p))[0])
    lo, hi = np.r_[0.0, np.cumsum(p)][got], np.cumsum(p)[got]
    # the chosen leaf's interval contains u, up to summation rounding
    tol = 1e-9 * p.sum()
    assert lo - tol <= u < hi + tol


def test_sum_tree_rejects_bad_priorities():
    tree = SumTree(4)
    with pytest.raises(ContractError):
        tree.set(0, -1.0)
    with pytest.raises(ContractError):
        tree.set(0, np.nan)


def test_priority_frequencies_one_to_three():
    tree = SumTree(2)
    tree.set(np.arange(2), np.array([1.0, 3.0]))
    rng = np.random.default_rng(0)
    n = 100_000
    picks = tree.find(rng.random(n) * tree.total, 2)
    freq = np.bincount(picks, minlength=2) / n
    sigma = np.sqrt(0.25 * 0.75 / n)
    assert abs(freq[0] - 0.25) < 3 * sigma and abs(freq[1] - 0.75) < 3 * sigma


def test_equal_priorities_sample_uniformly():
    buf = PriorityBuffer(2, 1, 500)
    buf.init_priorities(_dataset(500), 0.5)
    _, idx = buf.sample_batch(100_000, np.random.default_rng(1))
    assert stats.chisquare(np.bincount(idx, minlength=500)).pvalue > 0.01


# -- priority buffer ----------------------------------------------------------------

def test_default_priority_formula():
    assert initial_default_priority(10**6, 0.5) == 1000.0
    assert initial_default_priority(10**6, 0.75) == pytest.approx(3000.0)
    with pytest.raises(ContractError):
        initial_default_priority(100, 1.0)


def test_insert_after_init():
    m = 10**5
    buf = PriorityBuffer(2, 1, m + 2000)
    buf.init_priorities(_dataset(m), 0.5)
    assert buf.default_priority == 100.0
    assert np.all(buf.priorities() == 1.0)
    rng = np.random.default_rng(0)
    root = buf.tree.total
    i = buf.insert_online(_transition(rng))
    assert buf.tree.get(i) == 100.0 and buf.tree.total == root + 100.0
    assert buf.origin[i] == ONLINE
    for _ in range(999):
        buf.insert_online(_transition(rng))
    assert buf.online_mass() == pytest.approx(0.5, abs=1e-12)


def test_priority_update_refreshes_tree_and_running_max():
    buf = PriorityBuffer(2, 1, 20)
    buf.init_priorities(_dataset(10), 0.5)
    p0 = buf.default_priority
    buf.set_priorities(np.array([3]), np.array([2.5]))
    assert buf.tree.get(3) == 2.5 and buf.tree.total == pytest.approx(9 + 2.5)
    buf.set_priorities(np.array([4]), np.array([5000.0]))
    assert buf.default_priority == 5000.0
    buf.set_priorities(np.array([4]), np.array([1.0]))
    assert buf.default_priority == 5000.0 >= p0


def test_priority_floor_enforced():
    buf = PriorityBuffer(2, 1, 10)
    buf.init_priorities(_dataset(5), 0.5)
    buf.set_priorities(np.arange(5), np.zeros(5))
    assert (buf.priorities() == PRIORITY_FLOOR).all()


def test_update_priorities_uses_normalized_ratio():
    rng = np.random.default_rng(0)
    buf = PriorityBuffer(2, 1, 100)
    buf.init_priorities(_dataset(50), 0.5)
    est = DensityRatioEstimator(2, 1, (8,), temperature=2.0, rng=rng)
    ref = buf.state_action(np.arange(50))
    est.train_step(ref[:10], ref, ref)
    batch, idx = buf.sample_batch(8, rng)
    pri = buf.update_priorities(idx, batch.obs, batch.act, est)
    np.testing.assert_allclose(buf.tree.get(idx), pri)
    expected = est.ratio(buf.state_action(idx)) ** 0.5 / np.mean(est.ratio(ref) ** 0.5)
    np.testing.assert_allclose(pri, expected, rtol=1e-12)


def test_eviction_prefers_lowest_offline():
    rng = np.random.default_rng(0)
    buf = PriorityBuffer(2, 1, 6)
    buf.init_priorities(_dataset(4), 0.5)
    buf.set_priorities(np.array([2]), np.array([0.1]))
    buf.insert_online(_transition(rng))
    buf.insert_online(_transition(rng))
    i = buf.insert_online(_transition(rng))
    assert i == 2 and buf.n_offline == 3
    off = {int(j) for j in np.flatnonzero(buf.origin[:buf.size] == OFFLINE)}
    _, idx = buf.sample_uniform(200, rng, "offline")
    assert set(idx.tolist()) <= off


def test_sample_sources():
    rng = np.random.default_rng(0)
    buf = PriorityBuffer(2, 1, 30)
    buf.init_priorities(_dataset(20), 0.5)
    with pytest.raises(ContractError):
        buf.sample_uniform(4, rng, "online")
    for _ in range(5):
        buf.insert_online(_transition(rng))
    _, idx = buf.sample_uniform(100, rng, "online")
    assert (buf.origin[idx] == ONLINE).all()
    _, idx = buf.sample_uniform(100, rng, "offline")
    assert (buf.origin[idx] == OFFLINE).all()
    with pytest.raises(ContractError):
        buf.sample_uniform(4, rng, "elsewhere")


def test_init_needs_empty_buffer():
    buf = PriorityBuffer(2, 1, 30)
    buf.init_priorities(_dataset(20), 0.5)
    with pytest.raises(ContractError):
        buf.init_priorities(_dataset(5), 0.5)


def test_stratified_sampling_hits_every_stratum():
    buf = PriorityBuffer(2, 1, 8)
    buf.init_priorities(_dataset(8), 0.5)
    _, idx = buf.sample_batch(8, np.random.default_rng(0), stratified=True)
    assert sorted(idx.tolist()) == list(range(8))


def test_composition_stats():
    s = SampleStats()
    assert np.isnan(s.fraction())
    s.add(np.array([OFFLINE, OFFLINE, ONLINE, OFFLINE]))
    assert s.fraction() == 0.75
    s.reset()
    assert s.total == 0


def test_equal_priorities_equal_counts_give_half_offline():
    rng = np.random.default_rng(0)
    buf = PriorityBuffer(2, 1, 2000)
    buf.init_priorities(_dataset(1000), 0.5)
    for _ in range(1000):
        buf.insert_online(_transition(rng))
    buf.set_priorities(np.arange(2000), np.ones(2000))
    _, idx = buf.sample_batch(20_000, rng)
    s = SampleStats()
    s.add(buf.origin[idx])
    assert s.fraction() == pytest.approx(0.5, abs=0.02)
