import numpy as np
import pytest

from geli import losses as L
from geli.traj import Dataset

from conftest import make_traj


def test_ge_examples():
    assert L.loss_ge([[3, 4]], [7]) == 0.0
    assert L.loss_ge([[0, 0]], [4]) == 16.0
    assert L.loss_ge([[1.0], [0.0]], [2.0, 3.0]) == 5.0


def test_ge_length_mismatch():
    with pytest.raises(ValueError):
        L.loss_ge([[1, 2]], [1, 2])


def test_subset_full_and_errors():
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(L.sample_index_subset(5, 5, rng), np.arange(5))
    with pytest.raises(ValueError):
        L.sample_index_subset(5, 0, rng)
    with pytest.raises(ValueError):
        L.sample_index_subset(3, 4, rng)


def test_subset_inclusion_frequency():
    rng = np.random.default_rng(1)
    hits = sum(int(L.sample_index_subset(2, 1, rng)[0] == 0) for _ in range(10_000))
    assert abs(hits / 10_000 - 0.5) < 0.02


def test_subset_sorted_distinct():
    rng = np.random.default_rng(2)
    for _ in range(100):
        s = L.sample_index_subset(20, 8, rng)
        assert len(set(s.tolist())) == 8
        assert np.all(np.diff(s) > 0)


def test_rrd_direct_formula():
    assert L.loss_rrd([[1, 2, 3, 4]], [10], 2, subsets=[np.array([0, 2])]) == 4.0


def test_rrd_full_subset_equals_ge():
    rng = np.random.default_rng(3)
    rewards = [rng.normal(size=7) for _ in range(5)]
    returns = rng.normal(size=5) * 3
    ge = L.loss_ge(rewards, returns)
    rrd = L.loss_rrd(rewards, returns, 7, seed=11)
    assert abs(rrd - ge) <= 1e-12 * abs(ge)


def test_rrd_estimator_unbiased():
    rng = np.random.default_rng(4)
    r = rng.normal(size=12)
    est = np.array([L.rrd_estimate(r, L.sample_index_subset(12, 3, rng)) for _ in range(10_000)])
    se = est.std(ddof=1) / np.sqrt(est.size)
    assert abs(est.mean() - r.sum()) < 3 * se


def test_rrd_subset_streams_are_order_free():
    a = L.draw_subsets([10, 10, 10], 4, seed=5, draw=2)
    b = [L.sample_index_subset(10, 4, L.subset_rng(5, 2, i)) for i in (2, 0, 1)]
    np.testing.assert_array_equal(a[2], b[0])
    np.testing.assert_array_equal(a[0], b[1])


def test_rrd_gradient_matches_fd():
    rng = np.random.default_rng(6)
    rewards = [rng.normal(size=6) for _ in range(3)]
    returns = rng.normal(size=3)
    subsets = L.draw_subsets([6, 6, 6], 3, 0)
    _, grads = L.loss_rrd_and_grad(rewards, returns, subsets)
    h = 1e-6
    for i in range(3):
        for t in range(6):
            up = [r.copy() for r in rewards]
            dn = [r.copy() for r in rewards]
            up[i][t] += h
            dn[i][t] -= h
            fd = (L.loss_rrd_and_grad(up, returns, subsets)[0]
                  - L.loss_rrd_and_grad(dn, returns, subsets)[0]) / (2 * h)
            assert abs(fd - grads[i][t]) < 1e-7


def test_gamma_score():
    assert L.gamma_score(1) == 1.0
    assert L.gamma_score(0) == 0.0
    with pytest.raises(ValueError):
        L.gamma_score(None)


def test_li_examples():
    assert L.loss_li([1.0], [1]) == 0.0
    assert L.loss_li([0.5], [0]) == 0.25
    assert L.loss_li([0.2, 0.8], [0, 1]) == pytest.approx(0.04, abs=1e-15)
    with pytest.raises(ValueError):
        L.loss_li([], [])


def test_geli_combination():
    assert L.loss_geli(10.0, 2.0, 1.0) == 10.0
    assert L.loss_geli(10.0, 2.0, 0.0) == 2.0
    assert L.loss_geli(10.0, 2.0, 0.5) == 6.0
    with pytest.raises(ValueError):
        L.loss_geli(1.0, 1.0, 1.5)
    with pytest.raises(ValueError):
        L.GeliConfig(lam=-0.1)


def test_geli_linear_in_lambda():
    lams = np.linspace(0, 1, 11)
    vals = np.array([L.loss_geli(3.7, 1.2, lam) for lam in lams])
    np.testing.assert_allclose(np.diff(vals, 2), 0.0, atol=1e-12)


def _ds(returns, T=3):
    return Dataset(tuple(make_traj(r, T=T) for r in returns))


def test_ircr_examples():
    p = L.ircr_proxy(_ds([0.0, 10.0]))
    np.testing.assert_array_equal(p[0], [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(p[1], [1.0, 1.0, 1.0])
    p = L.ircr_proxy(_ds([2.0, 4.0, 6.0]))
    assert [x[0] for x in p] == [0.0, 0.5, 1.0]
    with pytest.raises(ValueError, match="Mean baseline"):
        L.ircr_proxy(_ds([5.0, 5.0]))


def test_ircr_range_and_constancy():
    rng = np.random.default_rng(7)
    p = L.ircr_proxy(_ds(rng.normal(size=20) * 4, T=5))
    for x in p:
        assert 0.0 <= x.min() and x.max() <= 1.0
        assert np.all(x == x[0])


def test_ircr_zscore_option():
    p = L.ircr_proxy(_ds([1.0, 3.0]), norm="zscore")
    assert [x[0] for x in p] == [-1.0, 1.0]


def test_rudder_credit_examples():
    np.testing.assert_array_equal(L.rudder_credit([0, 2, 5, 6]), [2, 3, 1])
    np.testing.assert_array_equal(L.rudder_credit([4, 4, 4]), [0, 0])
    with pytest.raises(ValueError):
        L.rudder_credit([1.0])


def test_rudder_telescopes():
    rng = np.random.default_rng(8)
    for _ in range(20):
        p = rng.normal(size=rng.integers(2, 30))
        assert L.rudder_credit(p).sum() == pytest.approx(p[-1] - p[0], abs=1e-12)


def test_rudder_prefix_inputs_shape():
    traj = make_traj(1.0, T=4, D=3)
    X = L.rudder_prefix_inputs(traj)
    assert X.shape == (4, 6)
    np.testing.assert_allclose(X[-1, 3:], sum(s.action_features for s in traj.steps))
