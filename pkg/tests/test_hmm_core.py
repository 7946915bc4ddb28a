import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from _oracles import brute_loglik, brute_viterbi
from lhmm_portfolio.errors import EstimationError
from lhmm_portfolio.hmm_core import (
    GaussianHmmParams,
    baum_welch,
    bic,
    fit_with_restarts,
    forward_backward,
    log_likelihood,
    n_free_params,
    permute_states,
    random_init,
    relabel_states,
    sample_states,
    simulate_emissions,
    stationary_distribution,
    viterbi,
)


def toy(n_d=1, seed=0):
    rng = np.random.default_rng(seed)
    return GaussianHmmParams(
        rng.dirichlet([1, 1]),
        rng.dirichlet([1, 1], size=2),
        rng.normal(0, 0.5, (n_d, 2)),
        rng.uniform(0.2, 1.5, (n_d, 2)),
    )


def test_single_state_is_iid_normal():
    y = np.random.default_rng(0).normal(0.1, 0.3, 50)
    p = GaussianHmmParams([1.0], [[1.0]], [[0.1]], [[0.09]])
    assert log_likelihood(p, y) == pytest.approx(norm.logpdf(y, 0.1, 0.3).sum(), rel=1e-12)


def test_absorbing_first_state():
    y = np.random.default_rng(1).normal(0, 1, (2, 30))
    p = GaussianHmmParams([1, 0], np.eye(2), [[0.2, -5], [0.1, 5]], [[1.0, 2.0], [0.5, 3.0]])
    expect = norm.logpdf(y[0], 0.2, 1.0).sum() + norm.logpdf(y[1], 0.1, math.sqrt(0.5)).sum()
    assert log_likelihood(p, y) == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loglik_matches_enumeration(n, seed):
    p = toy(n_d=2, seed=seed)
    Y = np.random.default_rng(100 + seed).normal(0, 1, (2, n))
    assert log_likelihood(p, Y) == pytest.approx(brute_loglik(p, Y), rel=1e-10)


@pytest.mark.parametrize("n", [2, 4, 7])
@pytest.mark.parametrize("seed", range(4))
def test_viterbi_matches_enumeration(n, seed):
    p = toy(seed=seed)
    Y = np.random.default_rng(200 + seed).normal(0, 1, (1, n))
    np.testing.assert_array_equal(viterbi(p, Y), brute_viterbi(p, Y))


def test_viterbi_separable_supports():
    p = GaussianHmmParams([0.5, 0.5], [[0.7, 0.3], [0.3, 0.7]], [[10.0, -10.0]], [[0.01, 0.01]])
    states = sample_states(p, 200, 3)
    Y = simulate_emissions(p, states, 4)
    np.testing.assert_array_equal(viterbi(p, Y), states)


def test_viterbi_absorbing_second_state():
    p = GaussianHmmParams([0, 1], np.eye(2), [[1.0, -1.0]], [[1.0, 1.0]])
    Y = np.random.default_rng(0).normal(1.0, 1.0, (1, 20))
    np.testing.assert_array_equal(viterbi(p, Y), np.full(20, 2))


def test_nan_rejected():
    with pytest.raises(ValueError):
        log_likelihood(toy(), np.array([[0.1, np.nan]]))


def test_posteriors_normalised():
    p = toy(n_d=3)
    Y = np.random.default_rng(5).normal(0, 1, (3, 40))
    ll, gamma, xi = forward_backward(p, Y)
    np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-12)
    assert xi.sum() == pytest.approx(39, rel=1e-12)


def truth3():
    return GaussianHmmParams(
        [0.6, 0.4],
        [[0.95, 0.05], [0.1, 0.9]],
        [[0.01, -0.015], [0.008, -0.01], [0.012, -0.02]],
        [[0.02**2, 0.04**2], [0.015**2, 0.03**2], [0.025**2, 0.05**2]],
    )


@pytest.fixture(scope="module")
def recovered():
    p = truth3()
    states = sample_states(p, 2000, 10)
    Y = simulate_emissions(p, states, 11)
    return p, Y, fit_with_restarts(Y, restarts=5, rng_seed=12)


def test_baum_welch_recovery(recovered):
    p, Y, fit = recovered
    q = relabel_states(fit.params)
    sd = np.sqrt(p.sigma2)
    assert np.all(np.abs(q.mu - p.mu) <= 0.05 * sd)
    assert np.all(np.abs(q.Pi - p.Pi) <= 0.05)


def test_trace_monotone_and_stochastic(recovered):
    _, Y, fit = recovered
    assert np.all(np.diff(fit.trace) >= -1e-9)
    assert abs(fit.params.alpha.sum() - 1) <= 1e-12
    np.testing.assert_allclose(fit.params.Pi.sum(axis=1), 1, atol=1e-12)
    assert fit.loglik == pytest.approx(log_likelihood(fit.params, Y), rel=1e-12)


def test_each_em_step_stochastic():
    p = truth3()
    Y = simulate_emissions(p, sample_states(p, 300, 1), 2)
    init = random_init(Y, 3)
    for k in range(1, 6):
        f = baum_welch(Y, init, max_iter=k, tol=0)
        assert abs(f.params.alpha.sum() - 1) <= 1e-12
        np.testing.assert_allclose(f.params.Pi.sum(axis=1), 1, atol=1e-12)
        assert np.all(np.diff(f.trace) >= -1e-9)


def test_start_at_truth_converges_quickly():
    p = truth3()
    Y = simulate_emissions(p, sample_states(p, 2000, 20), 21)
    f = baum_welch(Y, p)
    assert f.converged
    assert f.n_iter <= 30


def test_single_restart_equals_one_run():
    p = truth3()
    Y = simulate_emissions(p, sample_states(p, 300, 1), 2)
    child = np.random.default_rng(42).spawn(1)[0]
    init = random_init(Y, child)
    direct = baum_welch(Y, init, rng=child)
    via = fit_with_restarts(Y, restarts=1, rng_seed=42)
    assert via.loglik == direct.loglik
    np.testing.assert_array_equal(via.params.mu, direct.params.mu)


def test_restarts_pick_lowest_bic():
    p = truth3()
    Y = simulate_emissions(p, sample_states(p, 400, 5), 6)
    fit = fit_with_restarts(Y, restarts=6, rng_seed=1)
    finite = [b for b in fit.restart_bics if not math.isnan(b)]
    assert fit.bic == min(finite)


def test_lower_bic_beats_degenerate_start():
    # a start with both states identical is a fixed point of EM and cannot split
    p = truth3()
    Y = simulate_emissions(p, sample_states(p, 400, 7), 8)
    same = GaussianHmmParams([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]],
                             np.repeat(Y.mean(axis=1, keepdims=True), 2, axis=1),
                             np.repeat(Y.var(axis=1, keepdims=True), 2, axis=1))
    stuck = baum_welch(Y, same)
    good = fit_with_restarts(Y, restarts=3, rng_seed=0)
    assert bic(good.params, Y) < bic(stuck.params, Y, stuck.loglik)


def test_all_restarts_fail(monkeypatch):
    import lhmm_portfolio.hmm_core as hc

    monkeypatch.setattr(hc, "_one_restart", lambda *a, **k: None)
    with pytest.raises(EstimationError):
        hc.fit_with_restarts(np.zeros((1, 10)) + np.arange(10), restarts=2)


def test_param_counts():
    assert n_free_params(1, 1) == 2
    assert n_free_params(2, 3) == 15


def test_bic_order_matches_loglik():
    p = truth3()
    Y = simulate_emissions(p, sample_states(p, 100, 1), 2)
    a, b = truth3(), toy(n_d=3)
    la, lb = log_likelihood(a, Y), log_likelihood(b, Y)
    assert (bic(a, Y) < bic(b, Y)) == (la > lb)
    assert bic(a, Y) == pytest.approx(-2 * la + 15 * math.log(100))


def test_relabel_examples():
    # mu/sigma sums (3, -1): keep
    keep = GaussianHmmParams([0.3, 0.7], [[0.9, 0.1], [0.2, 0.8]], [[3.0, -1.0]], [[1.0, 1.0]])
    assert relabel_states(keep) is keep
    swap = GaussianHmmParams([0.3, 0.7], [[0.9, 0.1], [0.2, 0.8]], [[-1.0, 3.0]], [[1.0, 1.0]])
    r = relabel_states(swap)
    np.testing.assert_array_equal(r.mu, [[3.0, -1.0]])
    np.testing.assert_array_equal(r.alpha, [0.7, 0.3])
    np.testing.assert_array_equal(r.Pi, [[0.8, 0.2], [0.1, 0.9]])


def test_relabel_tie_warns():
    p = GaussianHmmParams([0.5, 0.5], [[0.9, 0.1], [0.2, 0.8]], [[1.0, 1.0]], [[1.0, 1.0]])
    with pytest.warns(RuntimeWarning, match="tie"):
        assert relabel_states(p) is p


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_relabel_invariance_and_involution(seed):
    p = toy(n_d=2, seed=seed)
    Y = np.random.default_rng(seed).normal(0, 1, (2, 25))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = relabel_states(p)
    assert log_likelihood(r, Y) == pytest.approx(log_likelihood(p, Y), rel=1e-12)
    s = relabel_states(r)
    np.testing.assert_array_equal(s.mu, r.mu)
    back = permute_states(permute_states(p, [1, 0]), [1, 0])
    np.testing.assert_array_equal(back.Pi, p.Pi)
    scores = (r.mu / np.sqrt(r.sigma2)).sum(axis=0)
    assert scores[0] >= scores[1]


def test_stationary_distribution():
    np.testing.assert_allclose(stationary_distribution([[0.5, 0.5], [0.5, 0.5]]), [0.5, 0.5])
    np.testing.assert_allclose(stationary_distribution([[0.9, 0.1], [0.3, 0.7]]), [0.75, 0.25], atol=1e-14)
    with pytest.raises(ValueError, match="reducible"):
        stationary_distribution(np.eye(2))


def test_emissions_floor_gives_means():
    p = GaussianHmmParams([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]], [[0.02, -0.01]], [[0.0, 0.0]])
    states = np.array([1, 2, 2, 1])
    Y = simulate_emissions(p, states, 0)
    np.testing.assert_allclose(Y[0], [0.02, -0.01, -0.01, 0.02], atol=1e-3)


def test_emission_moments():
    p = truth3()
    n = 100_000
    states = np.where(np.arange(n) % 3 == 0, 2, 1)
    Y = simulate_emissions(p, states, 9)
    for j in (1, 2):
        sel = states == j
        m = sel.sum()
        mean = Y[:, sel].mean(axis=1)
        var = Y[:, sel].var(axis=1, ddof=1)
        mu, s2 = p.mu[:, j - 1], p.sigma2[:, j - 1]
        assert np.all(np.abs(mean - mu) <= 3 * np.sqrt(s2 / m))
        assert np.all(np.abs(var - s2) <= 3 * s2 * math.sqrt(2 / (m - 1)))


def test_emissions_deterministic():
    p = truth3()
    s = sample_states(p, 50, 1)
    np.testing.assert_array_equal(simulate_emissions(p, s, 7), simulate_emissions(p, s, 7))
