import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lhmm_portfolio.errors import CalibrationError, DomainError
from lhmm_portfolio.hmm_core import GaussianHmmParams
from lhmm_portfolio.mmc_copula import (
    MIN_EIGENVALUE,
    CopulaCorrelation,
    assemble_sigma,
    calibrate_pair,
    calibrate_sigma,
    chains_from_uniforms,
    generate_mmc,
    kruskal_rho,
    sample_correlated_uniforms,
    serfozo_f,
    serfozo_h,
    spearman,
    spearman_matrix,
)


def chain(Pi, alpha=(0.5, 0.5)):
    return GaussianHmmParams(alpha, Pi, [[0.01, -0.01]], [[1e-4, 1e-4]])


def transition_freq(path, J=2):
    C = np.zeros((J, J))
    np.add.at(C, (path[:-1], path[1:]), 1)
    return C / C.sum(axis=1, keepdims=True)


SYM = chain([[0.8, 0.2], [0.2, 0.8]])


def test_serfozo_h_examples():
    assert serfozo_h(0.2, [0.3, 0.7]) == 1
    assert serfozo_h(0.3, [0.3, 0.7]) == 2
    for u in (0.0, 0.5, 0.999999):
        assert serfozo_h(u, [1.0, 0.0]) == 1


def test_serfozo_f_examples():
    Pi = [[0.9, 0.1], [0.3, 0.7]]
    assert serfozo_f(1, 0.85, Pi) == 1
    assert serfozo_f(1, 0.95, Pi) == 2
    assert serfozo_f(2, 0.3, Pi) == 2


def test_serfozo_frequencies():
    Pi = np.array([[0.9, 0.1], [0.3, 0.7]])
    U = np.random.default_rng(0).random((1, 100_000))
    path = chains_from_uniforms(U, np.array([[0.5, 0.5]]), Pi[None])[0]
    np.testing.assert_allclose(transition_freq(path), Pi, atol=0.01)
    occ = np.bincount(path, minlength=2) / path.size
    np.testing.assert_allclose(occ, [0.75, 0.25], atol=0.01)


def test_vector_and_loop_paths_agree():
    rng = np.random.default_rng(1)
    Pis = rng.dirichlet([1, 1, 1], size=(40, 3))
    starts = rng.dirichlet([1, 1, 1], size=40)
    U = rng.random((40, 200))
    big = chains_from_uniforms(U, starts, Pis)
    for m in range(0, 40, 7):
        small = chains_from_uniforms(U[m:m + 1], starts[m:m + 1], Pis[m:m + 1])
        np.testing.assert_array_equal(big[m], small[0])
    # and the scalar definitions
    for t in range(5):
        s = serfozo_h(U[0, 0], starts[0]) if t == 0 else serfozo_f(int(big[0, t - 1]) + 1, U[0, t], Pis[0])
        assert s == big[0, t] + 1


def test_uniforms_identity_independent():
    U = sample_correlated_uniforms(np.eye(3), 100_000, 0)
    assert U.shape == (3, 100_000)
    C = np.corrcoef(U)
    assert np.all(np.abs(C[np.triu_indices(3, 1)]) <= 0.02)
    assert 0 <= U.min() and U.max() <= 1


def test_uniforms_comonotone():
    U = sample_correlated_uniforms(np.ones((2, 2)), 1000, 0)
    np.testing.assert_array_equal(U[0], U[1])


def test_uniforms_spearman_half():
    rho = kruskal_rho(0.5)
    U = sample_correlated_uniforms([[1, rho], [rho, 1]], 100_000, 1)
    assert abs(spearman(U[0], U[1]) - 0.5) <= 0.01


def test_uniforms_reject_indefinite():
    with pytest.raises(ValueError, match="Sigma not positive definite"):
        sample_correlated_uniforms([[1, 2], [2, 1]], 10, 0)


def test_mmc_identity_independent():
    hmms = [SYM, chain([[0.7, 0.3], [0.4, 0.6]])]
    S = generate_mmc(hmms, np.eye(2), 100_000, 2)
    table = np.zeros((2, 2))
    np.add.at(table, (S[0] - 1, S[1] - 1), 1)
    assert stats.chi2_contingency(table).pvalue > 0.001


def test_mmc_single_chain():
    Pi = np.array([[0.85, 0.15], [0.35, 0.65]])
    S = generate_mmc([chain(Pi)], np.eye(1), 100_000, 3)
    assert S.shape == (1, 100_000)
    np.testing.assert_allclose(transition_freq(S[0] - 1), Pi, atol=0.02)


def test_mmc_attenuation_at_point_nine():
    rho = kruskal_rho(0.9)
    S = generate_mmc([SYM, SYM], [[1, rho], [rho, 1]], 100_000, 4)
    r = spearman(S[0], S[1])
    assert 0 < r < 0.9


@settings(max_examples=10, deadline=None)
@given(st.floats(-0.95, 0.95), st.floats(-0.95, 0.95), st.floats(-0.95, 0.95), st.integers(0, 1000))
def test_marginal_law_preserved(a, b, c, seed):
    S = assemble_sigma([[1, a, b], [a, 1, c], [b, c, 1]]).Sigma
    Pis = [np.array([[0.9, 0.1], [0.3, 0.7]]), np.array([[0.6, 0.4], [0.5, 0.5]]), np.array([[0.8, 0.2], [0.2, 0.8]])]
    states = generate_mmc([chain(P) for P in Pis], S, 100_000, seed)
    for d, P in enumerate(Pis):
        np.testing.assert_allclose(transition_freq(states[d] - 1), P, atol=0.02)


def test_stationary_start_option():
    h = chain([[0.99, 0.01], [0.01, 0.99]], alpha=(1.0, 0.0))
    firsts = np.array([generate_mmc([h], np.eye(1), 1, s)[0, 0] for s in range(400)])
    assert np.all(firsts == 1)
    firsts = np.array([generate_mmc([h], np.eye(1), 1, s, use_initial=False)[0, 0] for s in range(400)])
    assert 0.4 < np.mean(firsts == 1) < 0.6


def test_spearman_examples():
    x = [1, 2, 2, 1, 2]
    assert spearman(x, x) == pytest.approx(1.0)
    assert spearman(x, [3 - v for v in x]) == pytest.approx(-1.0)
    assert spearman([1, 1, 2, 2], [1, 2, 1, 2]) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError, match="undefined correlation"):
        spearman([1, 1, 1], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 3)), min_size=3, max_size=60))
def test_spearman_matches_scipy(pairs):
    x, y = map(np.array, zip(*pairs))
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return
    assert spearman(x, y) == pytest.approx(stats.spearmanr(x, y).statistic, abs=1e-12)


def test_spearman_matrix_constant_row():
    R = spearman_matrix(np.array([[1, 2, 1, 2], [1, 1, 1, 1], [2, 1, 2, 1]]))
    assert R[0, 1] == 0 and R[0, 2] == pytest.approx(-1)
    np.testing.assert_array_equal(np.diag(R), 1)
    np.testing.assert_array_equal(R, R.T)


def test_kruskal():
    assert kruskal_rho(0.0) == 0.0
    assert kruskal_rho(1.0) == 1.0
    assert kruskal_rho(-1.0) == -1.0
    assert kruskal_rho(0.5) == pytest.approx(0.517638, abs=1e-5)
    with pytest.raises(DomainError):
        kruskal_rho(1.01)
    g = np.linspace(-1, 1, 201)
    v = np.array([kruskal_rho(x) for x in g])
    assert np.all(np.diff(v) > 0)
    np.testing.assert_allclose(v, -v[::-1], atol=1e-15)


@pytest.mark.parametrize("target", [-0.3, 0.0, 0.2, 0.35, 0.5])
def test_calibrate_pair_targets(target):
    c = calibrate_pair(SYM, SYM, target, rng=5)
    assert abs(c.r_star - target) <= 0.01
    assert abs(c.rho_star) >= abs(target)
    assert c.rho == pytest.approx(kruskal_rho(c.rho_star))
    if target == 0.0:
        assert abs(c.rho_star) < 0.02
    if target == 0.35:
        assert c.rho_star > 0.35
    if target == -0.3:
        assert c.rho_star < -0.3


def test_calibrate_unreachable_reports_bound():
    # a chain that almost never leaves state 1 cannot be strongly correlated with a fair coin
    sticky = chain([[0.98, 0.02], [0.9, 0.1]])
    coin = chain([[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(CalibrationError, match="maximum achievable"):
        calibrate_pair(sticky, coin, 0.8, sim_len=20_000, rng=0)


def test_step_mode():
    c = calibrate_pair(SYM, SYM, 0.35, method="step", rng=5)
    assert abs(c.r_star - 0.35) <= 0.01
    with pytest.raises(CalibrationError):
        calibrate_pair(SYM, SYM, -0.3, method="step", rng=5)


def test_calibration_curve_monotone_and_attenuated():
    grid = np.linspace(-0.95, 0.95, 20)
    r = []
    for x in grid:
        rho = kruskal_rho(x)
        S = generate_mmc([SYM, SYM], [[1, rho], [rho, 1]], 50_000, 123)
        r.append(spearman(S[0], S[1]))
    r = np.array(r)
    assert np.all(np.diff(r) >= -0.01)
    assert np.all(np.abs(r) <= np.abs(grid) + 0.02)


def test_assemble_sigma_paths():
    pd = np.array([[1, 0.3, 0.1], [0.3, 1, 0.2], [0.1, 0.2, 1]])
    out = assemble_sigma(pd)
    assert not out.repaired
    np.testing.assert_allclose(out.Sigma, pd, atol=1e-12)
    np.testing.assert_array_equal(assemble_sigma(np.eye(4)).Sigma, np.eye(4))
    bad = np.full((3, 3), -0.9)
    np.fill_diagonal(bad, 1)
    rep = assemble_sigma(bad)
    assert rep.repaired
    assert np.linalg.eigvalsh(rep.Sigma).min() >= MIN_EIGENVALUE


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_assemble_sigma_properties(D, seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1, 1, (D, D))
    S = np.triu(A, 1)
    S = S + S.T + np.eye(D)
    out = assemble_sigma(S).Sigma
    np.testing.assert_array_equal(out, out.T)
    np.testing.assert_allclose(np.diag(out), 1.0, atol=1e-15)
    assert np.linalg.eigvalsh(out).min() >= MIN_EIGENVALUE


def test_calibrate_sigma_three_sectors():
    obs = np.array([[1, 0.3, 0.1], [0.3, 1, -0.2], [0.1, -0.2, 1]])
    sig = calibrate_sigma([SYM] * 3, obs, rng=1, sim_len=20_000)
    assert isinstance(sig, CopulaCorrelation)
    assert sig.D == 3
    assert np.all(np.sign(sig.Sigma[np.triu_indices(3, 1)]) == np.sign(obs[np.triu_indices(3, 1)]))
    assert np.linalg.eigvalsh(sig.Sigma).min() > 0
    again = calibrate_sigma([SYM] * 3, obs, rng=1, sim_len=20_000)
    np.testing.assert_array_equal(sig.Sigma, again.Sigma)
