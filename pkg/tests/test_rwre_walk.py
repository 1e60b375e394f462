import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from brwre.env_model import (CountLaw, FiniteBroodLaw, GaussianBroodLaw, GaussianFamily, MixtureEnvironment,
                             RealizedEnvironment, SampledBroodLaw, law_kappa)
from brwre.errors import ConfigError, UnsupportedOperation
from brwre.rwre_walk import (TubeSpec, annealed_first_step, brownian_strip_survival, m2o_fixtures,
                             m2o_functionals, many_to_one_check, sample_associated_walk, step_tables, tilt_law,
                             tilted_expectation, tree_expectation, tube_probability, write_tube_csv)

# discrete monitoring of a Gaussian walk sees each wall shifted outward by zeta(1/2)/sqrt(2 pi)
WALL_SHIFT = 0.5826


def walk_strip_probability(n, width):
    """Oracle for P(N(0,1)-step walk from the centre stays in a strip of the given width for n steps)."""
    w = width + 2 * WALL_SHIFT
    return brownian_strip_survival(n, w, w / 2)


# -- tilt ------------------------------------------------------------------

def test_tilt_binary_pm_example():
    t = tilt_law(FiniteBroodLaw.deterministic([1.0, -1.0]), 1.0)
    pmf = dict(zip(t.values, t.probs))
    assert pmf[-1.0] == pytest.approx(math.e / (math.e + 1 / math.e), abs=1e-15)
    assert pmf[-1.0] == pytest.approx(0.8808, abs=1e-4)
    assert pmf[1.0] == pytest.approx(0.1192, abs=1e-4)
    assert set(t.marks.tolist()) == {2}
    assert t.total_mass == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("theta", [0.0, 0.5, 3.0])
def test_tilt_binary_zero(theta):
    t = tilt_law(FiniteBroodLaw.deterministic([0.0, 0.0]), theta)
    assert t.values.tolist() == [0.0] and t.marks.tolist() == [2]
    assert t.probs[0] == pytest.approx(1.0, abs=1e-15)


def test_gaussian_tilt_mean_is_minus_kappa_prime():
    theta = math.sqrt(2 * math.log(2))
    law = GaussianBroodLaw([2], [1.0], 0.0, 1.0)
    t = tilt_law(law, theta)
    assert t.mean == pytest.approx(-theta, abs=1e-12)
    assert t.mean + law_kappa(law, theta, 1) == pytest.approx(0.0, abs=1e-10)
    assert t.variance == pytest.approx(law_kappa(law, theta, 2), abs=1e-10)


def test_gaussian_tilt_matches_importance_oracle():
    # simulate whole broods and weight each child by exp(-theta zeta - kappa)
    law = GaussianBroodLaw([1, 3], [0.4, 0.6], 0.3, 0.7)
    theta = 0.9
    t = tilt_law(law, theta)
    rng = np.random.default_rng(2024)
    broods = 400_000
    k = np.where(rng.random(broods) < 0.4, 1, 3)
    z = law.mu + law.sigma * rng.standard_normal((broods, 3))
    mask = np.arange(3)[None, :] < k[:, None]
    w = np.exp(-theta * z - t.log_normalizer) * mask
    total = w.sum() / broods
    mean = (w * z).sum() / w.sum()
    var = (w * (z - mean) ** 2).sum() / w.sum()
    mark3 = (w * (k[:, None] == 3)).sum() / w.sum()
    assert total == pytest.approx(1.0, abs=0.01)
    assert mean == pytest.approx(t.mean_x, abs=0.01)
    assert var == pytest.approx(t.sd_x**2, rel=0.02)
    assert mark3 == pytest.approx(t.mark_pmf()[3], abs=0.01)


@settings(max_examples=30, deadline=None)
@given(mu=st.floats(-2, 2), sigma=st.floats(0.1, 3), theta=st.floats(0.05, 2))
def test_gaussian_tilt_moments(mu, sigma, theta):
    law = GaussianBroodLaw([0, 2, 5], [0.2, 0.5, 0.3], mu, sigma)
    t = tilt_law(law, theta)
    assert t.total_mass == pytest.approx(1.0, abs=1e-12)
    assert t.mean + law_kappa(law, theta, 1) == pytest.approx(0.0, abs=1e-10 * max(1.0, abs(t.mean)))
    assert t.mark_pmf() == pytest.approx({2: 1.0 / 2.5, 5: 1.5 / 2.5})


@settings(max_examples=30, deadline=None)
@given(theta=st.floats(0.0, 2.0), seed=st.integers(0, 1000))
def test_finite_tilt_normalized_and_centred(theta, seed):
    rng = np.random.default_rng(seed)
    atoms = [(p, tuple(rng.normal(size=k))) for p, k in zip(rng.dirichlet([1, 1, 1]), (1, 2, 3))]
    law = FiniteBroodLaw(atoms)
    t = tilt_law(law, theta)
    assert t.total_mass == pytest.approx(1.0, abs=1e-12)
    assert t.mean == pytest.approx(-law_kappa(law, theta, 1), abs=1e-10)


def test_sampled_law_tilt_is_exact_on_pool():
    law = SampledBroodLaw(lambda rng: (2, rng.standard_normal(2)), pool_size=200, pool_seed=3)
    t = tilt_law(law, 0.8)
    assert t.total_mass == pytest.approx(1.0, abs=1e-12)
    assert t.mean == pytest.approx(-law_kappa(law, 0.8, 1), abs=1e-10)


# -- many-to-one -------------------------------------------------------------

def test_many_to_one_trivial_example():
    env = RealizedEnvironment.from_laws([FiniteBroodLaw.deterministic([0.0, 0.0])], theta=1.0)
    r = many_to_one_check(env, 1, lambda p: 1.0)
    assert r.lhs == pytest.approx(2.0) and r.rhs == pytest.approx(2.0)


def test_many_to_one_binary_pm_exp():
    env = RealizedEnvironment.from_laws([FiniteBroodLaw.deterministic([1.0, -1.0])], theta=1.0)
    r = many_to_one_check(env, 1, lambda p: math.exp(-p[0]))
    assert r.lhs == pytest.approx(math.e + 1 / math.e, rel=1e-15)
    assert r.gap <= 1e-14


def test_many_to_one_two_law_stay_below():
    env = RealizedEnvironment.from_laws(m2o_fixtures()["two-law"], theta=0.7)
    r = many_to_one_check(env, 2, m2o_functionals()["stay-below-0"])
    # direct count: paths with both positions <= 0
    assert r.lhs == pytest.approx(3.0)
    assert r.relative_gap <= 1e-10


@pytest.mark.parametrize("name", sorted(m2o_fixtures()))
@pytest.mark.parametrize("fname", sorted(m2o_functionals()))
@pytest.mark.parametrize("n", [1, 2, 3])
def test_many_to_one_all_fixtures(name, fname, n):
    env = RealizedEnvironment.from_laws(m2o_fixtures()[name], theta=0.6)
    r = many_to_one_check(env, n, m2o_functionals()[fname])
    assert r.relative_gap <= 1e-10


def test_many_to_one_with_caps():
    env = RealizedEnvironment.from_laws(m2o_fixtures()["random-count"], theta=0.5)
    f = m2o_functionals()["exp-last"]
    capped = many_to_one_check(env, 3, f, caps=[2, 2, 2])
    full = many_to_one_check(env, 3, f)
    assert capped.relative_gap <= 1e-10
    assert capped.lhs < full.lhs
    assert tree_expectation(env, 3, f, caps=[1e9] * 3) == pytest.approx(full.lhs, rel=1e-14)


def test_many_to_one_errors():
    env = RealizedEnvironment.from_laws(m2o_fixtures()["binary-pm"], theta=1.0)
    with pytest.raises(ConfigError):
        many_to_one_check(env, 5, lambda p: 1.0)
    with pytest.raises(ConfigError):
        many_to_one_check(env, 0, lambda p: 1.0)
    with pytest.raises(ConfigError):
        many_to_one_check(env, 2, lambda p: 1.0, caps=[1.0])
    genv = RealizedEnvironment.from_laws([GaussianBroodLaw([2], [1.0], 0.0, 1.0)] * 2, theta=1.0)
    with pytest.raises(UnsupportedOperation):
        many_to_one_check(genv, 1, lambda p: 1.0)
    with pytest.raises(UnsupportedOperation):
        tilted_expectation(genv, 1, lambda p: 1.0)


# -- associated walk -----------------------------------------------------------

def test_associated_walk_degenerate(binary_zero):
    env = RealizedEnvironment.from_laws([FiniteBroodLaw.deterministic([0.0, 0.0])] * 10, theta=0.9)
    path = sample_associated_walk(env, 10, seed=1)
    assert np.allclose(path.T, np.arange(11) * math.log(2), atol=1e-14)
    assert np.all(path.xi == 2)


def test_associated_walk_increments_match_definition(two_law_mixture):
    from brwre.env_model import draw_environment
    env = draw_environment(two_law_mixture, 30, theta=0.8, seed=5)
    path = sample_associated_walk(env, 30, seed=5)
    kappa = np.diff(env.K[:31])
    assert np.allclose(np.diff(path.T), 0.8 * np.diff(path.S) + kappa, atol=1e-12)
    assert path.T[0] == 0.0
    with pytest.raises(ConfigError):
        sample_associated_walk(env, 31, seed=5)


def test_annealed_first_step_gaussian(binary_gauss):
    theta = math.sqrt(2 * math.log(2))
    s = annealed_first_step(binary_gauss, theta, 1_000_000, seed=11)
    m, se = s.mean
    assert abs(m) <= 4 * se
    v, vse = s.quenched_variance
    assert abs(v - theta**2) <= 4 * vse


def test_annealed_first_step_random_environment(random_gauss):
    from brwre.laplace_stats import solve_theta_star
    c = solve_theta_star(random_gauss)
    s = annealed_first_step(random_gauss, c.theta_star, 1_000_000, seed=12)
    m, se = s.mean
    assert abs(m) <= 4 * se
    v, vse = s.quenched_variance
    assert abs(v - c.sigma_Q**2) <= 4 * vse


def test_annealed_first_step_generic_path(two_law_mixture):
    from brwre.laplace_stats import solve_theta_star
    c = solve_theta_star(two_law_mixture)
    tables = step_tables(two_law_mixture, c.theta_star)
    weights = tables.comp_weights
    assert float(np.dot(weights, tables.quenched_means)) == pytest.approx(0.0, abs=1e-9)
    s = annealed_first_step(two_law_mixture, c.theta_star, 200_000, seed=4)
    m, se = s.mean
    assert abs(m) <= 4 * se


# -- tubes -----------------------------------------------------------------------

def test_tube_spec_validation():
    with pytest.raises(ConfigError):
        TubeSpec(g=1.0, h=1.0)
    with pytest.raises(ConfigError):
        TubeSpec(g=[(0, -1), (1, 2)], h=[(0, 1), (1, 1)])
    with pytest.raises(ConfigError):
        TubeSpec(entry=(-6.0, 0.0))
    with pytest.raises(ConfigError):
        TubeSpec(exit=(0.0, 6.0))
    with pytest.raises(ConfigError):
        TubeSpec(h=[(0, 5), (0.5, 4), (1, 5)], start="boundary")
    with pytest.raises(ConfigError):
        TubeSpec(alpha=0.6)
    with pytest.raises(ConfigError):
        TubeSpec(g=[(0.1, -1), (1, -1)])
    TubeSpec(h=[(0, 5), (1, 6)], start="boundary", entry=(0.0, 5.0))


def test_c_gh_flat_and_piecewise():
    assert TubeSpec(g=-5, h=5).c_gh() == pytest.approx(0.01, rel=1e-15)
    tube = TubeSpec(g=[(0, -1), (0.3, -2), (1, -0.5)], h=[(0, 1), (0.6, 3), (1, 2)])
    oracle, _ = integrate.quad(lambda s: 1 / (tube.upper(s) - tube.lower(s)) ** 2, 0, 1,
                               points=[0.3, 0.6], epsabs=1e-14)
    assert tube.c_gh() == pytest.approx(oracle, rel=1e-10)


def test_tube_against_strip_oracle(unit_gauss):
    n, w, reps = 125, 1.0, 100_000
    r = tube_probability(unit_gauss, TubeSpec(g=-w, h=w), n, reps, seed=3, theta=1.0)
    oracle = walk_strip_probability(n, 2 * w * n ** (1 / 3))
    se = math.sqrt(oracle * (1 - oracle) / reps)
    assert abs(r.p_hat - oracle) <= 4 * se + 0.05 * oracle
    assert r.predicted_rate == pytest.approx(math.pi**2 / 2 / (2 * w) ** 2)


def test_tube_width_ratio(unit_gauss):
    n = 125
    narrow = tube_probability(unit_gauss, TubeSpec(g=-1, h=1), n, 200_000, seed=7, theta=1.0)
    wide = tube_probability(unit_gauss, TubeSpec(g=-2, h=2), n, 200_000, seed=7, theta=1.0)
    ratio = narrow.normalized_rate / wide.normalized_rate
    # the same ratio for the strip oracle, whose finite-n corrections the estimate shares
    o_ratio = math.log(walk_strip_probability(n, 2 * n ** (1 / 3))) / math.log(walk_strip_probability(n, 4 * n ** (1 / 3)))
    assert 3.0 < ratio < 5.0
    assert ratio == pytest.approx(o_ratio, rel=0.05)


def test_exit_window_never_exceeds_unconstrained(ternary_iid, unit_gauss):
    for model, theta in ((unit_gauss, 1.0), (ternary_iid, None)):
        for seed in range(3):
            r = tube_probability(model, TubeSpec(g=-2, h=2, exit=(-0.5, 0.5)), 64, 20_000, seed=seed, theta=theta)
            assert r.hits <= r.hits_unconstrained
            assert r.p_hat <= r.p_unconstrained


def test_boundary_start_rate(unit_gauss):
    gaps = []
    for n in (125, 1000):
        tube_mid = TubeSpec(g=-3, h=3)
        tube_edge = TubeSpec(g=-3, h=3, start="boundary")
        mid = tube_probability(unit_gauss, tube_mid, n, 100_000, seed=1, theta=1.0)
        edge = tube_probability(unit_gauss, tube_edge, n, 100_000, seed=2, theta=1.0)
        assert edge.normalized_rate >= mid.normalized_rate
        gaps.append(edge.normalized_rate - mid.normalized_rate)
    assert gaps[1] < gaps[0]


def test_tube_zero_hits_is_one_sided(unit_gauss):
    r = tube_probability(unit_gauss, TubeSpec(g=-0.05, h=0.05), 200, 1000, seed=0, theta=1.0)
    assert r.one_sided and r.hits == 0
    assert r.p_hat == pytest.approx(3 / 1000)


def test_tube_cap_kills_large_marks():
    law = GaussianBroodLaw([1, 50], [0.5, 0.5], 0.0, 1.0)
    model = MixtureEnvironment([law])
    theta = 0.8
    free = tube_probability(model, TubeSpec(g=-30, h=30), 20, 20_000, seed=0, theta=theta)
    capped = tube_probability(model, TubeSpec(g=-30, h=30), 20, 20_000, seed=0, theta=theta, cap_exponent=0.32)
    # exp(20^0.32) ~ 6.5 so every mark-50 step is fatal; that mark has tilted weight 50/51
    assert capped.hits <= free.hits
    assert capped.p_hat <= (1 / 51) ** 20 * 10 + 3 / 20_000


def test_tube_results_independent_of_threads(ternary_iid):
    a = tube_probability(ternary_iid, TubeSpec(g=-2, h=2), 50, 40_000, seed=9, threads=1)
    b = tube_probability(ternary_iid, TubeSpec(g=-2, h=2), 50, 40_000, seed=9, threads=4)
    assert (a.hits, a.hits_unconstrained) == (b.hits, b.hits_unconstrained)


def test_brownian_strip_survival_limits():
    assert brownian_strip_survival(1e-6, 1.0, 0.5) == pytest.approx(1.0, abs=1e-9)
    assert brownian_strip_survival(1.0, 1.0, 0.0) == 0.0
    long = brownian_strip_survival(10.0, 1.0, 0.5)
    assert long == pytest.approx(4 / math.pi * math.exp(-math.pi**2 / 2 * 10), rel=1e-6)


def test_tube_csv(tmp_path, unit_gauss):
    r = tube_probability(unit_gauss, TubeSpec(g=-2, h=2), 8, 1000, seed=0, theta=1.0)
    path = tmp_path / "tube.csv"
    write_tube_csv(path, [r])
    rows = list(csv.DictReader(path.read_text().splitlines()))
    assert list(rows[0]) == ["n", "replicas", "hits", "p_hat", "normalized_rate", "predicted_rate"]
    assert int(rows[0]["hits"]) == r.hits
