import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy import optimize

from odohmm.circular import bessel_ratio, wrap_angle
from odohmm.inference import EStepTables, e_step
from odohmm.initialization import hard_tables
from odohmm.model import (ConstraintRegime, CoordinateRegime, ExperienceSequence,
                          additivity_residual, antisymmetry_residual, validate_model)
from odohmm.reestimation import (EmConfig, EmTrace, antisym_pair_mle, em_step, floored_normalize,
                                 learn, project_headings_additive, reestimate_heading_antisym,
                                 reestimate_observations, reestimate_positions_additive,
                                 reestimate_relations, reestimate_relations_antisym,
                                 reestimate_relations_relative, reestimate_transitions,
                                 relation_objective, relation_stats)

import oracles
from conftest import toy_model, toy_sequence


# ---------------------------------------------------------------------------
# transition and observation updates

def test_floored_normalize_without_floor_is_plain_ratio():
    counts = np.array([[1.0, 3.0, 0.0], [0.0, 0.0, 0.0]])
    p, empty = floored_normalize(counts, 0.0)
    np.testing.assert_allclose(p[0], [0.25, 0.75, 0.0])
    np.testing.assert_allclose(p[1], 1 / 3)
    assert empty == [1]


def test_floored_normalize_matches_constrained_optimizer():
    c = np.array([5.0, 1e-9, 3.0, 0.0, 2.0])
    floor = 0.02
    p, _ = floored_normalize(c[None], floor)

    def neg(x):
        return -np.sum(c * np.log(x))

    res = optimize.minimize(neg, np.full(5, 0.2), method="SLSQP",
                            bounds=[(floor, 1.0)] * 5,
                            constraints=[{"type": "eq", "fun": lambda x: x.sum() - 1.0}],
                            options={"ftol": 1e-15, "maxiter": 500})
    np.testing.assert_allclose(p[0], res.x, atol=1e-6)


@settings(max_examples=100)
@given(st.lists(st.floats(0, 100), min_size=2, max_size=8), st.floats(0, 0.1))
def test_floored_normalize_properties(c, floor):
    c = np.array(c)
    p, _ = floored_normalize(c[None], floor)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    if floor * len(c) < 1:
        assert p.min() >= floor - 1e-15


def test_hard_path_counts():
    states = np.array([0, 1, 1, 2, 0, 1])
    tab = hard_tables(states, 3)
    a = reestimate_transitions(tab)
    np.testing.assert_allclose(a[0], [0, 1, 0])
    np.testing.assert_allclose(a[1], [0, 0.5, 0.5])
    e = ExperienceSequence(np.zeros((6, 3)), np.array([[0], [1], [2], [0], [1], [1]]))
    (b,) = reestimate_observations(tab, e, (3,))
    np.testing.assert_allclose(b[1], [0, 2 / 3, 1 / 3])


def test_observation_update_matches_hand_sum():
    m = toy_model(2, seed=3)
    e = toy_sequence(m, 6, seed=9)
    tab = e_step(m, e)
    b = reestimate_observations(tab, e, m.obs_dims)
    for c in range(2):
        for s in range(2):
            for k in range(m.obs_dims[c]):
                want = tab.gamma[e.obs[:, c] == k, s].sum() / tab.gamma[:, s].sum()
                assert b[c][s, k] == pytest.approx(want, abs=1e-12)


def test_component_order_is_irrelevant():
    m = toy_model(3, seed=4, obs_dims=(3, 2, 4))
    e = toy_sequence(m, 30, seed=3)
    tab = e_step(m, e)
    perm = [2, 0, 1]
    e2 = ExperienceSequence(e.odo, e.obs[:, perm])
    b = reestimate_observations(tab, e, m.obs_dims)
    b2 = reestimate_observations(tab, e2, tuple(m.obs_dims[k] for k in perm))
    for j, k in enumerate(perm):
        np.testing.assert_allclose(b2[j], b[k])


# ---------------------------------------------------------------------------
# relation updates against direct maximization

def _tables(n, t, seed, regime="global", constraints="antisym"):
    m = toy_model(n, seed=seed, coordinate_regime=regime, constraint_regime=constraints)
    e = toy_sequence(m, t, seed=seed + 100)
    return m, e, e_step(m, e)


def _pairs(tab, tol=1e-6):
    w = tab.xi.sum(axis=0)
    n = w.shape[0]
    return [(a, b) for a in range(n) for b in range(a + 1, n) if w[a, b] + w[b, a] > tol]


@pytest.mark.parametrize("seed", range(6))
def test_antisym_xy_update_is_argmax(seed):
    m, e, tab = _tables(3, 6, seed)
    mu_xy, _ = reestimate_relations_antisym(tab, e, m)
    for a, b in _pairs(tab):
        for ch in range(2):
            want = oracles.pair_xy_mean(tab.xi, e.odo[1:], a, b, ch, m.sigma)
            assert mu_xy[a, b, ch] == pytest.approx(want, abs=1e-4)
            assert mu_xy[b, a, ch] == -mu_xy[a, b, ch]


@pytest.mark.parametrize("seed", range(6))
def test_heading_update_is_grid_argmax(seed):
    m, e, tab = _tables(3, 6, seed)
    mu_theta, kappa = reestimate_heading_antisym(tab, e, m)
    for a, b in _pairs(tab):
        want = oracles.pair_heading_mean(tab.xi, e.odo[1:], a, b, m.kappa)
        assert abs(wrap_angle(mu_theta[a, b] - want)) <= 1e-4
        assert abs(wrap_angle(mu_theta[a, b] + mu_theta[b, a])) < 1e-12


@pytest.mark.parametrize("seed", range(6))
def test_relative_xy_update_is_argmax(seed):
    m, e, tab = _tables(3, 6, seed, regime="relative")
    mu_xy, _ = reestimate_relations_relative(tab, e, m)
    for a, b in _pairs(tab):
        want = oracles.relative_pair_mean(tab.xi, e.odo[1:], a, b, m.sigma, m.mu[a, b, 2])
        np.testing.assert_allclose(mu_xy[a, b], want, atol=1e-4)


@pytest.mark.parametrize("regime", ["global", "relative"])
@pytest.mark.parametrize("seed", range(4))
def test_additive_positions_match_dense_least_squares(regime, seed):
    m, e, tab = _tables(3, 6, seed, regime=regime, constraints="additive")
    emb, mu_xy, _ = reestimate_positions_additive(tab, e, m)
    frames = m.mu[0, :, 2]
    pos = oracles.additive_positions(tab.xi, e.odo[1:], m.sigma, frames,
                                     CoordinateRegime(regime))
    np.testing.assert_allclose(np.c_[emb.x, emb.y], pos, atol=1e-6)
    updated = m.replace(mu=np.concatenate([mu_xy, m.mu[:, :, 2:]], axis=2))
    assert np.max(np.abs(additivity_residual(updated))) < 1e-9


def test_single_direction_mass_gives_sample_mean():
    xi = np.zeros((2, 2, 2))
    xi[:, 0, 1] = 1.0
    readings = np.array([[4.9, 0.0, np.pi / 2 + 0.01], [5.1, 0.0, np.pi / 2 - 0.01]])
    tab = EStepTables(alpha=None, beta=None, log_scales=None, gamma=np.ones((3, 2)) / 2,
                      xi=xi, log_likelihood=0.0)
    e = ExperienceSequence(np.vstack([np.zeros(3), readings]), np.zeros((3, 1), int))
    m = toy_model(2, obs_dims=(2,))
    mu_xy, _ = reestimate_relations_antisym(tab, e, m)
    assert mu_xy[0, 1, 0] == pytest.approx(5.0)
    assert mu_xy[1, 0, 0] == pytest.approx(-5.0)
    mu_theta, _ = reestimate_heading_antisym(tab, e, m)
    assert mu_theta[0, 1] == pytest.approx(np.pi / 2, abs=0.01)
    assert mu_theta[1, 0] == pytest.approx(-np.pi / 2, abs=0.01)


def test_tight_reverse_sample_pulls_pooled_mean():
    # forward readings near 4 with large spread, reverse near -6 with small spread
    xi = np.zeros((4, 2, 2))
    xi[:2, 0, 1] = 1.0
    xi[2:, 1, 0] = 1.0
    readings = np.zeros((4, 3))
    readings[:, 0] = [3.0, 5.0, -5.9, -6.1]
    tab = EStepTables(None, None, None, np.ones((5, 2)) / 2, xi, 0.0)
    e = ExperienceSequence(np.vstack([np.zeros(3), readings]), np.zeros((5, 1), int))
    m = toy_model(2, obs_dims=(2,))
    sigma = m.sigma.copy()
    sigma[0, 1] = 2.0
    sigma[1, 0] = 0.1
    mu_xy, _ = reestimate_relations_antisym(tab, e, m.replace(sigma=sigma))
    assert abs(mu_xy[0, 1, 0] - 6.0) < abs(mu_xy[0, 1, 0] - 4.0)
    want = (8.0 / 4.0 + 12.0 / 0.01) / (2 / 4.0 + 2 / 0.01)
    assert mu_xy[0, 1, 0] == pytest.approx(want)


def test_equal_spread_pseudo_transitions_pool_plainly():
    p = np.array([4.9, 5.1, 5.3, 4.7])
    q = np.array([-5.5, -4.0, -6.1])
    xi = np.zeros((7, 2, 2))
    xi[:4, 0, 1] = 1.0
    xi[4:, 1, 0] = 1.0
    readings = np.zeros((7, 3))
    readings[:, 0] = np.r_[p, q]
    tab = EStepTables(None, None, None, np.ones((8, 2)) / 2, xi, 0.0)
    e = ExperienceSequence(np.vstack([np.zeros(3), readings]), np.zeros((8, 1), int))
    m = toy_model(2, obs_dims=(2,))
    sigma = np.ones((2, 2, 2))
    mu_xy, _ = reestimate_relations_antisym(tab, e, m.replace(sigma=sigma, self_sigma=1.0))
    assert mu_xy[0, 1, 0] == pytest.approx((p.sum() - q.sum()) / 7)


@pytest.mark.parametrize("seed", range(5))
def test_two_sample_constrained_mle_matches_golden_section(seed):
    rng = np.random.default_rng(seed)
    mu = rng.uniform(-10, 10)
    p = rng.normal(mu, rng.uniform(0.2, 3.0), size=int(rng.integers(3, 30)))
    q = rng.normal(-mu, rng.uniform(0.2, 3.0), size=int(rng.integers(3, 30)))
    got, sp, sq = antisym_pair_mle(p, q)
    want = oracles.two_sample_profile_mle(p, q)
    assert got == pytest.approx(want, abs=1e-6)
    assert sp == pytest.approx(np.sqrt(np.mean((p - got) ** 2)), rel=1e-6)
    assert sq == pytest.approx(np.sqrt(np.mean((q + got) ** 2)), rel=1e-6)


def test_concentration_solves_ratio_equation():
    m, e, tab = _tables(3, 40, 2)
    mu_theta, kappa = reestimate_heading_antisym(tab, e, m)
    st_ = relation_stats(tab.xi, e.odo[1:])
    for a in range(3):
        for b in range(3):
            if a == b or st_.w[a, b] < 1e-3:
                continue
            rbar = (st_.c[a, b] * np.cos(mu_theta[a, b])
                    + st_.sn[a, b] * np.sin(mu_theta[a, b])) / st_.w[a, b]
            if 1e-2 < rbar < 0.999:
                assert bessel_ratio(kappa[a, b]) == pytest.approx(rbar, abs=1e-10)


# ---------------------------------------------------------------------------
# heading projection

def test_projection_three_cycle():
    deg = np.radians
    mu = np.zeros((3, 3))
    mu[0, 1], mu[1, 2], mu[0, 2] = deg(90), deg(90), deg(90)
    mu -= mu.T
    w = np.array([[0, 10, 1], [0, 0, 10], [0, 0, 0]], float)
    out = project_headings_additive(mu, w)
    assert out[0, 2] == pytest.approx(np.pi)
    assert out[0, 1] == mu[0, 1] and out[1, 2] == mu[1, 2]
    assert out[2, 1] == pytest.approx(-mu[1, 2])


@settings(max_examples=60, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(2, 6), st.integers(0, 100_000))
def test_projection_idempotent_and_keeps_tree(n, seed):
    rng = np.random.default_rng(seed)
    raw = rng.uniform(-np.pi, np.pi, size=(n, n))
    mu = wrap_angle(raw - raw.T)
    np.fill_diagonal(mu, 0.0)
    w = rng.random((n, n)) * (rng.random((n, n)) < 0.7)
    once = project_headings_additive(mu, w)
    twice = project_headings_additive(once, w)
    np.testing.assert_array_equal(once, twice)
    from odohmm.geometry import max_weight_spanning_forest
    for a, b in max_weight_spanning_forest(w + w.T):
        assert once[a, b] == mu[a, b]
    resid = wrap_angle(once[:, None, :] - once[:, :, None] - once[None, :, :])
    assert np.max(np.abs(resid)) < 1e-9


# ---------------------------------------------------------------------------
# EM steps

REGIMES = [("global", "antisym"), ("relative", "antisym"),
           ("global", "additive"), ("relative", "additive")]


@pytest.mark.parametrize("regime,constraints", REGIMES)
def test_em_steps_are_monotone_and_valid(regime, constraints):
    truth = toy_model(3, seed=21, coordinate_regime=regime, constraint_regime=constraints)
    e = toy_sequence(truth, 80, seed=5)
    start = toy_model(3, seed=99, coordinate_regime=regime, constraint_regime=constraints)
    config = EmConfig(coordinate_regime=regime, constraint_regime=constraints, max_iters=40,
                      epsilon=1e-8, jitter=0.0)
    model, trace = learn(start, e, config)
    path = trace.likelihood_path()
    assert np.all(np.diff(path) >= -1e-9), np.diff(path).min()
    assert validate_model(model).ok, list(validate_model(model))


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(REGIMES))
def test_em_step_property(seed, regimes):
    regime, constraints = regimes
    truth = toy_model(3, seed=seed, coordinate_regime=regime, constraint_regime=constraints)
    e = toy_sequence(truth, 40, seed=seed + 1)
    start = toy_model(3, seed=seed + 7, coordinate_regime=regime, constraint_regime=constraints)
    config = EmConfig(coordinate_regime=regime, constraint_regime=constraints)
    model = start
    last = -np.inf
    for _ in range(6):
        model, _, ll = em_step(model, e, config)
        assert ll >= last - 1e-9
        assert validate_model(model).ok
        last = ll


@pytest.mark.parametrize("regime,constraints", REGIMES)
def test_relation_update_never_lowers_objective(regime, constraints):
    m, e, tab = _tables(3, 50, 31, regime=regime, constraints=constraints)
    st_ = relation_stats(tab.xi, e.odo[1:])
    new = reestimate_relations(tab, e, m)
    assert relation_objective(st_, new.mu, new.sigma, new.kappa) >= \
        relation_objective(st_, m.mu, m.sigma, m.kappa) - 1e-9


def test_relative_update_keeps_transformed_constraints():
    m, e, tab = _tables(4, 60, 3, regime="relative")
    new = reestimate_relations(tab, e, m)
    assert np.max(np.abs(antisymmetry_residual(new))) < 1e-9


def test_learn_without_odometry_leaves_relations():
    truth = toy_model(3, seed=2)
    e = toy_sequence(truth, 50, seed=3)
    start = toy_model(3, seed=4)
    model, trace = learn(start, e, EmConfig(odometry=False, max_iters=5))
    np.testing.assert_array_equal(model.mu, start.mu)
    assert trace.iterations <= 5


def test_trace_csv(tmp_path):
    truth = toy_model(2, seed=2)
    e = toy_sequence(truth, 30, seed=3)
    _, trace = learn(toy_model(2, seed=5), e, EmConfig(max_iters=3, epsilon=1e-12))
    assert isinstance(trace, EmTrace)
    path = tmp_path / "trace.csv"
    trace.write_csv(path, timing=False)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,log_likelihood,max_change,antisym_residual,additivity_residual"
    assert len(lines) == trace.iterations + 1
    assert trace.iterations <= 3
    assert len(trace.likelihood_path()) == trace.iterations + 1


def test_config_validation():
    with pytest.raises(ValueError):
        EmConfig(epsilon=0)
    with pytest.raises(ValueError):
        EmConfig(max_iters=0)
    with pytest.raises(ValueError):
        EmConfig(constraint_regime="bogus")
