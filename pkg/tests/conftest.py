"""Shared fixtures: small random models and a brute-force posterior oracle."""
from __future__ import annotations

import itertools

import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from odohmm.geometry import relation_means_from_embedding
from odohmm.model import AugmentedHmm, ConstraintRegime, CoordinateRegime, rotate
from odohmm.simulation import sample_experience


def toy_model(n: int = 3, seed: int = 0, coordinate_regime=CoordinateRegime.GLOBAL,
              constraint_regime=ConstraintRegime.ANTISYMMETRIC, obs_dims=(3, 2),
              spread: float = 3.0) -> AugmentedHmm:
    """Random valid model; relation means come from a random embedding when additive."""
    rng = np.random.default_rng(seed)
    coordinate_regime = CoordinateRegime(coordinate_regime)
    a = rng.dirichlet(np.ones(n) * 2.0, size=n)
    b = tuple(rng.dirichlet(np.ones(k) * 2.0, size=n) for k in obs_dims)
    if ConstraintRegime(constraint_regime) is ConstraintRegime.ADDITIVE:
        pos = rng.uniform(-spread, spread, size=(n, 2))
        theta = rng.uniform(-np.pi, np.pi, size=n)
        pos -= pos[0]
        theta -= theta[0]
        mu = relation_means_from_embedding(pos, theta, coordinate_regime)
    else:
        mu = np.zeros((n, n, 3))
        for i, j in itertools.combinations(range(n), 2):
            m = rng.uniform(-spread, spread, size=2)
            th = rng.uniform(-3.0, 3.0)
            mu[i, j] = (*m, th)
            back = -m if coordinate_regime is CoordinateRegime.GLOBAL else -rotate(m, th)
            mu[j, i] = (*back, -th)
    sigma = rng.uniform(0.4, 1.2, size=(n, n, 2))
    kappa = rng.uniform(1.0, 8.0, size=(n, n))
    idx = np.arange(n)
    sigma[idx, idx] = 0.2
    kappa[idx, idx] = 50.0
    return AugmentedHmm(transition=a, observation=b, mu=mu, sigma=sigma, kappa=kappa,
                        coordinate_regime=coordinate_regime,
                        constraint_regime=constraint_regime)


def toy_sequence(model: AugmentedHmm, t: int, seed: int = 1):
    return sample_experience(model, t, seed)[0]


def brute_force(model: AugmentedHmm, e, odometry: bool = True):
    """Exact likelihood, gamma and xi by enumerating every state path.

    Densities come from scipy.stats, so this shares no code with the
    package's own density evaluation.
    """
    n, t_len = model.n_states, e.length
    s0 = model.initial_state
    paths = []
    logp = []
    for tail in itertools.product(range(n), repeat=t_len - 1):
        path = (s0,) + tail
        lp = 0.0
        for t, s in enumerate(path):
            for c, b in enumerate(model.observation):
                lp += np.log(b[s, e.obs[t, c]])
            if t == 0:
                continue
            i = path[t - 1]
            lp += np.log(model.transition[i, s])
            if odometry:
                r = e.odo[t]
                lp += stats.norm.logpdf(r[0], model.mu[i, s, 0], model.sigma[i, s, 0])
                lp += stats.norm.logpdf(r[1], model.mu[i, s, 1], model.sigma[i, s, 1])
                lp += stats.vonmises.logpdf(r[2], model.kappa[i, s], loc=model.mu[i, s, 2])
        paths.append(path)
        logp.append(lp)
    logp = np.array(logp)
    total = logsumexp(logp)
    post = np.exp(logp - total)
    gamma = np.zeros((t_len, n))
    xi = np.zeros((t_len - 1, n, n))
    for path, p in zip(paths, post):
        for t, s in enumerate(path):
            gamma[t, s] += p
            if t:
                xi[t - 1, path[t - 1], s] += p
    return total, gamma, xi


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
