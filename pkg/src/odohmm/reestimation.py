"""Constrained M-step and the EM driver.

Relation means are updated with the variances (concentrations) of the
current model and the variances from the new means afterwards, which keeps
every update a coordinate-ascent step on the expected complete-data
log-likelihood. Probability floors, the variance floor and the concentration
clamp are applied as constrained maximizers for the same reason.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .circular import (KAPPA_MAX, KAPPA_MIN, LOG_TWO_PI, invert_bessel_ratio, log_bessel_i0,
                       wrap_angle)
from .geometry import (embed_along_tree, max_weight_spanning_forest,
                       relation_means_from_embedding, transform_relative, tree_components)
from .inference import EStepTables, e_step
from .model import (SIGMA_MIN, AugmentedHmm, ConstraintRegime, CoordinateRegime,
                    ExperienceSequence, InputError, antisymmetry_residual,
                    additivity_residual, rotate)

__all__ = [
    "EmConfig", "EmTrace", "StateEmbedding", "RelationStats", "floored_normalize",
    "reestimate_transitions", "reestimate_observations", "relation_stats", "antisym_pair_mle",
    "reestimate_relations_antisym", "reestimate_heading_antisym",
    "project_headings_additive", "reestimate_positions_additive",
    "reestimate_relations_relative", "reestimate_relations", "relation_objective", "em_step", "learn",
    "jitter_sequence", "transform_relative",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmConfig:
    epsilon: float = 1e-4
    max_iters: int = 500
    constraint_regime: ConstraintRegime = ConstraintRegime.ANTISYMMETRIC
    coordinate_regime: CoordinateRegime = CoordinateRegime.GLOBAL
    prob_floor: float = 1e-6
    sigma_floor: float = SIGMA_MIN
    jitter: float = 0.01
    seed: int = 0
    odometry: bool = True
    self_sigma: float = 0.2
    self_kappa: float = 50.0
    guard_headings: bool = True

    def __post_init__(self):
        object.__setattr__(self, "constraint_regime", ConstraintRegime(self.constraint_regime))
        object.__setattr__(self, "coordinate_regime", CoordinateRegime(self.coordinate_regime))
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.prob_floor < 0 or self.sigma_floor < 0 or self.jitter < 0:
            raise ValueError("floors and jitter must be nonnegative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class StateEmbedding:
    """Per-state coordinates; the anchor state sits at the origin with zero heading."""

    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    anchor: int = 0


@dataclass
class EmTrace:
    log_likelihood: list = field(default_factory=list)
    max_change: list = field(default_factory=list)
    antisym_residual: list = field(default_factory=list)
    additivity_residual: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    converged: bool = False
    final_log_likelihood: float = float("nan")

    @property
    def iterations(self) -> int:
        return len(self.max_change)

    def likelihood_path(self) -> np.ndarray:
        """Log-likelihood of every model visited, including the returned one."""
        return np.array(self.log_likelihood + [self.final_log_likelihood])

    def write_csv(self, path, timing: bool = True) -> None:
        cols = ["iteration", "log_likelihood", "max_change", "antisym_residual",
                "additivity_residual"] + (["wall_ms"] if timing else [])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for k in range(self.iterations):
                row = [k + 1] + [format(v, ".17g") for v in (
                    self.log_likelihood[k], self.max_change[k],
                    self.antisym_residual[k], self.additivity_residual[k])]
                if timing:
                    row.append(format(self.wall_ms[k], ".3f"))
                w.writerow(row)


# ---------------------------------------------------------------------------
# transition and observation updates

def floored_normalize(counts: np.ndarray, floor: float) -> tuple[np.ndarray, list[int]]:
    """Row-wise maximizer of sum(c * log p) subject to p >= floor, sum(p) = 1.

    Rows whose counts sum to zero become uniform; their indices are returned.
    """
    counts = np.asarray(counts, dtype=float)
    out = np.empty_like(counts)
    k = counts.shape[1]
    empty = []
    for i, c in enumerate(counts):
        total = c.sum()
        if not total > 0:
            out[i] = 1.0 / k
            empty.append(i)
            continue
        if floor * k >= 1.0:
            out[i] = 1.0 / k
            continue
        fixed = np.zeros(k, dtype=bool)
        while True:
            free_mass = 1.0 - floor * fixed.sum()
            free_total = c[~fixed].sum()
            p = np.where(fixed, floor, (c / free_total) * free_mass if free_total > 0 else 0.0)
            newly = ~fixed & (p < floor)
            if not newly.any():
                break
            fixed |= newly
            if fixed.all():
                p = np.full(k, 1.0 / k)
                break
        out[i] = p / p.sum()
    return out, empty


def reestimate_transitions(tables: EStepTables, floor: float = 0.0) -> np.ndarray:
    """Expected transition counts over expected departures, row by row."""
    counts = tables.xi.sum(axis=0)
    a, empty = floored_normalize(counts, floor)
    for i in empty:
        log.info("state %d has no occupancy mass; transition row reset to uniform", i)
    return a


def reestimate_observations(tables: EStepTables, e: ExperienceSequence, obs_dims,
                            floor: float = 0.0) -> tuple[np.ndarray, ...]:
    """Occupancy-weighted symbol frequencies per observation component."""
    gamma = tables.gamma
    out = []
    for c, k in enumerate(obs_dims):
        onehot = np.zeros((gamma.shape[0], k))
        onehot[np.arange(gamma.shape[0]), e.obs[:, c]] = 1.0
        b, empty = floored_normalize(gamma.T @ onehot, floor)
        for i in empty:
            log.info("state %d has no occupancy mass; B%d row reset to uniform", i, c)
        out.append(b)
    return tuple(out)


# ---------------------------------------------------------------------------
# relation sufficient statistics

@dataclass
class RelationStats:
    """Expected-count weighted moments of the readings on every state pair."""

    w: np.ndarray        # (N, N) total expected count
    s: np.ndarray        # (N, N, 2) sum of xi * r_xy
    q: np.ndarray        # (N, N, 2) sum of xi * r_xy**2
    c: np.ndarray        # (N, N) sum of xi * cos r_theta
    sn: np.ndarray       # (N, N) sum of xi * sin r_theta


def relation_stats(xi: np.ndarray, readings: np.ndarray) -> RelationStats:
    """``xi[t]`` pairs with ``readings[t]``, the reading on the move out of step t."""
    r = np.asarray(readings, dtype=float)
    w = xi.sum(axis=0)
    s = np.einsum("tij,tm->ijm", xi, r[:, :2])
    q = np.einsum("tij,tm->ijm", xi, r[:, :2] ** 2)
    c = np.einsum("tij,t->ij", xi, np.cos(r[:, 2]))
    sn = np.einsum("tij,t->ij", xi, np.sin(r[:, 2]))
    return RelationStats(w, s, q, c, sn)


def _stats(tables: EStepTables, e: ExperienceSequence) -> RelationStats:
    if tables.xi.shape[0] != e.length - 1:
        raise InputError("tables and sequence lengths differ")
    return relation_stats(tables.xi, e.odo[1:])


def _variances(st: RelationStats, mu_xy: np.ndarray, sigma: np.ndarray,
               sigma_floor: float) -> np.ndarray:
    """Weighted residual variance about ``mu_xy`` where the pair has mass."""
    w = st.w[:, :, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        var = (st.q - 2.0 * mu_xy * st.s + mu_xy ** 2 * w) / w
    has = np.broadcast_to(w > 0, var.shape)
    var = np.where(has, np.maximum(var, 0.0), sigma ** 2)
    return np.where(has, np.maximum(np.sqrt(var), sigma_floor), sigma)


def _pin_diagonal(mu, sigma, kappa, self_sigma, self_kappa):
    idx = np.arange(mu.shape[0])
    mu[idx, idx] = 0.0
    sigma[idx, idx] = self_sigma
    kappa[idx, idx] = self_kappa


def _log_zero_mass(st: RelationStats, what: str) -> None:
    pool = st.w + st.w.T
    np.fill_diagonal(pool, 1.0)
    zero = np.argwhere(np.triu(pool <= 0, 1))
    if len(zero):
        log.debug("%s: %d state pairs without mass left unchanged", what, len(zero))


# ---------------------------------------------------------------------------
# anti-symmetric updates

def _antisym_means_global(st: RelationStats, mu_xy: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    prec = 1.0 / sigma ** 2
    num = st.s * prec - np.swapaxes(st.s * prec, 0, 1)
    den = st.w[:, :, None] * prec + np.swapaxes(st.w[:, :, None] * prec, 0, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        new = num / den
    return np.where(den > 0, new, mu_xy)


def reestimate_relations_antisym(tables: EStepTables, e: ExperienceSequence,
                                 current: AugmentedHmm, sigma_floor: float = SIGMA_MIN,
                                 stats: RelationStats | None = None):
    """Pooled forward/reverse update of the x, y relation means, then variances.

    Returns ``(mu_xy, sigma)`` arrays of shape (N, N, 2).
    """
    st = stats or _stats(tables, e)
    _log_zero_mass(st, "antisym x/y")
    mu_xy = _antisym_means_global(st, current.mu[:, :, :2], current.sigma)
    idx = np.arange(mu_xy.shape[0])
    mu_xy[idx, idx] = 0.0
    sigma = _variances(st, mu_xy, current.sigma, sigma_floor)
    sigma[idx, idx] = current.self_sigma
    return mu_xy, sigma


def antisym_pair_mle(forward, reverse, tol: float = 1e-14, max_iter: int = 100000,
                     sigma_floor: float = SIGMA_MIN):
    """Constrained MLE of two normal samples whose means are negatives of each other.

    ``forward`` is drawn around ``mu`` and ``reverse`` around ``-mu``. The
    lag-behind mean and variance updates are iterated to a fixed point.
    Returns ``(mu, sigma_forward, sigma_reverse)``.
    """
    p = np.asarray(forward, dtype=float).reshape(-1)
    q = np.asarray(reverse, dtype=float).reshape(-1)
    if len(p) == 0 or len(q) == 0:
        raise InputError("both samples must be nonempty")
    st = RelationStats(
        w=np.array([[0.0, len(p)], [len(q), 0.0]]),
        s=np.array([[[0.0], [p.sum()]], [[q.sum()], [0.0]]]),
        q=np.array([[[0.0], [np.sum(p ** 2)]], [[np.sum(q ** 2)], [0.0]]]),
        c=np.zeros((2, 2)), sn=np.zeros((2, 2)))
    sigma = np.ones((2, 2, 1))
    sigma[0, 1] = max(p.std(), sigma_floor)
    sigma[1, 0] = max(q.std(), sigma_floor)
    mu = np.zeros((2, 2, 1))
    for _ in range(max_iter):
        new = _antisym_means_global(st, mu, sigma)
        sigma = _variances(st, new, sigma, sigma_floor)
        done = abs(new[0, 1, 0] - mu[0, 1, 0]) <= tol * max(1.0, abs(new[0, 1, 0]))
        mu = new
        if done:
            break
    return float(mu[0, 1, 0]), float(sigma[0, 1, 0]), float(sigma[1, 0, 0])


def _heading_means(st: RelationStats, mu_theta: np.ndarray, kappa: np.ndarray):
    num = kappa * st.sn - (kappa * st.sn).T
    den = kappa * st.c + (kappa * st.c).T
    pooled = st.w + st.w.T
    undefined = (pooled > 0) & (np.hypot(num, den) <= 1e-300)
    new = np.where(pooled > 0, np.arctan2(num, den), mu_theta)
    new = np.where(undefined, mu_theta, new)
    return wrap_angle(new), undefined


def _concentrations(st: RelationStats, mu_theta: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    has = st.w > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        rbar = (st.c * np.cos(mu_theta) + st.sn * np.sin(mu_theta)) / st.w
    rbar = np.clip(np.where(has, rbar, 0.0), 0.0, np.nextafter(1.0, 0.0))
    out = kappa.copy()
    if has.any():
        out[has] = invert_bessel_ratio(rbar[has])
    return np.clip(out, KAPPA_MIN, KAPPA_MAX)


def reestimate_heading_antisym(tables: EStepTables, e: ExperienceSequence,
                               current: AugmentedHmm, stats: RelationStats | None = None,
                               project: bool = False):
    """Von Mises mean from the current concentrations, then concentrations.

    With ``project=True`` the anti-symmetric means are projected onto the
    additive set before the concentrations are refit.

    Returns ``(mu_theta, kappa)``.
    """
    st = stats or _stats(tables, e)
    mu_theta, undefined = _heading_means(st, current.mu[:, :, 2], current.kappa)
    if project:
        mu_theta = project_headings_additive(mu_theta, st.w)
    kappa = _concentrations(st, mu_theta, current.kappa)
    if undefined.any():
        log.info("undefined heading mean on %d pairs; kappa reset", int(undefined.sum()))
        kappa = np.where(undefined | undefined.T, KAPPA_MIN, kappa)
    idx = np.arange(mu_theta.shape[0])
    mu_theta[idx, idx] = 0.0
    kappa[idx, idx] = current.self_kappa
    return mu_theta, kappa


def project_headings_additive(mu_theta: np.ndarray, xi_totals: np.ndarray) -> np.ndarray:
    """Project anti-symmetric heading means onto the additive set.

    Entries on the maximum-weight spanning tree of the symmetrized expected
    counts are kept exactly; headings are unwrapped along the tree into
    per-state potentials and every other entry becomes a potential
    difference. Pairs without mass join the tree last, in index order, so a
    disconnected mass graph still yields one tree.
    """
    mu_theta = np.asarray(mu_theta, dtype=float)
    n = mu_theta.shape[0]
    weights = np.asarray(xi_totals, dtype=float)
    weights = np.maximum(weights + weights.T, 0.0)
    edges = max_weight_spanning_forest(weights, include_zero=True)
    _, orders = tree_components(n, edges)
    theta = np.zeros(n)
    for order in orders:
        for a, b in order:
            theta[b] = theta[a] + mu_theta[a, b]
    out = wrap_angle(theta[None, :] - theta[:, None])
    for a, b in edges:
        out[a, b] = mu_theta[a, b]
        out[b, a] = wrap_angle(-mu_theta[a, b])
    np.fill_diagonal(out, 0.0)
    return out


# ---------------------------------------------------------------------------
# additive positions

def _frames(mu_theta: np.ndarray, regime: CoordinateRegime, anchor: int = 0) -> np.ndarray:
    if regime is CoordinateRegime.GLOBAL:
        return np.zeros(mu_theta.shape[0])
    return np.asarray(mu_theta[anchor], dtype=float)


def _position_objective(st, prec, frames, pos, regime):
    mu = relation_means_from_embedding(pos, frames, regime)[:, :, :2]
    return float(np.sum(prec * (st.q - 2 * mu * st.s + mu ** 2 * st.w[:, :, None])))


def solve_positions(st: RelationStats, sigma: np.ndarray, frames: np.ndarray,
                    regime: CoordinateRegime, current_pos: np.ndarray,
                    anchor: int = 0) -> np.ndarray:
    """Weighted least-squares state positions given per-state frame rotations.

    Minimizes sum over pairs and axes of ``w/sigma^2 (mean reading - F_a (P_b -
    P_a))^2`` with ``F_a`` the rotation by ``frames[a]`` (identity in the
    global regime). Components of the mass graph not connected to the anchor
    keep the current position of their lowest-index state.
    """
    n = st.w.shape[0]
    prec = 1.0 / sigma ** 2
    off = ~np.eye(n, dtype=bool)
    wp = np.where(off[:, :, None], st.w[:, :, None] * prec, 0.0)   # (N, N, 2)
    sp = np.where(off[:, :, None], st.s * prec, 0.0)               # D * mean reading
    c, s = np.cos(frames), np.sin(frames)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (N, 2, 2)
    # K_ab = F_a^T D_ab F_a and g_ab = F_a^T D_ab d_ab
    k_ab = np.einsum("aji,abj,ajk->abik", rot, wp, rot)
    g_ab = np.einsum("aji,abj->abi", rot, sp)
    h = np.zeros((n, 2, n, 2))
    g = np.zeros((n, 2))
    diag_blocks = k_ab.sum(axis=1) + k_ab.sum(axis=0)
    for a in range(n):
        h[a, :, a, :] += diag_blocks[a]
    h -= np.einsum("abik->aibk", k_ab)
    h -= np.einsum("abik->bkai", k_ab)   # symmetric counterpart H[b, a] = -K_ab^T
    g += g_ab.sum(axis=0)
    g -= g_ab.sum(axis=1)

    link = (st.w + st.w.T) > 0
    np.fill_diagonal(link, False)
    edges = [(int(a), int(b)) for a, b in zip(*np.nonzero(np.triu(link, 1)))]
    label, _ = tree_components(n, edges)
    fixed = np.zeros(n, dtype=bool)
    for comp in np.unique(label):
        members = np.flatnonzero(label == comp)
        fixed[anchor if label[anchor] == comp else members[0]] = True
    pos = np.array(current_pos, dtype=float, copy=True)
    pos[anchor] = 0.0
    free = np.flatnonzero(~fixed)
    if len(free):
        h2 = h.reshape(2 * n, 2 * n)
        fi = (2 * free[:, None] + np.arange(2)).ravel()
        xi_ = (2 * np.flatnonzero(fixed)[:, None] + np.arange(2)).ravel()
        rhs = g.reshape(-1)[fi] - h2[np.ix_(fi, xi_)] @ pos.reshape(-1)[xi_]
        try:
            sol = np.linalg.solve(h2[np.ix_(fi, fi)], rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(h2[np.ix_(fi, fi)], rhs, rcond=None)[0]
        candidate = pos.copy()
        candidate.reshape(-1)[fi] = sol
        if len(np.unique(label)) > 1:
            log.info("relation mass graph has %d components; anchored independently",
                     len(np.unique(label)))
        # keep the update only if it does not lose objective (guards round-off)
        old = _position_objective(st, prec, frames, pos, regime)
        new = _position_objective(st, prec, frames, candidate, regime)
        if new <= old + 1e-12 * max(1.0, abs(old)):
            pos = candidate
    return pos


def current_positions(model: AugmentedHmm, anchor: int = 0) -> np.ndarray:
    """Positions implied by an additive model: ``P_b = F_anchor^-1 mu(anchor, b)``."""
    return np.array(model.mu[anchor, :, :2], dtype=float)


def reestimate_positions_additive(tables: EStepTables, e: ExperienceSequence,
                                  current: AugmentedHmm, mu_theta: np.ndarray | None = None,
                                  sigma_floor: float = SIGMA_MIN,
                                  stats: RelationStats | None = None):
    """Additive x, y update through state positions.

    ``mu_theta`` must be additive (in the relative regime it fixes the state
    frames); defaults to the current model's heading means.

    Returns ``(embedding, mu_xy, sigma)``.
    """
    st = stats or _stats(tables, e)
    mu_theta = current.mu[:, :, 2] if mu_theta is None else mu_theta
    regime = current.coordinate_regime
    anchor = current.initial_state
    frames = _frames(mu_theta, regime, anchor)
    pos = solve_positions(st, current.sigma, frames, regime, current_positions(current, anchor),
                          anchor)
    mu = relation_means_from_embedding(pos, frames, regime)
    mu_xy = mu[:, :, :2]
    sigma = _variances(st, mu_xy, current.sigma, sigma_floor)
    idx = np.arange(pos.shape[0])
    sigma[idx, idx] = current.self_sigma
    emb = StateEmbedding(pos[:, 0].copy(), pos[:, 1].copy(), frames.copy(), anchor)
    return emb, mu_xy, sigma


def reestimate_relations_relative(tables: EStepTables, e: ExperienceSequence,
                                  current: AugmentedHmm, mu_theta: np.ndarray | None = None,
                                  sigma_floor: float = SIGMA_MIN,
                                  stats: RelationStats | None = None):
    """Anti-symmetric x, y update in state-relative frames.

    Reverse readings enter through ``mu(b, a) = -T_ab[mu(a, b)]``; for each
    pair the mean ``mu(a, b)`` solves the 2x2 weighted normal equations of the
    pooled quadratic (with zero heading change this is the global update).

    Returns ``(mu_xy, sigma)``.
    """
    st = stats or _stats(tables, e)
    mu_theta = current.mu[:, :, 2] if mu_theta is None else mu_theta
    n = st.w.shape[0]
    prec = 1.0 / current.sigma ** 2
    mu_xy = np.array(current.mu[:, :, :2], dtype=float, copy=True)
    a_idx, b_idx = np.triu_indices(n, 1)
    d_f = st.w[a_idx, b_idx, None] * prec[a_idx, b_idx]        # forward precisions
    d_r = st.w[b_idx, a_idx, None] * prec[b_idx, a_idx]        # reverse precisions
    g_f = st.s[a_idx, b_idx] * prec[a_idx, b_idx]
    g_r = st.s[b_idx, a_idx] * prec[b_idx, a_idx]
    th = mu_theta[a_idx, b_idx]
    c, s = np.cos(th), np.sin(th)
    m = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)   # Rot(mu_theta(a, b))
    h = np.einsum("pji,pj,pjk->pik", m, d_r, m)
    h[:, 0, 0] += d_f[:, 0]
    h[:, 1, 1] += d_f[:, 1]
    g = g_f - np.einsum("pji,pj->pi", m, g_r)
    det = h[:, 0, 0] * h[:, 1, 1] - h[:, 0, 1] * h[:, 1, 0]
    ok = det > 0
    sol = np.empty_like(g)
    with np.errstate(invalid="ignore", divide="ignore"):
        sol[:, 0] = (h[:, 1, 1] * g[:, 0] - h[:, 0, 1] * g[:, 1]) / det
        sol[:, 1] = (h[:, 0, 0] * g[:, 1] - h[:, 1, 0] * g[:, 0]) / det
    sol = np.where(ok[:, None], sol, mu_xy[a_idx, b_idx])
    mu_xy[a_idx, b_idx] = sol
    mu_xy[b_idx, a_idx] = -rotate(sol, th)
    idx = np.arange(n)
    mu_xy[idx, idx] = 0.0
    sigma = _variances(st, mu_xy, current.sigma, sigma_floor)
    sigma[idx, idx] = current.self_sigma
    return mu_xy, sigma


def relation_objective(st: RelationStats, mu: np.ndarray, sigma: np.ndarray,
                       kappa: np.ndarray) -> float:
    """Expected complete-data log-likelihood of the relation densities."""
    w = st.w[:, :, None]
    sq = st.q - 2.0 * mu[:, :, :2] * st.s + mu[:, :, :2] ** 2 * w
    xy = -w * (np.log(sigma) + 0.5 * LOG_TWO_PI) - 0.5 * sq / sigma ** 2
    heading = (kappa * (st.c * np.cos(mu[:, :, 2]) + st.sn * np.sin(mu[:, :, 2]))
               - st.w * (LOG_TWO_PI + log_bessel_i0(kappa)))
    return float(xy.sum() + heading.sum())


def _xy_given_heading(tables, e, current, st, mu_theta, kappa, sigma_floor):
    if current.constraint_regime is ConstraintRegime.ADDITIVE:
        _, mu_xy, sigma = reestimate_positions_additive(
            tables, e, current, mu_theta=mu_theta, sigma_floor=sigma_floor, stats=st)
    elif current.coordinate_regime is CoordinateRegime.RELATIVE:
        staged = current.replace(
            mu=np.concatenate([current.mu[:, :, :2], mu_theta[:, :, None]], 2), kappa=kappa)
        mu_xy, sigma = reestimate_relations_relative(
            tables, e, staged, mu_theta=mu_theta, sigma_floor=sigma_floor, stats=st)
    else:
        mu_xy, sigma = reestimate_relations_antisym(tables, e, current, sigma_floor, stats=st)
    mu = np.concatenate([mu_xy, mu_theta[:, :, None]], axis=2)
    kappa = np.array(kappa, copy=True)
    sigma = np.array(sigma, copy=True)
    _pin_diagonal(mu, sigma, kappa, current.self_sigma, current.self_kappa)
    return mu, sigma, kappa


def _headings_feasible(model: AugmentedHmm) -> bool:
    if np.max(np.abs(antisymmetry_residual(model)[:, :, 2])) > 1e-9:
        return False
    if model.constraint_regime is ConstraintRegime.ADDITIVE:
        return bool(np.max(np.abs(additivity_residual(model)[..., 2])) <= 1e-9)
    return True


def reestimate_relations(tables: EStepTables, e: ExperienceSequence, current: AugmentedHmm,
                         sigma_floor: float = SIGMA_MIN, guard: bool = True) -> AugmentedHmm:
    """Full relation update in the model's regimes: headings first, then x, y.

    When the heading means constrain the x, y update (state-relative frames,
    or the additive projection) the new headings can lower the objective. With
    ``guard`` the update is also run with the current heading means kept, and
    the candidate with the larger expected log-likelihood wins.
    """
    st = _stats(tables, e)
    additive = current.constraint_regime is ConstraintRegime.ADDITIVE
    mu_theta, kappa = reestimate_heading_antisym(tables, e, current, stats=st, project=additive)
    mu, sigma, kappa = _xy_given_heading(tables, e, current, st, mu_theta, kappa, sigma_floor)
    coupled = additive or current.coordinate_regime is CoordinateRegime.RELATIVE
    if guard and coupled and _headings_feasible(current):
        keep_theta = np.array(current.mu[:, :, 2], copy=True)
        keep_kappa = _concentrations(st, keep_theta, current.kappa)
        alt = _xy_given_heading(tables, e, current, st, keep_theta, keep_kappa, sigma_floor)
        if relation_objective(st, *alt) > relation_objective(st, mu, sigma, kappa):
            log.debug("heading update rejected; current heading means kept")
            mu, sigma, kappa = alt
    return current.replace(mu=mu, sigma=sigma, kappa=kappa)


# ---------------------------------------------------------------------------
# EM driver

def jitter_sequence(e: ExperienceSequence, amplitude: float, seed: int) -> ExperienceSequence:
    """Add uniform noise in [-amplitude, amplitude] to the x, y readings."""
    if amplitude <= 0:
        return e
    rng = np.random.default_rng(seed)
    odo = e.odo.copy()
    odo[1:, :2] += rng.uniform(-amplitude, amplitude, size=(e.length - 1, 2))
    return ExperienceSequence(odo, e.obs, e.coordinate_regime, e.true_states)


def _check_config(model: AugmentedHmm, e: ExperienceSequence, config: EmConfig) -> None:
    if not config.odometry:
        return
    if model.coordinate_regime is not config.coordinate_regime:
        raise InputError("model coordinate regime does not match the configuration")
    if model.constraint_regime is not config.constraint_regime:
        raise InputError("model constraint regime does not match the configuration")
    if e.coordinate_regime is not config.coordinate_regime:
        raise InputError("sequence coordinate regime does not match the configuration")


def constraint_residuals(model: AugmentedHmm) -> tuple[float, float]:
    anti = np.abs(antisymmetry_residual(model))
    add = np.abs(additivity_residual(model)) if model.n_states <= 64 else np.zeros(1)
    return float(anti.max()), float(add.max())


def em_step(model: AugmentedHmm, e: ExperienceSequence, config: EmConfig):
    """One E-step plus constrained M-step.

    Returns ``(new_model, max_change, log_likelihood)``; the log-likelihood is
    that of the input model and ``max_change`` covers A and B only.
    """
    _check_config(model, e, config)
    tables = e_step(model, e, odometry=config.odometry)
    a = reestimate_transitions(tables, config.prob_floor)
    b = reestimate_observations(tables, e, model.obs_dims, config.prob_floor)
    updated = model.replace(transition=a, observation=b)
    if config.odometry:
        updated = reestimate_relations(tables, e, updated, config.sigma_floor,
                                       config.guard_headings)
    change = float(np.max(np.abs(a - model.transition)))
    for new, old in zip(b, model.observation):
        change = max(change, float(np.max(np.abs(new - old))))
    return updated, change, tables.log_likelihood


def learn(model0: AugmentedHmm, e: ExperienceSequence, config: EmConfig):
    """Iterate ``em_step`` until the A/B change drops to ``epsilon`` or ``max_iters``.

    The configured jitter is added to the readings once, before the first
    iteration. Returns ``(model, trace)``; ``trace.converged`` is False when the
    iteration budget ran out.
    """
    e = jitter_sequence(e, config.jitter, config.seed)
    trace = EmTrace()
    model = model0
    for _ in range(config.max_iters):
        start = time.perf_counter()
        model, change, ll = em_step(model, e, config)
        anti, add = constraint_residuals(model)
        trace.log_likelihood.append(ll)
        trace.max_change.append(change)
        trace.antisym_residual.append(anti)
        trace.additivity_residual.append(add)
        trace.wall_ms.append(1000.0 * (time.perf_counter() - start))
        if change <= config.epsilon:
            trace.converged = True
            break
    if not trace.converged:
        log.warning("EM stopped after %d iterations without converging", config.max_iters)
    trace.final_log_likelihood = float(e_step(model, e, odometry=config.odometry).log_likelihood)
    return model, trace
