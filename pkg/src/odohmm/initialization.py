"""Initial models from data: tag-based, k-means and random."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .circular import KAPPA_MAX, KAPPA_MIN, estimate_von_mises, wrap_angle, UndefinedMeanError
from .geometry import relation_means_from_embedding
from .inference import EStepTables
from .model import (AugmentedHmm, ConstraintRegime, CoordinateRegime, ExperienceSequence,
                    InputError, default_alphabets, rotate)
from .reestimation import (EmConfig, floored_normalize, reestimate_relations)

__all__ = [
    "BucketSet", "TaggedSequence", "StateOverflowError", "TagConfig", "bucket_odometry",
    "tag_states", "init_model_tag_based", "init_model_kmeans", "init_model_random",
    "kmeans", "hard_tables", "model_from_path",
]

log = logging.getLogger(__name__)


class StateOverflowError(RuntimeError):
    """Tagging needed more states than the model has."""

    def __init__(self, needed: int, available: int):
        super().__init__(f"tagging needs at least {needed} states but only {available} are "
                         f"available; rerun with a larger n and trim the states left unused")
        self.needed = needed
        self.available = available


@dataclass(frozen=True)
class TagConfig:
    """Spreads and thresholds for bucketing and tagging.

    ``sigma`` is (sigma_x, sigma_y, sigma_theta) with sigma_theta in radians.
    """

    sigma: tuple = (0.5, 0.5, np.radians(15.0))
    bucket_width: float = 1.5
    match_width: float = 1.0
    new_state_width: float = 2.0
    on_overflow: str = "raise"
    min_members: int = 3

    def __post_init__(self):
        if any(s <= 0 for s in self.sigma) or len(self.sigma) != 3:
            raise ValueError("sigma needs three positive entries")
        if self.on_overflow not in ("raise", "closest"):
            raise ValueError("on_overflow must be 'raise' or 'closest'")


@dataclass
class BucketSet:
    means: list = field(default_factory=list)
    members: list = field(default_factory=list)
    sigma: tuple = (0.5, 0.5, np.radians(15.0))
    assignment: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.means)


def _scaled_distance(r, mean, sigma) -> np.ndarray:
    """Per-dimension distance in units of sigma; heading difference is circular."""
    r, mean = np.asarray(r, dtype=float), np.asarray(mean, dtype=float)
    d = np.abs(r - mean)
    d[..., 2] = np.abs(wrap_angle(r[..., 2] - mean[..., 2]))
    return d / np.asarray(sigma, dtype=float)


def bucket_odometry(readings, sigma=TagConfig.sigma, width: float = 1.5) -> BucketSet:
    """Sequentially group readings whose every dimension is within ``width`` sigma.

    Each reading joins the first bucket (in creation order) that accepts it and
    moves that bucket's running mean; otherwise it opens a new bucket.
    """
    r = np.asarray(readings, dtype=float).reshape(-1, 3)
    if len(r) == 0:
        raise InputError("no readings to bucket")
    if any(s <= 0 for s in sigma):
        raise InputError("bucket spreads must be positive")
    out = BucketSet(sigma=tuple(sigma))
    assign = np.empty(len(r), dtype=np.int64)
    for t, reading in enumerate(r):
        chosen = -1
        for k, mean in enumerate(out.means):
            if np.all(_scaled_distance(reading, mean, sigma) <= width):
                chosen = k
                break
        if chosen < 0:
            out.means.append(reading.copy())
            out.members.append([t])
            chosen = len(out.means) - 1
        else:
            mean = out.means[chosen]
            out.members[chosen].append(t)
            cnt = len(out.members[chosen])
            mean[:2] += (reading[:2] - mean[:2]) / cnt
            mean[2] = wrap_angle(mean[2] + wrap_angle(reading[2] - mean[2]) / cnt)
        assign[t] = chosen
    out.assignment = assign
    return out


@dataclass
class TaggedSequence:
    """State per step, the populated relation means and bucket associations."""

    states: np.ndarray
    mu: np.ndarray
    populated: np.ndarray
    associations: dict
    positions: np.ndarray
    frames: np.ndarray
    n_used: int
    overflow: int = 0


class _Closure:
    """Keeps relation means consistent by placing states on a shared embedding."""

    def __init__(self, n: int, regime: CoordinateRegime):
        self.regime = regime
        self.pos = np.zeros((n, 2))
        self.theta = np.zeros(n)
        self.used = np.zeros(n, dtype=bool)
        self.used[0] = True

    def place(self, origin: int, new: int, mean) -> None:
        step = np.asarray(mean[:2], dtype=float)
        if self.regime is CoordinateRegime.RELATIVE:
            step = rotate(step, -self.theta[origin])
        self.pos[new] = self.pos[origin] + step
        self.theta[new] = self.theta[origin] + mean[2]
        self.used[new] = True

    def means(self) -> np.ndarray:
        return relation_means_from_embedding(self.pos, self.theta, self.regime)


def tag_states(buckets: BucketSet, readings, n_states: int,
               regime=CoordinateRegime.GLOBAL, config: TagConfig = TagConfig()) -> TaggedSequence:
    """Walk the readings from state 0, assigning a destination state to each.

    A reading goes to the state already associated with its bucket from the
    current state; else to the closest populated entry of the current row
    within ``match_width`` sigma; else to a new state if it is more than
    ``new_state_width`` sigma from every populated entry; else to the closest
    entry. Relation means of all used states follow from one embedding, so
    every populated entry satisfies anti-symmetry and additivity.
    """
    regime = CoordinateRegime(regime)
    r = np.asarray(readings, dtype=float).reshape(-1, 3)
    if n_states < 1:
        raise InputError("n_states must be positive")
    sigma = buckets.sigma
    closure = _Closure(n_states, regime)
    mu = closure.means()
    states = np.zeros(len(r) + 1, dtype=np.int64)
    assoc: dict = {}
    n_used, overflow = 1, 0
    for t, reading in enumerate(r):
        s = int(states[t])
        b = int(buckets.assignment[t])
        if (s, b) in assoc:
            states[t + 1] = assoc[(s, b)]
            continue
        cols = np.flatnonzero(closure.used)
        dist = _scaled_distance(reading, mu[s, cols], sigma).max(axis=1)
        best = int(cols[np.argmin(dist)])
        if dist.min() <= config.match_width:
            nxt = best
        elif dist.min() > config.new_state_width:
            if n_used < n_states:
                nxt = n_used
                n_used += 1
                closure.place(s, nxt, buckets.means[b])
                mu = closure.means()
            else:
                overflow += 1
                if config.on_overflow == "raise":
                    raise StateOverflowError(n_states + overflow, n_states)
                nxt = best
        else:
            nxt = best
        assoc[(s, b)] = nxt
        states[t + 1] = nxt
    if overflow:
        log.info("tagging wanted %d more states than available", overflow)
    populated = np.outer(closure.used, closure.used)
    return TaggedSequence(states=states, mu=np.where(populated[:, :, None], mu, 0.0),
                          populated=populated, associations=assoc, positions=closure.pos,
                          frames=closure.theta, n_used=n_used, overflow=overflow)


# ---------------------------------------------------------------------------
# building models from a hard state path

def hard_tables(states: np.ndarray, n: int) -> EStepTables:
    """One-hot occupation and transition tables for a known state path."""
    states = np.asarray(states, dtype=np.int64)
    t_len = len(states)
    gamma = np.zeros((t_len, n))
    gamma[np.arange(t_len), states] = 1.0
    xi = np.zeros((t_len - 1, n, n))
    xi[np.arange(t_len - 1), states[:-1], states[1:]] = 1.0
    return EStepTables(alpha=gamma.copy(), beta=np.ones((t_len, n)),
                       log_scales=np.zeros(t_len), gamma=gamma, xi=xi,
                       log_likelihood=float("nan"))


def _counts_ab(states, e: ExperienceSequence, n: int, obs_dims, floor: float):
    tables = hard_tables(states, n)
    a, _ = floored_normalize(tables.xi.sum(axis=0), floor)
    b = []
    for c, k in enumerate(obs_dims):
        counts = np.zeros((n, k))
        np.add.at(counts, (states, e.obs[:, c]), 1.0)
        b.append(floored_normalize(counts, floor)[0])
    return a, tuple(b)


def _obs_dims(e: ExperienceSequence, obs_dims=None) -> tuple:
    if obs_dims is None:
        obs_dims = tuple(max(4, int(e.obs[:, c].max()) + 1) for c in range(e.obs.shape[1]))
    obs_dims = tuple(int(k) for k in obs_dims)
    if len(obs_dims) != e.obs.shape[1] or any(
            e.obs[:, c].max() >= k for c, k in enumerate(obs_dims)):
        raise InputError("observation symbols do not fit the alphabet sizes")
    return obs_dims


def _alphabets(obs_dims):
    defaults = default_alphabets(len(obs_dims))
    return tuple(d if len(d) == k else tuple(str(i) for i in range(k))
                 for d, k in zip(defaults, obs_dims))


def _default_spread(n, sigma_xy, kappa, config: EmConfig):
    sigma = np.empty((n, n, 2))
    sigma[:] = sigma_xy
    kap = np.full((n, n), float(kappa))
    idx = np.arange(n)
    sigma[idx, idx] = config.self_sigma
    kap[idx, idx] = config.self_kappa
    return sigma, kap


def model_from_path(states, e: ExperienceSequence, n: int, config: EmConfig,
                    mu_start: np.ndarray, sigma_xy=(0.5, 0.5), kappa: float = 15.0,
                    obs_dims=None) -> AugmentedHmm:
    """Counts for A and B plus one relation M-step on the one-hot path tables."""
    obs_dims = _obs_dims(e, obs_dims)
    a, b = _counts_ab(states, e, n, obs_dims, config.prob_floor)
    sigma, kap = _default_spread(n, sigma_xy, kappa, config)
    mu = np.array(mu_start, dtype=float, copy=True)
    mu[np.arange(n), np.arange(n)] = 0.0
    model = AugmentedHmm(
        transition=a, observation=b, mu=mu, sigma=sigma, kappa=kap,
        coordinate_regime=config.coordinate_regime,
        constraint_regime=config.constraint_regime,
        self_sigma=config.self_sigma, self_kappa=config.self_kappa,
        alphabets=_alphabets(obs_dims))
    return reestimate_relations(hard_tables(states, n), e, model, config.sigma_floor)


# ---------------------------------------------------------------------------
# tag-based

def _entry_spreads(states, readings, n, default_sigma, default_kappa, min_members, floor):
    """Per-entry spreads from the readings tagged to each transition."""
    sigma = np.empty((n, n, 2))
    sigma[:] = default_sigma
    kappa = np.full((n, n), float(default_kappa))
    src, dst = states[:-1], states[1:]
    for i, j in set(zip(src.tolist(), dst.tolist())):
        if i == j:
            continue
        sel = readings[(src == i) & (dst == j)]
        if len(sel) < min_members:
            continue
        sigma[i, j] = np.maximum(sel[:, :2].std(axis=0, ddof=1), floor)
        try:
            kappa[i, j] = np.clip(estimate_von_mises(sel[:, 2]).kappa, KAPPA_MIN, KAPPA_MAX)
        except UndefinedMeanError:
            kappa[i, j] = KAPPA_MIN
    return sigma, kappa


def init_model_tag_based(e: ExperienceSequence, n: int, config: EmConfig = EmConfig(),
                         tag_config: TagConfig = TagConfig(), obs_dims=None) -> AugmentedHmm:
    """Bucket the readings, tag states, and turn the tagged path into a model.

    States the walk never created are placed at a random used state plus a
    random reading (seeded by ``config.seed``).
    """
    regime = config.coordinate_regime
    if e.coordinate_regime is not regime:
        raise InputError("sequence regime does not match the configuration")
    obs_dims = _obs_dims(e, obs_dims)
    readings = e.odo[1:]
    buckets = bucket_odometry(readings, tag_config.sigma, tag_config.bucket_width)
    tagged = tag_states(buckets, readings, n, regime, tag_config)
    rng = np.random.default_rng(config.seed)
    closure = _Closure(n, regime)
    closure.pos[:] = tagged.positions
    closure.theta[:] = tagged.frames
    closure.used[:] = np.diag(tagged.populated)
    for u in range(tagged.n_used, n):
        origin = int(rng.choice(np.flatnonzero(closure.used)))
        closure.place(origin, u, readings[rng.integers(len(readings))])
    if tagged.n_used < n:
        log.info("%d states not reached by tagging were placed at random", n - tagged.n_used)
    mu = closure.means()
    default_kappa = 1.0 / tag_config.sigma[2] ** 2
    sigma, kappa = _entry_spreads(tagged.states, readings, n, tag_config.sigma[:2],
                                  default_kappa, tag_config.min_members, config.sigma_floor)
    idx = np.arange(n)
    sigma[idx, idx] = config.self_sigma
    kappa[idx, idx] = config.self_kappa
    a, b = _counts_ab(tagged.states, e, n, obs_dims, config.prob_floor)
    return AugmentedHmm(
        transition=a, observation=b, mu=mu, sigma=sigma, kappa=kappa,
        coordinate_regime=regime, constraint_regime=config.constraint_regime,
        self_sigma=config.self_sigma, self_kappa=config.self_kappa,
        alphabets=_alphabets(obs_dims))


# ---------------------------------------------------------------------------
# k-means

def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 300,
           tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster is re-seeded at the point farthest from its centre.
    Returns ``(labels, centres)``.
    """
    x = np.asarray(points, dtype=float)
    m = len(x)
    if not 1 <= k <= m:
        raise InputError("need 1 <= k <= number of points")
    centres = np.empty((k, x.shape[1]))
    centres[0] = x[rng.integers(m)]
    d2 = np.sum((x - centres[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        idx = rng.choice(m, p=d2 / total) if total > 0 else rng.integers(m)
        centres[c] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centres[c]) ** 2, axis=1))
    labels = np.zeros(m, dtype=np.int64)
    for _ in range(max_iter):
        dist = np.sum((x[:, None, :] - centres[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dist, axis=1)
        new = centres.copy()
        for c in range(k):
            sel = labels == c
            if sel.any():
                new[c] = x[sel].mean(axis=0)
            else:
                far = int(np.argmax(dist[np.arange(m), labels]))
                log.info("empty k-means cluster %d re-seeded at point %d", c, far)
                new[c] = x[far]
                labels[far] = c
        shift = float(np.max(np.abs(new - centres)))
        centres = new
        if shift <= tol:
            break
    dist = np.sum((x[:, None, :] - centres[None, :, :]) ** 2, axis=2)
    return np.argmin(dist, axis=1), centres


def _relabel_by_first_visit(labels: np.ndarray, k: int) -> np.ndarray:
    order = []
    for v in labels.tolist():
        if v not in order:
            order.append(v)
    order += [c for c in range(k) if c not in order]
    perm = np.empty(k, dtype=np.int64)
    perm[order] = np.arange(k)
    return perm[labels]


def init_model_kmeans(e: ExperienceSequence, n: int, seed: int = 0,
                      config: EmConfig | None = None, obs_dims=None) -> AugmentedHmm:
    """Cluster dead-reckoned (x, y) positions into ``n`` states."""
    config = config or EmConfig(seed=seed)
    if e.coordinate_regime is not CoordinateRegime.GLOBAL:
        raise InputError("k-means initialization needs globally referenced readings")
    pos = np.vstack([np.zeros(2), np.cumsum(e.odo[1:, :2], axis=0)])
    heading = np.concatenate([[0.0], np.cumsum(e.odo[1:, 2])])
    rng = np.random.default_rng(seed)
    labels, _ = kmeans(pos, n, rng)
    states = _relabel_by_first_visit(labels, n)
    centres = np.zeros((n, 2))
    theta = np.zeros(n)
    for s in range(n):
        sel = states == s
        if sel.any():
            centres[s] = pos[sel].mean(axis=0)
            theta[s] = wrap_angle(np.angle(np.exp(1j * heading[sel]).sum()))
    centres -= centres[0]
    theta = wrap_angle(theta - theta[0])
    mu0 = relation_means_from_embedding(centres, theta, CoordinateRegime.GLOBAL)
    return model_from_path(states, e, n, config, mu0, obs_dims=obs_dims)


# ---------------------------------------------------------------------------
# random

def init_model_random(n: int, obs_dims, seed: int = 0, e: ExperienceSequence | None = None,
                      config: EmConfig | None = None, sigma_xy=(0.5, 0.5),
                      kappa: float = 15.0) -> AugmentedHmm:
    """Dirichlet(1) rows for A and B; relation means drawn inside the data range."""
    config = config or EmConfig(seed=seed)
    rng = np.random.default_rng(seed)
    obs_dims = tuple(int(k) for k in obs_dims)
    a = rng.dirichlet(np.ones(n), size=n)
    b = tuple(rng.dirichlet(np.ones(k), size=n) for k in obs_dims)
    regime = config.coordinate_regime
    if e is not None:
        lo, hi = e.odo[1:, :2].min(axis=0), e.odo[1:, :2].max(axis=0)
    else:
        lo, hi = -np.ones(2), np.ones(2)
    if config.constraint_regime is ConstraintRegime.ADDITIVE:
        if e is not None and regime is CoordinateRegime.GLOBAL:
            track = np.cumsum(e.odo[1:, :2], axis=0)
            lo, hi = np.minimum(track.min(axis=0), 0.0), np.maximum(track.max(axis=0), 0.0)
        pos = rng.uniform(lo, hi, size=(n, 2))
        theta = rng.uniform(-np.pi, np.pi, size=n)
        pos -= pos[0]
        theta = wrap_angle(theta - theta[0])
        mu = relation_means_from_embedding(pos, theta, regime)
    else:
        raw = rng.uniform(lo, hi, size=(n, n, 2))
        th_raw = rng.uniform(-np.pi, np.pi, size=(n, n))
        th = 0.5 * (th_raw - th_raw.T)
        mu = np.zeros((n, n, 3))
        mu[:, :, 2] = th
        if regime is CoordinateRegime.GLOBAL:
            mu[:, :, :2] = 0.5 * (raw - np.swapaxes(raw, 0, 1))
        else:
            iu, ju = np.triu_indices(n, 1)
            mu[iu, ju, :2] = raw[iu, ju]
            mu[ju, iu, :2] = -rotate(raw[iu, ju], th[iu, ju])
        mu[np.arange(n), np.arange(n)] = 0.0
    sigma, kap = _default_spread(n, sigma_xy, kappa, config)
    return AugmentedHmm(
        transition=a, observation=b, mu=mu, sigma=sigma, kappa=kap,
        coordinate_regime=regime, constraint_regime=config.constraint_regime,
        self_sigma=config.self_sigma, self_kappa=config.self_kappa,
        alphabets=_alphabets(obs_dims))
