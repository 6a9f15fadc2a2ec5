"""Ground-truth environments and Monte Carlo experience sampling.

An environment is a prescribed walk through states with planar poses. Poses
use the mathematical heading convention (counter-clockwise from +x) and the
robot's local frame has its y axis along the heading. A recorded heading
change is previous heading minus new heading.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .circular import KAPPA_MAX, wrap_angle
from .geometry import relation_means_from_embedding
from .model import (DEFAULT_ALPHABET, AugmentedHmm, ConstraintRegime, CoordinateRegime,
                    ExperienceSequence, InputError, ModelStructureError, _sections, fmt,
                    rotate)

__all__ = [
    "EnvironmentSpec", "TrajectoryDump", "build_environment", "sample_experience",
    "sample_readings", "embedding_from_poses", "loop17", "halls44", "canned_spec",
    "dumps_spec", "loads_spec", "save_spec", "load_spec", "CANNED",
]

WALL, DOOR, OPEN, UNKNOWN = range(4)


@dataclass
class EnvironmentSpec:
    """Poses, prescribed path and noise parameters of a simulated environment.

    Parameters
    ----------
    poses : (N, 3) array
        x, y in meters and heading in radians for every state.
    successors : (N,) int array
        The state the prescribed path leads to from each state.
    labels : (N, 3) int array
        True front/left/right observation symbol per state.
    """

    poses: np.ndarray
    successors: np.ndarray
    labels: np.ndarray
    name: str = "custom"
    failure_range: tuple = (0.05, 0.10)
    correctness_range: tuple = (0.85, 0.95)
    noise_fraction: float = 0.05
    sigma_floor: float = 0.05
    kappa_straight: float = 300.0
    kappa_turn: float = 100.0
    stray_mass: float = 0.0
    initial_state: int = 0
    alphabet: tuple = DEFAULT_ALPHABET
    misread: str = "unknown"

    def __post_init__(self):
        self.poses = np.array(self.poses, dtype=float).reshape(-1, 3)
        self.successors = np.array(self.successors, dtype=np.int64).reshape(-1)
        self.labels = np.array(self.labels, dtype=np.int64).reshape(len(self.poses), -1)
        self.failure_range = tuple(float(v) for v in self.failure_range)
        self.correctness_range = tuple(float(v) for v in self.correctness_range)
        self.alphabet = tuple(self.alphabet)
        self.check()

    @property
    def n_states(self) -> int:
        return self.poses.shape[0]

    def check(self) -> None:
        n = self.n_states
        if n < 1 or self.successors.shape != (n,):
            raise ModelStructureError("one successor per state is required")
        if np.any((self.successors < 0) | (self.successors >= n)):
            raise ModelStructureError("successor index out of range")
        for lo, hi in (self.failure_range, self.correctness_range):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ModelStructureError("rate ranges must satisfy 0 <= lo <= hi <= 1")
        if not self.noise_fraction > 0:
            raise ModelStructureError("noise fraction must be positive")
        if not 0.0 <= self.stray_mass <= 0.02:
            raise ModelStructureError("stray mass must lie in [0, 0.02]")
        if np.any(self.labels < 0) or np.any(self.labels >= len(self.alphabet)):
            raise ModelStructureError("observation label out of range")
        if self.misread not in ("unknown", "uniform"):
            raise ModelStructureError("misread must be 'unknown' or 'uniform'")
        if not 0 <= self.initial_state < n:
            raise ModelStructureError("initial state out of range")
        # the prescribed walk from the initial state must reach every state
        seen, s = set(), self.initial_state
        while s not in seen:
            seen.add(s)
            s = int(self.successors[s])
        if len(seen) != n and n > 1:
            raise ModelStructureError("prescribed path does not visit every state")


def _misreads(spec: EnvironmentSpec, label: int, k: int) -> list[int]:
    """Symbols that receive the misread mass for a state with true ``label``."""
    if spec.misread == "unknown" and UNKNOWN < k and label != UNKNOWN:
        return [UNKNOWN]
    return [s for s in range(k) if s != label]


def embedding_from_poses(poses: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions and frame angles; the frame of a state rotates its heading onto +y."""
    poses = np.asarray(poses, dtype=float)
    return poses[:, :2].copy(), wrap_angle(np.pi / 2 - poses[:, 2])


def build_environment(spec: EnvironmentSpec, seed: int = 0,
                      coordinate_regime=CoordinateRegime.GLOBAL,
                      constraint_regime=ConstraintRegime.ANTISYMMETRIC) -> AugmentedHmm:
    """True model of ``spec``; per-state rates are drawn within the spec ranges."""
    spec.check()
    coordinate_regime = CoordinateRegime(coordinate_regime)
    rng = np.random.default_rng(seed)
    n = spec.n_states
    k = len(spec.alphabet)

    failure = rng.uniform(*spec.failure_range, size=n)
    a = np.zeros((n, n))
    for i in range(n):
        succ = int(spec.successors[i])
        a[i, i] += failure[i]
        a[i, succ] += 1.0 - failure[i] - spec.stray_mass
        if spec.stray_mass > 0:
            others = [j for j in range(n) if j not in (i, succ)]
            if others:
                a[i, others] += spec.stray_mass / len(others)
            else:
                a[i, succ] += spec.stray_mass
    a /= a.sum(axis=1, keepdims=True)

    obs = []
    for c in range(spec.labels.shape[1]):
        correct = rng.uniform(*spec.correctness_range, size=n)
        b = np.zeros((n, k))
        for i, label in enumerate(spec.labels[:, c]):
            wrong = _misreads(spec, label, k)
            b[i, label] = correct[i] if wrong else 1.0
            b[i, wrong] = (1.0 - correct[i]) / max(len(wrong), 1)
        obs.append(b)

    pos, theta = embedding_from_poses(spec.poses)
    mu = relation_means_from_embedding(pos, theta, coordinate_regime)
    sigma = np.maximum(spec.noise_fraction * np.abs(mu[:, :, :2]), spec.sigma_floor)
    turning = np.abs(mu[:, :, 2]) > 1e-9
    kappa = np.where(turning, spec.kappa_turn, spec.kappa_straight)
    idx = np.arange(n)
    sigma[idx, idx] = spec.sigma_floor
    kappa[idx, idx] = spec.kappa_straight
    return AugmentedHmm(
        transition=a, observation=tuple(obs), mu=mu, sigma=sigma,
        kappa=np.minimum(kappa, KAPPA_MAX), initial_state=spec.initial_state,
        coordinate_regime=coordinate_regime, constraint_regime=constraint_regime,
        self_sigma=spec.sigma_floor, self_kappa=spec.kappa_straight,
        alphabets=tuple(spec.alphabet for _ in range(spec.labels.shape[1])))


# ---------------------------------------------------------------------------
# sampling

@dataclass
class TrajectoryDump:
    """Dead-reckoned trajectory alongside the raw readings and true states."""

    positions: np.ndarray
    headings: np.ndarray
    readings: np.ndarray
    true_states: np.ndarray
    coordinate_regime: CoordinateRegime = CoordinateRegime.GLOBAL

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "y", "theta", "dx", "dy", "dtheta", "true_state"])
            for t in range(len(self.true_states)):
                w.writerow([t] + [fmt(v) for v in (*self.positions[t], self.headings[t],
                                                  *self.readings[t])]
                           + [int(self.true_states[t])])


def dead_reckon(readings: np.ndarray, regime, start=(0.0, 0.0, 0.0)):
    """Chain readings into positions and frame angles.

    Global readings are summed. Relative readings are mapped back through the
    current frame before adding. ``readings[0]`` is ignored.
    """
    regime = CoordinateRegime(regime)
    r = np.asarray(readings, dtype=float)
    t_len = r.shape[0]
    pos = np.empty((t_len, 2))
    theta = np.empty(t_len)
    pos[0] = start[:2]
    theta[0] = start[2]
    for t in range(1, t_len):
        step = r[t, :2]
        if regime is CoordinateRegime.RELATIVE:
            step = rotate(step, -theta[t - 1])
        pos[t] = pos[t - 1] + step
        theta[t] = theta[t - 1] + r[t, 2]
    return pos, theta


def sample_readings(model: AugmentedHmm, i: int, j: int, rng: np.random.Generator,
                    size: int = 1, noise_scale: float = 1.0) -> np.ndarray:
    """Draw odometric readings for transition (i, j); shape (size, 3)."""
    mu = model.mu[i, j]
    out = np.empty((size, 3))
    out[:, :2] = mu[:2] + noise_scale * model.sigma[i, j] * rng.standard_normal((size, 2))
    if noise_scale > 0:
        out[:, 2] = rng.vonmises(mu[2], model.kappa[i, j] / noise_scale ** 2, size)
    else:
        out[:, 2] = mu[2]
    out[:, 2] = wrap_angle(out[:, 2])
    return out


def sample_experience(model: AugmentedHmm, t: int, seed: int, noise_scale: float = 1.0,
                      start=(0.0, 0.0, 0.0)) -> tuple[ExperienceSequence, TrajectoryDump]:
    """Monte Carlo sample of ``t`` steps from ``model``.

    Readings are recorded in the model's coordinate regime. ``noise_scale``
    multiplies the positional standard deviations and divides the heading
    concentration by its square; zero gives readings equal to the means.
    """
    if t < 2:
        raise InputError("sequences need at least two steps")
    if noise_scale < 0:
        raise InputError("noise scale must be nonnegative")
    rng = np.random.default_rng(seed)
    n = model.n_states
    cum_a = np.cumsum(model.transition, axis=1)
    states = np.empty(t, dtype=np.int64)
    states[0] = model.initial_state
    u = rng.random(t)
    for k in range(1, t):
        row = cum_a[states[k - 1]]
        states[k] = min(int(np.searchsorted(row, u[k] * row[-1], side="right")), n - 1)
    obs = np.empty((t, len(model.observation)), dtype=np.int64)
    for c, b in enumerate(model.observation):
        cum_b = np.cumsum(b, axis=1)
        uc = rng.random(t)
        rows = cum_b[states]
        obs[:, c] = np.minimum((uc[:, None] * rows[:, -1:] >= rows).sum(axis=1), b.shape[1] - 1)
    odo = np.zeros((t, 3))
    for k in range(1, t):
        odo[k] = sample_readings(model, states[k - 1], states[k], rng, 1, noise_scale)[0]
    regime = model.coordinate_regime
    e = ExperienceSequence(odo, obs, regime, true_states=states)
    pos, theta = dead_reckon(e.odo, regime, start)
    return e, TrajectoryDump(pos, theta, e.odo.copy(), states, regime)


# ---------------------------------------------------------------------------
# canned environments

def _corridor_loop(corners, interior, name, labels_fn, **kwargs) -> EnvironmentSpec:
    """Counter-clockwise loop through rectilinear corners.

    Each corner contributes an arriving and a departing state (same place,
    headings of the incoming and outgoing corridors); ``interior[k]`` evenly
    spaced corridor states sit between corner k and corner k+1.
    """
    corners = np.asarray(corners, dtype=float)
    m = len(corners)
    poses, kinds = [], []
    for k in range(m):
        p, q = corners[k], corners[(k + 1) % m]
        h_out = np.arctan2(*(q - p)[::-1])
        if k > 0:
            poses.append((*p, h_prev))
            kinds.append(("arrive", k))
        poses.append((*p, h_out))
        kinds.append(("depart", k))
        for s in range(1, interior[k] + 1):
            poses.append((*(p + (q - p) * s / (interior[k] + 1)), h_out))
            kinds.append(("corridor", k, s))
        h_prev = h_out
    poses.append((*corners[0], h_prev))
    kinds.append(("arrive", 0))
    n = len(poses)
    labels = np.array([labels_fn(kind) for kind in kinds])
    return EnvironmentSpec(poses=np.array(poses), successors=(np.arange(n) + 1) % n,
                           labels=labels, name=name, **kwargs)


def _loop17_labels(kind):
    if kind[0] == "arrive":
        return (WALL, OPEN, WALL)
    if kind[0] == "depart":
        return (OPEN, WALL, WALL)
    _, side, s = kind
    if (side, s) in ((0, 2), (2, 1)):
        return (OPEN, DOOR, WALL)
    return (OPEN, WALL, WALL)


def loop17(**kwargs) -> EnvironmentSpec:
    """17 states: a 12 m x 9 m rectangle, 8 corner states and 9 corridor states."""
    corners = [(0, 0), (12, 0), (12, 9), (0, 9)]
    return _corridor_loop(corners, [3, 2, 2, 2], "LOOP-17", _loop17_labels, **kwargs)


def _halls44_labels(kind):
    if kind == ("arrive", 3):     # concave corner, the walk turns right
        return (WALL, WALL, OPEN)
    if kind[0] == "arrive":
        return (WALL, OPEN, WALL)
    if kind[0] == "depart":
        return (OPEN, WALL, WALL)
    _, side, s = kind
    if (side, s) in ((0, 3), (0, 6), (2, 2), (4, 3), (5, 5)):
        return (OPEN, DOOR, WALL)
    if (side, s) in ((1, 2), (5, 2)):
        return (OPEN, WALL, DOOR)
    return (OPEN, WALL, WALL)


def halls44(**kwargs) -> EnvironmentSpec:
    """44 states along an L-shaped hallway loop with one concave corner."""
    corners = [(0, 0), (20, 0), (20, 10), (10, 10), (10, 20), (0, 20)]
    return _corridor_loop(corners, [8, 4, 4, 4, 4, 8], "HALLS-44", _halls44_labels, **kwargs)


CANNED = {"LOOP-17": loop17, "HALLS-44": halls44}


def canned_spec(name: str, **kwargs) -> EnvironmentSpec:
    try:
        return CANNED[name.upper()](**kwargs)
    except KeyError:
        raise InputError(f"unknown canned environment {name!r}; choose from {sorted(CANNED)}")


# ---------------------------------------------------------------------------
# spec file format

SPEC_MAGIC = "ODOHMM-ENV 1"


def dumps_spec(spec: EnvironmentSpec) -> str:
    lines = [SPEC_MAGIC, "[ENV-HEADER]",
             f"name {spec.name}",
             f"n_states {spec.n_states}",
             f"failure_range {fmt(spec.failure_range[0])} {fmt(spec.failure_range[1])}",
             f"correctness_range {fmt(spec.correctness_range[0])} "
             f"{fmt(spec.correctness_range[1])}",
             f"noise_fraction {fmt(spec.noise_fraction)}",
             f"sigma_floor {fmt(spec.sigma_floor)}",
             f"kappa_straight {fmt(spec.kappa_straight)}",
             f"kappa_turn {fmt(spec.kappa_turn)}",
             f"stray_mass {fmt(spec.stray_mass)}",
             f"initial_state {spec.initial_state}",
             f"misread {spec.misread}",
             "alphabet " + " ".join(spec.alphabet),
             "[STATES]",
             "# x y heading_deg successor labels..."]
    for i in range(spec.n_states):
        x, y, h = spec.poses[i]
        lines.append(" ".join([fmt(x), fmt(y), fmt(np.degrees(h)), str(int(spec.successors[i]))]
                              + [spec.alphabet[v] for v in spec.labels[i]]))
    lines.append("")
    return "\n".join(lines)


def loads_spec(text: str) -> EnvironmentSpec:
    sec = _sections(text.splitlines(), SPEC_MAGIC)
    try:
        header = dict(line.split(None, 1) for line in sec["ENV-HEADER"])
        alphabet = tuple(header["alphabet"].split())
        sym = {s: k for k, s in enumerate(alphabet)}
        rows = [line.split() for line in sec["STATES"]]
        if len(rows) != int(header["n_states"]):
            raise InputError("state count does not match the header")
        poses = np.array([[float(r[0]), float(r[1]), np.radians(float(r[2]))] for r in rows])
        succ = [int(r[3]) for r in rows]
        labels = [[sym[v] for v in r[4:]] for r in rows]
        pair = lambda key: tuple(float(v) for v in header[key].split())  # noqa: E731
        return EnvironmentSpec(
            poses=poses, successors=succ, labels=labels, name=header["name"].strip(),
            failure_range=pair("failure_range"), correctness_range=pair("correctness_range"),
            noise_fraction=float(header["noise_fraction"]),
            sigma_floor=float(header["sigma_floor"]),
            kappa_straight=float(header["kappa_straight"]),
            kappa_turn=float(header["kappa_turn"]), stray_mass=float(header["stray_mass"]),
            initial_state=int(header["initial_state"]), alphabet=alphabet,
            misread=header.get("misread", "unknown").strip())
    except (KeyError, ValueError, IndexError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"malformed environment spec: {exc}") from exc


def save_spec(spec: EnvironmentSpec, path) -> None:
    Path(path).write_text(dumps_spec(spec), encoding="utf-8")


def load_spec(path) -> EnvironmentSpec:
    return loads_spec(Path(path).read_text(encoding="utf-8"))
