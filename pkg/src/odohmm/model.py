"""Augmented HMM data model, validity rules, densities and the model file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from .circular import KAPPA_MAX, KAPPA_MIN, LOG_TWO_PI, log_bessel_i0, wrap_angle

SIGMA_MIN = 1e-3
DEFAULT_SELF_SIGMA = 0.2
DEFAULT_SELF_KAPPA = 50.0
DEFAULT_ALPHABET = ("wall", "door", "open", "unknown")
DEFAULT_COMPONENTS = ("front", "left", "right")

STOCHASTIC_TOL = 1e-9
GLOBAL_TOL = 1e-9
RELATIVE_TOL = 1e-6

_LOG_SQRT_TWO_PI = 0.5 * np.log(2.0 * np.pi)


class CoordinateRegime(str, Enum):
    GLOBAL = "global"
    RELATIVE = "relative"


class ConstraintRegime(str, Enum):
    ANTISYMMETRIC = "antisym"
    ADDITIVE = "additive"


class ModelStructureError(ValueError):
    """Dimensions of A, B and R disagree with each other or with n_states."""


class InputError(ValueError):
    """An index or observation symbol is out of range."""


def rotate(p, angle):
    """Rotate planar vectors ``p[..., :2]`` by ``angle`` (broadcasting)."""
    p = np.asarray(p, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    x, y = p[..., 0], p[..., 1]
    return np.stack([x * c - y * s, x * s + y * c], axis=-1)


@dataclass(frozen=True)
class RelationEntry:
    mu_x: float
    sigma_x: float
    mu_y: float
    sigma_y: float
    mu_theta: float
    kappa_theta: float


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AugmentedHmm:
    """Odometry-augmented HMM with factored discrete observations.

    ``mu[i, j]`` holds the (x, y, theta) relation means from state i to j,
    ``sigma[i, j]`` the (x, y) standard deviations and ``kappa[i, j]`` the
    heading concentration. In the relative regime, entry (i, j) is expressed
    in the frame of state i. Arrays are copied and made read-only.
    """

    transition: np.ndarray
    observation: tuple
    mu: np.ndarray
    sigma: np.ndarray
    kappa: np.ndarray
    initial_state: int = 0
    coordinate_regime: CoordinateRegime = CoordinateRegime.GLOBAL
    constraint_regime: ConstraintRegime = ConstraintRegime.ANTISYMMETRIC
    self_sigma: float = DEFAULT_SELF_SIGMA
    self_kappa: float = DEFAULT_SELF_KAPPA
    alphabets: tuple = ()

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("transition", _frozen(self.transition))
        set_("observation", tuple(_frozen(b) for b in self.observation))
        set_("mu", _frozen(self.mu))
        set_("sigma", _frozen(self.sigma))
        set_("kappa", _frozen(self.kappa))
        set_("initial_state", int(self.initial_state))
        set_("coordinate_regime", CoordinateRegime(self.coordinate_regime))
        set_("constraint_regime", ConstraintRegime(self.constraint_regime))
        if not self.alphabets:
            set_("alphabets", tuple(
                tuple(str(k) for k in range(b.shape[1])) for b in self.observation))
        else:
            set_("alphabets", tuple(tuple(a) for a in self.alphabets))
        check_structure(self)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def obs_dims(self) -> tuple[int, ...]:
        return tuple(b.shape[1] for b in self.observation)

    def relation(self, i: int, j: int) -> RelationEntry:
        m, s = self.mu[i, j], self.sigma[i, j]
        return RelationEntry(float(m[0]), float(s[0]), float(m[1]), float(s[1]),
                             float(m[2]), float(self.kappa[i, j]))

    def replace(self, **changes) -> "AugmentedHmm":
        return dataclasses.replace(self, **changes)


def check_structure(model: AugmentedHmm) -> None:
    n = model.transition.shape[0] if model.transition.ndim == 2 else -1
    if n < 1 or model.transition.shape != (n, n):
        raise ModelStructureError(f"transition must be square, got {model.transition.shape}")
    if not model.observation:
        raise ModelStructureError("at least one observation component is required")
    for i, b in enumerate(model.observation):
        if b.ndim != 2 or b.shape[0] != n or b.shape[1] < 1:
            raise ModelStructureError(f"observation[{i}] has shape {b.shape}, expected ({n}, k)")
    if model.mu.shape != (n, n, 3):
        raise ModelStructureError(f"mu has shape {model.mu.shape}, expected ({n}, {n}, 3)")
    if model.sigma.shape != (n, n, 2):
        raise ModelStructureError(f"sigma has shape {model.sigma.shape}, expected ({n}, {n}, 2)")
    if model.kappa.shape != (n, n):
        raise ModelStructureError(f"kappa has shape {model.kappa.shape}, expected ({n}, {n})")
    if not 0 <= model.initial_state < n:
        raise ModelStructureError(f"initial state {model.initial_state} out of range")
    if len(model.alphabets) != len(model.observation) or any(
            len(a) != b.shape[1] for a, b in zip(model.alphabets, model.observation)):
        raise ModelStructureError("alphabets do not match observation matrix widths")


@dataclass
class ExperienceSequence:
    """Odometry readings and observation vectors for T steps.

    ``odo[t]`` is the reading recorded on the move into step t; ``odo[0]`` has
    no incoming move and is ignored by inference.
    """

    odo: np.ndarray
    obs: np.ndarray
    coordinate_regime: CoordinateRegime = CoordinateRegime.GLOBAL
    true_states: np.ndarray | None = None

    def __post_init__(self):
        odo = np.array(self.odo, dtype=float)
        obs = np.array(self.obs, dtype=np.int64)
        if obs.ndim == 1:
            obs = obs[:, None]
        if odo.ndim != 2 or odo.shape[1] != 3:
            raise InputError(f"odometry must have shape (T, 3), got {odo.shape}")
        if obs.ndim != 2 or obs.shape[0] != odo.shape[0]:
            raise InputError("observation and odometry lengths differ")
        if odo.shape[0] < 2:
            raise InputError("sequences need at least two steps")
        if np.any(obs < 0):
            raise InputError("observation symbols must be nonnegative")
        odo[:, 2] = wrap_angle(odo[:, 2])
        self.odo = odo
        self.obs = obs
        self.coordinate_regime = CoordinateRegime(self.coordinate_regime)
        if self.true_states is not None:
            self.true_states = np.asarray(self.true_states, dtype=np.int64)

    def __len__(self) -> int:
        return self.odo.shape[0]

    @property
    def length(self) -> int:
        return self.odo.shape[0]

    def prefix(self, t: int) -> "ExperienceSequence":
        ts = None if self.true_states is None else self.true_states[:t]
        return ExperienceSequence(self.odo[:t], self.obs[:t], self.coordinate_regime, ts)


@dataclass(frozen=True)
class Violation:
    rule: str
    location: tuple
    magnitude: float


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}

    def max_magnitude(self, prefix: str = "") -> float:
        mags = [v.magnitude for v in self.violations if v.rule.startswith(prefix)]
        return max(mags, default=0.0)


def antisymmetry_residual(model: AugmentedHmm) -> np.ndarray:
    """Per-pair residual of the (possibly frame-transformed) anti-symmetry rule.

    Returns an (N, N, 3) array; the theta channel is wrapped.
    """
    mu = model.mu
    res = np.empty_like(mu)
    th_t = mu[:, :, 2].T
    res[:, :, 2] = wrap_angle(mu[:, :, 2] + th_t)
    rev = np.swapaxes(mu[:, :, :2], 0, 1)  # rev[a, b] = mu(b, a)
    if model.coordinate_regime is CoordinateRegime.GLOBAL:
        res[:, :, :2] = mu[:, :, :2] + rev
    else:
        # mu(a, b) = -T_ba[mu(b, a)], T_ba rotates by mu_theta(b, a)
        res[:, :, :2] = mu[:, :, :2] + rotate(rev, th_t)
    return res


def additivity_residual(model: AugmentedHmm) -> np.ndarray:
    """Residual r[a, b, c] = mu(a, c) - mu(a, b) - T_ba[mu(b, c)] as (N, N, N, 3)."""
    mu = model.mu
    ac = mu[:, None, :, :]
    ab = mu[:, :, None, :]
    bc = mu[None, :, :, :]
    res = np.empty(np.broadcast_shapes(ac.shape, ab.shape, bc.shape))
    res[..., 2] = wrap_angle(ac[..., 2] - ab[..., 2] - bc[..., 2])
    if model.coordinate_regime is CoordinateRegime.GLOBAL:
        res[..., :2] = ac[..., :2] - ab[..., :2] - bc[..., :2]
    else:
        ba_theta = mu[:, :, 2].T[:, :, None]  # mu_theta(b, a) at [a, b, c]
        res[..., :2] = ac[..., :2] - ab[..., :2] - rotate(bc[..., :2], ba_theta)
    return res


def validate_model(model: AugmentedHmm) -> ValidationReport:
    """List every violated model invariant together with its magnitude."""
    check_structure(model)
    out: list[Violation] = []
    n = model.n_states

    def stochastic(name, mat):
        for i in range(mat.shape[0]):
            neg = -float(mat[i].min())
            if neg > 0:
                out.append(Violation(f"{name}.nonneg", (i,), neg))
            dev = abs(float(mat[i].sum()) - 1.0)
            if dev > STOCHASTIC_TOL or not np.isfinite(dev):
                out.append(Violation(f"{name}.rowsum", (i,), dev))

    stochastic("A", model.transition)
    for c, b in enumerate(model.observation):
        stochastic(f"B{c}", b)

    idx = np.arange(n)
    for i in idx:
        dev = float(np.max(np.abs(model.mu[i, i])))
        if dev > 0:
            out.append(Violation("R.diag.mean", (int(i),), dev))
        dev = float(np.max(np.abs(model.sigma[i, i] - model.self_sigma)))
        if dev > 0:
            out.append(Violation("R.diag.sigma", (int(i),), dev))
        dev = abs(float(model.kappa[i, i]) - model.self_kappa)
        if dev > 0:
            out.append(Violation("R.diag.kappa", (int(i),), dev))

    tol = GLOBAL_TOL if model.coordinate_regime is CoordinateRegime.GLOBAL else RELATIVE_TOL
    anti = antisymmetry_residual(model)
    for a, b in zip(*np.triu_indices(n, 1)):
        for m, name in enumerate("xy"):
            if model.coordinate_regime is CoordinateRegime.GLOBAL:
                mag = abs(float(anti[a, b, m]))
                if mag > tol:
                    out.append(Violation(f"R.antisym.{name}", (int(a), int(b)), mag))
        if model.coordinate_regime is CoordinateRegime.RELATIVE:
            mag = float(np.hypot(*anti[a, b, :2]))
            if mag > tol:
                out.append(Violation("R.antisym.xy", (int(a), int(b)), mag))
        mag = abs(float(anti[a, b, 2]))
        if mag > tol:
            out.append(Violation("R.antisym.theta", (int(a), int(b)), mag))

    if model.constraint_regime is ConstraintRegime.ADDITIVE:
        add = additivity_residual(model)
        for m, name in ((0, "x"), (1, "y"), (2, "theta")):
            mags = np.abs(add[..., m])
            for a, b, c in zip(*np.nonzero(mags > tol)):
                out.append(Violation(f"R.additive.{name}", (int(a), int(b), int(c)),
                                     float(mags[a, b, c])))

    off = ~np.eye(n, dtype=bool)
    for a, b in zip(*np.nonzero(off)):
        s = float(model.sigma[a, b].min())
        if not s >= SIGMA_MIN:
            out.append(Violation("R.sigma.floor", (int(a), int(b)), SIGMA_MIN - s))
        k = float(model.kappa[a, b])
        if not KAPPA_MIN <= k <= KAPPA_MAX:
            out.append(Violation("R.kappa.range", (int(a), int(b)),
                                 max(KAPPA_MIN - k, k - KAPPA_MAX)))
    return ValidationReport(out)


def _check_obs(model: AugmentedHmm, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64).reshape(-1)
    if v.shape[0] != len(model.observation):
        raise InputError(f"observation vector needs {len(model.observation)} components")
    for c, (sym, k) in enumerate(zip(v, model.obs_dims)):
        if not 0 <= sym < k:
            raise InputError(f"symbol {sym} out of range for component {c}")
    return v


def observation_probability(model: AugmentedHmm, state: int, v) -> float:
    """Probability of observation vector ``v`` in ``state``: product over components."""
    if not 0 <= state < model.n_states:
        raise InputError(f"state {state} out of range")
    v = _check_obs(model, v)
    p = 1.0
    for b, sym in zip(model.observation, v):
        p *= float(b[state, sym])
    return p


def observation_log_likelihoods(model: AugmentedHmm, obs: np.ndarray) -> np.ndarray:
    """(T, N) table of log observation probabilities for a sequence of vectors."""
    obs = np.asarray(obs, dtype=np.int64)
    if obs.ndim == 1:
        obs = obs[:, None]
    if obs.shape[1] != len(model.observation):
        raise InputError("observation width does not match the model")
    for c, k in enumerate(model.obs_dims):
        if obs[:, c].min() < 0 or obs[:, c].max() >= k:
            raise InputError(f"observation symbol out of range in component {c}")
    with np.errstate(divide="ignore"):
        out = np.zeros((obs.shape[0], model.n_states))
        for c, b in enumerate(model.observation):
            out += np.log(b[:, obs[:, c]]).T
    return out


def log_relation_densities(model: AugmentedHmm, readings: np.ndarray) -> np.ndarray:
    """Log densities of readings under every relation entry, shape (T', N, N)."""
    r = np.asarray(readings, dtype=float).reshape(-1, 3)
    mu, sigma = model.mu, model.sigma
    zx = (r[:, None, None, 0] - mu[None, :, :, 0]) / sigma[None, :, :, 0]
    zy = (r[:, None, None, 1] - mu[None, :, :, 1]) / sigma[None, :, :, 1]
    norm = -2 * _LOG_SQRT_TWO_PI - np.log(sigma[:, :, 0]) - np.log(sigma[:, :, 1])
    vm_norm = -LOG_TWO_PI - log_bessel_i0(model.kappa)
    heading = model.kappa[None] * np.cos(r[:, None, None, 2] - mu[None, :, :, 2])
    return norm[None] + vm_norm[None] - 0.5 * (zx * zx + zy * zy) + heading


def relation_density(model: AugmentedHmm, i: int, j: int, r) -> float:
    """Density of odometry reading ``r = (x, y, theta)`` under relation entry (i, j)."""
    n = model.n_states
    if not (0 <= i < n and 0 <= j < n):
        raise InputError(f"state pair ({i}, {j}) out of range")
    return float(np.exp(log_relation_densities(model, np.asarray(r, float))[0, i, j]))


# ---------------------------------------------------------------------------
# model file format

MODEL_MAGIC = "ODOHMM-MODEL 1"


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_model(model: AugmentedHmm) -> str:
    n = model.n_states
    lines = [MODEL_MAGIC, "[MODEL-HEADER]",
             f"n_states {n}",
             f"components {len(model.observation)}",
             f"coordinate_regime {model.coordinate_regime.value}",
             f"constraint_regime {model.constraint_regime.value}",
             f"self_sigma {fmt(model.self_sigma)}",
             f"self_kappa {fmt(model.self_kappa)}"]
    for c, alpha in enumerate(model.alphabets):
        lines.append(f"alphabet {c} " + " ".join(alpha))
    lines.append("[MATRIX-A]")
    lines += [" ".join(fmt(v) for v in row) for row in model.transition]
    for c, b in enumerate(model.observation):
        lines.append(f"[MATRIX-B {c}]")
        lines += [" ".join(fmt(v) for v in row) for row in b]
    lines.append("[MATRIX-R]")
    for i in range(n):
        for j in range(n):
            m, s = model.mu[i, j], model.sigma[i, j]
            lines.append(" ".join(fmt(v) for v in (m[0], s[0], m[1], s[1], m[2], model.kappa[i, j])))
    lines += ["[INITIAL-STATE]", str(model.initial_state), ""]
    return "\n".join(lines)


def _sections(lines: Iterable[str], magic: str) -> dict[str, list[str]]:
    it = iter(lines)
    first = next(it, "").strip()
    if first != magic:
        raise InputError(f"expected header {magic!r}, got {first!r}")
    sections: dict[str, list[str]] = {}
    current = None
    for raw in it:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            raise InputError(f"data outside a section: {line!r}")
        else:
            sections[current].append(line)
    return sections


def loads_model(text: str) -> AugmentedHmm:
    sec = _sections(text.splitlines(), MODEL_MAGIC)
    try:
        header = {}
        alphabets = {}
        for line in sec["MODEL-HEADER"]:
            key, _, rest = line.partition(" ")
            if key == "alphabet":
                c, *symbols = rest.split()
                alphabets[int(c)] = tuple(symbols)
            else:
                header[key] = rest.strip()
        n = int(header["n_states"])
        n_comp = int(header["components"])
        a = np.array([[float(v) for v in row.split()] for row in sec["MATRIX-A"]])
        obs = [np.array([[float(v) for v in row.split()] for row in sec[f"MATRIX-B {c}"]])
               for c in range(n_comp)]
        cells = np.array([[float(v) for v in row.split()] for row in sec["MATRIX-R"]])
        if cells.shape != (n * n, 6):
            raise ModelStructureError(f"MATRIX-R must have {n * n} rows of 6 values")
        cells = cells.reshape(n, n, 6)
        init = int(sec["INITIAL-STATE"][0])
    except (KeyError, IndexError) as exc:
        raise InputError(f"model file missing field or section: {exc}") from exc
    return AugmentedHmm(
        transition=a,
        observation=tuple(obs),
        mu=cells[:, :, [0, 2, 4]],
        sigma=cells[:, :, [1, 3]],
        kappa=cells[:, :, 5],
        initial_state=init,
        coordinate_regime=header["coordinate_regime"],
        constraint_regime=header["constraint_regime"],
        self_sigma=float(header["self_sigma"]),
        self_kappa=float(header["self_kappa"]),
        alphabets=tuple(alphabets[c] for c in range(n_comp)) if alphabets else (),
    )


def save_model(model: AugmentedHmm, path: str | Path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def load_model(path: str | Path) -> AugmentedHmm:
    return loads_model(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# experience sequence file format

SEQUENCE_MAGIC = "ODOHMM-SEQUENCE 1"


def dumps_sequence(e: ExperienceSequence) -> str:
    lines = [SEQUENCE_MAGIC, "[HEADER]",
             f"length {e.length}",
             f"components {e.obs.shape[1]}",
             f"coordinate_regime {e.coordinate_regime.value}",
             "[STEPS]"]
    for t in range(e.length):
        lines.append(" ".join(fmt(v) for v in e.odo[t]) + " " +
                     " ".join(str(int(v)) for v in e.obs[t]))
    lines.append("")
    return "\n".join(lines)


def loads_sequence(text: str) -> ExperienceSequence:
    sec = _sections(text.splitlines(), SEQUENCE_MAGIC)
    header = dict(line.split(None, 1) for line in sec["HEADER"])
    rows = [line.split() for line in sec["STEPS"]]
    if len(rows) != int(header["length"]):
        raise InputError("sequence length does not match its header")
    odo = np.array([[float(v) for v in r[:3]] for r in rows])
    obs = np.array([[int(v) for v in r[3:]] for r in rows], dtype=np.int64)
    return ExperienceSequence(odo, obs, header["coordinate_regime"])


def save_sequence(e: ExperienceSequence, path: str | Path) -> None:
    Path(path).write_text(dumps_sequence(e), encoding="utf-8")


def load_sequence(path: str | Path) -> ExperienceSequence:
    return loads_sequence(Path(path).read_text(encoding="utf-8"))


def default_alphabets(n_components: int = 3) -> tuple:
    return tuple(DEFAULT_ALPHABET for _ in range(n_components))
