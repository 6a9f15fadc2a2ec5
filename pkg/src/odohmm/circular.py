"""Von Mises machinery: Bessel series, density, and weighted ML estimation.

Angles are radians. Mean directions are normalized to (-pi, pi].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KAPPA_MIN = 1e-3
KAPPA_MAX = 700.0
TWO_PI = 2.0 * np.pi
LOG_TWO_PI = float(np.log(TWO_PI))

_SERIES_TOL = 1e-17
_SERIES_MAX_TERMS = 4000


class UndefinedMeanError(ValueError):
    """Raised when the resultant vector of a circular sample vanishes."""


@dataclass(frozen=True)
class VonMisesParams:
    mu: float
    kappa: float


def wrap_angle(theta):
    """Map angles onto (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    out = theta - TWO_PI * np.ceil((theta - np.pi) / TWO_PI)
    return out if out.ndim else float(out)


def _check_kappa(kappa) -> np.ndarray:
    k = np.asarray(kappa, dtype=float)
    if np.any(~np.isfinite(k)) or np.any(k < 0):
        raise ValueError(f"kappa must be finite and nonnegative, got {kappa!r}")
    if np.any(k > KAPPA_MAX * (1 + 1e-12)):
        raise ValueError(f"kappa above {KAPPA_MAX} is outside the supported range")
    return k


def _series(k: np.ndarray, order: int) -> np.ndarray:
    # Power series of I_order(k), order in {0, 1}, summed term by term with the
    # term ratio (k/2)^2 / (r (r + order)). Convergence is checked every few
    # terms; stops once the newest term no longer moves any sum.
    half = 0.5 * k
    q = half * half
    term = np.ones_like(k) if order == 0 else half.copy()
    total = term.copy()
    for r in range(1, _SERIES_MAX_TERMS):
        term = term * (q / (r * (r + order)))
        total = total + term
        if r % 8 == 0 and not np.any(term > _SERIES_TOL * total):
            break
    return total


_ASYMPTOTIC_FROM = 50.0
_ASYMPTOTIC_TERMS = 40


def _hankel(k: np.ndarray, order: int) -> np.ndarray:
    # Large-argument expansion: I_order(k) e^-k sqrt(2 pi k) = sum_j t_j with
    # t_j = -t_{j-1} (4 order^2 - (2j - 1)^2) / (8 j k). For k >= 50 the terms
    # shrink below 1e-20 long before they start to grow again.
    mu4 = 4.0 * order * order
    term = np.ones_like(k)
    total = term.copy()
    for j in range(1, _ASYMPTOTIC_TERMS):
        term = -term * (mu4 - (2 * j - 1) ** 2) / (8.0 * j * k)
        total = total + term
        if not np.any(np.abs(term) > _SERIES_TOL * np.abs(total)):
            break
    return total


def _scaled(k: np.ndarray, order: int) -> np.ndarray:
    """I_order(k) * exp(-k), choosing series or expansion per element."""
    out = np.empty_like(k)
    big = k >= _ASYMPTOTIC_FROM
    if np.any(~big):
        ks = k[~big]
        out[~big] = _series(ks, order) * np.exp(-ks)
    if np.any(big):
        kb = k[big]
        out[big] = _hankel(kb, order) / np.sqrt(TWO_PI * kb)
    return out


def bessel_i0(kappa):
    """Modified Bessel function of the first kind, order 0, for 0 <= kappa <= 700."""
    k = _check_kappa(kappa)
    flat = np.atleast_1d(k).astype(float)
    out = _scaled(flat, 0) * np.exp(flat)
    return out.reshape(k.shape) if k.ndim else float(out[0])


def bessel_i1(kappa):
    """Modified Bessel function of the first kind, order 1, for 0 <= kappa <= 700."""
    k = _check_kappa(kappa)
    flat = np.atleast_1d(k).astype(float)
    out = _scaled(flat, 1) * np.exp(flat)
    return out.reshape(k.shape) if k.ndim else float(out[0])


def log_bessel_i0(kappa):
    k = _check_kappa(kappa)
    flat = np.atleast_1d(k).astype(float)
    out = np.log(_scaled(flat, 0)) + flat
    return out.reshape(k.shape) if k.ndim else float(out[0])


def bessel_ratio(kappa):
    """A(kappa) = I1(kappa) / I0(kappa), increasing from 0 towards 1."""
    k = _check_kappa(kappa)
    flat = np.atleast_1d(k).astype(float)
    out = np.empty_like(flat)
    big = flat >= _ASYMPTOTIC_FROM
    if np.any(~big):
        out[~big] = _series(flat[~big], 1) / _series(flat[~big], 0)
    if np.any(big):
        out[big] = _hankel(flat[big], 1) / _hankel(flat[big], 0)
    return out.reshape(k.shape) if k.ndim else float(out[0])


def von_mises_logpdf(theta, mu, kappa):
    theta = np.asarray(theta, dtype=float)
    return kappa * np.cos(theta - mu) - LOG_TWO_PI - log_bessel_i0(kappa)


def von_mises_density(theta, mu, kappa):
    """Density exp(kappa cos(theta - mu)) / (2 pi I0(kappa)), evaluated in log space."""
    return np.exp(von_mises_logpdf(theta, mu, kappa))


def circular_mean(angles, weights=None) -> tuple[float, float]:
    """Weighted mean direction and mean resultant length.

    Parameters
    ----------
    angles : array_like
        Sample angles in radians.
    weights : array_like, optional
        Nonnegative weights (e.g. expected transition counts). Defaults to ones.

    Returns
    -------
    mean : float
        Quadrant-correct mean direction in (-pi, pi].
    resultant_length : float
        Length of the weighted mean vector, in [0, 1].

    Raises
    ------
    UndefinedMeanError
        If the weighted resultant vector is (numerically) zero.
    """
    angles = np.asarray(angles, dtype=float)
    w = np.ones_like(angles) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != angles.shape:
        raise ValueError("weights and angles must have the same shape")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise ValueError("total weight must be positive")
    c = float(np.dot(w, np.cos(angles)))
    s = float(np.dot(w, np.sin(angles)))
    length = np.hypot(c, s)
    if length <= 1e-12 * total:
        raise UndefinedMeanError("resultant vector is zero; mean direction undefined")
    return wrap_angle(np.arctan2(s, c)), min(length / total, 1.0)


class _RatioTable:
    """Log-spaced table of A(kappa) used to bracket the inversion."""

    def __init__(self, size: int = 2048):
        self.kappas = np.geomspace(KAPPA_MIN, KAPPA_MAX, size)
        self.ratios = bessel_ratio(self.kappas)

    def bracket(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.searchsorted(self.ratios, r, side="right")
        idx = np.clip(idx, 1, len(self.kappas) - 1)
        return self.kappas[idx - 1], self.kappas[idx]

    def interpolate(self, r: np.ndarray) -> np.ndarray:
        """Starting point: log-kappa linear in the ratio between table nodes."""
        return np.exp(np.interp(r, self.ratios, np.log(self.kappas)))


_TABLE: _RatioTable | None = None


def _table() -> _RatioTable:
    global _TABLE
    if _TABLE is None:
        _TABLE = _RatioTable()
    return _TABLE


def invert_bessel_ratio(r):
    """Solve I1(kappa) / I0(kappa) = r for kappa.

    Values at or below A(KAPPA_MIN) map to KAPPA_MIN and values at or above
    A(KAPPA_MAX) map to KAPPA_MAX. The table bracket is refined by Newton
    steps that fall back to bisection whenever they leave the bracket.
    """
    r_arr = np.asarray(r, dtype=float)
    if np.any(~np.isfinite(r_arr)) or np.any(r_arr < 0) or np.any(r_arr >= 1):
        raise ValueError("ratio must lie in [0, 1)")
    flat = np.atleast_1d(r_arr).astype(float)
    table = _table()
    out = np.empty_like(flat)
    low_mask = flat <= table.ratios[0]
    high_mask = flat >= table.ratios[-1]
    out[low_mask] = KAPPA_MIN
    out[high_mask] = KAPPA_MAX
    mid = ~(low_mask | high_mask)
    if np.any(mid):
        target = flat[mid]
        lo, hi = table.bracket(target)
        k = table.interpolate(target)
        result = np.empty_like(target)
        active = np.arange(len(target))
        for _ in range(100):
            a = bessel_ratio(k)
            err = a - target[active]
            lo = np.where(err < 0, k, lo)
            hi = np.where(err > 0, k, hi)
            deriv = 1.0 - a / k - a * a
            step = np.where(deriv > 0, err / np.where(deriv > 0, deriv, 1.0), 0.0)
            k_new = k - step
            outside = (k_new <= lo) | (k_new >= hi) | (deriv <= 0)
            k_new = np.where(outside, 0.5 * (lo + hi), k_new)
            done = (np.abs(k_new - k) <= 1e-12 * k) | (np.abs(err) <= 4e-16)
            result[active[done]] = k_new[done]
            keep = ~done
            active, k, lo, hi = active[keep], k_new[keep], lo[keep], hi[keep]
            if not len(active):
                break
        result[active] = k
        out[mid] = result
    return out.reshape(r_arr.shape) if r_arr.ndim else float(out[0])


def estimate_von_mises(angles, weights=None) -> VonMisesParams:
    """Weighted maximum-likelihood von Mises fit.

    The concentration solves A(kappa) = max(mean cosine about the fitted
    mean, 0), which for the ML mean equals the resultant length.
    """
    mu, length = circular_mean(angles, weights)
    r = min(max(length, 0.0), np.nextafter(1.0, 0.0))
    return VonMisesParams(mu=mu, kappa=float(invert_bessel_ratio(r)))
