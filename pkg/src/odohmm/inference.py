"""Scaled forward/backward recursions with odometric relation densities.

Each step's transition weights ``A[i, j] * f(r_t | R[i, j]) * b_t(j)`` are
density values and can be far outside [0, 1], so the forward pass rescales
every row to sum to one and keeps the log of each scale factor. The
log-likelihood of the sequence is the sum of the log scales.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (AugmentedHmm, ExperienceSequence, InputError,
                    log_relation_densities, observation_log_likelihoods)

_EXP_CLIP = 700.0


class ImpossibleSequenceError(RuntimeError):
    """The sequence has zero probability (density) under the model at step ``t``."""

    def __init__(self, t: int):
        super().__init__(f"sequence is impossible under the model at step {t}")
        self.t = t


@dataclass
class EStepTables:
    alpha: np.ndarray
    beta: np.ndarray
    log_scales: np.ndarray
    gamma: np.ndarray
    xi: np.ndarray
    log_likelihood: float

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def n_states(self) -> int:
        return self.gamma.shape[1]


def _check_regime(model: AugmentedHmm, e: ExperienceSequence, odometry: bool) -> None:
    if odometry and e.coordinate_regime is not model.coordinate_regime:
        raise InputError(
            f"sequence regime {e.coordinate_regime.value} does not match model "
            f"regime {model.coordinate_regime.value}")


def transition_log_weights(model: AugmentedHmm, e: ExperienceSequence,
                           odometry: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Log weights of the moves into steps 1..T-1 and the log b_0 row.

    Returns ``(log_w, log_b0)`` where ``log_w[t - 1, i, j]`` is
    ``log A[i, j] + log f(r_t | R[i, j]) + log b_t(j)``.
    """
    _check_regime(model, e, odometry)
    log_b = observation_log_likelihoods(model, e.obs)
    with np.errstate(divide="ignore"):
        log_a = np.log(model.transition)
    log_w = log_a[None, :, :] + log_b[1:, None, :]
    if odometry:
        log_w = log_w + log_relation_densities(model, e.odo[1:])
    return log_w, log_b[0]


def _row_normalized(log_w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # w[t, i, j] = exp(log_w[t, i, j] - m[t, i]) with m the per-row max
    with np.errstate(invalid="ignore"):
        m = np.max(log_w, axis=2)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    w = np.exp(log_w - m_safe[:, :, None])
    return w, np.where(np.isfinite(m), m, -np.inf)


def _forward(model, log_w, log_b0):
    t_len = log_w.shape[0] + 1
    n = model.n_states
    alpha = np.zeros((t_len, n))
    log_scales = np.empty(t_len)
    s0 = model.initial_state
    if not np.isfinite(log_b0[s0]):
        raise ImpossibleSequenceError(0)
    alpha[0, s0] = 1.0
    log_scales[0] = log_b0[s0]
    w, m = _row_normalized(log_w)
    for t in range(1, t_len):
        prev = alpha[t - 1]
        with np.errstate(divide="ignore"):
            lv = np.log(prev) + m[t - 1]
        top = np.max(lv)
        if not np.isfinite(top):
            raise ImpossibleSequenceError(t)
        coef = np.exp(lv - top)
        nxt = coef @ w[t - 1]
        total = nxt.sum()
        if not total > 0 or not np.isfinite(total):
            raise ImpossibleSequenceError(t)
        alpha[t] = nxt / total
        log_scales[t] = np.log(total) + top
    return alpha, log_scales


def forward(model: AugmentedHmm, e: ExperienceSequence, odometry: bool = True):
    """Scaled forward pass.

    Returns
    -------
    alpha : ndarray (T, N)
        Rows sum to one; the unscaled forward value is
        ``alpha[t] * exp(log_scales[:t + 1].sum())``.
    log_scales : ndarray (T,)
        Log of the per-step normalizers; their sum is the log-likelihood.
    """
    log_w, log_b0 = transition_log_weights(model, e, odometry)
    return _forward(model, log_w, log_b0)


def _scaled_weights(log_w, log_scales):
    # W[t, i, j] / c_{t+1}, clipped so an unreachable row cannot overflow
    expo = np.minimum(log_w - log_scales[1:, None, None], _EXP_CLIP)
    return np.exp(expo)


def _backward(ws):
    t_len = ws.shape[0] + 1
    beta = np.empty((t_len, ws.shape[1]))
    beta[-1] = 1.0
    for t in range(t_len - 2, -1, -1):
        beta[t] = ws[t] @ beta[t + 1]
    return beta


def backward(model: AugmentedHmm, e: ExperienceSequence, log_scales: np.ndarray,
             odometry: bool = True) -> np.ndarray:
    """Scaled backward pass using the forward scale factors.

    ``beta[T - 1] = 1`` and the unscaled value is
    ``beta[t] * exp(log_scales[t + 1:].sum())``.
    """
    log_w, _ = transition_log_weights(model, e, odometry)
    log_scales = np.asarray(log_scales, dtype=float)
    if log_scales.shape[0] != log_w.shape[0] + 1:
        raise InputError("scale vector length does not match the sequence")
    return _backward(_scaled_weights(log_w, log_scales))


def e_step(model: AugmentedHmm, e: ExperienceSequence, odometry: bool = True) -> EStepTables:
    """State-occupation (gamma) and transition (xi) posteriors for one sequence."""
    log_w, log_b0 = transition_log_weights(model, e, odometry)
    alpha, log_scales = _forward(model, log_w, log_b0)
    ws = _scaled_weights(log_w, log_scales)
    beta = _backward(ws)
    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    xi = alpha[:-1, :, None] * ws * beta[1:, None, :]
    xi /= xi.sum(axis=(1, 2), keepdims=True)
    return EStepTables(alpha=alpha, beta=beta, log_scales=log_scales, gamma=gamma,
                       xi=xi, log_likelihood=float(log_scales.sum()))


def log_likelihood(model: AugmentedHmm, e: ExperienceSequence, odometry: bool = True) -> float:
    return float(forward(model, e, odometry)[1].sum())
