"""Exact discrete-time propagation of a thermally driven harmonic mode."""
import logging
from typing import NamedTuple

import numpy as np
from scipy.linalg import eigh, expm, solve_continuous_lyapunov

from levitwin.core.model import ModeParams, thermal_force_psd

logger = logging.getLogger(__name__)


class DiscreteMode(NamedTuple):
    phi: np.ndarray          # 2x2 state transition over one step
    gamma_d: np.ndarray      # response of (x, v) to a force held over one step
    q_d: np.ndarray          # per-step thermal noise covariance
    noise_factor: np.ndarray # Q_d = noise_factor @ noise_factor.T
    sigma_inf: np.ndarray    # stationary thermal covariance
    dt: float


def state_matrices(mode: ModeParams):
    m = mode.effective_mass
    a = np.array([[0.0, 1.0], [-mode.omega0 ** 2, -mode.gamma0]])
    b = np.array([[0.0], [1.0 / m]])
    return a, b


def discretize(mode: ModeParams, dt: float) -> DiscreteMode:
    """Zero-order-hold propagator and exact per-step noise covariance.

    The white thermal force of one-sided PSD S_F enters as a two-sided intensity S_F/2.
    The noise covariance comes from the Van Loan block exponential, so it stays
    accurate when Q is large and the per-step decay is tiny.
    """
    a, b = state_matrices(mode)

    aug = np.zeros((3, 3))
    aug[:2, :2] = a * dt
    aug[:2, 2:] = b * dt
    e = expm(aug)
    phi = e[:2, :2]
    gamma_d = e[:2, 2].copy()

    w = (b @ b.T) * thermal_force_psd(mode) / 2
    van_loan = np.zeros((4, 4))
    van_loan[:2, :2] = -a * dt
    van_loan[:2, 2:] = w * dt
    van_loan[2:, 2:] = a.T * dt
    f = expm(van_loan)
    q_d = f[2:, 2:].T @ f[:2, 2:]
    q_d = (q_d + q_d.T) / 2

    sigma_inf = solve_continuous_lyapunov(a, -w)
    sigma_inf = (sigma_inf + sigma_inf.T) / 2

    logger.debug(f"Discretized mode {mode.label}: dt={dt:.3e}, phi={phi.tolist()}, q_d={q_d.tolist()}")
    return DiscreteMode(phi, gamma_d, q_d, _sqrt_psd(q_d), sigma_inf, dt)


def _sqrt_psd(cov: np.ndarray) -> np.ndarray:
    values, vectors = eigh(cov)
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def stationary_factor(disc: DiscreteMode) -> np.ndarray:
    """Square root of the stationary covariance, for thermal initial states."""
    return _sqrt_psd(disc.sigma_inf)
