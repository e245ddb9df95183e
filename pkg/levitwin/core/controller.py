"""Lock-in style narrow-band velocity feedback and its closed-loop algebra.

The controller demodulates the detector stream at the target frequency, low-pass
filters the quadratures with a 4th-order Butterworth section and remodulates them
with a phase shift. The chain is linear and time invariant: a tone at normalized
frequency W comes out scaled by

    C(W) = G * (exp(i theta) H(W - W0) + exp(-i theta) H(W + W0))

with G = gain * actuator_scale and H the low-pass response. The plant receives
F_FB = -output, so theta = +90 deg is cold damping.
"""
import logging
import math
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import integrate, optimize, signal

from levitwin.core.errors import ConfigError, ParameterError
from levitwin.core.model import KB, ModeLabel, ModeParams
from levitwin.core.propagator import DiscreteMode, discretize

logger = logging.getLogger(__name__)

FILTER_ORDER = 4


class FeedbackConfig(BaseModel):
    """One lock-in feedback channel acting on one mode."""

    model_config = ConfigDict(populate_by_name=True, frozen=True, allow_inf_nan=False)

    mode: Optional[ModeLabel] = Field(None, description="Label of the cooled mode; defaults to the mode nearest target_f.")
    target_f: float = Field(..., gt=0, alias="target_f_hz", description="Demodulation center frequency in Hz.")
    gain: float = Field(..., ge=0, description="Dimensionless proportional gain.")
    phase: float = Field(math.pi / 2, alias="phase_rad", description="Remodulation phase in rad; +pi/2 damps.")
    demod_bandwidth: float = Field(..., gt=0, alias="demod_bandwidth_hz", description="Full lock-in bandwidth in Hz; each quadrature low-pass has its corner at half of it unless lowpass_corner_hz is set.")
    actuator_scale: float = Field(1.0, gt=0, description="Force in N per metre of demodulated signal at unit gain.")
    latency_samples: int = Field(1, ge=0, description="Controller output delay in samples.")
    corner: Optional[float] = Field(None, gt=0, alias="lowpass_corner_hz", description="I/Q low-pass corner in Hz; defaults to demod_bandwidth/2, at most demod_bandwidth.")
    compensate_delay: bool = Field(False, description="Advance the remodulation phase by the loop delay at target_f (latency plus half a hold sample).")

    @model_validator(mode="after")
    def _bandwidth_below_half_target(self) -> "FeedbackConfig":
        if self.demod_bandwidth >= self.target_f / 2:
            raise ValueError(
                f"demod_bandwidth_hz ({self.demod_bandwidth}) must be below target_f_hz/2 ({self.target_f / 2})"
            )
        if self.corner is not None and self.corner > self.demod_bandwidth:
            raise ValueError(
                f"lowpass_corner_hz ({self.corner}) must not exceed demod_bandwidth_hz ({self.demod_bandwidth})"
            )
        return self

    @property
    def loop_gain(self) -> float:
        return self.gain * self.actuator_scale

    @property
    def lowpass_corner(self) -> float:
        return self.corner if self.corner is not None else self.demod_bandwidth / 2


class LockInController:
    """Sample-by-sample lock-in with I/Q low-pass filtering and phase-shifted remodulation."""

    def __init__(self, fb: FeedbackConfig, sample_rate: float):
        if sample_rate < 10 * fb.target_f:
            raise ConfigError(
                f"sample rate {sample_rate:.6g} Hz is below 10x target_f ({fb.target_f} Hz)",
                field="feedback.target_f_hz",
            )
        self.fb = fb
        self.sample_rate = sample_rate
        self.sos = signal.butter(FILTER_ORDER, fb.lowpass_corner, btype="low", fs=sample_rate, output="sos")
        self.zpk = signal.butter(FILTER_ORDER, fb.lowpass_corner, btype="low", fs=sample_rate, output="zpk")
        self._omega = 2 * math.pi * fb.target_f / sample_rate
        self.phase = fb.phase
        if fb.compensate_delay:
            self.phase += (fb.latency_samples + 0.5) * self._omega
        self._coefs = [(s[0], s[1], s[2], s[4], s[5]) for s in self.sos.tolist()]
        self.reset()

    @property
    def omega_center(self) -> float:
        """Demodulation frequency in rad/sample."""
        return self._omega

    def reset(self) -> None:
        self._zi_i = [[0.0, 0.0] for _ in self._coefs]
        self._zi_q = [[0.0, 0.0] for _ in self._coefs]
        self._n = 0

    def _lowpass(self, x: float, zi: List[List[float]]) -> float:
        # Direct form II transposed, same recursion as sosfilt
        for z, (b0, b1, b2, a1, a2) in zip(zi, self._coefs):
            y = b0 * x + z[0]
            z[0] = b1 * x - a1 * y + z[1]
            z[1] = b2 * x - a2 * y
            x = y
        return x

    def step(self, y: float) -> float:
        """Consume one detector sample and return the controller output."""
        arg = self._omega * self._n
        self._n += 1
        i = 2.0 * self._lowpass(y * math.cos(arg), self._zi_i)
        q = -2.0 * self._lowpass(y * math.sin(arg), self._zi_q)
        arg += self.phase
        return self.fb.loop_gain * (i * math.cos(arg) - q * math.sin(arg))

    def process(self, stream: np.ndarray) -> np.ndarray:
        """Filter a whole record from rest; matches repeated step() up to rounding."""
        y = np.asarray(stream, dtype=float)
        arg = self._omega * np.arange(y.size)
        i = 2.0 * signal.sosfilt(self.sos, y * np.cos(arg))
        q = -2.0 * signal.sosfilt(self.sos, y * np.sin(arg))
        arg = arg + self.phase
        return self.fb.loop_gain * (i * np.cos(arg) - q * np.sin(arg))

    def response(self, f: np.ndarray) -> np.ndarray:
        """Complex frequency response at f in Hz, without latency."""
        w = 2 * np.pi * np.atleast_1d(np.asarray(f, dtype=float)) / self.sample_rate
        return self.response_normalized(w)

    def response_normalized(self, w: np.ndarray) -> np.ndarray:
        z, p, k = self.zpk
        _, h_lo = signal.freqz_zpk(z, p, k, worN=w - self._omega)
        _, h_hi = signal.freqz_zpk(z, p, k, worN=w + self._omega)
        theta = self.phase
        return self.fb.loop_gain * (np.exp(1j * theta) * h_lo + np.exp(-1j * theta) * h_hi)

    def lowpass_state_space(self):
        """(A, B, C, D) of the low-pass cascade, one DF2T state pair per section."""
        a, b, c, d = np.zeros((0, 0)), np.zeros(0), np.zeros(0), 1.0
        for b0, b1, b2, a1, a2 in self._coefs:
            a_s = np.array([[-a1, 1.0], [-a2, 0.0]])
            b_s = np.array([b1 - a1 * b0, b2 - a2 * b0])
            n = a.shape[0]
            cascade = np.zeros((n + 2, n + 2))
            cascade[:n, :n] = a
            cascade[n:, :n] = np.outer(b_s, c)
            cascade[n:, n:] = a_s
            a = cascade
            b = np.concatenate([b, b_s * d])
            c = np.concatenate([b0 * c, [1.0, 0.0]])
            d = b0 * d
        return a, b, c, d


def lockin_controller(stream: np.ndarray, fb: FeedbackConfig, sample_rate: float) -> np.ndarray:
    """Run a fresh lock-in over a detector stream and return its output samples."""
    return LockInController(fb, sample_rate).process(stream)


def ideal_feedback_damping(mode: ModeParams, fb: FeedbackConfig) -> float:
    """Damping rate of a delay-free lock-in with unit passband at +90 deg."""
    return fb.loop_gain / (mode.effective_mass * 2 * math.pi * fb.target_f)


def _plant(disc: DiscreteMode, z: complex):
    """x response to a held force and to the (x, v) process noise at z = exp(iW)."""
    phi = disc.phi
    det = (z - phi[0, 0]) * (z - phi[1, 1]) - phi[0, 1] * phi[1, 0]
    # first row of (zI - phi)^-1
    row = np.array([z - phi[1, 1], phi[0, 1]]) / det
    return row @ disc.gamma_d, row


def closed_loop_matrix(mode: ModeParams, fb: FeedbackConfig, dt: float,
                       disc: Optional[DiscreteMode] = None) -> np.ndarray:
    """One-step state matrix of plant, lock-in and delay line with the loop closed.

    State order: (x, v), the real and imaginary parts of the modulated low-pass
    states, then the pending controller outputs, oldest last.
    """
    if disc is None:
        disc = discretize(mode, dt)
    controller = LockInController(fb, 1.0 / dt)
    a, b, c, d = controller.lowpass_state_space()
    n = a.shape[0]
    latency = fb.latency_samples
    w0, theta, g = controller.omega_center, controller.phase, 2.0 * fb.loop_gain
    re, im = slice(2, 2 + n), slice(2 + n, 2 + 2 * n)
    size = 2 + 2 * n + latency

    # controller output as a row over the state: 2 G Re(exp(i theta) (C exp(i w0) xi + D x))
    out = np.zeros(size)
    out[0] = g * math.cos(theta) * d
    out[re] = g * math.cos(w0 + theta) * c
    out[im] = -g * math.sin(w0 + theta) * c

    m = np.zeros((size, size))
    force = np.zeros(size)
    if latency == 0:
        force = -out
    else:
        force[-1] = -1.0
        m[2 + 2 * n] = out
        for j in range(1, latency):
            m[2 + 2 * n + j, 2 + 2 * n + j - 1] = 1.0
    m[:2, :2] = disc.phi
    m[:2] += np.outer(disc.gamma_d, force)
    m[re, re] = a * math.cos(w0)
    m[re, im] = -a * math.sin(w0)
    m[re, 0] = b
    m[im, re] = a * math.sin(w0)
    m[im, im] = a * math.cos(w0)
    return m


def closed_loop_poles(mode: ModeParams, fb: FeedbackConfig, dt: float,
                      disc: Optional[DiscreteMode] = None) -> np.ndarray:
    return np.linalg.eigvals(closed_loop_matrix(mode, fb, dt, disc))


def pole_radius(mode: ModeParams, fb: FeedbackConfig, dt: float, disc: Optional[DiscreteMode] = None) -> float:
    """Largest closed-loop pole magnitude; the loop is stable below 1."""
    return float(np.max(np.abs(closed_loop_poles(mode, fb, dt, disc))))


def loop_is_stable(mode: ModeParams, fb: FeedbackConfig, dt: float, disc: Optional[DiscreteMode] = None) -> bool:
    return fb.loop_gain == 0 or pole_radius(mode, fb, dt, disc) < 1.0


def stable_gain_limit(mode: ModeParams, fb: FeedbackConfig, dt: float,
                      disc: Optional[DiscreteMode] = None) -> float:
    """Gain at which the closed loop loses stability."""
    if disc is None:
        disc = discretize(mode, dt)

    def margin(gain: float) -> float:
        return pole_radius(mode, fb.model_copy(update={"gain": gain}), dt, disc) - 1.0

    hi = mode.gamma0 / ideal_feedback_damping(mode, fb.model_copy(update={"gain": 1.0}))
    for _ in range(64):
        if margin(hi) >= 0:
            break
        hi *= 2
    else:
        raise ParameterError(f"no stability limit found for mode {mode.label} up to gain {hi:.3g}")
    limit = optimize.brentq(margin, 0.0, hi, xtol=1e-9 * hi, rtol=1e-9)
    logger.debug(f"Loop on mode {mode.label} becomes unstable at gain {limit:.6g}")
    return limit


def closed_loop_temperature(
    mode: ModeParams,
    fb: FeedbackConfig,
    dt: float,
    detector_asd: float = 0.0,
    disc: Optional[DiscreteMode] = None,
) -> float:
    """Mode temperature of the true position under the discrete closed loop.

    Integrates thermal and fed-back detection noise through 1/(1 + L) with
    L = P * C * z^-latency over the Nyquist band.

    Raises:
        ParameterError: The loop has a pole on or outside the unit circle.
    """
    if disc is None:
        disc = discretize(mode, dt)
    poles = closed_loop_poles(mode, fb, dt, disc)
    radius = float(np.max(np.abs(poles)))
    if fb.loop_gain > 0 and radius >= 1.0:
        raise ParameterError(
            f"feedback loop on mode {mode.label} is unstable at gain {fb.gain:.6g} (pole radius {radius:.9f})"
        )
    controller = LockInController(fb, 1.0 / dt)
    noise_var = detector_asd ** 2 / (2 * dt)
    latency = fb.latency_samples

    def density(w: float) -> float:
        z = complex(math.cos(w), math.sin(w))
        p, row = _plant(disc, z)
        c = controller.response_normalized(np.array([w]))[0] * z ** (-latency)
        loop = p * c
        denom = abs(1 + loop) ** 2
        thermal = float(np.real(row @ disc.q_d @ np.conj(row)))
        fed_back = noise_var * abs(loop) ** 2
        return (thermal + fed_back) / denom

    band = 2 * math.pi * fb.lowpass_corner * dt
    peaks = [(controller.omega_center, _linewidth(mode, fb) * dt), (controller.omega_center, band)]
    # closed-loop resonances sharpen as the loop nears instability
    peaks += [(abs(float(np.angle(p))), max(1.0 - abs(p), 1e-15)) for p in poles if abs(p) > 1.0 - band]
    variance = _integrate_peaked(density, peaks) / math.pi
    return mode.spring_constant * variance / KB


def _linewidth(mode: ModeParams, fb: FeedbackConfig) -> float:
    return mode.gamma0 + ideal_feedback_damping(mode, fb)


def _integrate_peaked(func, peaks: List[Tuple[float, float]]) -> float:
    """Integral over [0, pi] split at each (center, width) peak and at multiples of its width."""
    points = {0.0, math.pi}
    for center, width in peaks:
        points.update(center + s * m * width for m in (0, 1, 3, 10, 30, 100) for s in (-1, 1))
    points = sorted(p for p in points if 0.0 <= p <= math.pi)
    total = 0.0
    for lo, hi in zip(points[:-1], points[1:]):
        if hi - lo <= 0:
            continue
        value, _ = integrate.quad(func, lo, hi, limit=200, epsabs=0.0, epsrel=1e-7)
        total += value
    return total


def effective_feedback_damping(mode: ModeParams, fb: FeedbackConfig, dt: float,
                               disc: Optional[DiscreteMode] = None) -> float:
    """Feedback damping that an ideal loop would need to reach the same temperature."""
    t_cl = closed_loop_temperature(mode, fb, dt, disc=disc)
    return mode.gamma0 * (mode.t_env / t_cl - 1)


def max_damping_ratio(mode: ModeParams, fb: FeedbackConfig, dt: float) -> Tuple[float, float]:
    """Largest gamma_FB/gamma0 the stable loop reaches, and the gain that reaches it.

    Filter and delay lag make the temperature pass through a minimum before the
    loop goes unstable.
    """
    return _damping_peak(mode, fb.model_copy(update={"gain": 1.0}), dt)


@lru_cache(maxsize=64)
def _damping_peak(mode: ModeParams, fb: FeedbackConfig, dt: float) -> Tuple[float, float]:
    disc = discretize(mode, dt)
    limit = stable_gain_limit(mode, fb, dt, disc)

    def loss(gain: float) -> float:
        trial = fb.model_copy(update={"gain": gain})
        return -effective_feedback_damping(mode, trial, dt, disc) / mode.gamma0

    best = optimize.minimize_scalar(loss, bounds=(0.0, limit * (1 - 1e-3)), method="bounded",
                                    options={"xatol": 1e-4 * limit})
    logger.debug(f"Mode {mode.label}: stable up to gain {limit:.4g}, at most gamma_FB/gamma0 = {-best.fun:.4g}")
    return -float(best.fun), float(best.x)


def gain_for_damping(mode: ModeParams, fb: FeedbackConfig, dt: float, ratio: float) -> float:
    """Gain at which the closed loop reaches gamma_FB = ratio * gamma0.

    Maps a desired damping ratio onto the dimensionless gain of this controller,
    delay and filter shape included. The search stays on the low-gain side of the
    temperature minimum, inside the stable range.
    """
    if ratio < 0:
        raise ParameterError(f"ratio must be >= 0, got {ratio}")
    if ratio == 0:
        return 0.0
    reachable, peak_gain = max_damping_ratio(mode, fb, dt)
    if reachable < ratio:
        raise ParameterError(
            f"damping ratio {ratio} not reachable by this controller on mode {mode.label}; "
            f"the stable loop reaches at most {reachable:.4g}"
        )
    disc = discretize(mode, dt)

    def excess(gain: float) -> float:
        trial = fb.model_copy(update={"gain": gain})
        return effective_feedback_damping(mode, trial, dt, disc) / mode.gamma0 - ratio

    gain = optimize.brentq(excess, 0.0, peak_gain, xtol=1e-9 * peak_gain, rtol=1e-9)
    logger.info(f"Gain {gain:.4g} gives gamma_FB/gamma0 = {ratio} for mode {mode.label}")
    return gain


def fit_actuator_scale(mode: ModeParams, fb: FeedbackConfig, dt: float, t_observed: float) -> float:
    """Actuator scale at which fb.gain cools the mode to an observed temperature.

    The observed temperature fixes gamma_FB through the gain law; the loop gain that
    reaches it is then shared between the configured gain and the actuator.
    """
    if fb.gain <= 0:
        raise ParameterError(f"fitting needs a positive gain, got {fb.gain}")
    if not 0 < t_observed < mode.t_env:
        raise ParameterError(f"observed temperature {t_observed} K must lie in (0, {mode.t_env}) K")
    ratio = mode.t_env / t_observed - 1
    unit = fb.model_copy(update={"actuator_scale": 1.0})
    loop_gain = gain_for_damping(mode, unit, dt, ratio)
    scale = loop_gain / fb.gain
    logger.info(f"Actuator scale {scale:.4g} N/m reproduces {t_observed * 1e3:.3g} mK on mode {mode.label} "
                f"(gamma_FB/gamma0 = {ratio:.4g})")
    return scale
