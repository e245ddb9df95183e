"""Spectral estimation and mode thermometry.

Welch PSD, lock-in filter compensation, Lorentzian peak fitting and band
integration to RMS amplitude, mode temperature and phonon number. Spectra are
kept as one-sided PSDs; ASD only appears in exported CSV on request.
"""
import logging
import math
from typing import Callable, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import integrate, optimize, signal

from levitwin.core.errors import FitError, SpectralError
from levitwin.core.io import write_csv
from levitwin.core.model import HBAR, KB, ModeParams

logger = logging.getLogger(__name__)

INVALID_RESPONSE_FRACTION = 1e-6
MIN_FIT_SNR = 3.0


class Spectrum(BaseModel):
    """One-sided power spectral density on a uniform grid."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    f: np.ndarray
    psd: np.ndarray
    enbw: float = Field(..., description="Equivalent noise bandwidth of the window in Hz.")
    segment_length: int
    overlap_fraction: float = Field(..., ge=0, lt=1)
    window_name: str
    sample_rate: float
    valid: Optional[np.ndarray] = Field(None, description="False where compensation left no usable signal.")

    @model_validator(mode="after")
    def _check_grid(self) -> "Spectrum":
        if self.f.shape != self.psd.shape:
            raise ValueError("f and psd must have the same shape")
        if np.any(np.diff(self.f) <= 0):
            raise ValueError("frequency grid must be strictly increasing")
        if np.any(self.psd < 0):
            raise ValueError("psd must be non-negative")
        return self

    @property
    def df(self) -> float:
        return float(self.f[1] - self.f[0])

    @property
    def asd(self) -> np.ndarray:
        return np.sqrt(self.psd)

    def total_power(self) -> float:
        return float(np.sum(self.psd) * self.df)

    def to_frame(self, include_asd: bool = False) -> pd.DataFrame:
        frame = pd.DataFrame({"f_hz": self.f, "psd_m2_per_hz": self.psd})
        if include_asd:
            frame["asd_m_per_sqrt_hz"] = self.asd
        return frame

    def to_csv(self, path, include_asd: bool = False):
        return write_csv(self.to_frame(include_asd), path)


class PeakFit(BaseModel):
    f0_hat: float
    gamma_total_hat: float = Field(..., gt=0)
    amplitude: float
    area: float = Field(..., gt=0, description="Band power of the fitted Lorentzian in m^2.")
    noise_floor: float
    residual_norm: float
    window: Tuple[float, float]


class BandIntegral(BaseModel):
    a_rms: float
    t_mode: float
    t_mode_lorentz: float = Field(..., description="t_mode divided by the Lorentzian fraction inside the band.")
    n_ph: float
    band_fraction: float
    f_lo: float
    f_hi: float


def segment_for_linewidth(sample_rate: float, linewidth_hz: float, bins: int = 10) -> int:
    """Segment length resolving a linewidth with the given number of bins."""
    return int(math.ceil(bins * sample_rate / linewidth_hz))


def welch_psd(
    series: np.ndarray,
    sample_rate: float,
    segment_length: Optional[int] = None,
    overlap_fraction: float = 0.5,
    window: str = "hann",
) -> Spectrum:
    """Welch estimate of the one-sided, window-power normalized PSD.

    Args:
        series: Time series in m.
        sample_rate: Sampling rate in Hz.
        segment_length: Samples per segment; a quarter of the record by default.
        overlap_fraction: Fractional overlap of consecutive segments, in [0, 1).
        window: Any window name scipy.signal.get_window understands.

    Returns:
        Spectrum with PSD in m^2/Hz. The mean is kept, so a constant series
        puts its power in the DC bin.
    """
    x = np.asarray(series, dtype=float)
    if segment_length is None:
        segment_length = max(x.size // 4, 2)
    if segment_length > x.size:
        raise SpectralError(f"segment length {segment_length} exceeds series length {x.size}")
    if not 0 <= overlap_fraction < 1:
        raise SpectralError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    if x.size < 2 * segment_length:
        logger.warning(f"Series of {x.size} samples gives fewer than two segments of {segment_length}")

    w = signal.get_window(window, segment_length)
    noverlap = int(round(overlap_fraction * segment_length))
    f, psd = signal.welch(
        x,
        fs=sample_rate,
        window=w,
        nperseg=segment_length,
        noverlap=noverlap,
        detrend=False,
        return_onesided=True,
        scaling="density",
    )
    enbw = sample_rate * np.sum(w ** 2) / np.sum(w) ** 2
    return Spectrum(
        f=f,
        psd=psd,
        enbw=float(enbw),
        segment_length=segment_length,
        overlap_fraction=overlap_fraction,
        window_name=window,
        sample_rate=sample_rate,
    )


def compensate_filter(
    spec: Spectrum,
    filter_response: Union[np.ndarray, Callable[[np.ndarray], np.ndarray]],
    band: Optional[Tuple[float, float]] = None,
) -> Spectrum:
    """Divide out a known power response |H(f)|^2.

    Bins where |H|^2 falls below 1e-6 of its maximum are marked invalid and set to
    zero instead of being amplified.

    Raises:
        SpectralError: No valid bin is left (inside band when given).
    """
    h2 = filter_response(spec.f) if callable(filter_response) else filter_response
    h2 = np.abs(np.asarray(h2, dtype=float))
    if h2.shape != spec.psd.shape:
        raise SpectralError("filter response must be sampled on the spectrum grid")
    valid = h2 > INVALID_RESPONSE_FRACTION * np.max(h2) if np.max(h2) > 0 else np.zeros_like(h2, dtype=bool)
    if spec.valid is not None:
        valid &= spec.valid
    in_band = valid if band is None else valid & (spec.f >= band[0]) & (spec.f <= band[1])
    if not np.any(in_band):
        raise SpectralError("filter response leaves no valid bin in the band")

    psd = np.zeros_like(spec.psd)
    psd[valid] = spec.psd[valid] / h2[valid]
    logger.debug(f"Compensated spectrum: {np.count_nonzero(~valid)} invalid bins")
    return spec.model_copy(update={"psd": psd, "valid": valid})


def lorentzian_band_fraction(n_linewidths: float) -> float:
    """Share of a Lorentzian's power within +-n linewidths (FWHM) of its center.

    Three linewidths hold (2/pi) arctan(6), about 89.5 %.
    """
    return 2 / math.pi * math.atan(2 * n_linewidths)


def integrate_band(
    spec: Spectrum,
    mode: ModeParams,
    gamma_total: float,
    n_linewidths: float = 3.0,
    floor: float = 0.0,
    f_center: Optional[float] = None,
) -> BandIntegral:
    """Band-integrated RMS amplitude, mode temperature and phonon number.

    The band spans f_center +- n_linewidths * gamma_total / 2pi. The constant floor
    is subtracted inside the band and negative bins are clipped at zero.
    """
    if gamma_total <= 0:
        raise SpectralError(f"gamma_total must be positive, got {gamma_total}")
    fc = mode.f0 if f_center is None else f_center
    half = n_linewidths * gamma_total / (2 * math.pi)
    f_lo, f_hi = fc - half, fc + half
    if f_hi > spec.f[-1]:
        raise SpectralError(f"integration band up to {f_hi:.6g} Hz exceeds Nyquist ({spec.f[-1]:.6g} Hz)")
    if f_lo < spec.f[0]:
        raise SpectralError(f"integration band down to {f_lo:.6g} Hz leaves the spectrum range")

    clean = np.clip(spec.psd - floor, 0.0, None)
    if spec.valid is not None:
        clean = np.where(spec.valid, clean, 0.0)
    inside = (spec.f > f_lo) & (spec.f < f_hi)
    grid = np.concatenate(([f_lo], spec.f[inside], [f_hi]))
    values = np.concatenate(([np.interp(f_lo, spec.f, clean)], clean[inside], [np.interp(f_hi, spec.f, clean)]))
    variance = float(integrate.trapezoid(values, grid))

    t_mode = mode.spring_constant * variance / KB
    fraction = lorentzian_band_fraction(n_linewidths)
    return BandIntegral(
        a_rms=math.sqrt(variance),
        t_mode=t_mode,
        t_mode_lorentz=t_mode / fraction,
        n_ph=KB * t_mode / (HBAR * mode.omega0),
        band_fraction=fraction,
        f_lo=f_lo,
        f_hi=f_hi,
    )


def lorentzian_model(f: np.ndarray, f0: float, gamma: float, amplitude: float, floor: float = 0.0) -> np.ndarray:
    w = 2 * np.pi * np.asarray(f)
    w0 = 2 * np.pi * f0
    return amplitude / ((w0 ** 2 - w ** 2) ** 2 + w ** 2 * gamma ** 2) + floor


def _half_max_width(f: np.ndarray, psd: np.ndarray, peak: int) -> float:
    half = psd[peak] / 2
    lo = peak
    while lo > 0 and psd[lo] > half:
        lo -= 1
    hi = peak
    while hi < psd.size - 1 and psd[hi] > half:
        hi += 1
    return max(f[hi] - f[lo], f[1] - f[0])


def fit_lorentzian(
    spec: Spectrum,
    f_guess: float,
    gamma_guess: Optional[float] = None,
    n_linewidths: float = 20.0,
    search_fraction: float = 0.01,
    max_nfev: int = 2000,
) -> PeakFit:
    """Least-squares fit of the feedback-damped Lorentzian plus a constant floor.

    The peak is searched within +-search_fraction * f_guess; the fit window spans
    +-n_linewidths linewidths around it. Residuals are relative, psd/model - 1.

    Raises:
        FitError: Peak SNR below 3 in the window, too few bins, or no convergence.
    """
    f, psd = spec.f, spec.psd
    if spec.valid is not None:
        f, psd = f[spec.valid], psd[spec.valid]

    search = np.abs(f - f_guess) <= max(search_fraction * f_guess, 3 * spec.df)
    if not np.any(search):
        raise FitError(f"no spectrum bins near {f_guess} Hz")
    peak = int(np.flatnonzero(search)[np.argmax(psd[search])])
    f_peak, p_peak = float(f[peak]), float(psd[peak])
    if gamma_guess is not None:
        fwhm = gamma_guess / (2 * math.pi)
    else:
        fwhm = _half_max_width(f, psd, peak)

    window = np.abs(f - f_peak) <= n_linewidths * fwhm
    fw, pw = f[window], psd[window]
    if fw.size < 5:
        raise FitError(f"fit window around {f_peak:.6g} Hz holds only {fw.size} bins")
    floor_est = float(np.percentile(pw, 10))
    snr = p_peak / floor_est if floor_est > 0 else math.inf
    if snr < MIN_FIT_SNR:
        raise FitError(f"peak SNR {snr:.2f} below {MIN_FIT_SNR} near {f_peak:.6g} Hz")

    w_peak = 2 * math.pi * f_peak
    gamma0 = 2 * math.pi * fwhm
    a0 = max(p_peak - floor_est, p_peak / 2) * w_peak ** 2 * gamma0 ** 2

    def residual(p: np.ndarray) -> np.ndarray:
        model = lorentzian_model(fw, f_peak + p[0] * fwhm, math.exp(p[1]), math.exp(p[2]), p[3] * p_peak)
        return pw / model - 1

    p0 = np.array([0.0, math.log(gamma0), math.log(a0), min(floor_est / p_peak, 0.5)])
    lower = [-n_linewidths, -np.inf, -np.inf, 0.0]
    upper = [n_linewidths, np.inf, np.inf, np.inf]
    try:
        result = optimize.least_squares(residual, p0, bounds=(lower, upper), x_scale="jac", max_nfev=max_nfev)
    except (ValueError, FloatingPointError) as e:
        raise FitError(f"Lorentzian fit failed: {str(e)}")

    best = float(np.linalg.norm(result.fun))
    if not result.success or not np.all(np.isfinite(result.x)):
        raise FitError(f"Lorentzian fit did not converge: {result.message}", best_residual=best)

    f0_hat = f_peak + result.x[0] * fwhm
    gamma_hat = math.exp(result.x[1])
    amplitude = math.exp(result.x[2])
    w0 = 2 * math.pi * f0_hat
    logger.debug(f"Fit at {f0_hat:.6f} Hz: gamma={gamma_hat:.4g}/s, residual={best:.3g}, nfev={result.nfev}")
    return PeakFit(
        f0_hat=f0_hat,
        gamma_total_hat=gamma_hat,
        amplitude=amplitude,
        area=amplitude / (4 * w0 ** 2 * gamma_hat),
        noise_floor=float(result.x[3] * p_peak),
        residual_norm=best,
        window=(float(fw[0]), float(fw[-1])),
    )


def analyze_mode(spec: Spectrum, mode: ModeParams, n_linewidths: float = 3.0) -> Tuple[PeakFit, BandIntegral]:
    """Fit the mode's peak, then integrate over +-n fitted linewidths with the fitted floor removed."""
    fit = fit_lorentzian(spec, mode.f0)
    band = integrate_band(spec, mode, fit.gamma_total_hat, n_linewidths, floor=fit.noise_floor, f_center=fit.f0_hat)
    return fit, band


def fit_report(fit: PeakFit, band: BandIntegral) -> dict:
    return {
        "f0_hz": fit.f0_hat,
        "gamma_total_per_s": fit.gamma_total_hat,
        "area_m2": fit.area,
        "floor_m2_per_hz": fit.noise_floor,
        "t_mode_k": band.t_mode,
        "t_mode_lorentz_k": band.t_mode_lorentz,
        "a_rms_m": band.a_rms,
        "n_ph": band.n_ph,
        "band_fraction": band.band_fraction,
    }
