"""Coloration and density diagnostics for rendered impulse responses.

Covers the diagnostic quantities used to judge a reverberator: the energy
a single feedback comb contributes, the echo-density profile (windowed
fraction of samples beyond one standard deviation, normalized so Gaussian
noise scores 1), per-sample operation counts of the different feedback
structures, octave-band decay estimation by Schroeder backward
integration, and magnitude-response sampling for reports.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, sosfilt

from .core import FdnConfig, transfer_batch
from .errors import ConfigurationError, InsufficientDecayError
from .param import gamma_power

__all__ = [
    "OCTAVE_CENTERS",
    "EchoDensityProfile",
    "BandDecay",
    "comb_energy",
    "echo_density_profile",
    "operation_count",
    "estimate_t60_bands",
    "magnitude_spectrum",
    "magnitude_report",
    "write_spectrum_csv",
]

OCTAVE_CENTERS = (63.0, 125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0)

# fraction of Gaussian samples beyond one standard deviation
_ERFC_NORM = math.erfc(1.0 / math.sqrt(2.0))


def comb_energy(gamma: float, m: int) -> float:
    """Energy 1/(1 - gamma^(2m)) of a single feedback comb.

    Shorter loops recirculate far more energy than longer ones at equal
    per-sample gain, which is why short delays dominate coloration.
    """
    if not (0.0 <= gamma < 1.0):
        raise ConfigurationError(
            f"comb energy diverges for gamma = {gamma}; need 0 <= gamma < 1"
        )
    if m < 1:
        raise ConfigurationError(f"delay must be >= 1, got {m}")
    return float(1.0 / (1.0 - gamma_power(gamma, 2 * m)))


@dataclass(frozen=True, eq=False)
class EchoDensityProfile:
    """Echo density over time: 1 means Gaussian-noise-like density."""

    times: np.ndarray          # window-center sample indices
    values: np.ndarray
    window_len: int

    def time_to_reach(self, level: float):
        """First window-center sample index where the profile >= level."""
        hits = np.nonzero(self.values >= level)[0]
        if hits.size == 0:
            return None
        return int(self.times[hits[0]])

    def to_csv(self, path, fs: int = None) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            if fs:
                writer.writerow(["time_s", "echo_density"])
                for t, v in zip(self.times, self.values):
                    writer.writerow([repr(t / fs), repr(float(v))])
            else:
                writer.writerow(["sample", "echo_density"])
                for t, v in zip(self.times, self.values):
                    writer.writerow([int(t), repr(float(v))])


def echo_density_profile(ir: np.ndarray, window_len: int, hop: int = None) -> EchoDensityProfile:
    """Sliding-window echo density of an impulse response.

    For each rectangular window the profile is the fraction of samples
    whose magnitude exceeds the window's standard deviation, divided by
    erfc(1/sqrt(2)) so stationary Gaussian noise maps to 1. All-zero
    windows score 0. Invariant under amplitude scaling.
    """
    ir = np.asarray(ir, dtype=float)
    if window_len < 2:
        raise ConfigurationError(f"window length must be >= 2, got {window_len}")
    if ir.size < window_len:
        raise ConfigurationError(
            f"signal ({ir.size} samples) is shorter than the window ({window_len})"
        )
    if hop is None:
        hop = max(1, window_len // 20)
    starts = np.arange(0, ir.size - window_len + 1, hop)
    sq = np.concatenate([[0.0], np.cumsum(ir * ir)])
    values = np.empty(starts.size)
    for i, s in enumerate(starts):
        window = ir[s:s + window_len]
        std = math.sqrt((sq[s + window_len] - sq[s]) / window_len)
        if std == 0.0:
            values[i] = 0.0
        else:
            values[i] = np.count_nonzero(np.abs(window) > std) / (window_len * _ERFC_NORM)
    return EchoDensityProfile(times=starts + window_len // 2, values=values,
                              window_len=window_len)


_MATRIX_OPS = {
    "RO": lambda n, k: n * n,
    "DiffFDN-O": lambda n, k: n * n,
    "DiffFDN-HH": lambda n, k: 2 * n,
    "DiffFDN-SCAT": lambda n, k: k * (n * n + 2 * n),
    "plainN": lambda n, k: n * n,
}


def operation_count(fdn_type: str, n: int, k: int = None) -> int:
    """Multiply-add operations per output sample during operation.

    Counts 2N for the input/output gains, 2N for the delay lines, 44N for
    per-line octave attenuation filters, plus the matrix term of the given
    feedback structure (N^2 dense, 2N Householder, K(N^2 + 2N) scattering).
    """
    if fdn_type not in _MATRIX_OPS:
        raise ConfigurationError(
            f"unknown FDN type {fdn_type!r}; expected one of {sorted(_MATRIX_OPS)}"
        )
    if n < 1:
        raise ConfigurationError(f"size must be >= 1, got {n}")
    if fdn_type == "DiffFDN-SCAT":
        if k is None or k < 0:
            raise ConfigurationError("scattering op count needs a stage count k >= 0")
    else:
        k = 0
    return 2 * n + 2 * n + 44 * n + _MATRIX_OPS[fdn_type](n, k)


@dataclass(frozen=True)
class BandDecay:
    """Reverberation time and initial envelope level of one octave band."""

    center_hz: float
    t60_s: float
    initial_level: float


def _schroeder_fit(energy: np.ndarray, fs: float):
    """Slope/intercept fit of the backward-integrated energy, -5..-25 dB."""
    edf = np.cumsum(energy[::-1])[::-1]
    if edf[0] <= 0:
        raise InsufficientDecayError("signal carries no energy")
    with np.errstate(divide="ignore"):
        edf_db = 10.0 * np.log10(edf)
    rel = edf_db - edf_db[0]
    above = np.nonzero(rel <= -5.0)[0]
    below = np.nonzero(rel <= -25.0)[0]
    if above.size == 0 or below.size == 0:
        raise InsufficientDecayError("decay range never reaches -25 dB")
    i0, i1 = above[0], below[0]
    if i1 - i0 < 4:
        raise InsufficientDecayError("too few samples between -5 dB and -25 dB")
    t = np.arange(i0, i1 + 1) / fs
    slope, intercept = np.polyfit(t, edf_db[i0:i1 + 1], 1)
    if slope >= 0:
        raise InsufficientDecayError("energy decay slope is nonnegative")
    return float(slope), float(intercept)


def estimate_t60_bands(ir: np.ndarray, fs: int, octave_centers=OCTAVE_CENTERS) -> list:
    """Octave-band decay times by Schroeder integration and a line fit.

    Each band is isolated with a 6th-order Butterworth bandpass, backward
    integrated, and fit over the -5..-25 dB range of the decay curve,
    assuming a single decay slope with no noise term. The initial level is
    the band's amplitude envelope extrapolated to t = 0. Bands that never
    reach -25 dB raise InsufficientDecayError naming the band.
    """
    ir = np.asarray(ir, dtype=float)
    nyquist = fs / 2.0
    out = []
    for center in octave_centers:
        lo = center / math.sqrt(2.0)
        hi = min(center * math.sqrt(2.0), 0.98 * nyquist)
        if lo >= hi:
            raise ConfigurationError(f"band {center} Hz does not fit below Nyquist")
        sos = butter(3, [lo / nyquist, hi / nyquist], btype="bandpass", output="sos")
        banded = sosfilt(sos, ir)
        try:
            slope, intercept = _schroeder_fit(banded * banded, fs)
        except InsufficientDecayError as exc:
            raise InsufficientDecayError(f"band {center:g} Hz: {exc}") from exc
        t60 = -60.0 / slope
        # EDF(t) ~ fs * A^2 * (tau/2) * exp(-2 t / tau): invert for A at t=0
        tau = -20.0 / (slope * math.log(10.0))
        e0 = 10.0 ** (intercept / 10.0)
        level = math.sqrt(2.0 * e0 / (fs * tau))
        out.append(BandDecay(center_hz=float(center), t60_s=float(t60),
                             initial_level=float(level)))
    return out


def magnitude_spectrum(feedback_op, delays, b, c, d, freqs_hz, fs: int):
    """|H| in dB sampled at the given frequencies, for a realized feedback."""
    freqs = np.asarray(freqs_hz, dtype=float)
    z = np.exp(2j * np.pi * freqs / fs)
    totals, _ = transfer_batch(feedback_op, delays, b, c, d, z)
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(np.abs(totals))


def magnitude_report(config: FdnConfig, freq_range, resolution: int) -> np.ndarray:
    """Rows of (frequency Hz, magnitude dB) across ``freq_range``."""
    lo, hi = freq_range
    if not (0 <= lo < hi <= config.sample_rate / 2):
        raise ConfigurationError(
            f"frequency range ({lo}, {hi}) must fit in (0, {config.sample_rate // 2})"
        )
    if resolution < 2:
        raise ConfigurationError("resolution must be >= 2 points")
    freqs = np.linspace(lo, hi, resolution)
    if freqs[0] == 0.0:
        freqs[0] = freqs[1] / 2.0  # z = 1 is valid, but keep the axis positive
    mags = magnitude_spectrum(
        config.realize(), config.delays, config.input_gains,
        config.output_gains, config.direct_gain, freqs, config.sample_rate,
    )
    return np.column_stack([freqs, mags])


def write_spectrum_csv(path, rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frequency_hz", "magnitude_db"])
        for f, m in rows:
            writer.writerow([repr(float(f)), repr(float(m))])
