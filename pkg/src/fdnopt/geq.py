"""Frequency-dependent decay: attenuation filter design and rendering.

A lossless prototype becomes a natural-sounding reverberator by placing a
per-line attenuation filter in the feedback loop. Each filter approximates
the target magnitude 10^(m_i * gamma_db(w) / 20), i.e. the per-sample decay
implied by the band reverberation times, compensated for the line's delay
length. Filters are graphic equalizers: a second-order low shelf, eight
peaking sections at octave centers from 63 Hz to 8 kHz, and a high shelf.
A shared output equalizer matches the per-band initial levels.

Command gains are solved against the band-interaction matrix (the dB
response of each unit-gain section at every control frequency), refined by
a few fixed-point passes so the realized response lands on the targets.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import sosfilt

from .core import FdnConfig, render_samples
from .errors import ConfigurationError, DesignError
from .param import ScatteringOperator

__all__ = [
    "SHELF_LOW_HZ",
    "SHELF_HIGH_HZ",
    "AttenuationSpec",
    "BiquadCascade",
    "design_attenuation_filter",
    "design_level_eq",
    "render_fd_ir",
]

log = logging.getLogger(__name__)

BAND_CENTERS = (63.0, 125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0)
SHELF_LOW_HZ = 46.0
SHELF_HIGH_HZ = 11360.0
_SHELF_Q = math.sqrt(2.0) / 2.0
_PEAK_BW_OCTAVES = 1.0


@dataclass(frozen=True, eq=False)
class AttenuationSpec:
    """Per-octave-band decay targets plus shelf targets at DC and Nyquist.

    ``band_t60`` holds eight reverberation times (seconds, may be inf) at
    the fixed octave centers; ``initial_levels`` are linear band amplitudes
    for the shared output equalizer.
    """

    band_t60: np.ndarray
    dc_t60: float
    nyquist_t60: float
    initial_levels: np.ndarray = field(default=None)

    def __post_init__(self):
        t60 = np.asarray(self.band_t60, dtype=float)
        if t60.shape != (len(BAND_CENTERS),):
            raise ConfigurationError(
                f"need exactly {len(BAND_CENTERS)} band decay times, got {t60.shape}"
            )
        if np.any(t60 <= 0) or self.dc_t60 <= 0 or self.nyquist_t60 <= 0:
            raise ConfigurationError("every T60 must be positive (inf allowed)")
        levels = self.initial_levels
        if levels is None:
            levels = np.ones(len(BAND_CENTERS))
        levels = np.asarray(levels, dtype=float)
        if levels.shape != t60.shape or np.any(levels <= 0):
            raise ConfigurationError("initial levels must be positive, one per band")
        object.__setattr__(self, "band_t60", t60)
        object.__setattr__(self, "dc_t60", float(self.dc_t60))
        object.__setattr__(self, "nyquist_t60", float(self.nyquist_t60))
        object.__setattr__(self, "initial_levels", levels)

    def gamma_db_per_sample(self, fs: int) -> np.ndarray:
        """Per-sample decay in dB at [DC, band centers..., Nyquist]."""
        t60 = np.concatenate([[self.dc_t60], self.band_t60, [self.nyquist_t60]])
        with np.errstate(divide="ignore"):
            return np.where(np.isinf(t60), 0.0, -60.0 / (fs * t60))

    def to_json_dict(self) -> dict:
        return {
            "band_centers_hz": list(BAND_CENTERS),
            "band_t60": self.band_t60.tolist(),
            "dc_t60": self.dc_t60,
            "nyquist_t60": self.nyquist_t60,
            "initial_levels": self.initial_levels.tolist(),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "AttenuationSpec":
        return cls(
            band_t60=data["band_t60"],
            dc_t60=data["dc_t60"],
            nyquist_t60=data["nyquist_t60"],
            initial_levels=data.get("initial_levels"),
        )

    @classmethod
    def load(cls, path) -> "AttenuationSpec":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---- biquad prototypes (cookbook forms, always stable) ---------------------


def _peaking(f0: float, gain_db: float, fs: float) -> np.ndarray:
    a = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * math.pi * f0 / fs
    alpha = math.sin(w0) * math.sinh(
        math.log(2.0) / 2.0 * _PEAK_BW_OCTAVES * w0 / math.sin(w0)
    )
    b = np.array([1.0 + alpha * a, -2.0 * math.cos(w0), 1.0 - alpha * a])
    den = np.array([1.0 + alpha / a, -2.0 * math.cos(w0), 1.0 - alpha / a])
    return np.concatenate([b, den]) / den[0]


def _shelf(f0: float, gain_db: float, fs: float, high: bool) -> np.ndarray:
    a = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * math.pi * f0 / fs
    cw = math.cos(w0)
    alpha = math.sin(w0) / (2.0 * _SHELF_Q)
    two_rt = 2.0 * math.sqrt(a) * alpha
    if high:
        b = np.array([
            a * ((a + 1) + (a - 1) * cw + two_rt),
            -2.0 * a * ((a - 1) + (a + 1) * cw),
            a * ((a + 1) + (a - 1) * cw - two_rt),
        ])
        den = np.array([
            (a + 1) - (a - 1) * cw + two_rt,
            2.0 * ((a - 1) - (a + 1) * cw),
            (a + 1) - (a - 1) * cw - two_rt,
        ])
    else:
        b = np.array([
            a * ((a + 1) - (a - 1) * cw + two_rt),
            2.0 * a * ((a - 1) - (a + 1) * cw),
            a * ((a + 1) - (a - 1) * cw - two_rt),
        ])
        den = np.array([
            (a + 1) + (a - 1) * cw + two_rt,
            -2.0 * ((a - 1) + (a + 1) * cw),
            (a + 1) + (a - 1) * cw - two_rt,
        ])
    return np.concatenate([b, den]) / den[0]


@dataclass(frozen=True, eq=False)
class BiquadCascade:
    """Ordered second-order sections with unity leading denominator terms."""

    sos: np.ndarray
    roles: tuple

    def __post_init__(self):
        sos = np.atleast_2d(np.asarray(self.sos, dtype=float))
        if sos.shape[1] != 6:
            raise ConfigurationError("sections must have 6 coefficients each")
        object.__setattr__(self, "sos", sos)

    def response(self, freqs_hz, fs: float) -> np.ndarray:
        """Complex frequency response at the given frequencies."""
        w = 2.0 * np.pi * np.asarray(freqs_hz, dtype=float) / fs
        zinv = np.exp(-1j * w)
        out = np.ones_like(zinv, dtype=complex)
        for sec in self.sos:
            num = sec[0] + sec[1] * zinv + sec[2] * zinv ** 2
            den = sec[3] + sec[4] * zinv + sec[5] * zinv ** 2
            out *= num / den
        return out

    def response_db(self, freqs_hz, fs: float) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 20.0 * np.log10(np.abs(self.response(freqs_hz, fs)))

    def is_stable(self) -> bool:
        for sec in self.sos:
            roots = np.roots(sec[3:])
            if roots.size and np.max(np.abs(roots)) >= 1.0:
                return False
        return True

    def max_group_delay(self, freqs_hz, fs: float) -> float:
        """Worst-case group delay (samples) across the given frequencies."""
        freqs = np.asarray(freqs_hz, dtype=float)
        df = np.maximum(freqs * 1e-4, 1e-3)
        phase_hi = np.angle(self.response(freqs + df, fs))
        phase_lo = np.angle(self.response(freqs - df, fs))
        dphi = np.unwrap(phase_hi) - np.unwrap(phase_lo)
        return float(np.max(np.abs(-dphi / (2.0 * np.pi * 2.0 * df / fs))))

    def process(self, x: np.ndarray, zi: np.ndarray = None):
        """Filter a block, threading state; returns (output, new state)."""
        if zi is None:
            zi = np.zeros((self.sos.shape[0], 2))
        return sosfilt(self.sos, x, zi=zi)

    def to_json_dict(self) -> dict:
        return {"roles": list(self.roles), "sos": self.sos.tolist()}


def _control_frequencies(fs: float) -> np.ndarray:
    return np.array([0.0, *BAND_CENTERS, fs / 2.0])


def _build_cascade(gains_db: np.ndarray, fs: float) -> BiquadCascade:
    sections = [_shelf(SHELF_LOW_HZ, gains_db[0], fs, high=False)]
    roles = ["low_shelf"]
    for center, g in zip(BAND_CENTERS, gains_db[1:-1]):
        sections.append(_peaking(center, g, fs))
        roles.append(f"peak_{int(center)}")
    sections.append(_shelf(SHELF_HIGH_HZ, gains_db[-1], fs, high=True))
    roles.append("high_shelf")
    return BiquadCascade(sos=np.vstack(sections), roles=tuple(roles))


def _interaction_matrix(fs: float) -> np.ndarray:
    """dB response of each unit-gain section at every control frequency."""
    controls = _control_frequencies(fs)
    n = controls.size
    mat = np.empty((n, n))
    for k in range(n):
        gains = np.zeros(n)
        gains[k] = 1.0
        mat[:, k] = _build_cascade(gains, fs).response_db(controls, fs)
    return mat


def _design_geq(targets_db: np.ndarray, fs: float, tol_db: float,
                max_iter: int = 12) -> BiquadCascade:
    """Cascade whose response meets ``targets_db`` at the control points.

    A flat target collapses to a single broadband gain section, which is
    the exact design in the frequency-independent case. Otherwise command
    gains start at the targets and are refined against the interaction
    matrix until the control-point error is well inside ``tol_db``.
    """
    targets_db = np.asarray(targets_db, dtype=float)
    if np.any(targets_db < -60.0):
        raise DesignError(
            f"per-section gain target below -60 dB (min {targets_db.min():.1f} dB); "
            "split the attenuation across stages instead"
        )
    if np.ptp(targets_db) < 1e-9:
        g = 10.0 ** (targets_db[0] / 20.0)
        return BiquadCascade(sos=np.array([[g, 0.0, 0.0, 1.0, 0.0, 0.0]]),
                             roles=("broadband_gain",))
    controls = _control_frequencies(fs)
    interaction = _interaction_matrix(fs)
    gains = targets_db.copy()
    cascade = _build_cascade(gains, fs)
    for _ in range(max_iter):
        err = targets_db - cascade.response_db(controls, fs)
        if np.max(np.abs(err)) < min(tol_db * 0.05, 0.01):
            break
        gains = gains + np.linalg.lstsq(interaction, err, rcond=None)[0]
        cascade = _build_cascade(gains, fs)
    err = np.max(np.abs(targets_db - cascade.response_db(controls, fs)))
    if err > tol_db:
        raise DesignError(f"equalizer missed its targets by {err:.3f} dB (> {tol_db} dB)")
    if not cascade.is_stable():
        raise DesignError("designed cascade is unstable")
    return cascade


def design_attenuation_filter(spec: AttenuationSpec, m_i: int, fs: int) -> BiquadCascade:
    """Feedback-loop attenuation filter for one delay line.

    The target at each control frequency is ``m_i`` times the per-sample
    decay in dB, so a signal completing one loop traversal loses exactly
    the energy the band's reverberation time prescribes. Doubling the
    delay doubles every dB target.
    """
    if m_i < 1:
        raise ConfigurationError(f"delay must be >= 1, got {m_i}")
    targets = m_i * spec.gamma_db_per_sample(fs)
    return _design_geq(targets, fs, tol_db=0.5)


def design_level_eq(initial_levels, fs: int) -> BiquadCascade:
    """Shared output equalizer matching per-band initial amplitudes."""
    levels = np.asarray(initial_levels, dtype=float)
    if levels.shape != (len(BAND_CENTERS),) or np.any(levels <= 0):
        raise ConfigurationError(
            f"need {len(BAND_CENTERS)} positive band levels, got {levels.shape}"
        )
    band_db = 20.0 * np.log10(levels)
    targets = np.concatenate([[band_db[0]], band_db, [band_db[-1]]])
    return _design_geq(targets, fs, tol_db=1.0)


def render_fd_ir(prototype: FdnConfig, spec: AttenuationSpec, length: int) -> np.ndarray:
    """Impulse response of a lossless prototype with in-loop decay filters.

    Each delay line's output passes through its attenuation cascade before
    the feedback matrix; the shared level equalizer runs after the output
    gains. The prototype must be lossless (gamma = 1), the filters supply
    all decay.
    """
    if prototype.gamma != 1.0:
        raise ConfigurationError(
            f"prototype must be lossless (gamma = 1), got gamma = {prototype.gamma}"
        )
    feedback = prototype.realize()
    if isinstance(feedback, ScatteringOperator):
        raise ConfigurationError(
            "frequency-dependent rendering supports scalar feedback matrices only"
        )
    fs = prototype.sample_rate
    cascades = [design_attenuation_filter(spec, int(m), fs) for m in prototype.delays]
    check_freqs = np.linspace(1.0, fs / 2.0 - 1.0, 2048)
    worst_gain = max(float(np.abs(c.response(check_freqs, fs)).max()) for c in cascades)
    if worst_gain > 1.0 + 1e-6:
        raise DesignError(
            f"attenuation cascade exceeds unity gain ({worst_gain:.6f}); "
            "the loop would be unstable"
        )
    worst_gd = max(c.max_group_delay(np.asarray(BAND_CENTERS), fs) for c in cascades)
    log.info("attenuation filters: worst-case group delay %.2f samples "
             "(shortest delay line %d)", worst_gd, int(prototype.delays.min()))

    states = [np.zeros((c.sos.shape[0], 2)) for c in cascades]

    def line_filters(block: np.ndarray) -> np.ndarray:
        out = np.empty_like(block)
        for i, cascade in enumerate(cascades):
            out[i], states[i] = cascade.process(block[i], states[i])
        return out

    ir = render_samples(
        feedback, prototype.delays, prototype.input_gains,
        prototype.output_gains, prototype.direct_gain, length,
        line_filters=line_filters,
    )
    level_eq = design_level_eq(spec.initial_levels, fs)
    out, _ = level_eq.process(ir)
    return out
