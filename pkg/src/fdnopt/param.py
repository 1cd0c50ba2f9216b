"""Feedback-matrix parameterizations and decay-rate conversions.

Trainable feedback matrices are stored as raw, unconstrained arrays and
realized on demand:

* orthogonal: a raw square matrix, realized through the matrix exponential
  of its skew-symmetrized strict upper triangle,
* householder: a raw direction vector, realized as the reflection about it,
* scattering: a chain of raw stage matrices interleaved with fixed
  per-line delays, realized as a paraunitary filter matrix.

Gradient-based optimizers update the raw arrays only, so losslessness of
the realized matrix holds by construction after every step. Each realize
function has a matching ``*_vjp`` companion that pulls a gradient with
respect to the realized matrix back onto the raw array.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm, expm_frechet

from .errors import ConfigurationError

__all__ = [
    "OrthogonalParam",
    "HouseholderParam",
    "ScatteringParam",
    "ScatteringOperator",
    "AbsorptionSpec",
    "skew_expm",
    "skew_expm_vjp",
    "householder_from",
    "householder_vjp",
    "scattering_response",
    "realize_feedback",
    "gamma_power",
    "gamma_from_t60",
    "t60_from_gamma",
    "min_training_t60",
]


def skew_expm(w: np.ndarray) -> np.ndarray:
    """Map a raw square matrix to an orthogonal one.

    Takes the strictly upper triangular part T of ``w`` (the diagonal is
    discarded; keeping it would break skew-symmetry) and returns
    ``exp(T - T^T)``. The result is orthogonal with determinant +1 for any
    finite input, which makes it safe to drive from an unconstrained
    optimizer.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ConfigurationError(f"expected a square matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ConfigurationError("raw matrix contains non-finite entries")
    t = np.triu(w, k=1)
    return expm(t - t.T)


def skew_expm_vjp(w: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``skew_expm(w)`` back to the raw matrix.

    Uses the adjoint of the Frechet derivative of the matrix exponential,
    evaluated exactly via the block-augmented exponential, so the result is
    accurate to machine precision rather than finite-difference accuracy.
    """
    w = np.asarray(w, dtype=float)
    grad_u = np.asarray(grad_u, dtype=float)
    t = np.triu(w, k=1)
    x = t - t.T
    phi = expm_frechet(x.T, grad_u, method="blockEnlarge", compute_expm=False)
    return np.triu(phi - phi.T, k=1)


def householder_from(v: np.ndarray) -> np.ndarray:
    """Reflection ``I - 2 vv^T / (v^T v)`` about the direction ``v``.

    Symmetric, orthogonal, determinant -1, and invariant under rescaling of
    ``v``. Raises for a (near-)zero direction.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ConfigurationError(f"expected a vector, got shape {v.shape}")
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm < 1e-12:
        raise ConfigurationError("householder direction is degenerate (norm < 1e-12)")
    vhat = v / norm
    return np.eye(v.size) - 2.0 * np.outer(vhat, vhat)


def householder_vjp(v: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``v`` of a scalar with gradient ``grad_u`` w.r.t. the reflection."""
    v = np.asarray(v, dtype=float)
    g = np.asarray(grad_u, dtype=float)
    norm = np.linalg.norm(v)
    vhat = v / norm
    g_vhat = -2.0 * (g + g.T) @ vhat
    # project out the radial component introduced by normalization
    return (g_vhat - vhat * (vhat @ g_vhat)) / norm


def scattering_response(stages: list, stage_delays: list, z) -> np.ndarray:
    """Evaluate the paraunitary filter matrix U(z) of a scattering chain.

    ``stages`` holds K orthogonal mixing matrices and ``stage_delays`` K+1
    per-line integer delay vectors; the chain applies delay stage 0 first,
    then alternates mixing and delay stages. On the unit circle the result
    is unitary for any stage delays, because every factor is.

    ``z`` may be a scalar or a 1-D array; the result has shape (N, N) or
    (B, N, N) accordingly.
    """
    k = len(stages)
    if len(stage_delays) != k + 1:
        raise ConfigurationError(
            f"scattering chain needs {k + 1} delay vectors for {k} mixing stages, "
            f"got {len(stage_delays)}"
        )
    zarr = np.atleast_1d(np.asarray(z, dtype=complex))
    if np.any(zarr == 0):
        raise ConfigurationError("scattering response is singular at z = 0")
    n = len(stage_delays[0])
    exps = [np.power(zarr[:, None], -np.asarray(m)[None, :]) for m in stage_delays]
    u = np.zeros((zarr.size, n, n), dtype=complex)
    diag = np.arange(n)
    u[:, diag, diag] = exps[0]
    for i in range(k):
        u = np.asarray(stages[i], dtype=float) @ u
        u = exps[i + 1][:, :, None] * u
    if np.isscalar(z) or np.ndim(z) == 0:
        return u[0]
    return u


@dataclass(frozen=True, eq=False)
class OrthogonalParam:
    """Raw parameterization of an orthogonal feedback matrix."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ConfigurationError(f"raw matrix must be square, got {w.shape}")
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def realize(self) -> np.ndarray:
        return skew_expm(self.w)


@dataclass(frozen=True, eq=False)
class HouseholderParam:
    """Raw parameterization of a Householder reflection feedback matrix."""

    v: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        if v.ndim != 1 or v.size < 1:
            raise ConfigurationError(f"direction must be a vector, got shape {v.shape}")
        object.__setattr__(self, "v", v)

    @property
    def n(self) -> int:
        return self.v.size

    def realize(self) -> np.ndarray:
        return householder_from(self.v)


@dataclass(frozen=True, eq=False)
class ScatteringParam:
    """Raw parameterization of a paraunitary scattering feedback matrix.

    ``w_stages`` holds K raw mixing matrices (each realized through
    :func:`skew_expm`) and ``stage_delays`` K+1 per-line delay vectors.
    Stage delays may be zero; with K = 1 and all stage delays zero the
    realized U(z) is constant and the variant reduces to the scalar case.

    ``absorb_stage_delays`` optionally folds the per-line sum of the stage
    delays into the absorption exponent, compensating (diagonally) for the
    extra propagation through the chain.
    """

    w_stages: tuple
    stage_delays: tuple
    absorb_stage_delays: bool = False

    def __post_init__(self):
        stages = tuple(np.asarray(w, dtype=float) for w in self.w_stages)
        delays = tuple(np.asarray(m, dtype=np.int64) for m in self.stage_delays)
        if len(delays) != len(stages) + 1:
            raise ConfigurationError(
                f"need {len(stages) + 1} stage-delay vectors for {len(stages)} "
                f"mixing stages, got {len(delays)}"
            )
        n = delays[0].size
        for w in stages:
            if w.shape != (n, n):
                raise ConfigurationError("stage matrix shape does not match line count")
        for m in delays:
            if m.size != n or np.any(m < 0):
                raise ConfigurationError("stage delays must be nonnegative, one per line")
        object.__setattr__(self, "w_stages", stages)
        object.__setattr__(self, "stage_delays", delays)

    @property
    def n(self) -> int:
        return self.stage_delays[0].size

    @property
    def n_stages(self) -> int:
        return len(self.w_stages)

    def realize_stages(self) -> list:
        return [skew_expm(w) for w in self.w_stages]

    def response(self, z) -> np.ndarray:
        return scattering_response(self.realize_stages(), self.stage_delays, z)


@dataclass(frozen=True, eq=False)
class ScatteringOperator:
    """Realized scattering feedback A(z) = U(z) diag(absorption)."""

    stages: tuple
    stage_delays: tuple
    absorption: np.ndarray

    @property
    def n(self) -> int:
        return self.absorption.size

    def at(self, z) -> np.ndarray:
        u = scattering_response(list(self.stages), list(self.stage_delays), z)
        return u * self.absorption[None, :] if u.ndim == 2 else u * self.absorption[None, None, :]


def gamma_power(gamma: float, exponents) -> np.ndarray:
    """``gamma ** m`` for integer exponents, by binary exponentiation.

    One squaring pass shared by every exponent keeps the per-line
    absorption coefficients bit-reproducible across call sites.
    """
    e = np.atleast_1d(np.asarray(exponents, dtype=np.int64)).copy()
    if np.any(e < 0):
        raise ConfigurationError("absorption exponents must be nonnegative")
    out = np.ones(e.shape, dtype=float)
    base = float(gamma)
    while np.any(e > 0):
        out = np.where(e & 1, out * base, out)
        base *= base
        e >>= 1
    if np.ndim(exponents) == 0:
        return float(out[0])
    return out


@dataclass(frozen=True, eq=False)
class AbsorptionSpec:
    """Per-line absorption coefficients gamma**m for a homogeneous decay."""

    gamma: float
    per_line: np.ndarray = field(default=None)
    delays: np.ndarray = field(default=None)

    @classmethod
    def for_delays(cls, gamma: float, delays) -> "AbsorptionSpec":
        _check_gamma(gamma)
        delays = np.asarray(delays, dtype=np.int64)
        return cls(gamma=float(gamma), per_line=gamma_power(gamma, delays), delays=delays)


def _check_gamma(gamma: float) -> None:
    if not (0.0 < gamma <= 1.0):
        raise ConfigurationError(f"gamma must lie in (0, 1], got {gamma}")


def realize_feedback(param, gamma: float, delays):
    """Realize the feedback operator A from raw parameters and absorption.

    For the scalar variants the result is the matrix ``U @ diag(gamma**m)``.
    For the scattering variant a :class:`ScatteringOperator` is returned,
    whose ``at(z)`` gives ``U(z) @ diag(absorption)``. By default the
    absorption exponent uses only the main delays; the per-line stage-delay
    sums can be folded in via ``ScatteringParam.absorb_stage_delays``.
    """
    _check_gamma(gamma)
    delays = np.asarray(delays, dtype=np.int64)
    if isinstance(param, OrthogonalParam):
        return param.realize() * gamma_power(gamma, delays)[None, :]
    if isinstance(param, HouseholderParam):
        return param.realize() * gamma_power(gamma, delays)[None, :]
    if isinstance(param, ScatteringParam):
        exponents = delays.copy()
        if param.absorb_stage_delays:
            exponents = exponents + sum(m for m in param.stage_delays)
        return ScatteringOperator(
            stages=tuple(param.realize_stages()),
            stage_delays=param.stage_delays,
            absorption=gamma_power(gamma, exponents),
        )
    raise ConfigurationError(f"unknown feedback parameterization: {type(param).__name__}")


def gamma_from_t60(t60: float, fs: float) -> float:
    """Per-sample gain for a 60 dB decay over ``t60`` seconds at rate ``fs``."""
    if fs <= 0:
        raise ConfigurationError(f"sample rate must be positive, got {fs}")
    if t60 == np.inf:
        return 1.0
    if not t60 > 0:
        raise ConfigurationError(f"t60 must be positive, got {t60}")
    gamma_db = -60.0 / (fs * t60)
    return float(10.0 ** (gamma_db / 20.0))


def t60_from_gamma(gamma: float, fs: float) -> float:
    """Inverse of :func:`gamma_from_t60`; gamma = 1 maps to infinity."""
    if fs <= 0:
        raise ConfigurationError(f"sample rate must be positive, got {fs}")
    _check_gamma(gamma)
    if gamma == 1.0:
        return np.inf
    gamma_db = 20.0 * np.log10(gamma)
    return float(-60.0 / (fs * gamma_db))


def min_training_t60(order: int, fs: float) -> float:
    """Lower bound on the decay time for which resonances stay separated.

    The mean resonance half-width of a system with ``order`` modes at rate
    ``fs`` stays below the mean mode spacing only when the decay time is
    well above ``order * ln(10) / (pi * fs)``. Training absorption should
    be chosen with a comfortable margin above this value.
    """
    if order < 1:
        raise ConfigurationError(f"system order must be >= 1, got {order}")
    return float(order * np.log(10.0) / (np.pi * fs))
