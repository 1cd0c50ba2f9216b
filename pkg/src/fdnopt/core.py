"""FDN description, exact transfer-function evaluation, and IR rendering.

The network couples N integer delay lines through a feedback operator A,
with input gains b, output gains c, and a direct gain d. Its transfer
function is

    H(z) = c^T [diag(z^m) - A]^(-1) b + d,

where m holds the delay lengths in samples. A is either a scalar matrix
(orthogonal or Householder feedback times a diagonal absorption) or a
filter matrix A(z) for the scattering variant. Everything here is pure
and deterministic: evaluation at a batch of points is safe to run from
multiple threads, and rendering is sequential internally but reentrant
across configs.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, SingularResolventError
from .param import (
    HouseholderParam,
    OrthogonalParam,
    ScatteringOperator,
    ScatteringParam,
    gamma_power,
    realize_feedback,
)

__all__ = [
    "FdnConfig",
    "TransferSample",
    "eval_transfer",
    "eval_transfer_householder",
    "render_ir",
    "transfer_batch",
    "render_samples",
]


@dataclass(frozen=True, eq=False)
class FdnConfig:
    """Complete description of a single-input single-output FDN.

    ``gamma`` is the per-sample decay of all modes; 1 means the lossless
    prototype. The feedback matrix is stored in raw (trainable) form and
    realized together with the delay-proportional absorption on demand.
    """

    delays: np.ndarray
    input_gains: np.ndarray
    output_gains: np.ndarray
    direct_gain: float
    feedback: object
    gamma: float
    sample_rate: int

    def __post_init__(self):
        delays = np.asarray(self.delays, dtype=np.int64)
        b = np.asarray(self.input_gains, dtype=float)
        c = np.asarray(self.output_gains, dtype=float)
        if delays.ndim != 1 or delays.size < 1:
            raise ConfigurationError("delays must be a nonempty vector")
        if np.any(delays < 1):
            raise ConfigurationError("delays must be strictly positive integers")
        n = delays.size
        if b.shape != (n,) or c.shape != (n,):
            raise ConfigurationError(
                f"gain vectors must have length {n}, got {b.shape} and {c.shape}"
            )
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigurationError(f"gamma must lie in (0, 1], got {self.gamma}")
        if int(self.sample_rate) <= 0:
            raise ConfigurationError(f"sample rate must be positive, got {self.sample_rate}")
        fb_n = getattr(self.feedback, "n", None)
        if fb_n is None:
            raise ConfigurationError(
                f"unsupported feedback parameterization: {type(self.feedback).__name__}"
            )
        if fb_n != n:
            raise ConfigurationError(f"feedback is {fb_n}x{fb_n} but there are {n} delay lines")
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "input_gains", b)
        object.__setattr__(self, "output_gains", c)
        object.__setattr__(self, "direct_gain", float(self.direct_gain))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def n(self) -> int:
        """Number of delay lines."""
        return self.delays.size

    @property
    def order(self) -> int:
        """System order: total delay in samples, which is also the pole count."""
        return int(self.delays.sum())

    def realize(self):
        """Feedback operator A including absorption (matrix or filter operator)."""
        return realize_feedback(self.feedback, self.gamma, self.delays)

    def with_gamma(self, gamma: float) -> "FdnConfig":
        return replace(self, gamma=gamma)

    # ---- JSON round trip -------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "delays": self.delays.tolist(),
            "input_gains": self.input_gains.tolist(),
            "output_gains": self.output_gains.tolist(),
            "direct_gain": self.direct_gain,
            "gamma": self.gamma,
            "sample_rate": self.sample_rate,
            "feedback": _feedback_to_dict(self.feedback),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "FdnConfig":
        cfg = cls(
            delays=data["delays"],
            input_gains=data["input_gains"],
            output_gains=data["output_gains"],
            direct_gain=data.get("direct_gain", 0.0),
            feedback=_feedback_from_dict(data["feedback"]),
            gamma=data["gamma"],
            sample_rate=data["sample_rate"],
        )
        if "n" in data and int(data["n"]) != cfg.n:
            raise ConfigurationError(
                f"config claims n={data['n']} but has {cfg.n} delay lines"
            )
        return cfg

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FdnConfig":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def _feedback_to_dict(param) -> dict:
    if isinstance(param, OrthogonalParam):
        return {"type": "orthogonal", "w": param.w.tolist()}
    if isinstance(param, HouseholderParam):
        return {"type": "householder", "v": param.v.tolist()}
    if isinstance(param, ScatteringParam):
        return {
            "type": "scattering",
            "w_stages": [w.tolist() for w in param.w_stages],
            "stage_delays": [m.tolist() for m in param.stage_delays],
            "absorb_stage_delays": param.absorb_stage_delays,
        }
    raise ConfigurationError(f"cannot serialize feedback of type {type(param).__name__}")


def _feedback_from_dict(data: dict):
    kind = data.get("type")
    if kind == "orthogonal":
        return OrthogonalParam(w=np.asarray(data["w"], dtype=float))
    if kind == "householder":
        return HouseholderParam(v=np.asarray(data["v"], dtype=float))
    if kind == "scattering":
        return ScatteringParam(
            w_stages=tuple(np.asarray(w, dtype=float) for w in data["w_stages"]),
            stage_delays=tuple(np.asarray(m, dtype=np.int64) for m in data["stage_delays"]),
            absorb_stage_delays=bool(data.get("absorb_stage_delays", False)),
        )
    raise ConfigurationError(f"unknown feedback type in config: {kind!r}")


@dataclass(frozen=True, eq=False)
class TransferSample:
    """Transfer function at one point: total H(z) and per-channel parts.

    ``channels[i]`` is the i-th delay-line output scaled by the output gain
    c_i, so the channel sum equals the total exactly when the direct gain
    is zero.
    """

    point: complex
    total: complex
    channels: np.ndarray


def _check_points(points) -> np.ndarray:
    z = np.atleast_1d(np.asarray(points, dtype=complex))
    if z.ndim != 1:
        raise ConfigurationError("frequency points must form a 1-D sequence")
    if np.any(z == 0):
        raise ConfigurationError("transfer function is undefined at z = 0")
    return z


def _resolvent_matrices(feedback_op, delays, z: np.ndarray) -> np.ndarray:
    """Stacked resolvent argument diag(z^m) - A(z), shape (B, N, N)."""
    m = np.asarray(delays)
    e = np.power(z[:, None], m[None, :])
    if isinstance(feedback_op, ScatteringOperator):
        p = -feedback_op.at(z)
    else:
        p = np.broadcast_to(-np.asarray(feedback_op, dtype=complex), (z.size, m.size, m.size)).copy()
    diag = np.arange(m.size)
    p[:, diag, diag] += e
    return p


def _solve_batch(p: np.ndarray, rhs: np.ndarray, z: np.ndarray) -> np.ndarray:
    try:
        sol = np.linalg.solve(p, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        sol = None
    if sol is None or not np.all(np.isfinite(sol)):
        bad = _first_singular_point(p, z)
        raise SingularResolventError(
            f"resolvent is singular at z = {bad} (evaluation point coincides with a pole)"
        )
    return sol


def _first_singular_point(p: np.ndarray, z: np.ndarray) -> complex:
    dets = np.linalg.det(p)
    idx = int(np.argmin(np.abs(dets)))
    return complex(z[idx])


def transfer_batch(feedback_op, delays, b, c, d, points):
    """Vectorized transfer evaluation against an already realized feedback.

    Returns ``(totals, channels)`` with shapes (B,) and (B, N). This is the
    computational core behind :func:`eval_transfer`; it also accepts plain
    matrices, which is convenient for analysis of fixed (for example
    diagonal) feedback that no trainable parameterization produces.
    """
    z = _check_points(points)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    p = _resolvent_matrices(feedback_op, delays, z)
    if b.shape != (p.shape[1],) or c.shape != (p.shape[1],):
        raise ConfigurationError("gain vectors do not match the feedback dimension")
    states = _solve_batch(p, np.broadcast_to(b.astype(complex), (z.size, b.size)), z)
    channels = c[None, :] * states
    totals = channels.sum(axis=1) + d
    return totals, channels


def eval_transfer(config: FdnConfig, points) -> list:
    """Evaluate H(z) and its channel decomposition at the given points.

    Dispatches on the feedback variant: scalar matrices go through one
    dense solve per point, the scattering variant additionally evaluates
    its filter matrix at each point. Pure; does not modify the config.
    """
    z = _check_points(points)
    totals, channels = transfer_batch(
        config.realize(), config.delays, config.input_gains,
        config.output_gains, config.direct_gain, z,
    )
    return [
        TransferSample(point=complex(z[i]), total=complex(totals[i]), channels=channels[i])
        for i in range(z.size)
    ]


def eval_transfer_householder(config: FdnConfig, points) -> list:
    """Fast Householder-feedback evaluation, O(N) per frequency point.

    With U = I - 2 vv^T the resolvent argument is a diagonal matrix plus a
    rank-one update, so each point needs only elementwise work and one
    rank-one correction instead of a dense solve. Matches the generic path
    to near machine precision.
    """
    if not isinstance(config.feedback, HouseholderParam):
        raise ConfigurationError("fast path requires Householder feedback")
    z = _check_points(points)
    m = config.delays
    v = config.feedback.v
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise ConfigurationError("householder direction is degenerate (norm < 1e-12)")
    vhat = v / norm
    absorption = gamma_power(config.gamma, m)
    v_gamma = absorption * vhat

    diag = np.power(z[:, None], m[None, :]) - absorption[None, :]
    if np.any(diag == 0):
        bad = z[np.any(diag == 0, axis=1)][0]
        raise SingularResolventError(f"resolvent is singular at z = {bad}")
    pb = config.input_gains[None, :] / diag
    q = vhat[None, :] / diag
    beta = 1.0 + 2.0 * (q @ v_gamma)
    if np.any(np.abs(beta) < 1e-300):
        bad = z[np.abs(beta) < 1e-300][0]
        raise SingularResolventError(f"resolvent is singular at z = {bad}")
    states = pb - 2.0 * q * ((pb @ v_gamma) / beta)[:, None]
    channels = config.output_gains[None, :] * states
    totals = channels.sum(axis=1) + config.direct_gain
    return [
        TransferSample(point=complex(z[i]), total=complex(totals[i]), channels=channels[i])
        for i in range(z.size)
    ]


# ---- time-domain rendering ----------------------------------------------


def _delay_block(buf: np.ndarray, x: np.ndarray):
    """Push a block through a FIFO delay; returns (output block, new buffer)."""
    full = np.concatenate([buf, x])
    return full[: x.size], full[x.size:]


def render_samples(feedback_op, delays, b, c, d, length: int,
                   line_filters=None) -> np.ndarray:
    """Impulse response of the feedback recursion, h(0) = d.

    Processes in blocks no longer than the shortest delay line, which keeps
    every feedback dependency at least one block in the past and lets the
    whole recursion run on vectorized slices. ``line_filters``, when given,
    is a callable ``(line_outputs_block) -> filtered_block`` applied to the
    delay-line outputs before the feedback matrix, in place of the scalar
    absorption already folded into ``feedback_op``; it is used for
    frequency-dependent decay, with ``feedback_op`` the lossless matrix.
    """
    m = np.asarray(delays, dtype=np.int64)
    n = m.size
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    if length < 1:
        raise ConfigurationError(f"render length must be >= 1, got {length}")

    scattering = isinstance(feedback_op, ScatteringOperator)
    if scattering:
        if line_filters is not None:
            raise ConfigurationError("per-line filters are not supported with scattering feedback")
        stage_bufs = [
            [np.zeros(int(di)) for di in stage]
            for stage in feedback_op.stage_delays
        ]
        stages = [np.asarray(u, dtype=float) for u in feedback_op.stages]
        absorption = feedback_op.absorption
    else:
        a_matrix = np.asarray(feedback_op, dtype=float)

    block = int(min(m.min(), 4096))
    line_bufs = [np.zeros(int(mi)) for mi in m]
    out = np.zeros(length)
    pos = 0
    while pos < length:
        nb = min(block, length - pos)
        s = np.empty((n, nb))
        for i in range(n):
            s[i] = line_bufs[i][:nb]
        if line_filters is not None:
            fed = a_matrix @ line_filters(s)
        elif scattering:
            g = absorption[:, None] * s
            for i in range(n):
                g[i], stage_bufs[0][i] = _delay_block(stage_bufs[0][i], g[i])
            for k, u in enumerate(stages):
                g = u @ g
                for i in range(n):
                    g[i], stage_bufs[k + 1][i] = _delay_block(stage_bufs[k + 1][i], g[i])
            fed = g
        else:
            fed = a_matrix @ s
        v = fed
        if pos == 0:
            v = v.copy()
            v[:, 0] += b
            out[0] = d
        out[pos:pos + nb] += c @ s
        for i in range(n):
            line_bufs[i] = np.concatenate([line_bufs[i][nb:], v[i]])
        pos += nb
    return out


def render_ir(config: FdnConfig, length: int) -> np.ndarray:
    """Render ``length`` samples of the impulse response of ``config``."""
    return render_samples(
        config.realize(), config.delays, config.input_gains,
        config.output_gains, config.direct_gain, length,
    )
