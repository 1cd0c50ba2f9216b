"""Gradient-descent training of FDN gains and feedback parameters.

The network is evaluated on a half-circle grid of frequency points and
trained by stochastic gradient descent on batches sampled from that grid.
The objective combines a spectral term, pushing every channel magnitude
and the total magnitude toward 1, with a sparsity term that penalizes
concentration of the realized feedback matrix entries (dense mixing keeps
the impulse response dense in time). Gradients are computed analytically:
per-point adjoints of the resolvent solve, chained through the absorption
and through the raw parameterization (matrix-exponential Frechet
derivative, Householder normalization, or the scattering product chain).
"""

import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import FdnConfig, transfer_batch, _check_points
from .errors import ConfigurationError, ConvergenceError, DesignError
from .param import (
    HouseholderParam,
    OrthogonalParam,
    ScatteringParam,
    gamma_power,
    householder_from,
    householder_vjp,
    min_training_t60,
    skew_expm,
    skew_expm_vjp,
    t60_from_gamma,
)

__all__ = [
    "PRESET_DELAYS",
    "TrainConfig",
    "LossBreakdown",
    "EpochRecord",
    "TrainReport",
    "Adam",
    "adam_step",
    "frequency_grid",
    "split_indices",
    "batch_sampler",
    "spectral_loss",
    "sparsity_loss",
    "total_loss",
    "loss_gradients",
    "init_params",
    "initial_config",
    "design_delays",
    "design_stage_delays",
    "train",
]

log = logging.getLogger(__name__)

# Preset logarithmically spaced prime delay lengths (samples) per size.
PRESET_DELAYS = {
    4: (1499, 1889, 2381, 2999),
    6: (997, 1153, 1327, 1559, 1801, 2099),
    8: (809, 877, 937, 1049, 1151, 1249, 1373, 1499),
}


# ---- frequency grid and batching -----------------------------------------


def frequency_grid(m: int) -> np.ndarray:
    """``m`` points exp(j*pi*k/m), k = 0..m-1, on the upper half circle."""
    if m < 2:
        raise ConfigurationError(f"grid needs at least 2 points, got {m}")
    return np.exp(1j * np.pi * np.arange(m) / m)


def split_indices(m: int, train_fraction: float = 0.8):
    """Deterministic stratified train/validation split of grid indices.

    Validation takes every ``stride``-th point (stride chosen from the
    fraction), offset to the middle of each stride so the grid endpoints
    stay in the training set.
    """
    if not (0.0 < train_fraction < 1.0):
        raise ConfigurationError(f"train fraction must be in (0, 1), got {train_fraction}")
    stride = max(2, round(1.0 / (1.0 - train_fraction)))
    idx = np.arange(m)
    mask = np.zeros(m, dtype=bool)
    mask[stride // 2::stride] = True
    return idx[~mask], idx[mask]


def batch_sampler(indices, mu: int, seed):
    """Yield one epoch of disjoint batches covering ``indices`` exactly once.

    The permutation is seeded, so the same ``seed`` reproduces the same
    batch sequence. The final batch is ragged when ``mu`` does not divide
    the split size.
    """
    indices = np.asarray(indices)
    if mu < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {mu}")
    perm = np.random.default_rng(seed).permutation(indices)
    for start in range(0, perm.size, mu):
        yield perm[start:start + mu]


# ---- losses ---------------------------------------------------------------


@dataclass(frozen=True)
class LossBreakdown:
    """Spectral and sparsity terms with their weighted total."""

    spectral: float
    sparsity: float
    alpha: float
    total: float = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "total", self.spectral + self.alpha * self.sparsity)

    def as_dict(self) -> dict:
        return {
            "spectral": self.spectral,
            "sparsity": self.sparsity,
            "alpha": self.alpha,
            "total": self.total,
        }


def total_loss(spectral: float, sparsity: float, alpha: float) -> LossBreakdown:
    return LossBreakdown(spectral=float(spectral), sparsity=float(sparsity), alpha=float(alpha))


def spectral_loss(samples, n: int, channel_term: bool = True) -> float:
    """Mean squared deviation of |H| (and optionally each |H_i|) from 1."""
    if not samples:
        raise ConfigurationError("spectral loss needs at least one sample")
    acc = 0.0
    for sample in samples:
        val = (np.abs(sample.total) - 1.0) ** 2
        if channel_term:
            val += np.mean((np.abs(sample.channels) - 1.0) ** 2)
        acc += val
    return float(acc / len(samples))


def sparsity_loss(u: np.ndarray) -> float:
    """Normalized entry concentration of an orthogonal matrix, in [0, 1].

    0 for maximally dense matrices (all entries of magnitude 1/sqrt(N)),
    1 for permutation-like matrices.
    """
    u = np.asarray(u, dtype=float)
    n = u.shape[0]
    if u.shape != (n, n):
        raise ConfigurationError(f"expected a square matrix, got {u.shape}")
    root = np.sqrt(n)
    return float((n * root - np.abs(u).sum()) / (n * (root - 1.0)))


def _sparsity_grad(u: np.ndarray) -> np.ndarray:
    n = u.shape[0]
    return -np.sign(u) / (n * (np.sqrt(n) - 1.0))


def _spectral_terms(z, delays, b, c, a_scalar=None, a_of_z=None):
    """Forward pass shared by the loss and its gradients."""
    m = np.asarray(delays)
    e = np.power(z[:, None], m[None, :])
    if a_of_z is not None:
        p = -a_of_z
    else:
        p = np.broadcast_to(-a_scalar.astype(complex), (z.size, m.size, m.size)).copy()
    diag = np.arange(m.size)
    p[:, diag, diag] += e
    rhs = np.broadcast_to(b.astype(complex), (z.size, b.size))
    states = np.linalg.solve(p, rhs[..., None])[..., 0]
    channels = c[None, :] * states
    totals = channels.sum(axis=1)
    return p, states, channels, totals


def _magnitude_cograd(values: np.ndarray, weight: float) -> np.ndarray:
    mags = np.abs(values)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = 2.0 * (mags - 1.0) * np.conj(values) / mags
    g[mags == 0] = 0.0
    return weight * g


def loss_gradients(config: FdnConfig, points, alpha: float = 1.0,
                   channel_term: bool = True):
    """Loss at a batch of points plus gradients w.r.t. the raw parameters.

    Returns ``(LossBreakdown, grads)`` where ``grads`` has entries for
    ``input_gains``, ``output_gains`` and the raw feedback array(s). The
    per-point adjoints are one extra transposed solve against the same
    resolvent matrices as the forward pass.
    """
    z = _check_points(points)
    nbatch = z.size
    n = config.n
    b = config.input_gains
    c = config.output_gains
    absorption = gamma_power(config.gamma, config.delays)
    fb = config.feedback

    scattering = isinstance(fb, ScatteringParam)
    if scattering:
        stages = fb.realize_stages()
        k = len(stages)
        exps = [np.power(z[:, None], -np.asarray(m)[None, :]) for m in fb.stage_delays]
        # prefix products R_j (right factors of stage j) and suffix L_j
        diag = np.arange(n)
        base = np.zeros((nbatch, n, n), dtype=complex)
        base[:, diag, diag] = exps[0]
        rights = [base]
        for j in range(1, k):
            rights.append(exps[j][:, :, None] * (stages[j - 1] @ rights[j - 1]))
        lefts = [None] * max(k, 1)
        if k > 0:
            tail = np.zeros((nbatch, n, n), dtype=complex)
            tail[:, diag, diag] = exps[k]
            lefts[k - 1] = tail
            for j in range(k - 2, -1, -1):
                lefts[j] = (lefts[j + 1] @ stages[j + 1]) * exps[j + 1][:, None, :]
            u_of_z = lefts[0] @ stages[0] @ rights[0]
        else:
            u_of_z = base
        a_of_z = u_of_z * absorption[None, None, :]
        p, states, channels, totals = _spectral_terms(z, config.delays, b, c, a_of_z=a_of_z)
        u_real = None
    else:
        if isinstance(fb, OrthogonalParam):
            u_real = skew_expm(fb.w)
        elif isinstance(fb, HouseholderParam):
            u_real = householder_from(fb.v)
        else:
            raise ConfigurationError(f"unsupported feedback: {type(fb).__name__}")
        a_scalar = u_real * absorption[None, :]
        p, states, channels, totals = _spectral_terms(z, config.delays, b, c, a_scalar=a_scalar)

    totals = totals + config.direct_gain
    abs_h = np.abs(totals)
    abs_hi = np.abs(channels)
    spectral = float(np.mean((abs_h - 1.0) ** 2))
    if channel_term:
        spectral += float(np.mean((abs_hi - 1.0) ** 2, axis=1).mean())

    g_h = _magnitude_cograd(totals, 1.0 / nbatch)
    if channel_term:
        g_hi = _magnitude_cograd(channels, 1.0 / (n * nbatch))
    else:
        g_hi = np.zeros_like(channels)
    s_vec = c[None, :] * (g_hi + g_h[:, None])
    w_vec = np.linalg.solve(p.transpose(0, 2, 1), s_vec[..., None])[..., 0]

    grads = {
        "input_gains": w_vec.real.sum(axis=0),
        "output_gains": (states * (g_hi + g_h[:, None])).real.sum(axis=0),
    }

    if scattering:
        stage_sparsity = [sparsity_loss(u) for u in stages]
        sparsity = float(np.mean(stage_sparsity)) if stages else 0.0
        u_bar = absorption[None, :] * states
        w_stage_grads = []
        for j in range(k):
            a_j = np.einsum("bij,bi->bj", lefts[j], w_vec)
            r_j = np.einsum("bij,bj->bi", rights[j], u_bar)
            grad_uj = np.einsum("bi,bj->ij", a_j, r_j).real
            if alpha != 0.0 and k > 0:
                grad_uj = grad_uj + alpha * _sparsity_grad(stages[j]) / k
            w_stage_grads.append(skew_expm_vjp(fb.w_stages[j], grad_uj))
        grads["w_stages"] = w_stage_grads
    else:
        sparsity = sparsity_loss(u_real)
        grad_a = np.einsum("bi,bj->ij", w_vec, states).real
        grad_u = grad_a * absorption[None, :]
        if alpha != 0.0:
            grad_u = grad_u + alpha * _sparsity_grad(u_real)
        if isinstance(fb, OrthogonalParam):
            grads["w"] = skew_expm_vjp(fb.w, grad_u)
        else:
            grads["v"] = householder_vjp(fb.v, grad_u)

    return total_loss(spectral, sparsity, alpha), grads


# ---- Adam ------------------------------------------------------------------


class Adam:
    """Standard Adam with bias-corrected moments.

    Parameter sets are dicts whose values are arrays or lists of arrays;
    moment state mirrors that structure and is created on first use.
    """

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def _update_one(self, m, v, p, g, lr):
        m[:] = self.beta1 * m + (1.0 - self.beta1) * g
        v[:] = self.beta2 * v + (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1 ** self.t)
        v_hat = v / (1.0 - self.beta2 ** self.t)
        return p - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, params: dict, grads: dict, learning_rate: float = None) -> dict:
        lr = self.learning_rate if learning_rate is None else learning_rate
        self.t += 1
        out = {}
        for key, p in params.items():
            g = grads[key]
            if isinstance(p, (list, tuple)):
                if key not in self.m:
                    self.m[key] = [np.zeros_like(x) for x in p]
                    self.v[key] = [np.zeros_like(x) for x in p]
                out[key] = [
                    self._update_one(self.m[key][i], self.v[key][i], p[i], g[i], lr)
                    for i in range(len(p))
                ]
            else:
                if key not in self.m:
                    self.m[key] = np.zeros_like(p)
                    self.v[key] = np.zeros_like(p)
                out[key] = self._update_one(self.m[key], self.v[key], p, g, lr)
        return out


def adam_step(state: Adam, params: dict, grads: dict, learning_rate: float = None) -> dict:
    """One Adam update; returns the new parameter dict."""
    return state.step(params, grads, learning_rate)


# ---- initialization and delay design ---------------------------------------


def init_params(n: int, seed: int, variant: str = "orthogonal", n_stages: int = 4) -> dict:
    """Seeded raw parameter draws for a size-``n`` network.

    Gains are normal with variance 1/N; raw feedback entries are uniform
    on (-1/sqrt(N), 1/sqrt(N)). The draw order is fixed (input gains,
    output gains, then feedback) so results are reproducible per seed.
    """
    if n < 1:
        raise ConfigurationError(f"network size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(n)
    out = {
        "input_gains": rng.normal(0.0, scale, n),
        "output_gains": rng.normal(0.0, scale, n),
    }
    if variant == "orthogonal":
        out["w"] = rng.uniform(-scale, scale, (n, n))
    elif variant == "householder":
        out["v"] = rng.uniform(-scale, scale, n)
    elif variant == "scattering":
        out["w_stages"] = [rng.uniform(-scale, scale, (n, n)) for _ in range(n_stages)]
    else:
        raise ConfigurationError(f"unknown feedback variant: {variant!r}")
    return out


def _primes_up_to(limit: int) -> np.ndarray:
    sieve = np.ones(limit + 1, dtype=bool)
    sieve[:2] = False
    for i in range(2, int(limit ** 0.5) + 1):
        if sieve[i]:
            sieve[i * i::i] = False
    return np.nonzero(sieve)[0]


def design_delays(n: int, m_range, min_order: int) -> np.ndarray:
    """Distinct primes on a geometric progression across ``m_range``.

    Each progression point snaps to the nearest unused prime inside the
    range (ties broken downward). Raises DesignError when the range holds
    too few primes or the best achievable total delay misses ``min_order``.
    """
    lo, hi = int(m_range[0]), int(m_range[1])
    if n < 1 or lo < 1 or hi < lo:
        raise ConfigurationError(f"bad delay design request: n={n}, range=({lo}, {hi})")
    primes = _primes_up_to(hi)
    primes = primes[primes >= lo]
    if primes.size < n:
        raise DesignError(
            f"only {primes.size} primes in [{lo}, {hi}], need {n}"
        )
    if n == 1:
        targets = np.array([np.sqrt(lo * hi)])
    else:
        ratio = (hi / lo) ** (1.0 / (n - 1))
        targets = lo * ratio ** np.arange(n)
    available = set(int(p) for p in primes)
    chosen = []
    for t in targets:
        best = min(available, key=lambda p: (abs(p - t), p))
        chosen.append(best)
        available.discard(best)
    chosen = np.array(sorted(chosen), dtype=np.int64)
    if chosen.sum() < min_order:
        achievable = int(np.sort(primes)[-n:].sum())
        raise DesignError(
            f"delays sum to {int(chosen.sum())} < required order {min_order} "
            f"(best achievable in range: {achievable})"
        )
    return chosen


def design_stage_delays(n: int, n_stages: int, seed: int, max_delay: int = 50) -> tuple:
    """Small prime per-line delays for the scattering stages.

    Stage delays should stay well below the main delays; they only add
    short-term density. Returns ``n_stages + 1`` vectors drawn from the
    primes up to ``max_delay``, seeded.
    """
    primes = _primes_up_to(max_delay)
    if primes.size < n:
        raise DesignError(f"need {n} primes below {max_delay}, found {primes.size}")
    rng = np.random.default_rng(seed)
    return tuple(
        np.sort(rng.choice(primes, size=n, replace=False)).astype(np.int64)
        for _ in range(n_stages + 1)
    )


def initial_config(n: int, delays, seed: int, variant: str = "orthogonal",
                   gamma: float = 0.9999, sample_rate: int = 48000,
                   n_stages: int = 4, stage_delays=None) -> FdnConfig:
    """Assemble a seeded initial FdnConfig ready for training or rendering."""
    raw = init_params(n, seed, variant=variant, n_stages=n_stages)
    if variant == "orthogonal":
        feedback = OrthogonalParam(w=raw["w"])
    elif variant == "householder":
        feedback = HouseholderParam(v=raw["v"])
    else:
        if stage_delays is None:
            stage_delays = design_stage_delays(n, n_stages, seed)
        feedback = ScatteringParam(w_stages=tuple(raw["w_stages"]), stage_delays=tuple(stage_delays))
    return FdnConfig(
        delays=np.asarray(delays, dtype=np.int64),
        input_gains=raw["input_gains"],
        output_gains=raw["output_gains"],
        direct_gain=0.0,
        feedback=feedback,
        gamma=gamma,
        sample_rate=sample_rate,
    )


# ---- training --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainConfig:
    """Everything a training run needs, including the initial network."""

    fdn: FdnConfig
    grid_size: int = 48000
    batch_size: int = 2000
    train_fraction: float = 0.8
    epochs: int = 20
    learning_rate: float = 1e-3
    alpha: float = 1.0
    gamma: float = 0.9999
    seed: int = 0
    channel_term: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    divergence_factor: float = 10.0

    def validate(self) -> None:
        if self.batch_size >= self.grid_size:
            raise ConfigurationError("batch size must be smaller than the grid size")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigurationError("train fraction must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.alpha < 0:
            raise ConfigurationError("sparsity weight must be nonnegative")
        if self.epochs < 0:
            raise ConfigurationError("epoch count must be nonnegative")
        if not (0.0 < self.gamma < 1.0):
            raise ConfigurationError(
                "training requires gamma strictly inside (0, 1); the lossless "
                "system has poles on the frequency grid circle"
            )
        if self.fdn.direct_gain != 0.0:
            raise ConfigurationError("training assumes a zero direct gain")

    def to_json_dict(self) -> dict:
        return {
            "fdn": self.fdn.to_json_dict(),
            "grid_size": self.grid_size,
            "batch_size": self.batch_size,
            "train_fraction": self.train_fraction,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "seed": self.seed,
            "channel_term": self.channel_term,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "divergence_factor": self.divergence_factor,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "TrainConfig":
        kwargs = dict(data)
        kwargs["fdn"] = FdnConfig.from_json_dict(data["fdn"])
        return cls(**kwargs)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train: LossBreakdown
    validation: LossBreakdown
    wall_s: float


@dataclass(frozen=True, eq=False)
class TrainReport:
    seed: int
    records: list
    final: FdnConfig

    def to_json_dict(self, include_wall: bool = True) -> dict:
        epochs = []
        for rec in self.records:
            entry = {
                "epoch": rec.epoch,
                "train": rec.train.as_dict(),
                "validation": rec.validation.as_dict(),
            }
            if include_wall:
                entry["wall_s"] = rec.wall_s
            epochs.append(entry)
        return {"seed": self.seed, "epochs": epochs, "final": self.final.to_json_dict()}

    def write_losses_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["epoch", "train_spectral", "train_sparsity", "train_total",
                 "val_spectral", "val_sparsity", "val_total"]
            )
            for rec in self.records:
                writer.writerow([
                    rec.epoch,
                    repr(rec.train.spectral), repr(rec.train.sparsity), repr(rec.train.total),
                    repr(rec.validation.spectral), repr(rec.validation.sparsity),
                    repr(rec.validation.total),
                ])


def _raw_params(config: FdnConfig) -> dict:
    out = {"input_gains": config.input_gains, "output_gains": config.output_gains}
    fb = config.feedback
    if isinstance(fb, OrthogonalParam):
        out["w"] = fb.w
    elif isinstance(fb, HouseholderParam):
        out["v"] = fb.v
    elif isinstance(fb, ScatteringParam):
        out["w_stages"] = list(fb.w_stages)
    else:
        raise ConfigurationError(f"unsupported feedback: {type(fb).__name__}")
    return out


def _apply_params(config: FdnConfig, params: dict) -> FdnConfig:
    fb = config.feedback
    if isinstance(fb, OrthogonalParam):
        new_fb = OrthogonalParam(w=params["w"])
    elif isinstance(fb, HouseholderParam):
        new_fb = HouseholderParam(v=params["v"])
    else:
        new_fb = ScatteringParam(
            w_stages=tuple(params["w_stages"]),
            stage_delays=fb.stage_delays,
            absorb_stage_delays=fb.absorb_stage_delays,
        )
    return replace(
        config,
        input_gains=params["input_gains"],
        output_gains=params["output_gains"],
        feedback=new_fb,
    )


def _check_realized_lossless(config: FdnConfig) -> None:
    fb = config.feedback
    if isinstance(fb, ScatteringParam):
        mats = fb.realize_stages()
    else:
        mats = [fb.realize()]
    for u in mats:
        drift = np.linalg.norm(u @ u.T - np.eye(u.shape[0]))
        if drift >= 1e-10:
            raise ConvergenceError(f"realized matrix lost orthogonality (drift {drift:.3e})")


def _evaluate_loss(config: FdnConfig, z: np.ndarray, alpha: float,
                   channel_term: bool, chunk: int = 8192) -> LossBreakdown:
    feedback = config.realize()
    acc = 0.0
    for start in range(0, z.size, chunk):
        zb = z[start:start + chunk]
        totals, channels = transfer_batch(
            feedback, config.delays, config.input_gains,
            config.output_gains, config.direct_gain, zb,
        )
        val = (np.abs(totals) - 1.0) ** 2
        if channel_term:
            val = val + np.mean((np.abs(channels) - 1.0) ** 2, axis=1)
        acc += float(val.sum())
    spectral = acc / z.size
    fb = config.feedback
    if isinstance(fb, ScatteringParam):
        stages = fb.realize_stages()
        sparsity = float(np.mean([sparsity_loss(u) for u in stages])) if stages else 0.0
    else:
        sparsity = sparsity_loss(fb.realize())
    return total_loss(spectral, sparsity, alpha)


def train(tc: TrainConfig) -> TrainReport:
    """Run the batched gradient-descent loop and return the trained network.

    Each epoch covers every training grid point exactly once in seeded
    random batches, applies one Adam update per batch, verifies that the
    realized feedback is still lossless, and evaluates the held-out
    validation loss. Delay lengths and the direct gain are never touched.
    Aborts with ConvergenceError if the loss goes non-finite or exceeds
    ``divergence_factor`` times its initial value.
    """
    tc.validate()
    work = tc.fdn.with_gamma(tc.gamma)
    t60 = t60_from_gamma(tc.gamma, work.sample_rate)
    bound = min_training_t60(work.order, work.sample_rate)
    if t60 <= bound:
        log.warning(
            "training decay time %.4f s is at or below the resonance-separation "
            "bound %.4f s; expect poorly separated modes", t60, bound,
        )
    if t60 > 10.0:
        log.warning(
            "training decay time %.2f s is above the empirically stable range "
            "(convergence degrades for very long decays)", t60,
        )

    grid = frequency_grid(tc.grid_size)
    train_idx, val_idx = split_indices(tc.grid_size, tc.train_fraction)
    adam = Adam(tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
    params = _raw_params(work)
    records = []
    initial_total = None
    for epoch in range(tc.epochs):
        t_start = time.perf_counter()
        spectral_sum = 0.0
        sparsity_sum = 0.0
        points_seen = 0
        steps = 0
        for batch in batch_sampler(train_idx, tc.batch_size, seed=[tc.seed, epoch]):
            loss, grads = loss_gradients(work, grid[batch], tc.alpha, tc.channel_term)
            if initial_total is None:
                initial_total = loss.total
            if not np.isfinite(loss.total):
                raise ConvergenceError(f"loss became non-finite at epoch {epoch}")
            if loss.total > tc.divergence_factor * max(initial_total, 1e-12):
                raise ConvergenceError(
                    f"training diverged at epoch {epoch}: loss {loss.total:.4e} "
                    f"exceeds {tc.divergence_factor:g}x initial {initial_total:.4e}"
                )
            params = adam.step(params, grads)
            work = _apply_params(work, params)
            spectral_sum += loss.spectral * batch.size
            sparsity_sum += loss.sparsity
            points_seen += batch.size
            steps += 1
        _check_realized_lossless(work)
        train_loss = total_loss(
            spectral_sum / max(points_seen, 1),
            sparsity_sum / max(steps, 1),
            tc.alpha,
        )
        val_loss = _evaluate_loss(work, grid[val_idx], tc.alpha, tc.channel_term)
        records.append(EpochRecord(
            epoch=epoch, train=train_loss, validation=val_loss,
            wall_s=time.perf_counter() - t_start,
        ))
    return TrainReport(seed=tc.seed, records=records, final=work)
