"""Modal decomposition: system poles, residues, and excitation statistics.

The poles of the network are the roots of the generalized characteristic
polynomial p(z) = det(diag(z^m) - A), whose degree equals the total delay
M. Expanding p into coefficients is numerically hopeless for M in the
thousands, so everything here evaluates p (and its logarithmic derivative)
through the determinant form directly, and the roots are found by the
Ehrlich-Aberth simultaneous iteration.

Residues come from the rank-one structure of the adjugate at a simple
root: with right/left null vectors u, w of P(lambda), the residue of the
transfer function reduces to

    rho = (c^T u)(w^H b) / (lambda * w^H P'(lambda) u),

which needs no determinant values at all.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .core import FdnConfig
from .errors import ConfigurationError, ConvergenceError
from .param import ScatteringOperator

__all__ = [
    "ModalDecomposition",
    "ExcitationStats",
    "gcp_eval",
    "solve_poles",
    "residues",
    "modal_decomposition",
    "excitation_stats",
]


def _gcp_matrices(a: np.ndarray, delays, z: np.ndarray):
    m = np.asarray(delays, dtype=np.int64)
    e = np.power(z[:, None], m[None, :])
    p = np.broadcast_to(-np.asarray(a, dtype=complex), (z.size, m.size, m.size)).copy()
    diag = np.arange(m.size)
    p[:, diag, diag] += e
    # derivative of diag(z^m) is diag(m z^(m-1))
    dp_diag = m[None, :] * e / z[:, None]
    return p, dp_diag


def _minor_det(p: np.ndarray, i: int) -> complex:
    keep = [j for j in range(p.shape[0]) if j != i]
    return complex(np.linalg.det(p[np.ix_(keep, keep)]))


def gcp_eval(a, delays, z: complex):
    """Value and derivative of p(z) = det(diag(z^m) - A) at one point.

    The derivative normally comes from the trace identity
    p'(z) = p(z) * tr(P^(-1) P'(z)); near a root, where P is singular, it
    falls back to the diagonal cofactors of P, which is exact because
    P'(z) is diagonal.
    """
    a = np.asarray(a, dtype=float)
    if z == 0:
        raise ConfigurationError("GCP evaluation requires z != 0")
    zb = np.atleast_1d(np.asarray(z, dtype=complex))
    p, dp_diag = _gcp_matrices(a, delays, zb)
    p = p[0]
    dp_diag = dp_diag[0]
    det = complex(np.linalg.det(p))
    trace = None
    if det != 0 and np.isfinite(det):
        try:
            pinv_dp = np.linalg.solve(p, np.diag(dp_diag))
            trace = np.trace(pinv_dp)
        except np.linalg.LinAlgError:
            trace = None
    if trace is not None and np.isfinite(trace):
        dp = det * trace
    else:
        dp = sum(_minor_det(p, i) * dp_diag[i] for i in range(p.shape[0]))
    return det, complex(dp)


def _newton_ratios(a: np.ndarray, delays, z: np.ndarray) -> np.ndarray:
    """p(z)/p'(z) batched, via the trace of P^(-1) P' (no determinants)."""
    p, dp_diag = _gcp_matrices(a, delays, z)
    with np.errstate(all="ignore"):
        try:
            pinv = np.linalg.inv(p)
        except np.linalg.LinAlgError:
            # some point sits exactly on a root (P singular); its Newton
            # correction is zero, so leave a zero inverse there
            pinv = np.zeros_like(p)
            for i in range(z.size):
                try:
                    pinv[i] = np.linalg.inv(p[i])
                except np.linalg.LinAlgError:
                    pass
        diag = np.arange(p.shape[1])
        logderiv = (pinv[:, diag, diag] * dp_diag).sum(axis=1)
        w = 1.0 / logderiv
    w[~np.isfinite(w)] = 0.0
    return w


def _aberth_sums(lam: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """sum_{j != i} 1/(lam_i - lam_j) for the selected rows, blocked."""
    out = np.zeros(idx.size, dtype=complex)
    li = lam[idx]
    row_block = 1024
    col_block = 4096
    for rs in range(0, li.size, row_block):
        rows = li[rs:rs + row_block]
        acc = np.zeros(rows.size, dtype=complex)
        for cs in range(0, lam.size, col_block):
            diff = rows[:, None] - lam[None, cs:cs + col_block]
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / diff
            inv[~np.isfinite(inv)] = 0.0
            acc += inv.sum(axis=1)
        out[rs:rs + row_block] = acc
    return out


def solve_poles(a, delays, gamma_hint: float, max_sweeps: int = 1000,
                tol: float = 1e-12) -> np.ndarray:
    """All M system poles by deflation-free Ehrlich-Aberth iteration.

    Starts from M points uniformly spaced on the circle of radius
    ``gamma_hint`` (the exact pole modulus for homogeneous decay) and
    updates all roots simultaneously each sweep. A root is frozen once its
    correction drops below ``tol * gamma_hint``. Raises ConvergenceError,
    with the worst Newton residual, if the sweep cap is hit or the final
    residual check |p/p'| < 1e-10 fails.
    """
    a = np.asarray(a, dtype=float)
    m = np.asarray(delays, dtype=np.int64)
    order = int(m.sum())
    lam = gamma_hint * np.exp(2j * np.pi * (np.arange(order) + 0.5) / order)
    # every root satisfies sigma_min(A) <= max_i |z|^m_i = |z|^min(m) and
    # |z|^min(m) <= ||A||_2; keep iterates in (slightly more than) that
    # annulus, which also keeps the diagonal powers away from under/overflow
    min_m = int(m.min())
    svals = np.linalg.svd(a, compute_uv=False)
    radius_cap = max(1.0, float(svals[0]) ** (1.0 / min_m)) * (1.0 + 1e-3)
    radius_floor = 0.0
    if svals[-1] > 0:
        radius_floor = float(svals[-1]) ** (1.0 / min_m) / (1.0 + 1e-3)
    active = np.ones(order, dtype=bool)
    for _ in range(max_sweeps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        w = _newton_ratios(a, m, lam[idx])
        s = _aberth_sums(lam, idx)
        denom = 1.0 - w * s
        small = np.abs(denom) < 1e-300
        step = np.where(small, w, w / np.where(small, 1.0, denom))
        new = lam[idx] - step
        broken = ~np.isfinite(new)
        if np.any(broken):
            # overflowing correction: keep the point, nudge it off its orbit
            new[broken] = lam[idx][broken] * np.exp(1e-3j)
        r = np.abs(new)
        out_of_annulus = (r > radius_cap) | (r < radius_floor)
        if np.any(out_of_annulus):
            new[out_of_annulus] *= (
                np.clip(r[out_of_annulus], radius_floor, radius_cap) / r[out_of_annulus]
            )
        moved = np.abs(new - lam[idx])
        lam[idx] = new
        settled = (moved < tol * gamma_hint) & (np.abs(w) < 1e-6 * gamma_hint)
        active[idx[settled]] = False
    if np.any(active):
        resid = np.abs(_newton_ratios(a, m, lam[active]))
        raise ConvergenceError(
            f"pole iteration did not converge for {int(active.sum())} of {order} roots "
            f"(max residual {resid.max():.3e})"
        )
    final = np.abs(_newton_ratios(a, m, lam))
    if final.max() >= 1e-10:
        raise ConvergenceError(
            f"pole residual check failed: max |p/p'| = {final.max():.3e}"
        )
    return lam


def _min_separation(poles: np.ndarray) -> float:
    if poles.size < 2:
        return np.inf
    if poles.size <= 2000:
        diff = np.abs(poles[:, None] - poles[None, :])
        np.fill_diagonal(diff, np.inf)
        return float(diff.min())
    # large systems here are homogeneous (all radii equal), so nearest
    # neighbours are adjacent in angle
    order = np.argsort(np.angle(poles))
    ring = poles[order]
    best = np.inf
    for shift in range(1, 6):
        d = np.abs(ring - np.roll(ring, shift))
        best = min(best, float(d.min()))
    return best


def residues(config: FdnConfig, poles: np.ndarray) -> np.ndarray:
    """Residues of the transfer function at the given simple poles.

    Uses the left/right null vectors of P(lambda) from one batched SVD per
    decomposition. Requires pairwise pole separation above 1e-9; clustered
    poles make the one-pole modal model invalid and raise.
    """
    feedback = config.realize()
    if isinstance(feedback, ScatteringOperator):
        raise ConfigurationError(
            "modal decomposition supports scalar feedback matrices only"
        )
    poles = np.asarray(poles, dtype=complex)
    sep = _min_separation(poles)
    if sep <= 1e-9:
        raise ConfigurationError(
            f"poles are clustered (min separation {sep:.3e}); residues are undefined"
        )
    p, dp_diag = _gcp_matrices(np.asarray(feedback, dtype=float), config.delays, poles)
    u_svd, _, vh = np.linalg.svd(p)
    right = vh[:, -1, :].conj()
    left = u_svd[:, :, -1]
    denom = poles * np.einsum("bi,bi,bi->b", left.conj(), dp_diag, right)
    num = (right @ config.output_gains) * (left.conj() @ config.input_gains)
    return num / denom


@dataclass(frozen=True, eq=False)
class ModalDecomposition:
    """Poles and residues of an FDN, plus the direct term.

    The impulse response reconstructs as h(n) = sum_i rho_i lambda_i^n for
    n >= 1. At n = 0 the modal sum generally differs from h(0) = d by the
    constant term of the partial-fraction expansion, recorded here as
    ``pf_constant`` (equal to minus the residue sum).
    """

    poles: np.ndarray
    residues: np.ndarray
    order: int
    direct_term: float

    @property
    def pf_constant(self) -> complex:
        return complex(-self.residues.sum())

    def reconstruct(self, n_samples: int) -> np.ndarray:
        """Modal sum sum_i rho_i lambda_i^n for n = 0 .. n_samples-1."""
        n = np.arange(n_samples)
        # evaluate per pole to bound memory for large orders
        out = np.zeros(n_samples, dtype=complex)
        block = max(1, int(2e6 // max(n_samples, 1)))
        for start in range(0, self.poles.size, block):
            lam = self.poles[start:start + block]
            rho = self.residues[start:start + block]
            out += (rho[:, None] * np.power(lam[:, None], n[None, :])).sum(axis=0)
        return out.real

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["pole_re", "pole_im", "pole_abs", "pole_angle_rad",
                 "residue_db", "residue_angle_rad"]
            )
            mags = np.abs(self.residues)
            with np.errstate(divide="ignore"):
                res_db = 20.0 * np.log10(mags)
            for i in range(self.poles.size):
                writer.writerow([
                    repr(float(self.poles[i].real)),
                    repr(float(self.poles[i].imag)),
                    repr(float(np.abs(self.poles[i]))),
                    repr(float(np.angle(self.poles[i]))),
                    repr(float(res_db[i])),
                    repr(float(np.angle(self.residues[i]))),
                ])


def modal_decomposition(config: FdnConfig, max_sweeps: int = 1000) -> ModalDecomposition:
    """Poles and residues of a scalar-feedback config."""
    feedback = config.realize()
    if isinstance(feedback, ScatteringOperator):
        raise ConfigurationError(
            "modal decomposition supports scalar feedback matrices only"
        )
    poles = solve_poles(feedback, config.delays, config.gamma, max_sweeps=max_sweeps)
    rho = residues(config, poles)
    return ModalDecomposition(
        poles=poles, residues=rho, order=config.order, direct_term=config.direct_gain
    )


@dataclass(frozen=True, eq=False)
class ExcitationStats:
    """Distribution summary of the modal excitations 20*log10|rho|."""

    std_db: float
    mean_db: float
    hist_centers: np.ndarray
    hist_counts: np.ndarray
    n_zero_excluded: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_center_db", "count"])
            for center, count in zip(self.hist_centers, self.hist_counts):
                writer.writerow([repr(float(center)), int(count)])


def excitation_stats(decomp: ModalDecomposition, bin_width: float = 0.5) -> ExcitationStats:
    """Population std and mean-centered histogram of the excitations in dB.

    Zero-magnitude residues carry no excitation and are excluded, with the
    count reported. The histogram bins are ``bin_width`` dB wide and are
    positioned relative to the distribution mean.
    """
    mags = np.abs(decomp.residues)
    nonzero = mags > 0
    n_zero = int(np.sum(~nonzero))
    if not np.any(nonzero):
        raise ConfigurationError("all residues are zero; excitation stats are undefined")
    level_db = 20.0 * np.log10(mags[nonzero])
    mean_db = float(level_db.mean())
    std_db = float(level_db.std())
    centered = level_db - mean_db
    lo = np.floor(centered.min() / bin_width) * bin_width
    hi = np.ceil(centered.max() / bin_width) * bin_width + bin_width
    edges = np.arange(lo, hi + bin_width / 2, bin_width)
    counts, edges = np.histogram(centered, bins=edges)
    centers = (edges[:-1] + edges[1:]) / 2.0
    return ExcitationStats(
        std_db=std_db, mean_db=mean_db, hist_centers=centers,
        hist_counts=counts, n_zero_excluded=n_zero,
    )
