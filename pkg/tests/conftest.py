"""Shared helpers: independent oracles used across the test suite."""

import numpy as np
import pytest

import fdnopt


def state_transition_matrix(a: np.ndarray, delays) -> np.ndarray:
    """Dense single-sample state matrix whose eigenvalues are the poles.

    The state collects every delay-line slot; each line is a shift register
    whose newest slot is fed by the feedback combination of the other
    lines' oldest slots. Independent of the package's determinant-based
    pole path, so it serves as the oracle for it.
    """
    m = np.asarray(delays, dtype=int)
    n = m.size
    total = int(m.sum())
    starts = np.concatenate([[0], np.cumsum(m)])
    e = np.zeros((total, total))
    for i in range(n):
        si = starts[i]
        for j in range(m[i] - 1):
            e[si + j + 1, si + j] = 1.0
        for j in range(n):
            e[si, starts[j] + m[j] - 1] = a[i, j]
    return e


def match_sorted_by_angle(x: np.ndarray, y: np.ndarray):
    """Pair two conjugate-closed point sets by angle for comparison."""
    xs = x[np.lexsort((np.abs(x), np.angle(x)))]
    ys = y[np.lexsort((np.abs(y), np.angle(y)))]
    return xs, ys


def random_points_upper_circle(count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.exp(1j * rng.uniform(0.0, np.pi, count))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def small_config(seed=0, variant="orthogonal", n=4, delays=(5, 7, 9, 11), gamma=0.9,
                 stage_delays=None, n_stages=2):
    return fdnopt.initial_config(
        n, list(delays), seed=seed, variant=variant, gamma=gamma,
        sample_rate=48000, n_stages=n_stages, stage_delays=stage_delays,
    )
