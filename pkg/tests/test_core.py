import json

import numpy as np
import pytest

from conftest import random_points_upper_circle, small_config
from fdnopt.core import (
    FdnConfig,
    eval_transfer,
    eval_transfer_householder,
    render_ir,
    render_samples,
    transfer_batch,
)
from fdnopt.errors import ConfigurationError, SingularResolventError
from fdnopt.param import HouseholderParam, OrthogonalParam, ScatteringParam


def comb_config(m=2, gamma=0.5, fs=48000):
    # single line with feedback gamma**m, unit in/out gains
    return FdnConfig(
        delays=[m], input_gains=[1.0], output_gains=[1.0], direct_gain=0.0,
        feedback=OrthogonalParam(w=np.zeros((1, 1))), gamma=gamma, sample_rate=fs,
    )


# ---- transfer function -------------------------------------------------------


def test_single_loop_matches_comb_closed_form():
    m, gamma = 3, 0.8
    cfg = comb_config(m=m, gamma=gamma)
    a = gamma ** m
    points = random_points_upper_circle(16, seed=0)
    for sample in eval_transfer(cfg, points):
        z = sample.point
        expected = z ** (-m) / (1.0 - a * z ** (-m))
        assert abs(sample.total - expected) < 1e-12


def test_no_feedback_reduces_to_delay_taps():
    rng = np.random.default_rng(4)
    delays = np.array([3, 5, 8])
    b = rng.normal(size=3)
    c = rng.normal(size=3)
    z = random_points_upper_circle(12, seed=1)
    totals, channels = transfer_batch(np.zeros((3, 3)), delays, b, c, 0.0, z)
    expected = (c * b)[None, :] * z[:, None] ** (-delays[None, :])
    np.testing.assert_allclose(channels, expected, atol=1e-14)
    np.testing.assert_allclose(totals, expected.sum(axis=1), atol=1e-13)


def test_transfer_matches_dft_of_rendering():
    # oracle: time-domain recursion + FFT of the (truncated) response
    for seed in range(3):
        cfg = small_config(seed=seed, delays=(13, 17, 19, 23), gamma=0.96)
        length = 8192
        h = render_ir(cfg, length)
        assert np.abs(h[-100:]).max() < 1e-9 * np.abs(h).max()
        z = np.exp(2j * np.pi * np.arange(length) / length)
        totals = np.array([s.total for s in eval_transfer(cfg, z)])
        spectrum = np.fft.fft(h)
        err = np.max(np.abs(totals - spectrum)) / np.max(np.abs(totals))
        assert err < 1e-6


def test_channel_sum_equals_total_without_direct_gain():
    cfg = small_config(seed=2)
    for sample in eval_transfer(cfg, random_points_upper_circle(32, seed=5)):
        assert abs(sample.channels.sum() - sample.total) < 1e-12


def test_direct_gain_added_to_total():
    cfg = small_config(seed=2)
    cfg_d = FdnConfig(
        delays=cfg.delays, input_gains=cfg.input_gains, output_gains=cfg.output_gains,
        direct_gain=0.25, feedback=cfg.feedback, gamma=cfg.gamma,
        sample_rate=cfg.sample_rate,
    )
    z = random_points_upper_circle(8, seed=6)
    plain = eval_transfer(cfg, z)
    shifted = eval_transfer(cfg_d, z)
    for s0, s1 in zip(plain, shifted):
        assert abs((s1.total - s0.total) - 0.25) < 1e-13
        np.testing.assert_allclose(s1.channels, s0.channels, atol=1e-14)


def test_conjugate_points_give_conjugate_responses():
    cfg = small_config(seed=7)
    z = random_points_upper_circle(10, seed=8)
    upper = eval_transfer(cfg, z)
    lower = eval_transfer(cfg, np.conj(z))
    for su, sl in zip(upper, lower):
        assert abs(np.conj(su.total) - sl.total) < 1e-12


def test_eval_rejects_zero_point_and_bad_dims():
    cfg = small_config()
    with pytest.raises(ConfigurationError):
        eval_transfer(cfg, [0.0])
    with pytest.raises(ConfigurationError):
        FdnConfig(delays=[3, 5], input_gains=[1.0], output_gains=[1.0, 1.0],
                  direct_gain=0.0, feedback=OrthogonalParam(np.zeros((2, 2))),
                  gamma=0.9, sample_rate=48000)


def test_singular_resolvent_reports_point():
    # lossless single loop has a pole exactly at z = 1
    cfg = comb_config(m=4, gamma=1.0)
    with pytest.raises(SingularResolventError) as excinfo:
        eval_transfer(cfg, [1.0 + 0.0j])
    assert "1" in str(excinfo.value)


# ---- householder fast path ----------------------------------------------------


def test_householder_axis_vector_decouples_into_combs():
    delays = np.array([4, 6, 9])
    cfg = FdnConfig(
        delays=delays, input_gains=np.ones(3), output_gains=np.ones(3),
        direct_gain=0.0, feedback=HouseholderParam(v=np.array([1.0, 0.0, 0.0])),
        gamma=0.9, sample_rate=48000,
    )
    signs = np.array([-1.0, 1.0, 1.0])
    a_line = signs * 0.9 ** delays.astype(float)
    for sample in eval_transfer_householder(cfg, random_points_upper_circle(12, seed=9)):
        z = sample.point
        expected = (z ** (-delays.astype(float)) / (1.0 - a_line * z ** (-delays.astype(float)))).sum()
        assert abs(sample.total - expected) < 1e-12


def test_householder_fast_path_matches_generic():
    rng = np.random.default_rng(12)
    cfg = FdnConfig(
        delays=rng.integers(5, 40, 8), input_gains=rng.normal(size=8),
        output_gains=rng.normal(size=8), direct_gain=0.0,
        feedback=HouseholderParam(v=rng.normal(size=8)), gamma=0.93,
        sample_rate=48000,
    )
    z = random_points_upper_circle(32, seed=13)
    generic = eval_transfer(cfg, z)
    fast = eval_transfer_householder(cfg, z)
    for sg, sf in zip(generic, fast):
        assert abs(sf.total - sg.total) / abs(sg.total) < 1e-10
        np.testing.assert_allclose(sf.channels, sg.channels, rtol=1e-9, atol=1e-13)


def test_householder_fast_path_scale_invariant():
    rng = np.random.default_rng(14)
    v = rng.normal(size=5)
    z = random_points_upper_circle(8, seed=15)
    mk = lambda vec: FdnConfig(
        delays=[3, 5, 7, 11, 13], input_gains=np.ones(5), output_gains=np.ones(5),
        direct_gain=0.0, feedback=HouseholderParam(v=vec), gamma=0.9, sample_rate=48000,
    )
    a = eval_transfer_householder(mk(v), z)
    b = eval_transfer_householder(mk(5.0 * v), z)
    for sa, sb in zip(a, b):
        assert abs(sa.total - sb.total) < 1e-13


def test_householder_fast_path_requires_householder():
    with pytest.raises(ConfigurationError):
        eval_transfer_householder(small_config(), [1.0j])


# ---- rendering -----------------------------------------------------------------


def test_render_no_feedback_single_taps():
    delays = np.array([3, 6, 10])
    h = render_samples(np.zeros((3, 3)), delays, np.ones(3), np.ones(3), 0.0, 16)
    expected = np.zeros(16)
    expected[delays] = 1.0
    np.testing.assert_allclose(h, expected, atol=1e-15)


def test_render_comb_geometric_series():
    cfg = comb_config(m=2, gamma=0.5)  # feedback gain 0.25
    h = render_ir(cfg, 9)
    np.testing.assert_allclose(
        h, [0, 0, 1, 0, 0.25, 0, 0.0625, 0, 0.015625], atol=1e-15
    )


def test_render_first_sample_is_direct_gain():
    cfg = small_config(seed=1)
    cfg = FdnConfig(
        delays=cfg.delays, input_gains=cfg.input_gains, output_gains=cfg.output_gains,
        direct_gain=0.7, feedback=cfg.feedback, gamma=cfg.gamma, sample_rate=48000,
    )
    h = render_ir(cfg, 4)
    assert h[0] == 0.7


def test_damped_render_equals_scaled_lossless_with_compensated_output():
    # the damped response is gamma^n times a lossless render whose output
    # gains are divided by gamma^m (absorption acts after the first pass)
    cfg = small_config(seed=3, delays=(6, 8, 11, 14), gamma=0.9)
    n = 600
    damped = render_ir(cfg, n)
    lossless = FdnConfig(
        delays=cfg.delays, input_gains=cfg.input_gains,
        output_gains=cfg.output_gains / cfg.gamma ** cfg.delays.astype(float),
        direct_gain=0.0, feedback=cfg.feedback, gamma=1.0, sample_rate=48000,
    )
    restored = render_ir(lossless, n) * cfg.gamma ** np.arange(n)
    np.testing.assert_allclose(damped, restored, atol=1e-12)


def test_render_length_validation():
    with pytest.raises(ConfigurationError):
        render_ir(small_config(), 0)


# ---- scattering variant ---------------------------------------------------------


def test_scattering_constant_chain_reduces_to_scalar_variant():
    # one mixing stage with all stage delays zero realizes a constant U(z)
    rng = np.random.default_rng(21)
    w = rng.uniform(-0.5, 0.5, (4, 4))
    delays = np.array([9, 12, 15, 19])
    b, c = rng.normal(size=4), rng.normal(size=4)
    zeros = np.zeros(4, dtype=int)
    scat = FdnConfig(
        delays=delays, input_gains=b, output_gains=c, direct_gain=0.0,
        feedback=ScatteringParam(w_stages=(w,), stage_delays=(zeros, zeros)),
        gamma=0.92, sample_rate=48000,
    )
    scalar = FdnConfig(
        delays=delays, input_gains=b, output_gains=c, direct_gain=0.0,
        feedback=OrthogonalParam(w=w), gamma=0.92, sample_rate=48000,
    )
    z = random_points_upper_circle(16, seed=22)
    for ss, sc in zip(eval_transfer(scat, z), eval_transfer(scalar, z)):
        assert abs(ss.total - sc.total) < 1e-12
    np.testing.assert_allclose(render_ir(scat, 300), render_ir(scalar, 300), atol=1e-13)


def test_scattering_render_matches_transfer():
    cfg = small_config(
        seed=5, variant="scattering", delays=(24, 30, 37, 43), gamma=0.85,
        stage_delays=(np.array([2, 3, 2, 3]), np.array([0, 1, 2, 1]), np.array([3, 2, 1, 2])),
    )
    length = 4096
    h = render_ir(cfg, length)
    assert np.abs(h[-50:]).max() < 1e-9
    z = np.exp(2j * np.pi * np.arange(length) / length)
    totals = np.array([s.total for s in eval_transfer(cfg, z)])
    err = np.max(np.abs(totals - np.fft.fft(h))) / np.max(np.abs(totals))
    assert err < 1e-8


# ---- serialization ---------------------------------------------------------------


@pytest.mark.parametrize("variant", ["orthogonal", "householder", "scattering"])
def test_config_json_round_trip(tmp_path, variant):
    cfg = small_config(seed=6, variant=variant)
    path = tmp_path / "cfg.json"
    cfg.save(path)
    back = FdnConfig.load(path)
    np.testing.assert_array_equal(back.delays, cfg.delays)
    np.testing.assert_array_equal(back.input_gains, cfg.input_gains)
    np.testing.assert_array_equal(back.output_gains, cfg.output_gains)
    assert back.gamma == cfg.gamma
    assert type(back.feedback) is type(cfg.feedback)
    z = random_points_upper_circle(4, seed=23)
    for s0, s1 in zip(eval_transfer(cfg, z), eval_transfer(back, z)):
        assert s0.total == s1.total


def test_config_json_rejects_inconsistent_n(tmp_path):
    cfg = small_config()
    doc = cfg.to_json_dict()
    doc["n"] = 7
    with pytest.raises(ConfigurationError):
        FdnConfig.from_json_dict(doc)


def test_config_json_is_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    small_config(seed=9).save(a)
    small_config(seed=9).save(b)
    assert a.read_bytes() == b.read_bytes()
