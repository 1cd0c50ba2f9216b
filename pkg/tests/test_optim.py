import numpy as np
import pytest
from dataclasses import replace

from conftest import random_points_upper_circle, small_config
from fdnopt.core import FdnConfig, TransferSample, eval_transfer
from fdnopt.errors import ConfigurationError, ConvergenceError, DesignError
from fdnopt.optim import (
    Adam,
    TrainConfig,
    adam_step,
    batch_sampler,
    design_delays,
    design_stage_delays,
    frequency_grid,
    init_params,
    loss_gradients,
    sparsity_loss,
    spectral_loss,
    split_indices,
    total_loss,
    train,
)
from fdnopt.param import HouseholderParam, OrthogonalParam, ScatteringParam, skew_expm


# ---- grid and batching ------------------------------------------------------


def test_frequency_grid_smallest():
    np.testing.assert_allclose(frequency_grid(2), [1.0, 1.0j], atol=1e-16)


def test_frequency_grid_properties():
    grid = frequency_grid(257)
    np.testing.assert_allclose(np.abs(grid), 1.0, atol=1e-15)
    assert grid[0] == 1.0
    assert np.all(np.angle(grid[1:]) > 0)
    spacing = np.diff(np.angle(grid))
    np.testing.assert_allclose(spacing, np.pi / 257, atol=1e-12)


def test_split_indices_cover_grid():
    train_idx, val_idx = split_indices(1000, 0.8)
    assert train_idx.size + val_idx.size == 1000
    assert np.intersect1d(train_idx, val_idx).size == 0
    assert abs(val_idx.size - 200) <= 1
    # stratified: validation points appear regularly, not clustered
    assert np.all(np.diff(val_idx) == 5)


def test_batch_sampler_partition_and_determinism():
    idx = np.arange(211)
    batches_a = list(batch_sampler(idx, 50, seed=9))
    batches_b = list(batch_sampler(idx, 50, seed=9))
    assert len(batches_a) == 5  # final ragged batch of 11
    assert batches_a[-1].size == 11
    for ba, bb in zip(batches_a, batches_b):
        np.testing.assert_array_equal(ba, bb)
    union = np.sort(np.concatenate(batches_a))
    np.testing.assert_array_equal(union, idx)
    # a batch as large as the split yields a single full batch
    single = list(batch_sampler(idx, 211, seed=0))
    assert len(single) == 1 and single[0].size == 211


def test_batch_sampler_different_seeds_differ():
    idx = np.arange(64)
    a = np.concatenate(list(batch_sampler(idx, 16, seed=1)))
    b = np.concatenate(list(batch_sampler(idx, 16, seed=2)))
    assert not np.array_equal(a, b)


# ---- losses ------------------------------------------------------------------


def _sample(total, channels):
    return TransferSample(point=1.0j, total=total, channels=np.asarray(channels, complex))


def test_spectral_loss_flat_target_met():
    samples = [_sample(1.0, [1.0, 1.0, 1.0, 1.0])] * 3
    assert spectral_loss(samples, 4) == 0.0


def test_spectral_loss_all_zero():
    samples = [_sample(0.0, [0.0, 0.0, 0.0, 0.0])] * 2
    assert abs(spectral_loss(samples, 4) - 2.0) < 1e-15


def test_spectral_loss_matches_independent_script():
    rng = np.random.default_rng(5)
    totals = rng.normal(size=8) + 1j * rng.normal(size=8)
    chans = rng.normal(size=(8, 4)) + 1j * rng.normal(size=(8, 4))
    samples = [_sample(totals[i], chans[i]) for i in range(8)]
    # independent re-implementation, scalar loops only
    acc = 0.0
    for i in range(8):
        chan_term = sum((abs(chans[i, j]) - 1.0) ** 2 for j in range(4)) / 4.0
        acc += chan_term + (abs(totals[i]) - 1.0) ** 2
    expected = acc / 8.0
    assert abs(spectral_loss(samples, 4) - expected) < 1e-12
    # without the channel term
    acc2 = sum((abs(totals[i]) - 1.0) ** 2 for i in range(8)) / 8.0
    assert abs(spectral_loss(samples, 4, channel_term=False) - acc2) < 1e-12


def test_sparsity_loss_bounds():
    assert abs(sparsity_loss(np.eye(4)) - 1.0) < 1e-15
    hadamard = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]]) / 2.0
    assert abs(sparsity_loss(hadamard)) < 1e-15
    perm = np.eye(4)[[2, 0, 3, 1]]
    assert abs(sparsity_loss(perm) - 1.0) < 1e-15
    for seed in range(5):
        u = skew_expm(np.random.default_rng(seed).uniform(-0.5, 0.5, (4, 4)))
        assert 0.0 <= sparsity_loss(u) <= 1.0


def test_total_loss_arithmetic():
    assert abs(total_loss(0.5, 0.2, 1.0).total - 0.7) < 1e-15
    assert abs(total_loss(0.5, 0.2, 0.0).total - 0.5) < 1e-15
    a1 = total_loss(0.3, 0.4, 2.0)
    assert abs(a1.total - (a1.spectral + a1.alpha * a1.sparsity)) < 1e-15


# ---- gradients ----------------------------------------------------------------


def _fd_gradient(config, key, z, alpha, channel_term, eps=1e-6):
    """Central finite differences on the total loss, coordinate by coordinate."""

    def loss_of(cfg):
        loss, _ = loss_gradients(cfg, z, alpha, channel_term)
        return loss.total

    def rebuild(cfg, key, arr):
        if key in ("input_gains", "output_gains"):
            return replace(cfg, **{key: arr})
        if key == "w":
            return replace(cfg, feedback=OrthogonalParam(w=arr))
        if key == "v":
            return replace(cfg, feedback=HouseholderParam(v=arr))
        raise KeyError(key)

    base = getattr(config, key) if key in ("input_gains", "output_gains") else (
        config.feedback.w if key == "w" else config.feedback.v
    )
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = base.copy()
        plus[idx] += eps
        minus = base.copy()
        minus[idx] -= eps
        grad[idx] = (loss_of(rebuild(config, key, plus)) -
                     loss_of(rebuild(config, key, minus))) / (2 * eps)
    return grad


def _assert_grad_close(analytic, fd, rtol=1e-5, atol=1e-8):
    err = np.abs(analytic - fd)
    scale = np.maximum(np.abs(analytic), np.abs(fd))
    assert np.all(err <= atol + rtol * scale), (
        f"gradient mismatch: max abs {err.max():.3e}"
    )


@pytest.mark.parametrize("variant,key", [("orthogonal", "w"), ("householder", "v")])
def test_gradients_match_finite_differences(variant, key):
    cfg = small_config(seed=3, variant=variant, delays=(5, 7, 9, 11), gamma=0.9)
    z = random_points_upper_circle(16, seed=4)
    _, grads = loss_gradients(cfg, z, alpha=1.0, channel_term=True)
    for name in ("input_gains", "output_gains", key):
        fd = _fd_gradient(cfg, name, z, 1.0, True)
        _assert_grad_close(grads[name], fd)


def test_gradients_scattering_finite_differences():
    cfg = small_config(
        seed=5, variant="scattering", delays=(15, 17, 19, 23), gamma=0.9,
        stage_delays=(np.array([2, 3, 2, 3]), np.array([1, 0, 2, 1]), np.array([3, 1, 0, 2])),
    )
    z = random_points_upper_circle(12, seed=6)
    _, grads = loss_gradients(cfg, z, alpha=1.0, channel_term=True)

    def loss_of(stages):
        fb = ScatteringParam(w_stages=tuple(stages), stage_delays=cfg.feedback.stage_delays)
        loss, _ = loss_gradients(replace(cfg, feedback=fb), z, 1.0, True)
        return loss.total

    eps = 1e-6
    for k in range(2):
        fd = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                plus = [w.copy() for w in cfg.feedback.w_stages]
                plus[k][i, j] += eps
                minus = [w.copy() for w in cfg.feedback.w_stages]
                minus[k][i, j] -= eps
                fd[i, j] = (loss_of(plus) - loss_of(minus)) / (2 * eps)
        _assert_grad_close(grads["w_stages"][k], fd)


def test_gradients_feedback_free_closed_form():
    # with vanishing feedback (gamma**m ~ 1e-15) the transfer is a plain
    # delay tap sum and the gain gradients have hand-derivable closed forms
    rng = np.random.default_rng(9)
    delays = np.array([5, 7, 9, 11])
    b, c = rng.normal(size=4), rng.normal(size=4)
    cfg = FdnConfig(
        delays=delays, input_gains=b, output_gains=c, direct_gain=0.0,
        feedback=OrthogonalParam(w=np.zeros((4, 4))), gamma=1e-3, sample_rate=48000,
    )
    z = random_points_upper_circle(8, seed=10)
    _, grads = loss_gradients(cfg, z, alpha=0.0, channel_term=True)
    taps = z[:, None] ** (-delays.astype(float))
    h_i = (c * b)[None, :] * taps
    h = h_i.sum(axis=1)
    g_h = 2 * (np.abs(h) - 1) * np.conj(h) / np.abs(h) / z.size
    g_hi = 2 * (np.abs(h_i) - 1) * np.conj(h_i) / np.abs(h_i) / (4 * z.size)
    grad_b_hand = np.real((g_hi + g_h[:, None]) * c[None, :] * taps).sum(axis=0)
    grad_c_hand = np.real((g_hi + g_h[:, None]) * b[None, :] * taps).sum(axis=0)
    np.testing.assert_allclose(grads["input_gains"], grad_b_hand, atol=1e-12)
    np.testing.assert_allclose(grads["output_gains"], grad_c_hand, atol=1e-12)


def test_loss_gradients_spectral_matches_eval_transfer():
    cfg = small_config(seed=11)
    z = random_points_upper_circle(20, seed=12)
    loss, _ = loss_gradients(cfg, z, alpha=0.0, channel_term=True)
    samples = eval_transfer(cfg, z)
    assert abs(loss.spectral - spectral_loss(samples, cfg.n)) < 1e-12


# ---- Adam ----------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    adam = Adam(learning_rate=0.1)
    params = {"x": np.array([1.0, -2.0])}
    out = adam.step(params, {"x": np.zeros(2)})
    np.testing.assert_array_equal(out["x"], params["x"])


def test_adam_first_step_is_signed_learning_rate():
    adam = Adam(learning_rate=1e-3)
    g = np.array([3.0, -0.5, 1e-4])
    out = adam.step({"x": np.zeros(3)}, {"x": g})
    np.testing.assert_allclose(out["x"], -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_matches_scripted_reference():
    # independent scalar reference, straight from the update equations
    beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 0.05
    grads = np.array([0.5, -1.0, 2.0, 0.1, -0.3, 0.8, 0.0, -2.5, 1.5, 0.2])
    theta_ref, m, v = 1.0, 0.0, 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta_ref -= lr * m_hat / (np.sqrt(v_hat) + eps)
        trace.append(theta_ref)
    adam = Adam(learning_rate=lr)
    params = {"x": np.array([1.0])}
    for t, g in enumerate(grads):
        params = adam_step(adam, params, {"x": np.array([g])})
        assert abs(params["x"][0] - trace[t]) < 1e-12


def test_adam_handles_lists_of_arrays():
    adam = Adam(learning_rate=0.1)
    params = {"w_stages": [np.ones((2, 2)), np.zeros((2, 2))]}
    grads = {"w_stages": [np.full((2, 2), 0.5), np.full((2, 2), -0.5)]}
    out = adam.step(params, grads)
    assert out["w_stages"][0].shape == (2, 2)
    assert np.all(out["w_stages"][0] < 1.0)
    assert np.all(out["w_stages"][1] > 0.0)


# ---- initialization -------------------------------------------------------------


def test_init_params_deterministic():
    a = init_params(4, seed=7)
    b = init_params(4, seed=7)
    for key in a:
        np.testing.assert_array_equal(a[key], b[key])
    c = init_params(4, seed=8)
    assert not np.array_equal(a["w"], c["w"])


def test_init_params_gain_moments():
    # pool many seeds: entries of the gain vectors are N(0, 1/N) for N=4
    draws = []
    for seed in range(12500):
        raw = init_params(4, seed=seed)
        draws.append(raw["input_gains"])
        draws.append(raw["output_gains"])
    pool = np.concatenate(draws)
    assert pool.size == 100000
    assert abs(pool.mean()) < 3.0 * 0.5 / np.sqrt(pool.size)
    assert abs(pool.var() - 0.25) < 0.05 * 0.25


def test_init_params_uniform_support():
    for seed in range(50):
        raw = init_params(4, seed=seed)
        assert np.all(np.abs(raw["w"]) < 0.5)
        hh = init_params(4, seed=seed, variant="householder")
        assert np.all(np.abs(hh["v"]) < 0.5)
        sc = init_params(4, seed=seed, variant="scattering", n_stages=3)
        assert len(sc["w_stages"]) == 3
        for w in sc["w_stages"]:
            assert np.all(np.abs(w) < 0.5)


def test_init_params_rejects_bad_variant():
    with pytest.raises(ConfigurationError):
        init_params(4, seed=0, variant="circulant")


# ---- delay design ---------------------------------------------------------------


def test_design_delays_reference_fixture():
    delays = design_delays(4, (1499, 2999), 6000)
    np.testing.assert_array_equal(delays, [1499, 1889, 2381, 2999])
    assert delays.sum() == 8768
    for d in delays:
        assert all(d % p for p in range(2, int(d ** 0.5) + 1))


def test_design_delays_single_line():
    delays = design_delays(1, (100, 400), 1)
    target = np.sqrt(100 * 400)
    assert delays.size == 1
    # nearest prime to 200
    assert delays[0] == 199


def test_design_delays_log_spacing_and_coprimality():
    delays = design_delays(6, (997, 2099), 6000)
    assert delays.size == 6 and np.all(np.diff(delays) > 0)
    from math import gcd

    for i in range(6):
        for j in range(i + 1, 6):
            assert gcd(int(delays[i]), int(delays[j])) == 1
    ratios = delays[1:] / delays[:-1]
    assert np.max(np.abs(ratios / ratios.mean() - 1.0)) < 0.2


def test_design_delays_infeasible_reports_achievable():
    with pytest.raises(DesignError) as excinfo:
        design_delays(4, (1499, 2999), 20000)
    assert "achievable" in str(excinfo.value)
    with pytest.raises(DesignError):
        design_delays(10, (14, 20), 1)  # not enough primes


def test_design_stage_delays():
    stage = design_stage_delays(4, 3, seed=0)
    assert len(stage) == 4
    for vec in stage:
        assert vec.size == 4 and np.all(vec <= 50) and np.all(vec >= 2)


# ---- training --------------------------------------------------------------------


def tiny_train_config(seed=0, variant="orthogonal", **kw):
    fdn = small_config(seed=seed, variant=variant, delays=(13, 17, 19, 23), gamma=0.9,
                       stage_delays=(np.array([2, 3, 2, 3]), np.array([1, 2, 1, 2]))
                       if variant == "scattering" else None,
                       n_stages=1)
    defaults = dict(grid_size=2048, batch_size=256, epochs=3, gamma=0.9,
                    learning_rate=3e-3, seed=seed)
    defaults.update(kw)
    return TrainConfig(fdn=fdn, **defaults)


def test_train_reduces_loss_and_preserves_structure():
    report = train(tiny_train_config())
    assert report.records[-1].train.total < report.records[0].train.total
    u = report.final.feedback.realize()
    assert np.linalg.norm(u @ u.T - np.eye(4)) < 1e-10
    assert report.final.direct_gain == 0.0
    np.testing.assert_array_equal(report.final.delays, [13, 17, 19, 23])
    assert len(report.records) == 3
    for rec in report.records:
        assert np.isfinite(rec.validation.total)
        assert rec.wall_s >= 0.0


def test_train_zero_epochs_returns_initialization():
    tc = tiny_train_config(epochs=0)
    report = train(tc)
    assert report.records == []
    np.testing.assert_array_equal(report.final.input_gains, tc.fdn.input_gains)
    np.testing.assert_array_equal(report.final.feedback.w, tc.fdn.feedback.w)


def test_train_is_seed_deterministic():
    a = train(tiny_train_config(seed=5))
    b = train(tiny_train_config(seed=5))
    np.testing.assert_array_equal(a.final.feedback.w, b.final.feedback.w)
    np.testing.assert_array_equal(a.final.input_gains, b.final.input_gains)
    assert a.records[-1].train.total == b.records[-1].train.total


def test_train_rejects_lossless_gamma():
    with pytest.raises(ConfigurationError):
        train(tiny_train_config(gamma=1.0))


def test_train_rejects_nonzero_direct_gain():
    tc = tiny_train_config()
    bad = replace(tc, fdn=replace(tc.fdn, direct_gain=0.5))
    with pytest.raises(ConfigurationError):
        train(bad)


def test_train_divergence_guard():
    with pytest.raises(ConvergenceError):
        train(tiny_train_config(learning_rate=50.0, epochs=20))


def test_train_scattering_and_householder_variants():
    for variant in ("householder", "scattering"):
        report = train(tiny_train_config(variant=variant, epochs=2))
        assert report.records[-1].train.total < report.records[0].train.total


def test_train_config_json_round_trip(tmp_path):
    tc = tiny_train_config(seed=3)
    path = tmp_path / "train.json"
    tc.save(path)
    back = TrainConfig.load(path)
    assert back.grid_size == tc.grid_size
    assert back.seed == tc.seed
    np.testing.assert_array_equal(back.fdn.feedback.w, tc.fdn.feedback.w)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        tiny_train_config(batch_size=4096).validate()
    with pytest.raises(ConfigurationError):
        tiny_train_config(train_fraction=1.2).validate()
    with pytest.raises(ConfigurationError):
        tiny_train_config(learning_rate=-1.0).validate()
    with pytest.raises(ConfigurationError):
        tiny_train_config(alpha=-0.5).validate()