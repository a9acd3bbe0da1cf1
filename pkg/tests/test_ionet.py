import math

import numpy as np
import pytest

from impc import autodiff as ad
from impc import dynamics as dyn
from impc.ionet import (CHECKPOINT_VERSION, ImuEstimator, MlpWeights, NetConfig, denoise, denoise_rows, estimate_state,
                        load_checkpoint, mlp_forward, preintegrate, rate_at_end, save_checkpoint, so3_exp)
from impc.sensors import ImuSample, NoiseModel
from impc.simulation import Plant, PlantConfig
from impc.trainer import Adam

P = dyn.VehicleParams()


def hover_window(n=4, rng=None):
    raw = np.tile([0.0, 0.0, 0.0, 0.0, 0.0, dyn.GRAVITY], (n, 1))
    if rng is not None:
        raw = raw + rng.normal(0, [0.1, 0.1, 0.1, 0.5, 0.5, 0.5], raw.shape)
    return raw


def trained_weights(seed=0):
    """Random non-zero head so every layer matters."""
    w = MlpWeights.init(seed=seed)
    rng = np.random.default_rng(seed + 100)
    W, b = w.layers[-1]
    w.layers[-1] = (rng.normal(0, 0.3, W.shape), rng.normal(0, 0.3, b.shape))
    return w


# ---------------------------------------------------------------- network


def test_zero_head_is_identity():
    raw = hover_window(rng=np.random.default_rng(0))
    out = denoise(raw, MlpWeights.init(seed=3))
    np.testing.assert_array_equal(out, raw)


def test_zero_head_copy_restores_identity():
    raw = hover_window(rng=np.random.default_rng(1))
    w = trained_weights()
    assert not np.array_equal(denoise(raw, w), raw)
    np.testing.assert_array_equal(denoise(raw, w.zero_head()), raw)


@pytest.mark.parametrize("n", [1, 3, 5, 8])
def test_wrong_window_length_rejected(n):
    with pytest.raises(ValueError):
        denoise(hover_window(n), MlpWeights.init())


def test_window_accepts_samples():
    samples = [ImuSample(0.005 * k, np.zeros(3), np.array([0, 0, dyn.GRAVITY])) for k in range(4)]
    np.testing.assert_array_equal(denoise(samples, MlpWeights.init()), hover_window())


def test_bounded_head_limits_correction():
    w = trained_weights()
    W, b = w.layers[-1]
    w.layers[-1] = (W, b + 1e3)
    corr = denoise(hover_window(), w) - hover_window()
    assert np.all(np.abs(corr) <= w.config.out_scale + 1e-15)


def test_init_ranges_and_zero_head():
    w = MlpWeights.init(seed=4)
    for (W, b), (n_in, _) in zip(w.layers[:-1], w.config.shapes()[:-1]):
        assert np.max(np.abs(W)) <= 1 / math.sqrt(n_in)
    assert not np.any(w.layers[-1][0]) and not np.any(w.layers[-1][1])


def test_layer_shape_validation():
    cfg = NetConfig()
    layers = [(np.zeros(s), np.zeros(s[1])) for s in cfg.shapes()]
    layers[2] = (np.zeros((64, 31)), np.zeros(31))
    with pytest.raises(ValueError):
        MlpWeights(cfg, layers)
    with pytest.raises(ValueError):
        NetConfig(encoder=(6, 64, 64, 16))


def test_weight_gradients_match_finite_differences():
    w = trained_weights(1)
    raw = hover_window(rng=np.random.default_rng(2))
    proj = np.random.default_rng(3).normal(size=raw.shape)

    def f(layers):
        ww = w.copy()
        ww.layers = layers
        return float(np.sum(denoise(raw, ww) * proj))

    tape = ad.Tape()
    vars_ = w.on_tape(tape)
    g = tape.backward(ad.sum(denoise(raw, w, vars_) * proj))
    rng = np.random.default_rng(4)
    h = 1e-6
    for li, (Wv, bv) in enumerate(vars_):
        for var, which in ((Wv, 0), (bv, 1)):
            grad = g.wrt(var)
            for _ in range(3):
                idx = tuple(rng.integers(0, s) for s in var.shape)
                plus = [(W.copy(), b.copy()) for W, b in w.layers]
                minus = [(W.copy(), b.copy()) for W, b in w.layers]
                plus[li][which][idx] += h
                minus[li][which][idx] -= h
                fd = (f(plus) - f(minus)) / (2 * h)
                assert abs(grad[idx] - fd) <= 1e-5 * max(1e-3, abs(fd))


def test_synthetic_bias_is_learned():
    """Constant bias corruption, 500 supervised Adam steps: the residual bias
    shrinks by at least 90%."""
    rng = np.random.default_rng(0)
    bias = np.array([4e-3, -3e-3, 2e-3, 0.05, -0.04, 0.03])
    w = MlpWeights.init(seed=1)
    opt = Adam(1e-3)

    def batch():
        true = hover_window(16, rng)
        return true, true + bias

    for _ in range(500):
        true, raw = batch()
        tape = ad.Tape()
        vars_ = w.on_tape(tape)
        err = (denoise_rows(raw, w, vars_) - true) / w.config.out_scale
        g = tape.backward(ad.sum(err * err))
        flat = opt.update(w.flat(), [g.wrt(v) for pair in vars_ for v in pair])
        w.set_flat(flat)
    true, raw = batch()
    residual = np.mean(denoise_rows(raw, w) - true, axis=0)
    assert np.all(np.abs(residual) <= 0.1 * np.abs(bias))


@pytest.mark.parametrize("suffix", [".json", ".npz"])
def test_checkpoint_round_trip_bitwise(tmp_path, suffix):
    w = trained_weights(7)
    w.step = 123
    path = save_checkpoint(tmp_path / f"ck{suffix}", w, {"m": 1.25, "J": [0.01, 0.011, 0.02]})
    back, extra = load_checkpoint(path)
    assert back.step == 123 and back.seed == 7
    assert extra["m"] == 1.25
    for a, b in zip(w.flat(), back.flat()):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_version_checked(tmp_path):
    d = MlpWeights.init().to_dict()
    d["version"] = CHECKPOINT_VERSION + 1
    with pytest.raises(ValueError):
        MlpWeights.from_dict(d)


def test_forward_accepts_plain_arrays():
    w = trained_weights()
    x = np.random.default_rng(0).normal(size=(3, 6))
    assert mlp_forward(x, w.layers).shape == (3, 6)


# ---------------------------------------------------------------- SO(3)


def test_so3_exp_is_rotation_and_matches_axis_angle():
    phi = np.array([0.3, -0.2, 0.5])
    R = so3_exp(phi)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-14)
    np.testing.assert_allclose(R @ phi, phi, atol=1e-14)
    assert np.trace(R) == pytest.approx(1 + 2 * math.cos(np.linalg.norm(phi)), abs=1e-14)
    np.testing.assert_array_equal(so3_exp(np.zeros(3)), np.eye(3))


def test_zero_gyro_leaves_attitude():
    att = np.array([0.1, -0.2, 0.3])
    est = preintegrate(np.zeros((4, 3)), att, 0.005)
    np.testing.assert_allclose(est.value(), att, atol=1e-15)


def test_constant_yaw_rate_one_second():
    gyro = np.tile([0.0, 0.0, 1.0], (200, 1))
    est = preintegrate(gyro, np.zeros(3), 0.005)
    assert abs(est.value()[2] - 1.0) <= 1e-9
    np.testing.assert_allclose(est.value()[:2], 0.0, atol=1e-12)


def test_plant_trajectory_oracle_per_window():
    cfg = PlantConfig(control_noise=0.0, attitude_noise=0.0)
    x0 = dyn.hover_state((0.05, 0.1, -0.2))
    x0[9:12] = [0.3, -0.2, 0.1]
    plant = Plant(x0, P, cfg, NoiseModel.noiseless())
    rng = np.random.default_rng(1)
    for _ in range(25):
        att_prev = plant.x[3:6].copy()
        u = dyn.hover_input(P) + np.array([0.5, *rng.uniform(-0.05, 0.05, 3)])
        window = plant.advance(u)
        gyro = np.array([s.gyro for s in window])
        est = preintegrate(gyro, att_prev, 0.005, plant.t, [s.t for s in window])
        err = [abs(dyn.wrap_angle(e)) for e in est.value() - plant.x[3:6]]
        assert max(err) <= 1e-6


def test_causality_enforced():
    with pytest.raises(ValueError):
        preintegrate(np.zeros((2, 3)), np.zeros(3), 0.005, t=0.01, sample_times=[0.005, 0.015])
    with pytest.raises(ValueError):
        preintegrate(np.zeros((2, 3)), np.zeros(3), 0.005, sample_times=[0.01, 0.005])
    with pytest.raises(ValueError):
        preintegrate(np.zeros((2, 3)), np.zeros(3), 0.005, sample_times=[0.005])


def test_gimbal_guard_in_preintegration():
    gyro = np.array([[0.0, (math.pi / 2 - 1e-4) / 0.005, 0.0]])   # lands just short of 90 deg
    with pytest.raises(dyn.GimbalLockError):
        preintegrate(gyro, np.zeros(3), 0.005)


def test_attitude_gradient_wrt_gyro():
    tape = ad.Tape()
    g0 = np.array([[0.2, -0.1, 0.3], [0.1, 0.2, -0.2], [0.0, 0.3, 0.1]])
    gv = tape.var(g0)
    att = np.array([0.1, 0.2, -0.3])
    w = np.array([0.7, -0.4, 0.2])
    grad = tape.backward(ad.dot(preintegrate(gv, att, 0.05).euler, w)).wrt(gv)
    h = 1e-6
    for idx in np.ndindex(g0.shape):
        e = np.zeros_like(g0)
        e[idx] = h
        fd = (preintegrate(g0 + e, att, 0.05).value() @ w - preintegrate(g0 - e, att, 0.05).value() @ w) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_rate_at_end_exact_for_linear_rate():
    # rate-integrating samples of w(t) = a + b t are interval means
    a, b, dt = np.array([0.1, -0.2, 0.3]), np.array([2.0, 1.0, -3.0]), 0.005
    ends = dt * np.arange(1, 5)
    samples = np.array([a + b * (t - dt / 2) for t in ends])
    np.testing.assert_allclose(rate_at_end(samples), a + b * ends[-1], atol=1e-15)


# ---------------------------------------------------------------- state


def test_estimate_state_hover_equals_truth():
    est = ImuEstimator(None, np.zeros(3), 0.005)
    window = [ImuSample(0.005 * (k + 1), np.zeros(3), np.array([0, 0, dyn.GRAVITY])) for k in range(4)]
    x = est.update(window)
    np.testing.assert_array_equal(x, dyn.hover_state())


def test_estimate_state_yaw_spin_one_second():
    est = ImuEstimator(None, np.zeros(3), 0.005)
    for k in range(50):
        window = [ImuSample(0.005 * (4 * k + i + 1), np.array([0, 0, 1.0]), np.array([0, 0, dyn.GRAVITY]))
                  for i in range(4)]
        est.update(window)
    x = est.state()
    assert x[5] == pytest.approx(1.0, abs=1e-9)
    assert x[11] == pytest.approx(1.0, abs=1e-12)


def test_estimate_state_translation_from_truth():
    x = estimate_state(np.array([0.1, 0.2, 0.3]), np.array([1.0, 2, 3]), [4, 5, 6], [7, 8, 9])
    np.testing.assert_array_equal(x, [4, 5, 6, 0.1, 0.2, 0.3, 7, 8, 9, 1, 2, 3])
