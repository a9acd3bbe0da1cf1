import math

import numpy as np
import pytest

from impc import dynamics as dyn
from impc.ionet import preintegrate
from impc.sensors import (Imu, ImuSample, NoiseModel, SensorNoise, Trajectory, WindEvent, g365_gyro,
                          inject_plant_noise, read_imu_csv, sample_imu, wind_wrench, write_imu_csv)
from impc.simulation import Plant, PlantConfig

P = dyn.VehicleParams()


def hover_traj(n=20, dt=1e-3, att=(0.0, 0.0, 0.0)):
    tr = Trajectory(dt)
    x = dyn.hover_state(att)
    for i in range(n + 1):
        tr.append(i * dt, x, np.zeros(3))
    return tr


def test_zero_noise_hover_reads_gravity():
    imu = Imu(NoiseModel.noiseless())
    s = sample_imu(hover_traj(), imu, 0.01)
    np.testing.assert_array_equal(s.gyro, 0.0)
    np.testing.assert_allclose(s.accel, [0, 0, dyn.GRAVITY], atol=1e-15)


def test_constant_yaw_rate_reads_exactly():
    dt = 1e-3
    tr = Trajectory(dt)
    for i in range(21):
        x = dyn.hover_state((0.0, 0.0, dyn.wrap_angle(i * dt)))
        x[11] = 1.0
        tr.append(i * dt, x, np.zeros(3))
    s = sample_imu(tr, Imu(NoiseModel.noiseless()), 0.02)
    np.testing.assert_allclose(s.gyro, [0, 0, 1.0], atol=1e-12)


def test_off_grid_and_out_of_range_times_rejected():
    imu = Imu(NoiseModel.noiseless())
    tr = hover_traj()
    with pytest.raises(ValueError):
        sample_imu(tr, imu, 0.0123)
    with pytest.raises(ValueError):
        sample_imu(tr, imu, 0.5)
    with pytest.raises(ValueError):
        sample_imu(tr, imu, 0.0)   # no preceding interval


def test_same_seed_same_stream():
    def stream(seed):
        imu = Imu(NoiseModel(noise_seed=seed))
        return np.array([imu.measure(k * 0.005, np.zeros(3), [0, 0, 9.81]).as_row() for k in range(50)])
    np.testing.assert_array_equal(stream(3), stream(3))
    assert not np.array_equal(stream(3), stream(4))


def test_bias_seed_identifies_the_unit():
    a, b = Imu(NoiseModel(noise_seed=1)), Imu(NoiseModel(noise_seed=2))
    np.testing.assert_array_equal(a.turn_on[0], b.turn_on[0])
    c = Imu(NoiseModel(bias_seed=8))
    assert not np.array_equal(a.turn_on[0], c.turn_on[0])


@pytest.mark.parametrize("channel", ["gyro", "accel"])
def test_white_density_matches_configured(channel):
    """Monte-Carlo oracle: mean of the two-sample Allan variance at tau = one
    sample equals density^2 / tau for white noise."""
    dens = 0.05
    n = SensorNoise(0.0, 0.0, dens)
    z = SensorNoise(0.0, 0.0, 0.0)
    model = NoiseModel(gyro=n if channel == "gyro" else z, accel=n if channel == "accel" else z, noise_seed=11)
    imu = Imu(model)
    col = slice(0, 3) if channel == "gyro" else slice(3, 6)
    xs = np.array([imu.measure(k * imu.dt, np.zeros(3), np.zeros(3)).as_row()[col] for k in range(100_000)])
    avar = 0.5 * np.mean(np.diff(xs, axis=0) ** 2, axis=0)
    est = np.sqrt(avar * imu.dt)
    np.testing.assert_allclose(est, dens, rtol=0.1)


def test_turn_on_bias_statistics():
    sig = g365_gyro().initial_bias
    draws = np.array([Imu(NoiseModel(bias_seed=s)).turn_on[0] for s in range(2000)]).ravel()
    assert abs(np.std(draws) / sig - 1) < 0.05
    assert sig == pytest.approx(360 * math.pi / 180 / 3600)


def test_plant_noise_identity_and_statistics():
    rng = np.random.default_rng(0)
    v = np.array([1.0, 2.0])
    out = inject_plant_noise(v, 0.0, rng)
    np.testing.assert_array_equal(out, v)
    assert out is not v
    d = inject_plant_noise(np.zeros(1_000_000), 1e-4, np.random.default_rng(1))
    assert abs(np.std(d) / 1e-4 - 1) < 0.01
    a = inject_plant_noise(np.zeros(5), 0.1, np.random.default_rng(9))
    b = inject_plant_noise(np.zeros(5), 0.1, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_wind_drag_force_hand_value():
    ev = WindEvent(kind="step", start=0.0, duration=1.0, speed=10.0, direction=(1, 0, 0))
    f, _ = wind_wrench(ev, 0.5)
    np.testing.assert_allclose(f, [6.125, 0, 0], rtol=1e-12)


def test_wind_zero_speed_and_quadratic_law():
    f0, t0 = wind_wrench(WindEvent(speed=0.0), 0.3)
    assert not np.any(f0) and not np.any(t0)
    f1, _ = wind_wrench(WindEvent(speed=7.0), 0.3)
    f2, _ = wind_wrench(WindEvent(speed=14.0), 0.3)
    assert np.linalg.norm(f2) == pytest.approx(4 * np.linalg.norm(f1), rel=1e-12)


def test_wind_torque_is_lever_cross_force():
    ev = WindEvent(speed=10.0, direction=(0, 1, 0), lever=0.05)
    f, tau = wind_wrench(ev, 0.3)
    np.testing.assert_allclose(tau, np.cross([0, 0, 0.05], f), atol=1e-15)


@pytest.mark.parametrize("kind,expected", [("step", 300), ("impulse", 1)])
def test_wind_active_steps(kind, expected):
    ev = WindEvent(kind=kind, start=0.2, duration=0.3, speed=5.0)
    ticks = sum(bool(np.any(wind_wrench(ev, k * 1e-3, 1e-3)[0])) for k in range(1, 1001))
    assert ticks == expected


def test_wind_validation():
    with pytest.raises(ValueError):
        WindEvent(speed=-1.0)
    with pytest.raises(ValueError):
        WindEvent(kind="gust")
    assert np.linalg.norm(WindEvent(direction=(3, 4, 0)).direction) == pytest.approx(1.0)


def test_noise_free_round_trip_over_one_second():
    """Integrate plant-sampled gyro readings back to attitude."""
    cfg = PlantConfig(control_noise=0.0, attitude_noise=0.0)
    x0 = dyn.hover_state((0.1, -0.05, 0.3))
    plant = Plant(x0, P, cfg, NoiseModel.noiseless())
    att = x0[3:6].copy()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        u = dyn.hover_input(P) + np.array([0.0, *rng.uniform(-0.02, 0.02, 3)])
        window = plant.advance(u)
        gyro = np.array([s.gyro for s in window])
        att = preintegrate(gyro, att, 1.0 / cfg.imu_rate).value()
        worst = max(worst, max(abs(dyn.wrap_angle(e)) for e in att - plant.x[3:6]))
    assert worst <= 1e-6


def test_imu_csv_round_trip(tmp_path):
    imu = Imu(NoiseModel(noise_seed=2))
    samples = [imu.measure(k * 0.005, np.ones(3) * 0.1, [0, 0, 9.81]) for k in range(10)]
    p = tmp_path / "imu.csv"
    write_imu_csv(p, samples)
    back = read_imu_csv(p)
    assert len(back) == 10
    for a, b in zip(samples, back):
        assert a.t == b.t
        np.testing.assert_array_equal(a.as_row(), b.as_row())


def test_sample_row_layout():
    s = ImuSample(0.0, np.array([1.0, 2, 3]), np.array([4.0, 5, 6]))
    np.testing.assert_array_equal(s.as_row(), [1, 2, 3, 4, 5, 6])
