"""Closed-loop plant: 1 kHz rigid body, 200 Hz IMU, 50 Hz MPC."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .ionet import ImuEstimator, MlpWeights
from .mpc import MpcController, MpcError, MpcProblem
from .sensors import Imu, ImuSample, NoiseModel, Trajectory, WindEvent, inject_plant_noise, sample_imu, wind_wrench


@dataclass
class PlantConfig:
    plant_dt: float = 1e-3
    control_dt: float = 0.02
    imu_rate: float = 200.0
    control_noise: float = 1e-4
    attitude_noise: float = 8.73e-2
    attitude_noise_unit: str = "deg"      # "deg" | "rad"

    def __post_init__(self):
        if self.attitude_noise_unit not in ("deg", "rad"):
            raise ValueError("attitude_noise_unit must be 'deg' or 'rad'")
        for name in ("plant_dt", "control_dt", "imu_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.control_noise < 0 or self.attitude_noise < 0:
            raise ValueError("noise levels must be >= 0")

    @property
    def substeps(self) -> int:
        n = self.control_dt / self.plant_dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError("control_dt must be a multiple of plant_dt")
        return int(round(n))

    @property
    def imu_per_control(self) -> int:
        n = self.control_dt * self.imu_rate
        if abs(n - round(n)) > 1e-9:
            raise ValueError("control period must hold a whole number of IMU samples")
        return int(round(n))

    @property
    def attitude_sigma_rad(self) -> float:
        return self.attitude_noise * (math.pi / 180.0 if self.attitude_noise_unit == "deg" else 1.0)


class FlightFailure(RuntimeError):
    """Loss of control: non-finite state, flip past 90 deg, or gimbal lock."""


def check_flight(x):
    if not np.all(np.isfinite(x)):
        raise FlightFailure("non-finite state")
    if abs(x[3]) > math.pi / 2 or abs(x[4]) > math.pi / 2:
        raise FlightFailure(f"vehicle flipped (roll {math.degrees(x[3]):.1f}, pitch {math.degrees(x[4]):.1f} deg)")


class Plant:
    """True vehicle plus sensors. :meth:`advance` holds one control for a
    control period and returns the IMU samples taken during it."""

    def __init__(self, x0, params: dyn.VehicleParams, config: PlantConfig | None = None,
                 noise: NoiseModel | None = None, wind: WindEvent | None = None, seed: int = 0):
        self.cfg = config or PlantConfig()
        self.params = params
        self.wind = wind
        self.imu = Imu(noise or NoiseModel(), self.cfg.imu_rate)
        self.rng = np.random.default_rng([seed, 1])
        self.x = np.array(x0, dtype=float)
        self.t = 0.0
        self.k = 0                     # plant step counter
        self.traj = Trajectory(self.cfg.plant_dt)
        self.traj.append(0.0, self.x, self._accel(self.x, dyn.hover_input(params), np.zeros(3)))
        self.times = [0.0]
        self.states = [self.x.copy()]
        self.measured = [self._readout(self.x)]

    def _accel(self, x, u, force):
        return np.asarray(dyn.derivative(x, u, self.params), dtype=float)[6:9] + force / self.params.m

    def _readout(self, x):
        return inject_plant_noise(x[3:6], self.cfg.attitude_sigma_rad, self.rng)

    def advance(self, u) -> list[ImuSample]:
        cfg = self.cfg
        samples = []
        imu_every = int(round(1.0 / (cfg.imu_rate * cfg.plant_dt)))
        for _ in range(cfg.substeps):
            un = inject_plant_noise(u, cfg.control_noise, self.rng)
            force, torque = wind_wrench(self.wind, self.t, cfg.plant_dt, self.x[3:6])
            try:
                self.x = dyn.step(self.x, un, self.params, cfg.plant_dt, (force, torque))
            except (dyn.DivergenceError, dyn.GimbalLockError) as e:
                raise FlightFailure(str(e)) from e
            self.k += 1
            self.t = self.k * cfg.plant_dt
            check_flight(self.x)
            self.traj.append(self.t, self.x, self._accel(self.x, un, force))
            self.times.append(self.t)
            self.states.append(self.x.copy())
            self.measured.append(self._readout(self.x))
            if self.k % imu_every == 0:
                samples.append(sample_imu(self.traj, self.imu, self.t))
        self.traj.trim(4 * imu_every)
        return samples


@dataclass
class FlightLog:
    times: np.ndarray                  # plant rate
    states: np.ndarray                 # true state at plant rate
    measured_att: np.ndarray           # attitude readout (with tracking-system noise)
    control_times: np.ndarray
    estimates: np.ndarray              # IMU attitude estimate at control rate
    truth_att: np.ndarray              # true attitude at control rate
    controls: np.ndarray
    failed: bool = False
    reason: str = ""

    def imu_rmse(self) -> float:
        if len(self.estimates) == 0:
            return float("nan")
        return float(np.sqrt(np.mean((self.estimates - self.truth_att) ** 2)))


def fly(prob: MpcProblem, true_params: dyn.VehicleParams, x0, duration: float,
        weights: MlpWeights | None = None, config: PlantConfig | None = None,
        noise: NoiseModel | None = None, wind: WindEvent | None = None, seed: int = 0) -> FlightLog:
    """Closed loop: IMU estimate -> MPC -> plant, for ``duration`` seconds."""
    cfg = config or PlantConfig()
    plant = Plant(x0, true_params, cfg, noise, wind, seed)
    est = ImuEstimator(weights, np.asarray(x0, dtype=float)[3:6], 1.0 / cfg.imu_rate)
    est.rate = np.asarray(x0, dtype=float)[9:12].copy()
    ctl = MpcController(prob)
    ctimes, ests, truth, us = [], [], [], []
    failed, reason = False, ""
    steps = int(round(duration / cfg.control_dt))
    for k in range(steps):
        x_hat = est.state(plant.x[0:3], plant.x[6:9])
        ctimes.append(plant.t)
        ests.append(est.att.copy())
        truth.append(plant.x[3:6].copy())
        try:
            u = ctl.step(x_hat)
            us.append(u)
            window = plant.advance(u)
            est.update(window)
        except (FlightFailure, MpcError, dyn.GimbalLockError, dyn.DivergenceError) as e:
            failed, reason = True, str(e)
            break
    return FlightLog(np.array(plant.times), np.array(plant.states), np.array(plant.measured),
                     np.array(ctimes), np.array(ests), np.array(truth),
                     np.array(us) if us else np.zeros((0, 4)), failed, reason)
