"""Simulated IMU, plant-side noise injection and drag-equation wind."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .dynamics import GRAVITY, rotation_matrix

IMU_RATE = 200.0
DEG = math.pi / 180.0
HOUR = 3600.0
MILLI_G = 1e-3 * GRAVITY
MICRO_G = 1e-6 * GRAVITY


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])


@dataclass
class SensorNoise:
    """Noise processes for one triad (gyro or accelerometer).

    ``initial_bias``: 1-sigma of the turn-on bias, drawn once per run.
    ``bias_instability``: 1-sigma of a first-order Gauss-Markov bias with
    correlation time ``bias_corr_time`` seconds.
    ``white_density``: white-noise density (units per sqrt(Hz)), i.e. the
    angle / velocity random walk coefficient.
    """

    initial_bias: float
    bias_instability: float
    white_density: float
    bias_corr_time: float = 100.0

    def scaled(self, k: float) -> "SensorNoise":
        return SensorNoise(self.initial_bias * k, self.bias_instability * k,
                           self.white_density * k, self.bias_corr_time)


def g365_gyro() -> SensorNoise:
    # 360 deg/h turn-on bias, 1.2 deg/h instability, 0.08 deg/sqrt(h) ARW
    return SensorNoise(360 * DEG / HOUR, 1.2 * DEG / HOUR, 0.08 * DEG / math.sqrt(HOUR))


def g365_accel() -> SensorNoise:
    # 3 mG turn-on bias, 15 uG instability, 0.025 (m/s)/sqrt(h) VRW
    return SensorNoise(3 * MILLI_G, 15 * MICRO_G, 0.025 / math.sqrt(HOUR))


@dataclass
class NoiseModel:
    gyro: SensorNoise = field(default_factory=g365_gyro)
    accel: SensorNoise = field(default_factory=g365_accel)
    bias_seed: int = 7      # identifies the physical unit: same seed, same turn-on bias
    noise_seed: int = 0     # per-run white noise and bias wander

    @classmethod
    def noiseless(cls) -> "NoiseModel":
        z = SensorNoise(0.0, 0.0, 0.0)
        return cls(gyro=z, accel=z)


class Imu:
    """Stateful sensor: holds the bias processes and RNG of one run."""

    def __init__(self, noise: NoiseModel, rate: float = IMU_RATE):
        self.noise = noise
        self.dt = 1.0 / rate
        brng = np.random.default_rng(noise.bias_seed)
        self.turn_on = (brng.normal(0.0, 1.0, 3) * noise.gyro.initial_bias,
                        brng.normal(0.0, 1.0, 3) * noise.accel.initial_bias)
        self.rng = np.random.default_rng(noise.noise_seed)
        self._gm = [np.zeros(3), np.zeros(3)]
        self._gm_init = False

    def _wander(self):
        out = []
        for i, s in enumerate((self.noise.gyro, self.noise.accel)):
            if s.bias_instability == 0.0:
                out.append(self._gm[i])
                continue
            if not self._gm_init:
                self._gm[i] = self.rng.normal(0.0, s.bias_instability, 3)
            else:
                phi = math.exp(-self.dt / s.bias_corr_time)
                self._gm[i] = phi * self._gm[i] + self.rng.normal(
                    0.0, s.bias_instability * math.sqrt(1 - phi * phi), 3)
            out.append(self._gm[i])
        self._gm_init = True
        return out

    def bias(self) -> tuple[np.ndarray, np.ndarray]:
        """Current total (turn-on + wander) biases."""
        return self.turn_on[0] + self._gm[0], self.turn_on[1] + self._gm[1]

    def measure(self, t: float, gyro_true, accel_true) -> ImuSample:
        wg, wa = self._wander()
        sq = math.sqrt(1.0 / self.dt)
        ng = self.rng.normal(0.0, self.noise.gyro.white_density * sq, 3) if self.noise.gyro.white_density else 0.0
        na = self.rng.normal(0.0, self.noise.accel.white_density * sq, 3) if self.noise.accel.white_density else 0.0
        gyro = np.asarray(gyro_true, dtype=float) + self.turn_on[0] + wg + ng
        accel = np.asarray(accel_true, dtype=float) + self.turn_on[1] + wa + na
        return ImuSample(float(t), gyro, accel)


@dataclass
class Trajectory:
    """True plant history at the plant rate (what the sensors observe)."""

    dt: float
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    accels: list = field(default_factory=list)   # world-frame acceleration at each record

    def append(self, t, x, a_world):
        self.times.append(float(t))
        self.states.append(np.array(x, dtype=float))
        self.accels.append(np.array(a_world, dtype=float))

    def index(self, t: float) -> int:
        if not self.times:
            raise ValueError("empty trajectory")
        i = int(round((t - self.times[0]) / self.dt))
        if i < 0 or i >= len(self.times) or abs(self.times[i] - t) > 1e-9:
            raise ValueError(f"t={t} outside simulated range [{self.times[0]}, {self.times[-1]}]")
        return i

    def trim(self, keep: int):
        """Drop all but the last ``keep`` records (bounded memory in long runs)."""
        if len(self.times) > keep:
            del self.times[:-keep], self.states[:-keep], self.accels[:-keep]


def true_imu_signals(traj: Trajectory, t: float, rate: float = IMU_RATE, g: float = GRAVITY):
    """Noise-free (gyro, accel) at ``t``.

    The gyro reports the rotation increment over the preceding sample
    interval divided by its length (a rate-integrating gyro), so composing
    the samples reproduces the attitude exactly. The accelerometer reports
    the body-frame specific force at ``t``.
    """
    period = 1.0 / rate
    i = traj.index(t)
    j = traj.index(t - period) if t - period >= traj.times[0] - 1e-12 else None
    if j is None:
        raise ValueError(f"t={t} has no preceding IMU interval in the trajectory")
    R0 = rotation_matrix(traj.states[j][3:6])
    R1 = rotation_matrix(traj.states[i][3:6])
    gyro = Rotation.from_matrix(R0.T @ R1).as_rotvec() / period
    accel = R1.T @ (traj.accels[i] + np.array([0.0, 0.0, g]))
    return gyro, accel


def sample_imu(traj: Trajectory, imu: Imu, t: float) -> ImuSample:
    """One noisy IMU reading at ``t`` (must lie on the IMU grid)."""
    k = t * (1.0 / imu.dt)
    if abs(k - round(k)) > 1e-6:
        raise ValueError(f"t={t} is not on the {1 / imu.dt:g} Hz IMU grid")
    gyro, accel = true_imu_signals(traj, t, 1.0 / imu.dt)
    return imu.measure(t, gyro, accel)


def inject_plant_noise(value, sigma: float, rng: np.random.Generator):
    """Add zero-mean Gaussian noise of standard deviation ``sigma``."""
    value = np.asarray(value, dtype=float)
    if sigma == 0.0:
        return value.copy()
    return value + rng.normal(0.0, sigma, value.shape)


@dataclass
class WindEvent:
    """A drag-equation gust. ``lever`` is the arm from the centre of mass to
    the centre of pressure, along body z."""

    kind: str = "step"            # "impulse" | "step"
    start: float = 0.2
    duration: float = 0.3         # ignored for impulses (one plant step)
    speed: float = 10.0
    direction: Sequence[float] = (-1.0, 0.0, 0.0)
    cd: float = 1.0
    rho: float = 1.225
    area: float = 0.1
    lever: float = 0.02

    def __post_init__(self):
        if self.kind not in ("impulse", "step"):
            raise ValueError(f"wind kind must be 'impulse' or 'step', got {self.kind!r}")
        if self.speed < 0:
            raise ValueError("wind speed must be >= 0")
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("wind direction must be non-zero")
        self.direction = tuple((d / n).tolist())

    def active(self, t: float, plant_dt: float) -> bool:
        eps = 0.5 * plant_dt
        if self.kind == "impulse":
            return abs(t - self.start) < eps
        return self.start - eps <= t < self.start + self.duration - eps

    def force_magnitude(self) -> float:
        return 0.5 * self.cd * self.rho * self.area * self.speed ** 2


def wind_wrench(event: WindEvent | None, t: float, plant_dt: float = 1e-3, att=None):
    """(world force N, body torque N m) applied at plant time ``t``."""
    if event is None or event.speed == 0.0 or not event.active(t, plant_dt):
        return np.zeros(3), np.zeros(3)
    force = event.force_magnitude() * np.asarray(event.direction)
    R = np.eye(3) if att is None else rotation_matrix(att)
    lever = np.array([0.0, 0.0, event.lever])
    torque = np.cross(lever, R.T @ force)
    return force, torque


def write_imu_csv(path, samples: Sequence[ImuSample]):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "gx", "gy", "gz", "ax", "ay", "az"])
        for s in samples:
            w.writerow([repr(s.t), *(repr(float(v)) for v in s.gyro), *(repr(float(v)) for v in s.accel)])


def read_imu_csv(path) -> list[ImuSample]:
    out = []
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ImuSample(float(row["t"]),
                                 np.array([float(row[k]) for k in ("gx", "gy", "gz")]),
                                 np.array([float(row[k]) for k in ("ax", "ay", "az")])))
    return out
