"""Learned IMU correction and a differentiable SO(3) pre-integrator.

An MLP applied per sample maps normalized raw readings to an additive
correction of the six IMU channels. The corrected gyro samples are composed
on SO(3) and converted to Euler angles; everything runs on the autodiff tape
when the weights are Vars, so the attitude estimate is differentiable with
respect to the network.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .dynamics import GRAVITY, NX, euler_to_rotation, rotation_to_euler
from .sensors import ImuSample

CHECKPOINT_VERSION = 1

# so(3) generators: skew(w) = w0*G0 + w1*G1 + w2*G2
_GEN = np.array([
    [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
    [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
    [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
], dtype=float)


@dataclass
class NetConfig:
    encoder: tuple = (6, 64, 64, 32)
    decoder: tuple = (32, 32, 6)
    window: int = 4
    gyro_feature_scale: float = 1.0            # rad/s per unit feature
    accel_feature_scale: float = GRAVITY       # m/s^2 per unit feature
    gyro_out_scale: float = 0.01               # rad/s per unit output
    accel_out_scale: float = 0.1               # m/s^2 per unit output
    bounded_head: bool = True                  # correction = scale * tanh(head)

    def __post_init__(self):
        self.encoder = tuple(int(w) for w in self.encoder)
        self.decoder = tuple(int(w) for w in self.decoder)
        if len(self.encoder) != 4 or len(self.decoder) != 3:
            raise ValueError("encoder needs 3 layers (4 widths) and decoder 2 layers (3 widths)")
        if self.encoder[0] != 6 or self.decoder[-1] != 6:
            raise ValueError("network must map 6 IMU channels to 6 corrections")
        if self.encoder[-1] != self.decoder[0]:
            raise ValueError(f"encoder output {self.encoder[-1]} != decoder input {self.decoder[0]}")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def shapes(self) -> list[tuple[int, int]]:
        enc, dec = self.encoder, self.decoder
        return [(enc[i], enc[i + 1]) for i in range(3)] + [(dec[i], dec[i + 1]) for i in range(2)]

    @property
    def out_scale(self) -> np.ndarray:
        return np.array([self.gyro_out_scale] * 3 + [self.accel_out_scale] * 3)


class MlpWeights:
    """Encoder (3 tanh layers) + decoder (tanh hidden, linear head)."""

    def __init__(self, config: NetConfig, layers: list, seed: int = 0, step: int = 0):
        shapes = config.shapes()
        if len(layers) != len(shapes):
            raise ValueError(f"expected {len(shapes)} layers, got {len(layers)}")
        for i, ((W, b), (n_in, n_out)) in enumerate(zip(layers, shapes)):
            if np.shape(W) != (n_in, n_out) or np.shape(b) != (n_out,):
                raise ValueError(f"layer {i}: expected W {(n_in, n_out)}, b {(n_out,)}, "
                                 f"got {np.shape(W)}, {np.shape(b)}")
        self.config = config
        self.layers = [(np.array(W, dtype=float), np.array(b, dtype=float)) for W, b in layers]
        self.seed = seed
        self.step = step

    @classmethod
    def init(cls, config: NetConfig | None = None, seed: int = 0) -> "MlpWeights":
        config = config or NetConfig()
        rng = np.random.default_rng(seed)
        layers = []
        shapes = config.shapes()
        for i, (n_in, n_out) in enumerate(shapes):
            if i == len(shapes) - 1:
                layers.append((np.zeros((n_in, n_out)), np.zeros(n_out)))
            else:
                lim = 1.0 / math.sqrt(n_in)
                layers.append((rng.uniform(-lim, lim, (n_in, n_out)), rng.uniform(-lim, lim, n_out)))
        return cls(config, layers, seed=seed)

    def copy(self) -> "MlpWeights":
        return MlpWeights(self.config, [(W.copy(), b.copy()) for W, b in self.layers], self.seed, self.step)

    def flat(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def set_flat(self, arrays: Sequence[np.ndarray]):
        it = iter(arrays)
        self.layers = [(np.array(next(it), dtype=float), np.array(next(it), dtype=float))
                       for _ in self.layers]

    def on_tape(self, tape: ad.Tape) -> list:
        """Register every weight as a leaf; returns [(W, b), ...] of Vars."""
        return [(tape.var(W), tape.var(b)) for W, b in self.layers]

    def zero_head(self) -> "MlpWeights":
        w = self.copy()
        W, b = w.layers[-1]
        w.layers[-1] = (np.zeros_like(W), np.zeros_like(b))
        return w

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.flat())

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict:
        c = self.config
        return {
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "step": self.step,
            "config": {
                "encoder": list(c.encoder), "decoder": list(c.decoder), "window": c.window,
                "gyro_feature_scale": c.gyro_feature_scale, "accel_feature_scale": c.accel_feature_scale,
                "gyro_out_scale": c.gyro_out_scale, "accel_out_scale": c.accel_out_scale,
                "bounded_head": c.bounded_head,
            },
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpWeights":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        config = NetConfig(**d["config"])
        layers = [(np.array(l["W"], dtype=float), np.array(l["b"], dtype=float)) for l in d["layers"]]
        return cls(config, layers, seed=int(d["seed"]), step=int(d["step"]))


def save_checkpoint(path, weights: MlpWeights, extra: dict | None = None):
    """Write weights (+ ``extra`` such as learned m, J). JSON for ``.json``
    (floats are written with shortest round-trip repr), npz otherwise."""
    path = Path(path)
    d = weights.to_dict()
    d["extra"] = extra or {}
    if path.suffix == ".json":
        path.write_text(json.dumps(d))
        return path
    arrays = {f"L{i}_{k}": a for i, (W, b) in enumerate(weights.layers) for k, a in (("W", W), ("b", b))}
    meta = {k: v for k, v in d.items() if k != "layers"}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path) -> tuple[MlpWeights, dict]:
    path = Path(path)
    if path.suffix == ".json":
        d = json.loads(path.read_text())
    else:
        with np.load(path) as z:
            d = json.loads(str(z["meta"]))
            n = len(NetConfig(**d["config"]).shapes())
            d["layers"] = [{"W": z[f"L{i}_W"], "b": z[f"L{i}_b"]} for i in range(n)]
    return MlpWeights.from_dict(d), d.get("extra", {})


# ---------------------------------------------------------------- network


def features(raw: np.ndarray, config: NetConfig) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    f = np.empty_like(raw)
    f[:, :3] = raw[:, :3] / config.gyro_feature_scale
    f[:, 3:] = (raw[:, 3:] - np.array([0.0, 0.0, GRAVITY])) / config.accel_feature_scale
    return f


def mlp_forward(x, params: list):
    """``params`` is [(W, b), ...] as arrays or Vars; rows of ``x`` are samples."""
    h = x
    last = len(params) - 1
    for i, (W, b) in enumerate(params):
        h = ad.matmul(h, W) + b
        if i != last:
            h = ad.tanh(h)
    return h


def window_array(window: Sequence[ImuSample]) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([s.t for s in window])
    raw = np.array([s.as_row() for s in window])
    return times, raw


def denoise(window, weights: MlpWeights, params: list | None = None):
    """Corrected samples (rows gx gy gz ax ay az) = raw + scale * MLP(features),
    with the head squashed by tanh when ``bounded_head`` is set.

    ``window`` is a list of :class:`ImuSample` or an (n, 6) array. Pass
    ``params`` (from :meth:`MlpWeights.on_tape`) to record on a tape.
    """
    raw = window_array(window)[1] if not isinstance(window, np.ndarray) else np.asarray(window, float)
    cfg = weights.config
    if raw.ndim != 2 or raw.shape[1] != 6:
        raise ValueError(f"IMU window must be (n, 6), got {raw.shape}")
    if raw.shape[0] != cfg.window:
        raise ValueError(f"IMU window must hold {cfg.window} samples, got {raw.shape[0]}")
    return denoise_rows(raw, weights, params)


def denoise_rows(raw: np.ndarray, weights: MlpWeights, params: list | None = None):
    """Row-wise correction of any number of stacked samples."""
    cfg = weights.config
    out = mlp_forward(features(raw, cfg), params if params is not None else weights.layers)
    if cfg.bounded_head:
        out = ad.tanh(out)
    return raw + out * cfg.out_scale


# ---------------------------------------------------------------- SO(3)


def so3_exp(phi):
    """Rodrigues' formula, smooth at zero; ``phi`` may be a 3-Var."""
    if isinstance(phi, ad.Var):
        s = ad.dot(phi, phi)
        K = phi[0] * _GEN[0] + phi[1] * _GEN[1] + phi[2] * _GEN[2]
        return np.eye(3) + ad.sinc_sq(s) * K + ad.versine_sq(s) * (K @ K)
    phi = np.asarray(phi, dtype=float)
    s = float(phi @ phi)
    K = np.einsum("i,ijk->jk", phi, _GEN)
    return np.eye(3) + ad.sinc_sq(s) * K + ad.versine_sq(s) * (K @ K)


@dataclass
class AttitudeEstimate:
    t: float
    euler: object                     # (3,) array or Var
    R: object                         # 3x3 array or Var
    sample_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rotations: list = field(default_factory=list)   # rotation after each sample

    def value(self) -> np.ndarray:
        return np.array(ad.value(self.euler), dtype=float)


def preintegrate(gyro, att_prev, dt: float, t: float | None = None, sample_times=None) -> AttitudeEstimate:
    """Compose ``R(att_prev) * prod_i exp(gyro_i * dt)`` and return Euler angles.

    ``gyro`` holds the corrected angular-rate rows (n, 3), array or Var.
    ``sample_times`` (if given) must be increasing and not later than ``t``.
    """
    n = len(ad.value(gyro))
    if sample_times is not None:
        sample_times = np.asarray(sample_times, dtype=float)
        if len(sample_times) != n:
            raise ValueError("one timestamp per gyro sample required")
        if np.any(np.diff(sample_times) <= 0):
            raise ValueError("IMU samples must be strictly increasing in time")
        if t is not None and sample_times[-1] > t + 1e-12:
            raise ValueError(f"sample at t={sample_times[-1]} is later than the estimate time {t}")
        if t is None:
            t = float(sample_times[-1])
    phi, theta, psi = (att_prev[i] for i in range(3)) if isinstance(att_prev, ad.Var) else \
        (float(a) for a in att_prev)
    R = ad.array(euler_to_rotation(phi, theta, psi))
    rotations = []
    for i in range(n):
        R = R @ so3_exp(gyro[i] * dt)
        rotations.append(R)
    euler = ad.stack(list(rotation_to_euler(R)))
    return AttitudeEstimate(t if t is not None else 0.0, euler, R,
                            sample_times if sample_times is not None else np.zeros(0), rotations)


def estimate_state(att, gyro, pos=(0.0, 0.0, 0.0), vel=(0.0, 0.0, 0.0)):
    """Pack the IMU attitude and body rate into a 12-state; translation is
    taken from ground truth (the caller supplies it)."""
    return ad.concatenate([np.asarray(pos, dtype=float), att, np.asarray(vel, dtype=float), gyro])


def rate_at_end(gyro):
    """Body rate at the end of the window.

    Each rate-integrating sample is the mean rate over its own interval, so
    the last sample lags by half a period. Extrapolate linearly from the last
    two samples; exact while the torque is held constant."""
    if len(gyro) < 2:
        return gyro[-1]
    return gyro[-1] + 0.5 * (gyro[-1] - gyro[-2])


class ImuEstimator:
    """Tape-free running attitude estimate consuming one window per control step."""

    def __init__(self, weights: MlpWeights | None, att0, imu_dt: float):
        self.weights = weights
        self.att = np.array(att0, dtype=float)
        self.rate = np.zeros(3)
        self.dt = imu_dt

    def update(self, window: Sequence[ImuSample]) -> np.ndarray:
        times, raw = window_array(window)
        corrected = raw if self.weights is None else denoise(raw, self.weights)
        est = preintegrate(corrected[:, :3], self.att, self.dt, sample_times=times)
        self.att = est.value()
        self.rate = np.array(rate_at_end(corrected[:, :3]), dtype=float)
        return self.state()

    def state(self, pos=(0.0, 0.0, 0.0), vel=(0.0, 0.0, 0.0)) -> np.ndarray:
        x = np.zeros(NX)
        x[0:3] = pos
        x[3:6] = self.att
        x[6:9] = vel
        x[9:12] = self.rate
        return x
