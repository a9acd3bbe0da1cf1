"""Self-supervised bilevel training.

Each control step: estimate the state from the IMU (detached), solve the MPC,
advance the plant, re-estimate the next state on the tape, and penalize the
distance between that estimate and the model prediction made with the MPC
action. The action's dependence on the model parameters comes from one LQR
pass at the solver's fixed point. One optimizer update per control step.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from .dynamics import euler_to_rotation
from .ionet import (MlpWeights, NetConfig, denoise, denoise_rows, estimate_state, preintegrate, rate_at_end,
                    save_checkpoint, so3_exp, window_array)
from .mpc import CostWeights, MpcError, MpcProblem, NotConvergedError, backward_fixed_point, ilqr_solve
from .sensors import NoiseModel, WindEvent
from .simulation import FlightFailure, Plant, PlantConfig

LOG_LIMIT = 30.0   # |log m|, |log J| cap: keeps exp() strictly positive and finite

METHODS = ("IMU+MPC", "IMU+ +MPC", "IMU+MPC+", "iMPC")


def method_switches(method: str) -> tuple[bool, bool]:
    """(learn network, learn dynamics parameters) for a method name."""
    table = {"IMU+MPC": (False, False), "IMU+ +MPC": (True, False),
             "IMU+MPC+": (False, True), "iMPC": (True, True)}
    if method not in table:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return table[method]


@dataclass
class TrainConfig:
    episodes: int = 8
    steps_per_episode: int = 250          # 5 s at 50 Hz
    lr_network: float = 1e-4
    lr_params: float = 1e-2
    seed: int = 0
    learn_network: bool = True
    learn_mass: bool = True
    learn_moi: bool = True
    learn_cost: bool = False
    aux_weight: float = 1.0
    aux_horizon: int = 50                 # control periods in the specific-force window
    init_offset: float = 1.5              # initial m, J = offset * true
    init_attitude_deg: float = 20.0       # episodes start from uniform(+-) on each angle
    retarget_every: float = 0.5           # s between random attitude setpoints (0: hover only)
    validate_every: int = 200
    validation_seeds: tuple = (1001, 1002, 1003)
    validation_steps: int = 50
    log_every: int = 50

    def __post_init__(self):
        if self.episodes < 0 or self.steps_per_episode < 1:
            raise ValueError("episodes must be >= 0 and steps_per_episode >= 1")
        if self.lr_network < 0 or self.lr_params < 0:
            raise ValueError("learning rates must be >= 0")
        if self.aux_weight < 0 or self.aux_horizon < 1:
            raise ValueError("aux_weight must be >= 0 and aux_horizon >= 1")
        if self.validate_every < 1 or self.log_every < 1:
            raise ValueError("validate_every and log_every must be >= 1")
        self.validation_seeds = tuple(int(s) for s in self.validation_seeds)

    @property
    def total_steps(self) -> int:
        return self.episodes * self.steps_per_episode


@dataclass
class TrainStepRecord:
    step: int
    U: float
    grad_norm: float
    m: float
    Jx: float
    Jy: float
    Jz: float
    imu_err: float
    episode: int = 0


@dataclass
class Environment:
    """Everything the loop needs to build plants and MPC problems."""

    true_params: dyn.VehicleParams = field(default_factory=dyn.VehicleParams)
    bounds: dyn.ControlBounds = field(default_factory=dyn.ControlBounds)
    weights: CostWeights = field(default_factory=CostWeights)
    horizon: int = 10
    mpc_dt: float = 0.02
    plant: PlantConfig = field(default_factory=PlantConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    wind: WindEvent | None = None

    def problem(self, params: dyn.VehicleParams, Q=None, p=None) -> MpcProblem:
        prob = MpcProblem.quadrotor(params, self.bounds, self.horizon, self.mpc_dt, self.weights)
        if Q is not None:
            prob.Q = Q
        if p is not None:
            prob.p = p
        return prob

    def noise_for(self, seed: int) -> NoiseModel:
        n = self.noise
        return NoiseModel(n.gyro, n.accel, bias_seed=n.bias_seed, noise_seed=seed)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def update(self, params: list, grads: list) -> list:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


@dataclass
class LearnerState:
    """Learnable quantities: network weights, log m, log J and cost terms."""

    weights: MlpWeights
    log_m: float
    log_J: np.ndarray
    log_q: np.ndarray          # diagonal of Q, log scale
    p: np.ndarray

    def params(self) -> dyn.VehicleParams:
        return dyn.VehicleParams(math.exp(self.log_m), tuple(np.exp(self.log_J).tolist()))

    def copy(self) -> "LearnerState":
        return LearnerState(self.weights.copy(), self.log_m, self.log_J.copy(), self.log_q.copy(), self.p.copy())


def initial_state(env: Environment, cfg: TrainConfig, net: NetConfig | None = None) -> LearnerState:
    tp = env.true_params
    q = np.diag(env.weights.matrix()).copy()
    floor = 1e-6  # zero weights stay (numerically) zero under the log map
    return LearnerState(
        MlpWeights.init(net or NetConfig(), seed=cfg.seed),
        math.log(cfg.init_offset * tp.m),
        np.log(cfg.init_offset * np.array(tp.J)),
        np.log(np.maximum(q, floor)),
        np.zeros(dyn.NX + dyn.NU),
    )


def upper_loss(x_pred, x_meas, t_pred: float | None = None, t_meas: float | None = None):
    """Euclidean distance between the predicted and the IMU-estimated state."""
    if t_pred is not None and t_meas is not None and abs(t_pred - t_meas) > 1e-9:
        raise ValueError(f"time mismatch: prediction at {t_pred}, measurement at {t_meas}")
    return ad.norm(x_meas - x_pred)


def specific_force_residual(corrected, rotations, accel_world, g: float = dyn.GRAVITY):
    """Mean over the window of |f_corrected - R_i^T (a + g e3)|.

    ``accel_world`` is one vector for the whole window or one row per sample."""
    n = len(rotations)
    ref = np.broadcast_to(np.asarray(accel_world, dtype=float), (n, 3)) + np.array([0.0, 0.0, g])
    total = 0.0
    for i, R in enumerate(rotations):
        pred = ad.matmul(ad.transpose(R), ref[i])
        total = total + ad.norm(corrected[i, 3:6] - pred)
    return total * (1.0 / n)


@dataclass
class StepResult:
    U: float
    grads: dict
    att_next: np.ndarray
    rate_next: np.ndarray
    imu_err: float
    # what the loss was built from (for inspection and tests)
    raw: np.ndarray = None
    att_prev: np.ndarray = None
    x_pred: np.ndarray = None
    x_true: np.ndarray = None


class Loop:
    """One training episode: plant, running estimate and warm-started MPC."""

    def __init__(self, env: Environment, x0, seed: int, state: LearnerState, cfg: TrainConfig):
        self.env, self.cfg = env, cfg
        self.plant = Plant(x0, env.true_params, env.plant, env.noise_for(seed), env.wind, seed)
        self.att = np.array(x0[3:6], dtype=float)
        self.rate = np.array(x0[9:12], dtype=float)
        self.state = state
        self.warm = None
        self.x_ref = np.zeros(dyn.NX)
        # (attitude at window start, raw window, mean world accel) per control period
        self.history = deque(maxlen=cfg.aux_horizon)

    def x_imu(self) -> np.ndarray:
        """Current IMU state estimate (a fixed initial condition: no tape)."""
        x = self.plant.x
        return np.concatenate([x[0:3], self.att, x[6:9], self.rate])

    def _aux_term(self, weights: MlpWeights, w_vars, corrected, rotations, dt_imu: float):
        """Specific-force consistency against ground-truth acceleration.

        The current window term trains the accelerometer channel. The gyro
        channel gets a second term over the stored windows, re-integrated
        on the tape from the detached attitude at the oldest window, with
        the residuals centered over the horizon. Centering removes both the
        inherited tilt of that attitude and any constant accelerometer
        error, leaving the drift that only a gyro bias produces."""
        current = specific_force_residual(corrected, rotations, self.history[-1][2])
        if len(self.history) < 2:
            return current
        att0 = self.history[0][0]
        raw = np.vstack([h[1] for h in self.history])
        accel = np.vstack([np.tile(h[2], (len(h[1]), 1)) for h in self.history])
        ref = accel + np.array([0.0, 0.0, dyn.GRAVITY])
        rows = denoise_rows(raw, weights, w_vars)
        R = ad.array(euler_to_rotation(*att0))
        res = []
        for i in range(len(raw)):
            R = R @ so3_exp(rows[i, 0:3] * dt_imu)
            res.append(rows[i, 3:6] - ad.matmul(ad.transpose(R), ref[i]))
        res = ad.stack(res)
        dev = res - ad.sum(res, axis=0) * (1.0 / len(raw))
        drift = ad.sum(ad.sqrt(ad.sum(dev * dev, axis=1) + 1e-12)) * (1.0 / len(raw))
        return current + drift

    def step(self, differentiate: bool = True) -> StepResult:
        env, cfg, st = self.env, self.cfg, self.state
        x_k = self.x_imu()
        v_k = self.plant.x[6:9].copy()
        t_k = self.plant.t
        Q_val = np.diag(np.exp(st.log_q))
        prob = env.problem(st.params(), Q_val, st.p.copy())
        prob.x_ref = self.x_ref
        us0 = None if self.warm is None else np.vstack([self.warm.us[1:], self.warm.us[-1:]])
        sol = ilqr_solve(prob, x_k, us0)
        self.warm = sol
        u_k = sol.us[0].copy()
        window = self.plant.advance(u_k)
        t_next = self.plant.t
        x_true = self.plant.x
        times, raw = window_array(window)
        dt_imu = 1.0 / env.plant.imu_rate

        tape = ad.Tape()
        w_vars = st.weights.on_tape(tape) if differentiate else None
        corrected = denoise(raw, st.weights, w_vars)
        est = preintegrate(corrected[:, 0:3], self.att, dt_imu, t_next, times)
        x_meas = estimate_state(est.euler, rate_at_end(corrected[:, 0:3]), x_true[0:3], x_true[6:9])

        lm = tape.var(st.log_m)
        lJ = tape.var(st.log_J.copy())
        lq = tape.var(st.log_q.copy())
        pv = tape.var(st.p.copy())
        m_var = ad.exp(lm)
        J_var = ad.exp(lJ)
        params_var = dyn.VehicleParams(m_var, (J_var[0], J_var[1], J_var[2]))
        prob_var = prob.with_params(params_var)
        if cfg.learn_cost:
            prob_var.Q = _diag(ad.exp(lq))
            prob_var.p = pv
        if sol.converged and differentiate:
            _, us_var = backward_fixed_point(prob_var, sol, tape=tape)
            u_var = us_var[0]
        else:
            u_var = u_k
        x_pred = dyn.step(x_k, u_var, params_var, env.mpc_dt)
        U = upper_loss(x_pred, x_meas, t_k + env.mpc_dt, est.t)
        loss = U
        a_world = (x_true[6:9] - v_k) / (t_next - t_k)
        self.history.append((self.att.copy(), raw, a_world))
        if cfg.aux_weight > 0 and cfg.learn_network and differentiate:
            loss = loss + cfg.aux_weight * self._aux_term(st.weights, w_vars, corrected, est.rotations, dt_imu)

        grads = {}
        if differentiate and isinstance(loss, ad.Var):
            g = tape.backward(loss)
            grads = {
                "net": [g.wrt(v) for pair in w_vars for v in pair],
                "log_m": float(g.wrt(lm)),
                "log_J": np.asarray(g.wrt(lJ), dtype=float),
                "log_q": np.asarray(g.wrt(lq), dtype=float),
                "p": np.asarray(g.wrt(pv), dtype=float),
            }
        att_prev = self.att.copy()
        att_next = est.value()
        rate_next = np.array(rate_at_end(ad.value(corrected)[:, 0:3]), dtype=float)
        self.att, self.rate = att_next, rate_next
        imu_err = float(np.linalg.norm(att_next - x_true[3:6]))
        return StepResult(float(ad.value(U)), grads, att_next, rate_next, imu_err,
                          raw, att_prev, np.array(ad.value(x_pred), dtype=float), x_true.copy())


def _diag(v):
    """Diagonal matrix from a vector Var."""
    n = len(ad.value(v))
    out = 0.0
    for i in range(n):
        E = np.zeros((n, n))
        E[i, i] = 1.0
        out = out + v[i] * E
    return out


class Trainer:
    def __init__(self, env: Environment, cfg: TrainConfig, state: LearnerState | None = None,
                 net: NetConfig | None = None):
        self.env, self.cfg = env, cfg
        self.state = state or initial_state(env, cfg, net)
        self.adam = Adam(cfg.lr_network)
        self.records: list[TrainStepRecord] = []
        self.failures: list[tuple[int, str]] = []
        self.validation: list[tuple[int, float]] = []
        self.best: tuple[float, int, LearnerState] | None = None
        self.rng = np.random.default_rng([cfg.seed, 7])
        self.step_count = 0

    def apply(self, grads: dict):
        cfg, st = self.cfg, self.state
        if not grads:
            return
        if cfg.learn_network and cfg.lr_network > 0:
            new = self.adam.update(st.weights.flat(), grads["net"])
            st.weights.set_flat(new)
        if cfg.learn_mass and cfg.lr_params > 0:
            st.log_m = float(np.clip(st.log_m - cfg.lr_params * grads["log_m"], -LOG_LIMIT, LOG_LIMIT))
        if cfg.learn_moi and cfg.lr_params > 0:
            st.log_J = np.clip(st.log_J - cfg.lr_params * grads["log_J"], -LOG_LIMIT, LOG_LIMIT)
        if cfg.learn_cost and cfg.lr_params > 0:
            st.log_q = st.log_q - cfg.lr_params * grads["log_q"]
            st.p = st.p - cfg.lr_params * grads["p"]
        st.weights.step = self.step_count

    def grad_norm(self, grads: dict) -> float:
        cfg = self.cfg
        parts = []
        if cfg.learn_network:
            parts += [np.ravel(g) for g in grads.get("net", [])]
        if cfg.learn_mass:
            parts.append(np.atleast_1d(grads.get("log_m", 0.0)))
        if cfg.learn_moi:
            parts.append(np.ravel(grads.get("log_J", np.zeros(3))))
        if cfg.learn_cost:
            parts += [np.ravel(grads.get("log_q", 0.0)), np.ravel(grads.get("p", 0.0))]
        return float(np.linalg.norm(np.concatenate(parts))) if parts else 0.0

    def episode_start(self) -> np.ndarray:
        a = math.radians(self.cfg.init_attitude_deg)
        return dyn.hover_state(self.rng.uniform(-a, a, 3))

    def validate(self) -> float:
        """Median over held-out seeds of the mean U of a short episode
        flown with the current learner (no updates)."""
        vals = []
        for s in self.cfg.validation_seeds:
            rng = np.random.default_rng([s, 11])
            a = math.radians(self.cfg.init_attitude_deg)
            loop = Loop(self.env, dyn.hover_state(rng.uniform(-a, a, 3)), s, self.state, self.cfg)
            us = []
            try:
                for _ in range(self.cfg.validation_steps):
                    us.append(loop.step(differentiate=False).U)
            except (FlightFailure, MpcError, dyn.GimbalLockError, dyn.DivergenceError):
                us.append(float("inf"))
            vals.append(float(np.mean(us)))
        return float(np.median(vals))

    def _maybe_validate(self):
        if self.step_count % self.cfg.validate_every == 0 or self.step_count == self.cfg.total_steps:
            v = self.validate()
            self.validation.append((self.step_count, v))
            if self.best is None or v <= self.best[0]:
                self.best = (v, self.step_count, self.state.copy())

    def run(self, log_path=None, callback=None) -> list[TrainStepRecord]:
        cfg = self.cfg
        if self.best is None:
            v = self.validate() if cfg.total_steps > 0 else float("nan")
            self.validation.append((0, v))
            self.best = (v if not math.isnan(v) else float("inf"), 0, self.state.copy())
        writer = _LogWriter(log_path) if log_path else None
        try:
            for ep in range(cfg.episodes):
                loop = self.loop = Loop(self.env, self.episode_start(), cfg.seed * 100003 + ep, self.state, cfg)
                every = int(round(cfg.retarget_every / self.env.mpc_dt)) if cfg.retarget_every > 0 else 0
                for i in range(cfg.steps_per_episode):
                    if every and i % every == 0 and i > 0:
                        a = math.radians(cfg.init_attitude_deg)
                        loop.x_ref = dyn.hover_state(self.rng.uniform(-a, a, 3))
                    try:
                        res = loop.step()
                    except (FlightFailure, MpcError, NotConvergedError, dyn.GimbalLockError,
                            dyn.DivergenceError) as e:
                        self.failures.append((self.step_count, str(e)))
                        break
                    self.apply(res.grads)
                    self.step_count += 1
                    p = self.state.params()
                    rec = TrainStepRecord(self.step_count, res.U, self.grad_norm(res.grads), p.m, *p.J,
                                          res.imu_err, ep)
                    self.records.append(rec)
                    if writer and self.step_count % cfg.log_every == 0:
                        writer.write(self.records)
                    if callback:
                        callback(rec)
                    self._maybe_validate()
        finally:
            if writer:
                writer.write(self.records)
        return self.records


class _LogWriter:
    FIELDS = ["step", "U", "grad_norm", "m", "Jx", "Jy", "Jz", "imu_rmse"]

    def __init__(self, path):
        self.path = Path(path)
        self.done = 0
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(self.FIELDS)

    def write(self, records):
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            for r in records[self.done:]:
                w.writerow([r.step, repr(r.U), repr(r.grad_norm), repr(r.m), repr(r.Jx), repr(r.Jy),
                            repr(r.Jz), repr(r.imu_err)])
        self.done = len(records)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def state_extra(state: LearnerState) -> dict:
    p = state.params()
    return {"m": p.m, "J": list(p.J), "log_q": state.log_q.tolist(), "p": state.p.tolist()}


def learner_from_checkpoint(weights: MlpWeights, extra: dict, env: Environment) -> LearnerState:
    q = np.diag(env.weights.matrix())
    return LearnerState(
        weights,
        math.log(extra["m"]),
        np.log(np.asarray(extra["J"], dtype=float)),
        np.asarray(extra.get("log_q", np.log(np.maximum(q, 1e-6))), dtype=float),
        np.asarray(extra.get("p", np.zeros(dyn.NX + dyn.NU)), dtype=float),
    )


def run_training(env: Environment, cfg: TrainConfig, out_dir=None, net: NetConfig | None = None):
    """Train and (if ``out_dir``) write ``train_log.csv``, ``final.json`` and
    ``best.json``. Returns the trainer (records, best state, validation)."""
    tr = Trainer(env, cfg, net=net)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    try:
        tr.run(out / "train_log.csv" if out else None)
    finally:
        if out:
            save_checkpoint(out / "final.json", tr.state.weights, state_extra(tr.state))
            v, step, best = tr.best if tr.best else (float("nan"), 0, tr.state)
            extra = state_extra(best)
            extra.update({"best": True, "validation_U": v, "best_step": step})
            save_checkpoint(out / "best.json", best.weights, extra)
    return tr
