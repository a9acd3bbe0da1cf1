"""Quadrotor rigid-body model.

State ``x = [r, Omega, v, omega]`` (12): world position, 3-2-1 Euler angles
(roll, pitch, yaw), world velocity and body angular rate. Control
``u = [T, tau_x, tau_y, tau_z]``: collective thrust and body torques.

Every function here is written against :mod:`impc.autodiff`, so the same
code runs on plain floats (plant and MPC forward passes) and on tape Vars
(learning mass and inertia).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

NX = 12
NU = 4
GRAVITY = 9.81
PITCH_GUARD = math.pi / 2 - 1e-3

POS = slice(0, 3)
ATT = slice(3, 6)
VEL = slice(6, 9)
RATE = slice(9, 12)


class GimbalLockError(ValueError):
    def __init__(self, state):
        self.state = np.array(ad.value(state), dtype=float)
        super().__init__(
            f"pitch {self.state[4]:.6f} rad reached the gimbal-lock guard "
            f"(|pitch| >= {PITCH_GUARD:.6f}); state={self.state.tolist()}")


class DivergenceError(RuntimeError):
    def __init__(self, state, msg="non-finite state"):
        self.state = np.array(ad.value(state), dtype=float)
        super().__init__(f"{msg}: {self.state.tolist()}")


@dataclass
class VehicleParams:
    """Mass (kg), diagonal inertia (kg m^2) and gravity (m/s^2).

    ``m`` and the entries of ``J`` may be tape Vars when they are being
    learned; ``g`` is always a constant.
    """

    m: object = 1.0
    J: tuple = (0.01, 0.01, 0.02)
    g: float = GRAVITY

    def __post_init__(self):
        if ad.value(self.m) <= 0:
            raise ValueError(f"mass must be positive, got {ad.value(self.m)}")
        if len(self.J) != 3 or min(ad.value(j) for j in self.J) <= 0:
            raise ValueError(f"inertia must be three positive values, got {self.J}")

    def values(self) -> "VehicleParams":
        return VehicleParams(float(ad.value(self.m)), tuple(float(ad.value(j)) for j in self.J), self.g)

    @property
    def hover_thrust(self) -> float:
        return float(ad.value(self.m)) * self.g


@dataclass
class ControlBounds:
    t_min: float = 0.0
    t_max: float = 20.0
    tau_max: float = 1.0
    lower: np.ndarray = field(init=False, repr=False)
    upper: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.t_min < self.t_max or self.tau_max <= 0:
            raise ValueError("invalid control bounds")
        self.lower = np.array([self.t_min, -self.tau_max, -self.tau_max, -self.tau_max])
        self.upper = np.array([self.t_max, self.tau_max, self.tau_max, self.tau_max])

    def clamp(self, u) -> np.ndarray:
        return np.minimum(np.maximum(u, self.lower), self.upper)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2 * math.pi)
    if w <= 0:
        w += 2 * math.pi
    return w - math.pi


def _parts(x):
    if isinstance(x, ad.Var):
        return [x[i] for i in range(len(x))]
    return np.asarray(x, dtype=float).tolist()


def euler_to_rotation(phi, theta, psi):
    """R = Rz(psi) Ry(theta) Rx(phi), body to world (nested lists)."""
    cf, sf = ad.cos(phi), ad.sin(phi)
    ct, st = ad.cos(theta), ad.sin(theta)
    cp, sp = ad.cos(psi), ad.sin(psi)
    return [
        [ct * cp, sf * st * cp - cf * sp, cf * st * cp + sf * sp],
        [ct * sp, sf * st * sp + cf * cp, cf * st * sp - sf * cp],
        [-st, sf * ct, cf * ct],
    ]


def rotation_matrix(att) -> np.ndarray:
    phi, theta, psi = (float(a) for a in ad.value(att))
    return np.array(euler_to_rotation(phi, theta, psi))


def rotation_to_euler(R):
    """Inverse of :func:`euler_to_rotation`; R may be an array or nested list of Vars."""
    r20, r21, r22 = R[2][0], R[2][1], R[2][2]
    r10, r00 = R[1][0], R[0][0]
    s = -r20
    if abs(ad.value(s)) >= math.sin(PITCH_GUARD):
        raise GimbalLockError(np.r_[np.zeros(3), 0.0, math.asin(max(-1.0, min(1.0, float(ad.value(s))))), 0.0,
                                    np.zeros(6)])
    theta = ad.asin(s)
    phi = ad.atan2(r21, r22)
    psi = ad.atan2(r10, r00)
    return phi, theta, psi


def _guard(x, theta):
    if not abs(ad.value(theta)) < PITCH_GUARD:
        raise GimbalLockError(x)


def derivative(x, u, p: VehicleParams):
    """Continuous-time state rate from the Newton-Euler equations."""
    _, _, _, phi, theta, psi, vx, vy, vz, wp, wq, wr = _parts(x)
    T, tx, ty, tz = _parts(u)
    _guard(x, theta)
    Jx, Jy, Jz = p.J
    m = p.m

    cf, sf = ad.cos(phi), ad.sin(phi)
    ct, st = ad.cos(theta), ad.sin(theta)
    cp, sp = ad.cos(psi), ad.sin(psi)
    tt = st / ct

    a = T / m
    zb = (cf * st * cp + sf * sp, cf * st * sp - sf * cp, cf * ct)

    qs_rc = wq * sf + wr * cf
    dphi = wp + qs_rc * tt
    dtheta = wq * cf - wr * sf
    dpsi = qs_rc / ct

    dwp = (tx - (Jz - Jy) * wq * wr) / Jx
    dwq = (ty - (Jx - Jz) * wr * wp) / Jy
    dwr = (tz - (Jy - Jx) * wp * wq) / Jz

    return ad.array([vx, vy, vz, dphi, dtheta, dpsi,
                     a * zb[0], a * zb[1], a * zb[2] - p.g,
                     dwp, dwq, dwr])


def derivative_jacobians(x, u, p: VehicleParams):
    """Analytic (df/dx, df/du) of :func:`derivative`."""
    _, _, _, phi, theta, psi, _, _, _, wp, wq, wr = _parts(x)
    T = _parts(u)[0]
    _guard(x, theta)
    Jx, Jy, Jz = p.J
    m = p.m

    cf, sf = ad.cos(phi), ad.sin(phi)
    ct, st = ad.cos(theta), ad.sin(theta)
    cp, sp = ad.cos(psi), ad.sin(psi)
    tt = st / ct
    a = T / m

    qs_rc = wq * sf + wr * cf
    qc_rs = wq * cf - wr * sf

    fx = [[0.0] * NX for _ in range(NX)]
    fu = [[0.0] * NU for _ in range(NX)]
    for i in range(3):
        fx[i][6 + i] = 1.0

    fx[3][3] = qc_rs * tt
    fx[3][4] = qs_rc * (1.0 + tt * tt)
    fx[3][9] = 1.0
    fx[3][10] = sf * tt
    fx[3][11] = cf * tt
    fx[4][3] = -qs_rc
    fx[4][10] = cf
    fx[4][11] = -sf
    fx[5][3] = qc_rs / ct
    fx[5][4] = qs_rc * st / (ct * ct)
    fx[5][10] = sf / ct
    fx[5][11] = cf / ct

    dz_dphi = (-sf * st * cp + cf * sp, -sf * st * sp - cf * cp, -sf * ct)
    dz_dtheta = (cf * ct * cp, cf * ct * sp, -cf * st)
    dz_dpsi = (-cf * st * sp + sf * cp, cf * st * cp + sf * sp, 0.0)
    zb = (cf * st * cp + sf * sp, cf * st * sp - sf * cp, cf * ct)
    for i in range(3):
        fx[6 + i][3] = a * dz_dphi[i]
        fx[6 + i][4] = a * dz_dtheta[i]
        fx[6 + i][5] = a * dz_dpsi[i]
        fu[6 + i][0] = zb[i] / m

    fx[9][10] = -(Jz - Jy) * wr / Jx
    fx[9][11] = -(Jz - Jy) * wq / Jx
    fx[10][9] = -(Jx - Jz) * wr / Jy
    fx[10][11] = -(Jx - Jz) * wp / Jy
    fx[11][9] = -(Jy - Jx) * wq / Jz
    fx[11][10] = -(Jy - Jx) * wp / Jz
    fu[9][1] = 1.0 / Jx
    fu[10][2] = 1.0 / Jy
    fu[11][3] = 1.0 / Jz
    return ad.array(fx), ad.array(fu)


def _wrap_state(x):
    """Re-wrap the Euler angles; a constant shift, so derivatives pass through."""
    xv = ad.value(x)
    shift = np.zeros(NX)
    for i in (3, 4, 5):
        shift[i] = wrap_angle(xv[i]) - xv[i]
    if not shift.any():
        return x
    return x + shift


def _check_finite(x):
    if not np.all(np.isfinite(ad.value(x))):
        raise DivergenceError(x)


def step(x, u, p: VehicleParams, dt: float, wrench=None):
    """One RK4 step of the model; ``wrench`` adds a constant external
    (world force, body torque) over the step."""
    f = derivative if wrench is None else _with_wrench(wrench)
    _check_finite(x)
    _check_finite(u)
    k1 = f(x, u, p)
    k2 = f(x + (0.5 * dt) * k1, u, p)
    k3 = f(x + (0.5 * dt) * k2, u, p)
    k4 = f(x + dt * k3, u, p)
    xn = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _check_finite(xn)
    return _wrap_state(xn)


def _with_wrench(wrench):
    force, torque = (np.asarray(w, dtype=float) for w in wrench)

    def f(x, u, p):
        xd = derivative(x, u, p)
        extra = np.zeros(NX)
        extra[6:9] = force / float(ad.value(p.m))
        extra[9:12] = torque / np.array([float(ad.value(j)) for j in p.J])
        return xd + extra

    return f


def step_jacobians(x, u, p: VehicleParams, dt: float):
    """Exact Jacobians of :func:`step` by differentiating the RK4 stages.

    Returns ``(x_next, A, B)``. Works tape-free or with Vars in ``p``.
    """
    h = dt
    eye = np.eye(NX)
    k1 = derivative(x, u, p)
    f1x, f1u = derivative_jacobians(x, u, p)
    x2 = x + (0.5 * h) * k1
    k2 = derivative(x2, u, p)
    f2x, f2u = derivative_jacobians(x2, u, p)
    d2x = f2x @ (eye + (0.5 * h) * f1x)
    d2u = f2x @ ((0.5 * h) * f1u) + f2u
    x3 = x + (0.5 * h) * k2
    k3 = derivative(x3, u, p)
    f3x, f3u = derivative_jacobians(x3, u, p)
    d3x = f3x @ (eye + (0.5 * h) * d2x)
    d3u = f3x @ ((0.5 * h) * d2u) + f3u
    x4 = x + h * k3
    k4 = derivative(x4, u, p)
    f4x, f4u = derivative_jacobians(x4, u, p)
    d4x = f4x @ (eye + h * d3x)
    d4u = f4x @ (h * d3u) + f4u
    xn = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    A = eye + (h / 6.0) * (f1x + 2.0 * d2x + 2.0 * d3x + d4x)
    B = (h / 6.0) * (f1u + 2.0 * d2u + 2.0 * d3u + d4u)
    _check_finite(xn)
    return _wrap_state(xn), A, B


def linearize(x, u, p: VehicleParams, dt: float):
    """(A, B) = (d step/dx, d step/du), read off the tape one output row per
    backward pass."""
    tape = ad.Tape()
    xv = tape.var(np.asarray(x, dtype=float))
    uv = tape.var(np.asarray(u, dtype=float))
    xn = step(xv, uv, p.values(), dt)
    A = np.zeros((NX, NX))
    B = np.zeros((NX, NU))
    for i in range(NX):
        g = tape.backward(xn[i])
        A[i] = g.wrt(xv)
        B[i] = g.wrt(uv)
    return A, B


def hover_state(att=(0.0, 0.0, 0.0)) -> np.ndarray:
    x = np.zeros(NX)
    x[ATT] = att
    return x


def hover_input(p: VehicleParams) -> np.ndarray:
    return np.array([p.hover_thrust, 0.0, 0.0, 0.0])
