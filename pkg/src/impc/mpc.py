"""Box-constrained iLQR MPC and its gradients.

The forward solve runs on plain floats. :func:`backward_fixed_point` repeats
one LQR backward/forward pass at the converged trajectory with the problem
parameters on a tape, which gives the derivative of the optimal trajectory
without unrolling the solver. :func:`kkt_gradient` is the dense
implicit-differentiation oracle for linear-quadratic problems.

Trajectory layout: ``N`` states ``x_0..x_{N-1}`` (``x_0`` is the initial
state) and ``N-1`` controls. The stage cost ``dz' Q dz + p' dz`` with
``dz = (x_k - x_ref, u_k - u_ref)`` is charged for ``k = 0..N-2``; the final
state pays the state block of ``Q`` and ``p``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from .linalg import SingularMatrixError, solve_linear

BOUND_TOL = 1e-9


class MpcError(RuntimeError):
    pass


class NotConvergedError(MpcError):
    pass


# ---------------------------------------------------------------- models


class QuadrotorModel:
    nx, nu = dyn.NX, dyn.NU

    def __init__(self, dt: float = 0.02):
        self.dt = dt

    def step(self, x, u, params):
        return dyn.step(x, u, params, self.dt)

    def jacobians(self, x, u, params):
        return dyn.step_jacobians(x, u, params, self.dt)

    def default_u_ref(self, params) -> np.ndarray:
        return dyn.hover_input(params.values())

    # position and velocity enter the step linearly
    _CURVED = np.r_[3:6, 9:12, 12:16]

    def hessian_vp(self, x, u, params, lam, h: float = 1e-5) -> np.ndarray:
        """Plain-float d^2 (lam . step) / dz^2 over z = (x, u), by central
        differences of the analytic Jacobians."""
        pv = dyn.VehicleParams(float(ad.value(params.m)), tuple(float(ad.value(j)) for j in params.J), params.g)
        z0 = np.concatenate([x, u])
        lam = np.asarray(ad.value(lam), dtype=float)
        H = np.zeros((z0.size, z0.size))
        for j in self._CURVED:
            cols = []
            for sgn in (1.0, -1.0):
                z = z0.copy()
                z[j] += sgn * h
                _, A, B = dyn.step_jacobians(z[:self.nx], z[self.nx:], pv, self.dt)
                cols.append(lam @ np.hstack([A, B]))
            H[:, j] = (cols[0] - cols[1]) / (2 * h)
        return 0.5 * (H + H.T)


@dataclass
class LinearParams:
    A: object
    B: object
    c: object = None


class LinearModel:
    """x' = A x + B u + c; ``params`` is a :class:`LinearParams` (entries may be Vars)."""

    def __init__(self, nx: int, nu: int):
        self.nx, self.nu = nx, nu

    def step(self, x, u, params):
        xn = ad.matmul(params.A, x) + ad.matmul(params.B, u)
        return xn if params.c is None else xn + params.c

    def jacobians(self, x, u, params):
        return self.step(x, u, params), params.A, params.B

    def default_u_ref(self, params) -> np.ndarray:
        return np.zeros(self.nu)

    def hessian_vp(self, x, u, params, lam) -> np.ndarray:
        return np.zeros((self.nx + self.nu, self.nx + self.nu))


def double_integrator(dt: float = 0.1, dims: int = 1) -> tuple[LinearModel, LinearParams]:
    """Position/velocity per axis, acceleration input."""
    A = np.eye(2 * dims)
    B = np.zeros((2 * dims, dims))
    for i in range(dims):
        A[i, dims + i] = dt
        B[i, i] = 0.5 * dt * dt
        B[dims + i, i] = dt
    return LinearModel(2 * dims, dims), LinearParams(A, B)


# ---------------------------------------------------------------- problem


@dataclass
class CostWeights:
    attitude: float = 10.0
    rate: float = 0.1
    position: float = 0.0
    velocity: float = 0.0
    thrust: float = 0.1
    torque: float = 1.0

    def matrix(self) -> np.ndarray:
        d = [self.position] * 3 + [self.attitude] * 3 + [self.velocity] * 3 + [self.rate] * 3 \
            + [self.thrust] + [self.torque] * 3
        return np.diag(d)


@dataclass
class MpcProblem:
    """One finite-horizon problem. ``Q``, ``p`` and ``params`` may hold Vars."""

    model: object = field(default_factory=QuadrotorModel)
    params: object = field(default_factory=dyn.VehicleParams)
    N: int = 10
    Q: object = None
    p: object = None
    x_ref: np.ndarray = None
    u_ref: np.ndarray = None
    lower: np.ndarray = None
    upper: np.ndarray = None
    max_iter: int = 50
    tol: float = 1e-6

    def __post_init__(self):
        nx, nu = self.model.nx, self.model.nu
        nz = nx + nu
        if self.N < 2:
            raise ValueError("horizon N must be >= 2")
        if self.Q is None:
            self.Q = CostWeights().matrix() if isinstance(self.model, QuadrotorModel) else np.eye(nz)
        if self.p is None:
            self.p = np.zeros(nz)
        Qv = np.asarray(ad.value(self.Q), dtype=float)
        if Qv.shape != (nz, nz) or np.shape(ad.value(self.p)) != (nz,):
            raise ValueError(f"Q must be {nz}x{nz} and p length {nz}")
        if np.any(np.diag(Qv) < 0) or np.any(np.diag(Qv)[nx:] <= 0):
            raise ValueError("Q must have non-negative diagonal and a positive control block")
        if np.min(np.linalg.eigvalsh(0.5 * (Qv + Qv.T))) < -1e-12:
            raise ValueError("Q must be positive semi-definite")
        self.x_ref = np.zeros(nx) if self.x_ref is None else np.asarray(self.x_ref, dtype=float)
        if self.u_ref is None:
            self.u_ref = self.model.default_u_ref(self.params)
        self.u_ref = np.asarray(self.u_ref, dtype=float)
        if not (np.all(np.isfinite(self.x_ref)) and np.all(np.isfinite(self.u_ref))):
            raise ValueError("references must be finite")
        if self.lower is None:
            self.lower = np.full(nu, -np.inf)
        if self.upper is None:
            self.upper = np.full(nu, np.inf)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)

    @classmethod
    def quadrotor(cls, params=None, bounds: dyn.ControlBounds | None = None, N: int = 10,
                  dt: float = 0.02, weights: CostWeights | None = None, **kw) -> "MpcProblem":
        bounds = bounds or dyn.ControlBounds()
        return cls(model=QuadrotorModel(dt), params=params or dyn.VehicleParams(), N=N,
                   Q=(weights or CostWeights()).matrix(), lower=bounds.lower, upper=bounds.upper, **kw)

    def with_params(self, params) -> "MpcProblem":
        """Same problem with new dynamics parameters (u_ref kept)."""
        return MpcProblem(self.model, params, self.N, self.Q, self.p, self.x_ref, self.u_ref,
                          self.lower, self.upper, self.max_iter, self.tol)

    def detached(self) -> "MpcProblem":
        """Plain-float copy (the forward solve never touches a tape)."""
        val = lambda v: None if v is None else np.asarray(ad.value(v), dtype=float)
        params = self.params
        if isinstance(params, dyn.VehicleParams):
            params = dyn.VehicleParams(float(ad.value(params.m)), tuple(float(ad.value(j)) for j in params.J),
                                       params.g)
        elif isinstance(params, LinearParams):
            params = LinearParams(val(params.A), val(params.B), val(params.c))
        return MpcProblem(self.model, params, self.N, val(self.Q), val(self.p), self.x_ref, self.u_ref,
                          self.lower, self.upper, self.max_iter, self.tol)

    def clamp(self, u):
        return np.minimum(np.maximum(u, self.lower), self.upper)


@dataclass
class MpcSolution:
    xs: np.ndarray
    us: np.ndarray
    cost: float
    iterations: int
    converged: bool
    K: np.ndarray
    k: np.ndarray
    active: np.ndarray
    reg: float = 0.0
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------- cost


def trajectory_cost(prob: MpcProblem, xs, us) -> float:
    Q, p = np.asarray(ad.value(prob.Q)), np.asarray(ad.value(prob.p))
    nx = prob.model.nx
    c = 0.0
    for k in range(prob.N - 1):
        z = np.concatenate([xs[k] - prob.x_ref, us[k] - prob.u_ref])
        c += z @ Q @ z + p @ z
    dx = xs[-1] - prob.x_ref
    return float(c + dx @ Q[:nx, :nx] @ dx + p[:nx] @ dx)


def _rollout(prob, x0, us):
    xs = [np.asarray(x0, dtype=float)]
    for k in range(prob.N - 1):
        xs.append(np.asarray(prob.model.step(xs[-1], us[k], prob.params), dtype=float))
    return np.array(xs)


def _active_set(prob, u, k_full):
    """Controls sitting on a bound whose Newton step points outward."""
    lo = (u <= prob.lower + BOUND_TOL) & (k_full < 0)
    hi = (u >= prob.upper - BOUND_TOL) & (k_full > 0)
    return lo | hi


# ---------------------------------------------------------------- iLQR


def _backward_pass(prob, xs, us, As, Bs, reg):
    nx, nu = prob.model.nx, prob.model.nu
    Q, p = np.asarray(ad.value(prob.Q)), np.asarray(ad.value(prob.p))
    n = prob.N - 1
    Ks, ks = np.zeros((n, nu, nx)), np.zeros((n, nu))
    active = np.zeros((n, nu), dtype=bool)
    dx = xs[-1] - prob.x_ref
    Vx = 2 * Q[:nx, :nx] @ dx + p[:nx]
    Vxx = 2 * Q[:nx, :nx]
    dv1 = dv2 = 0.0
    for t in range(n - 1, -1, -1):
        z = np.concatenate([xs[t] - prob.x_ref, us[t] - prob.u_ref])
        lz = 2 * Q @ z + p
        A, B = As[t], Bs[t]
        Qx = lz[:nx] + A.T @ Vx
        Qu = lz[nx:] + B.T @ Vx
        VB = Vxx @ B
        Qxx = 2 * Q[:nx, :nx] + A.T @ Vxx @ A
        Quu = 2 * Q[nx:, nx:] + B.T @ VB + reg * np.eye(nu)
        Qux = 2 * Q[nx:, :nx] + VB.T @ A
        k_full = -solve_linear(Quu, Qu)
        act = _active_set(prob, us[t], k_full)
        free = ~act
        K = np.zeros((nu, nx))
        k = np.zeros(nu)
        if free.any():
            sol = solve_linear(Quu[np.ix_(free, free)], np.column_stack([Qu[free], Qux[free]]))
            k[free] = -sol[:, 0]
            K[free] = -sol[:, 1:]
        Ks[t], ks[t], active[t] = K, k, act
        Vx = Qx + K.T @ Quu @ k + K.T @ Qu + Qux.T @ k
        Vxx = Qxx + K.T @ Quu @ K + K.T @ Qux + Qux.T @ K
        Vxx = 0.5 * (Vxx + Vxx.T)
        dv1 += k @ Qu
        dv2 += 0.5 * k @ Quu @ k
    return Ks, ks, active, dv1, dv2


def ilqr_solve(prob: MpcProblem, x_init, us_init=None, trace: bool = False) -> MpcSolution:
    """Solve the problem from ``x_init``; ``us_init`` warm-starts the controls."""
    x_init = np.asarray(x_init, dtype=float)
    if not np.all(np.isfinite(x_init)):
        raise ValueError("x_init must be finite")
    if ad._common_tape(_leaves(prob)) is not None:
        prob = prob.detached()
    n = prob.N - 1
    us = np.tile(prob.u_ref, (n, 1)) if us_init is None else np.array(us_init, dtype=float)
    if us.shape != (n, prob.model.nu):
        raise ValueError(f"warm start must be {(n, prob.model.nu)}, got {us.shape}")
    us = prob.clamp(us)
    try:
        xs = _rollout(prob, x_init, us)
    except (dyn.DivergenceError, dyn.GimbalLockError) as e:
        raise MpcError(f"initial rollout failed: {e}") from e
    cost = trajectory_cost(prob, xs, us)
    reg = 1e-9
    records = []
    converged = False
    it = 0
    Ks = ks = active = None
    while it < prob.max_iter:
        it += 1
        As, Bs = [], []
        for t in range(n):
            _, A, B = prob.model.jacobians(xs[t], us[t], prob.params)
            As.append(np.asarray(A, dtype=float))
            Bs.append(np.asarray(B, dtype=float))
        accepted = False
        while not accepted:
            try:
                Ks, ks, active, dv1, dv2 = _backward_pass(prob, xs, us, As, Bs, reg)
            except SingularMatrixError:
                reg *= 10
                if reg > 1e10:
                    raise MpcError("Riccati recursion singular after regularization retries")
                continue
            if np.max(np.abs(ks)) < prob.tol:
                converged = True
                break
            for alpha in 0.5 ** np.arange(11):
                try:
                    xs_new, us_new = _forward(prob, x_init, xs, us, Ks, ks, alpha)
                except (dyn.DivergenceError, dyn.GimbalLockError):
                    continue
                c_new = trajectory_cost(prob, xs_new, us_new)
                expected = alpha * dv1 + alpha * alpha * dv2
                if c_new <= cost + 1e-4 * expected and c_new <= cost:
                    du = float(np.max(np.abs(us_new - us)))
                    xs, us, cost = xs_new, us_new, c_new
                    accepted = True
                    reg = max(reg / 2, 1e-9)
                    break
            if not accepted:
                reg *= 10
                if reg > 1e10:
                    break
        if trace:
            records.append((it, cost, 0.0 if converged or not accepted else du, reg))
        if converged:
            break
        if not accepted:
            if not np.all(np.isfinite(xs)):
                raise MpcError("rollout diverged after regularization retries")
            break
        if du < prob.tol:
            converged = True
            break
    return MpcSolution(xs, us, cost, it, converged, Ks, ks, _bound_mask(prob, us), reg, records)


def _forward(prob, x_init, xs, us, Ks, ks, alpha):
    n = prob.N - 1
    xn = np.empty_like(xs)
    un = np.empty_like(us)
    xn[0] = x_init
    for t in range(n):
        un[t] = prob.clamp(us[t] + alpha * ks[t] + Ks[t] @ (xn[t] - xs[t]))
        xn[t + 1] = prob.model.step(xn[t], un[t], prob.params)
    return xn, un


def _bound_mask(prob, us):
    return (us <= prob.lower + BOUND_TOL) | (us >= prob.upper - BOUND_TOL)


def signed_active(prob: MpcProblem, us) -> np.ndarray:
    """-1 / +1 where a control sits on its lower / upper bound, else 0."""
    us = np.asarray(us, dtype=float)
    return np.where(us <= prob.lower + BOUND_TOL, -1, np.where(us >= prob.upper - BOUND_TOL, 1, 0))


def write_trace_csv(path, sol: MpcSolution):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "cost", "du_inf", "reg"])
        for row in sol.trace:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


class MpcController:
    """Receding-horizon wrapper: solves, returns the first control and keeps
    the shifted solution as the next warm start."""

    def __init__(self, prob: MpcProblem):
        self.prob = prob
        self.last: MpcSolution | None = None

    def reset(self):
        self.last = None

    def warm_start(self):
        if self.last is None:
            return None
        us = self.last.us
        return np.vstack([us[1:], us[-1:]])

    def step(self, x_init) -> np.ndarray:
        self.last = ilqr_solve(self.prob, x_init, self.warm_start())
        return self.last.us[0].copy()


def mpc_step(prob: MpcProblem, x_init, warm: MpcSolution | None = None) -> tuple[np.ndarray, MpcSolution]:
    """First control of the solution from ``x_init`` (warm-started from the
    shifted ``warm`` solution when given) and the solution itself."""
    us0 = None if warm is None else np.vstack([warm.us[1:], warm.us[-1:]])
    sol = ilqr_solve(prob, x_init, us0)
    return sol.us[0].copy(), sol


# ---------------------------------------------------------------- gradients


def _stage_grad(Q, p, z):
    return 2.0 * ad.matmul(Q, z) + p


def backward_fixed_point(prob: MpcProblem, sol: MpcSolution, x_init=None, tape: ad.Tape | None = None):
    """One LQR pass at the fixed point, recorded on a tape.

    The pass carries the dynamics curvature (costate times the step
    Hessian, as in DDP), so it is a Newton step. A Newton step's map has
    zero derivative at its own fixed point, so differentiating this single
    pass gives the implicit derivative of the optimum. The curvature only
    multiplies zero-valued terms on the tape and is kept as plain values.

    ``prob.params`` / ``prob.Q`` / ``prob.p`` carry the Vars of interest.
    Returns ``(xs, us)`` as Vars whose values equal the solution and whose
    derivatives are those of the optimal trajectory. Clamped controls are
    held fixed. Seed with ``dl/dmu`` via :func:`trajectory_vjp`.
    """
    if not sol.converged:
        raise NotConvergedError("backward_fixed_point needs a converged solution")
    if tape is None:
        tape = ad._common_tape(_leaves(prob))
    nx, nu = prob.model.nx, prob.model.nu
    n = prob.N - 1
    xs, us = sol.xs, sol.us
    x0 = xs[0] if x_init is None else np.asarray(x_init, dtype=float)
    Q, p = prob.Q, prob.p
    Qxx, Quu, Qux = Q[:nx, :nx], Q[nx:, nx:], Q[nx:, :nx]
    px = p[:nx]

    As, Bs, ds = [], [], []
    for t in range(n):
        xn, A, B = prob.model.jacobians(xs[t], us[t], prob.params)
        As.append(A)
        Bs.append(B)
        ds.append(xn - xs[t + 1])   # zero in value, carries dF/dtheta

    free_sets = [~sol.active[t] for t in range(n)]
    dxT = xs[-1] - prob.x_ref
    Vx = 2.0 * ad.matmul(Qxx, dxT) + px
    Vxx = 2.0 * Qxx
    Ks, ks = [None] * n, [None] * n
    for t in range(n - 1, -1, -1):
        z = np.concatenate([xs[t] - prob.x_ref, us[t] - prob.u_ref])
        lz = _stage_grad(Q, p, z)
        A, B, d = As[t], Bs[t], ds[t]
        Vd = Vx + ad.matmul(Vxx, d)
        Qx = lz[0:nx] + ad.matmul(ad.transpose(A), Vd)
        Qu = lz[nx:] + ad.matmul(ad.transpose(B), Vd)
        VB = ad.matmul(Vxx, B)
        Hc = prob.model.hessian_vp(xs[t], us[t], prob.params, Vx)
        Qxx_t = 2.0 * Qxx + ad.matmul(ad.transpose(A), ad.matmul(Vxx, A)) + Hc[:nx, :nx]
        Quu_t = 2.0 * Quu + ad.matmul(ad.transpose(B), VB) + Hc[nx:, nx:]
        Qux_t = 2.0 * Qux + ad.matmul(ad.transpose(VB), A) + Hc[nx:, :nx]
        free = np.flatnonzero(free_sets[t])
        if len(free) == 0:
            k = np.zeros(nu)
            K = np.zeros((nu, nx))
        else:
            sel = np.zeros((nu, len(free)))
            sel[free, np.arange(len(free))] = 1.0
            Quu_f = ad.matmul(ad.matmul(sel.T, Quu_t), sel)
            k = -ad.matmul(sel, ad.solve(Quu_f, ad.matmul(sel.T, Qu)))
            K = -ad.matmul(sel, ad.solve(Quu_f, ad.matmul(sel.T, Qux_t)))
        Ks[t], ks[t] = K, k
        KT = ad.transpose(K)
        Vx = Qx + ad.matmul(KT, ad.matmul(Quu_t, k)) + ad.matmul(KT, Qu) + ad.matmul(ad.transpose(Qux_t), k)
        Vxx = Qxx_t + ad.matmul(KT, ad.matmul(Quu_t, K)) + ad.matmul(KT, Qux_t) \
            + ad.matmul(ad.transpose(Qux_t), K)
        Vxx = 0.5 * (Vxx + ad.transpose(Vxx))

    dx = np.zeros(nx)
    out_x = [xs[0] + dx]
    out_u = []
    for t in range(n):
        du = ks[t] + ad.matmul(Ks[t], dx)
        dx = ad.matmul(As[t], dx) + ad.matmul(Bs[t], du) + ds[t]
        out_u.append(us[t] + du)
        out_x.append(xs[t + 1] + dx)
    return out_x, out_u


def _leaves(prob):
    items = [prob.Q, prob.p]
    params = prob.params
    if isinstance(params, dyn.VehicleParams):
        items += [params.m, *params.J]
    elif isinstance(params, LinearParams):
        items += [params.A, params.B, params.c]
    return items


def trajectory_vjp(xs_var, us_var, dl_dx, dl_du):
    """Scalar ``sum <dl/dmu, mu(theta)>`` to seed backward with."""
    s = 0.0
    for t, x in enumerate(xs_var):
        if np.any(dl_dx[t]):
            s = s + ad.dot(x, dl_dx[t])
    for t, u in enumerate(us_var):
        if np.any(dl_du[t]):
            s = s + ad.dot(u, dl_du[t])
    return s


# ---------------------------------------------------------------- KKT oracle


@dataclass
class KktSolution:
    xs: np.ndarray
    us: np.ndarray
    lam: np.ndarray
    matrix: np.ndarray
    active: np.ndarray


def _kkt_layout(prob):
    nx, nu, N = prob.model.nx, prob.model.nu, prob.N
    nvar = N * nx + (N - 1) * nu
    return nx, nu, N, nvar


def _split(prob, mu):
    nx, nu, N, _ = _kkt_layout(prob)
    return mu[:N * nx].reshape(N, nx), mu[N * nx:].reshape(N - 1, nu)


def kkt_system(prob: MpcProblem, x_init, active=None):
    """Dense KKT matrix and right-hand side of the equality-constrained QP
    (dynamics, initial state and the given active bounds as equalities).

    ``active`` is an (N-1, nu) array of -1 (at lower), +1 (at upper) or 0.
    """
    if not isinstance(prob.model, LinearModel):
        raise TypeError("kkt_system needs a linear model")
    nx, nu, N, nvar = _kkt_layout(prob)
    Q = np.asarray(ad.value(prob.Q))
    p = np.asarray(ad.value(prob.p))
    A = np.asarray(ad.value(prob.params.A))
    B = np.asarray(ad.value(prob.params.B))
    c = np.zeros(nx) if prob.params.c is None else np.asarray(ad.value(prob.params.c))
    active = np.zeros((N - 1, nu), dtype=int) if active is None else np.asarray(active, dtype=int)

    H = np.zeros((nvar, nvar))
    g = np.zeros(nvar)
    xi = lambda k: slice(k * nx, (k + 1) * nx)
    ui = lambda k: slice(N * nx + k * nu, N * nx + (k + 1) * nu)
    for k in range(N - 1):
        idx = np.r_[np.arange(k * nx, (k + 1) * nx), np.arange(N * nx + k * nu, N * nx + (k + 1) * nu)]
        H[np.ix_(idx, idx)] += 2 * Q
        zr = np.concatenate([prob.x_ref, prob.u_ref])
        g[idx] += p - 2 * Q @ zr
    H[xi(N - 1), xi(N - 1)] += 2 * Q[:nx, :nx]
    g[xi(N - 1)] += p[:nx] - 2 * Q[:nx, :nx] @ prob.x_ref

    rows, rhs = [], []
    for i in range(nx):
        r = np.zeros(nvar)
        r[i] = 1.0
        rows.append(r)
        rhs.append(x_init[i])
    for k in range(N - 1):
        for i in range(nx):
            r = np.zeros(nvar)
            r[xi(k)] = A[i]
            r[ui(k)] = B[i]
            r[(k + 1) * nx + i] = -1.0
            rows.append(r)
            rhs.append(-c[i])
    for k in range(N - 1):
        for i in range(nu):
            if active[k, i]:
                r = np.zeros(nvar)
                r[N * nx + k * nu + i] = 1.0
                rows.append(r)
                rhs.append(prob.lower[i] if active[k, i] < 0 else prob.upper[i])
    G = np.array(rows)
    ncon = len(rows)
    K = np.block([[H, G.T], [G, np.zeros((ncon, ncon))]])
    return K, np.concatenate([-g, rhs]), active


def kkt_solve(prob: MpcProblem, x_init, active=None) -> KktSolution:
    """Solve the linear-quadratic OCP as one dense KKT system."""
    K, rhs, active = kkt_system(prob, np.asarray(x_init, dtype=float), active)
    sol = solve_linear(K, rhs)
    _, _, _, nvar = _kkt_layout(prob)
    xs, us = _split(prob, sol[:nvar])
    return KktSolution(xs, us, sol[nvar:], K, active)


def kkt_stationarity(prob: MpcProblem, kkt: KktSolution) -> float:
    """inf-norm of grad_mu J + grad_mu xi . lambda at the solution."""
    _, _, _, nvar = _kkt_layout(prob)
    mu = np.concatenate([kkt.xs.ravel(), kkt.us.ravel()])
    H = kkt.matrix[:nvar, :nvar]
    G = kkt.matrix[nvar:, :nvar]
    _, rhs, _ = kkt_system(prob, kkt.xs[0], kkt.active)
    g = -rhs[:nvar]
    return float(np.max(np.abs(H @ mu + g + G.T @ kkt.lam)))


def _lagrangian_terms(prob, mu, lam, x_init, active):
    """(grad_mu L, xi) as tape expressions in the problem parameters, with
    mu and lambda held constant."""
    nx, nu, N, nvar = _kkt_layout(prob)
    xs, us = _split(prob, mu)
    Q, p = prob.Q, prob.p
    A, B, c = prob.params.A, prob.params.B, prob.params.c
    # constraint ordering matches kkt_system
    lam0 = lam[:nx]
    lam_dyn = lam[nx:nx + (N - 1) * nx].reshape(N - 1, nx)
    lam_act = lam[nx + (N - 1) * nx:]
    gx = [None] * N
    gu = [None] * (N - 1)
    for k in range(N - 1):
        z = np.concatenate([xs[k] - prob.x_ref, us[k] - prob.u_ref])
        gz = _stage_grad(Q, p, z)
        gx[k] = gz[0:nx] + ad.matmul(lam_dyn[k], A)
        gu[k] = gz[nx:] + ad.matmul(lam_dyn[k], B)
    Qxx = Q[0:nx, 0:nx]
    px = p[0:nx]
    gx[N - 1] = 2.0 * ad.matmul(Qxx, xs[N - 1] - prob.x_ref) + px
    gx[0] = gx[0] + lam0
    for k in range(1, N):
        gx[k] = gx[k] - lam_dyn[k - 1]
    j = 0
    for k in range(N - 1):
        for i in range(nu):
            if active[k, i]:
                e = np.zeros(nu)
                e[i] = lam_act[j]
                gu[k] = gu[k] + e
                j += 1
    grad = ad.concatenate([*(_as_vec(g, nx) for g in gx), *(_as_vec(g, nu) for g in gu)])
    xi = [xs[0] - x_init]
    for k in range(N - 1):
        r = ad.matmul(A, xs[k]) + ad.matmul(B, us[k]) - xs[k + 1]
        if c is not None:
            r = r + c
        xi.append(r)
    return grad, ad.concatenate([_as_vec(v, nx) for v in xi])


def _as_vec(v, n):
    return v if isinstance(v, ad.Var) else np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()


def kkt_gradient(prob: MpcProblem, kkt: KktSolution, dl_dx, dl_du, x_init=None):
    """Implicit gradient of ``l(mu*)`` w.r.t. the Vars inside ``prob``.

    Solves ``K v = [dl/dmu; 0]`` and returns the Gradients of
    ``-(v_mu . grad_mu L + v_lam . xi)``; read them with ``.wrt(var)``.
    """
    _, _, _, nvar = _kkt_layout(prob)
    mu = np.concatenate([kkt.xs.ravel(), kkt.us.ravel()])
    x_init = kkt.xs[0] if x_init is None else np.asarray(x_init, dtype=float)
    seed = np.concatenate([np.asarray(dl_dx, float).ravel(), np.asarray(dl_du, float).ravel(),
                           np.zeros(kkt.matrix.shape[0] - nvar)])
    v = solve_linear(kkt.matrix.T, seed)
    grad_L, xi = _lagrangian_terms(prob, mu, kkt.lam, x_init, kkt.active)
    n_eq = len(ad.value(xi))
    s = -(ad.dot(grad_L, v[:nvar]) + ad.dot(xi, v[nvar:nvar + n_eq]))
    tape = ad._common_tape(_leaves(prob))
    if tape is None:
        raise ValueError("no tape Vars in the problem to differentiate")
    if not isinstance(s, ad.Var):
        raise ValueError("loss does not depend on the problem parameters")
    return tape.backward(s)
