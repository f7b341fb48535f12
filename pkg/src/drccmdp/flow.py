"""Projection dynamics whose equilibria are KKT points of the robust program.

The solver state stacks the occupation measure, the log-level variables and
one multiplier block per constraint family:

    z = (tau, x, beta, chi, zeta, theta1, theta2, varrho)

with beta for phi <= 0, chi for x <= 0, zeta for the joint-level constraint,
theta1/theta2 for the +/- halves of the equality M tau = rhs, and varrho for
tau >= 0.  Writing (u)+ = max(u, 0) componentwise, the flow is

    dtau/dt = -(grad f + Dphi_tau' (beta+phi)+ + M'(th1+om)+ - M'(th2-om)+ - (vr-tau)+)
    dx/dt   = -(diag(Dphi_x) (beta+phi)+ + (chi+x)+ - (zeta+h)+ 1)
    dm/dt   = (m + c(z))+ - m          for every multiplier block m,

all scaled by a time constant kappa.  Stationary points of this field are
exactly the KKT points of the reformulated problem; the squared field norm
plus half the squared distance to an equilibrium is non-increasing along
trajectories wherever the field is differentiable.

The x block needs special care near its domain boundary: the constraint
coefficient c_k(x_k) blows up like (1 - e^x)^(-1/2) as x -> 0, so when the
joint-level pressure drives x toward zero the braking layer becomes narrower
than machine resolution and no step size can cross it.  Integration therefore
runs on the projected flow: x is evaluated at min(x, wall) inside the field
and clamped back to the wall after every accepted step.  Equilibria with
inactive level constraints are untouched by the projection; instances that
need levels closer to one can raise the wall.

Two further integration realities: trajectories ride attractive sliding
surfaces (a constraint brake balancing a multiplier pressure) for hundreds
of time units, and on such a surface the exact kink of (u)+ forces infinite
branch switching.  integrate() therefore evaluates the branches through a
C1 quadratic blend of width `smooth` around the kink.  At any equilibrium
the blended value equals the stored multiplier exactly, so stationarity is
unaffected; complementarity and primal slacks shift by at most O(smooth^2).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .mdp import policy_from_occupation
from .model import Reformulation, X_GUARD

__all__ = [
    "IntegrationError",
    "StateLayout",
    "FlowField",
    "Trajectory",
    "FlowSolution",
    "DEFAULT_WALL",
    "vector_field",
    "accuracy",
    "block_speeds",
    "kkt_residual",
    "kkt_terms",
    "jacobian",
    "jacobian_fd",
    "lyapunov_value",
    "integrate",
    "solve_flow",
    "default_start",
]

DEFAULT_SMOOTH = 1e-6


def default_wall(ref: Reformulation) -> float:
    """Level wall for integration: a quarter of the joint budget per level.

    Holding every level variable at this value keeps the joint constraint
    satisfied with three quarters of its budget to spare, so wound-up joint
    pressure discharges at a healthy linear rate while the walls shield the
    integrator from the constraint-coefficient blow-up near x = 0.
    """
    return min(ref.log_eps / (4.0 * ref.K), X_GUARD)


def smooth_plus(u, delta: float):
    """Positive part, C1-blended over (-delta, delta) when delta > 0."""
    if delta <= 0.0:
        return np.maximum(u, 0.0)
    u = np.asarray(u, dtype=float)
    return np.where(
        u <= -delta, 0.0, np.where(u >= delta, u, (u + delta) ** 2 / (4.0 * delta))
    )


def smooth_plus_deriv(u, delta: float):
    if delta <= 0.0:
        return (np.asarray(u) > 0).astype(float)
    u = np.asarray(u, dtype=float)
    return np.where(
        u <= -delta, 0.0, np.where(u >= delta, 1.0, (u + delta) / (2.0 * delta))
    )


class IntegrationError(RuntimeError):
    """The time stepper could not complete (step underflow, solver failure)."""


class StateLayout:
    """Slice bookkeeping for the stacked flow state."""

    BLOCKS = ("tau", "x", "beta", "chi", "zeta", "theta1", "theta2", "varrho")

    def __init__(self, n: int, K: int, S: int):
        self.n, self.K, self.S = n, K, S
        sizes = [n, K, K, K, 1, S, S, n]
        self.sizes = dict(zip(self.BLOCKS, sizes))
        self.slices = {}
        start = 0
        for name, size in zip(self.BLOCKS, sizes):
            self.slices[name] = slice(start, start + size)
            start += size
        self.dim = start

    @classmethod
    def for_reformulation(cls, ref: Reformulation) -> "StateLayout":
        return cls(ref.n, ref.K, ref.S)

    def split(self, z: np.ndarray) -> dict[str, np.ndarray]:
        z = np.asarray(z, dtype=float)
        return {name: z[sl] for name, sl in self.slices.items()}

    def join(self, **blocks) -> np.ndarray:
        z = np.empty(self.dim)
        for name, sl in self.slices.items():
            z[sl] = blocks[name]
        return z

    def column_names(self) -> list[str]:
        out = []
        for name in self.BLOCKS:
            size = self.sizes[name]
            if size == 1:
                out.append(name)
            else:
                out.extend(f"{name}{i}" for i in range(size))
        return out


class FlowField:
    """Callable right-hand side of the (optionally projected) dynamics.

    With wall=None this is the plain field; phi and its derivatives are still
    evaluated at x clamped to X_GUARD so stage probes above the model domain
    stay finite.  With a wall, every x use inside the field is clamped to it,
    which together with the post-step clamp in integrate() realizes the
    projected flow described in the module docstring.
    """

    def __init__(
        self,
        ref: Reformulation,
        kappa: float = 1.0,
        wall: float | None = None,
        smooth: float = 0.0,
    ):
        self.ref = ref
        self.kappa = float(kappa)
        self.wall = wall
        self.smooth = float(smooth)
        self.layout = StateLayout.for_reformulation(ref)
        self.M = ref.M
        self.Mt = ref.M.T

    def __call__(self, t, z):
        return self.rhs(z)

    def _parts(self, z):
        lay = self.layout
        tau = z[lay.slices["tau"]]
        x = z[lay.slices["x"]]
        beta = z[lay.slices["beta"]]
        chi = z[lay.slices["chi"]]
        zeta = z[lay.slices["zeta"]]
        th1 = z[lay.slices["theta1"]]
        th2 = z[lay.slices["theta2"]]
        vr = z[lay.slices["varrho"]]
        return tau, x, beta, chi, zeta, th1, th2, vr

    def _xeval(self, x):
        if self.wall is not None:
            x = np.minimum(x, self.wall)
        return x

    def rhs(self, z):
        ref = self.ref
        tau, x, beta, chi, zeta, th1, th2, vr = self._parts(z)
        xe = self._xeval(x)
        xp = np.minimum(xe, X_GUARD)

        phi = ref.phi(tau, xp)
        Gt = ref.grad_phi_tau(tau, xp)
        gx = ref.grad_phi_x(tau, xp)
        om = ref.omega(tau)
        h = ref.h(xe)

        d = self.smooth
        a_beta = smooth_plus(beta + phi, d)
        a_chi = smooth_plus(chi + xe, d)
        a_zeta = smooth_plus(zeta + h, d)
        a_th1 = smooth_plus(th1 + om, d)
        a_th2 = smooth_plus(th2 - om, d)
        a_vr = smooth_plus(vr - tau, d)

        dtau = -(
            ref.grad_f(tau)
            + Gt.T @ a_beta
            + self.Mt @ a_th1
            - self.Mt @ a_th2
            - a_vr
        )
        dx = -(gx * a_beta + a_chi - a_zeta)
        out = np.empty(self.layout.dim)
        sl = self.layout.slices
        out[sl["tau"]] = dtau
        out[sl["x"]] = dx
        out[sl["beta"]] = a_beta - beta
        out[sl["chi"]] = a_chi - chi
        out[sl["zeta"]] = a_zeta - zeta
        out[sl["theta1"]] = a_th1 - th1
        out[sl["theta2"]] = a_th2 - th2
        out[sl["varrho"]] = a_vr - vr
        out *= self.kappa
        return out

    def activity(self, z) -> np.ndarray:
        """Active-branch indicator vector, used for event logging."""
        ref = self.ref
        tau, x, beta, chi, zeta, th1, th2, vr = self._parts(z)
        xe = self._xeval(x)
        xp = np.minimum(xe, X_GUARD)
        phi = ref.phi(tau, xp)
        om = ref.omega(tau)
        h = ref.h(xe)
        return np.concatenate(
            [
                beta + phi > 0,
                chi + xe > 0,
                np.atleast_1d(zeta + h > 0),
                th1 + om > 0,
                th2 - om > 0,
                vr - tau > 0,
            ]
        )

    def activity_labels(self) -> list[str]:
        lay = self.layout
        out = []
        out.extend(f"beta[{k}]" for k in range(lay.K))
        out.extend(f"chi[{k}]" for k in range(lay.K))
        out.append("zeta")
        out.extend(f"theta1[{s}]" for s in range(lay.S))
        out.extend(f"theta2[{s}]" for s in range(lay.S))
        out.extend(f"varrho[{i}]" for i in range(lay.n))
        return out


def vector_field(
    ref: Reformulation,
    z,
    kappa: float = 1.0,
    wall: float | None = None,
    smooth: float = 0.0,
) -> np.ndarray:
    return FlowField(ref, kappa, wall, smooth).rhs(np.asarray(z, dtype=float))


def block_speeds(
    ref: Reformulation,
    z,
    kappa: float = 1.0,
    wall: float | None = None,
    smooth: float = 0.0,
) -> dict[str, float]:
    """Euclidean norm of each block of dz/dt."""
    f = FlowField(ref, kappa, wall, smooth)
    dz = f.rhs(np.asarray(z, dtype=float))
    return {
        name: float(np.linalg.norm(dz[sl])) for name, sl in f.layout.slices.items()
    }


def accuracy(
    ref: Reformulation,
    z,
    kappa: float = 1.0,
    wall: float | None = None,
    smooth: float = 0.0,
) -> float:
    """Distance-to-equilibrium measure: the largest block norm of dz/dt."""
    return max(block_speeds(ref, z, kappa, wall, smooth).values())


def kkt_terms(ref: Reformulation, z) -> dict[str, float]:
    """Individual KKT residual terms at a stacked state z."""
    lay = StateLayout.for_reformulation(ref)
    p = lay.split(np.asarray(z, dtype=float))
    tau, x = p["tau"], p["x"]
    beta, chi, zeta = p["beta"], p["chi"], p["zeta"]
    th1, th2, vr = p["theta1"], p["theta2"], p["varrho"]
    xp = np.minimum(x, X_GUARD)

    phi = ref.phi(tau, xp)
    Gt = ref.grad_phi_tau(tau, xp)
    gx = ref.grad_phi_x(tau, xp)
    om = ref.omega(tau)
    h = ref.h(x)

    stat_tau = ref.grad_f(tau) + Gt.T @ beta + ref.M.T @ (th1 - th2) - vr
    stat_x = gx * beta + chi - zeta
    comp = max(
        float(np.max(np.abs(beta * phi), initial=0.0)),
        float(np.max(np.abs(chi * x), initial=0.0)),
        float(np.abs(zeta * h).max()),
        float(np.max(np.abs(th1 * om), initial=0.0)),
        float(np.max(np.abs(th2 * om), initial=0.0)),
        float(np.max(np.abs(vr * tau), initial=0.0)),
    )
    mults = np.concatenate([beta, chi, zeta, th1, th2, vr])
    return {
        "stationarity_tau": float(np.linalg.norm(stat_tau)),
        "stationarity_x": float(np.linalg.norm(stat_x)),
        "complementarity": comp,
        "dual_sign": float(np.maximum(-mults, 0.0).max()),
        "primal_phi": float(np.maximum(phi, 0.0).max()),
        "primal_x": float(np.maximum(x, 0.0).max()),
        "primal_joint": float(max(h, 0.0)),
        "primal_equality": float(np.abs(om).max()),
        "primal_nonneg": float(np.maximum(-tau, 0.0).max()),
    }


def kkt_residual(ref: Reformulation, z) -> float:
    """Worst KKT violation (stationarity, feasibility, sign, complementarity)."""
    return max(kkt_terms(ref, z).values())


def jacobian(
    ref: Reformulation,
    z,
    kappa: float = 1.0,
    wall: float | None = None,
    smooth: float = 0.0,
) -> np.ndarray:
    """Analytic Jacobian of the flow field at z.

    With smooth = 0 the branch weights are the 0/1 active-set masks and at a
    kink (argument exactly zero) the inactive one-sided derivative is used;
    with smooth > 0 they are the C1-blend values and slopes.  The
    primal-primal block is symmetric, multiplier blocks are diagonal, and
    cross blocks come in (B, -B') pairs, so the symmetrized Jacobian is block
    diagonal.  With a wall, columns of clamped x components are zero (the
    projected field is constant in them).
    """
    lay = StateLayout.for_reformulation(ref)
    z = np.asarray(z, dtype=float)
    p = lay.split(z)
    tau, x = p["tau"], p["x"]
    beta, chi, zeta = p["beta"], p["chi"], p["zeta"]
    th1, th2, vr = p["theta1"], p["theta2"], p["varrho"]
    clamped = np.zeros(lay.K, dtype=bool)
    if wall is not None:
        clamped = x > wall
        x = np.minimum(x, wall)
    xp = np.minimum(x, X_GUARD)

    phi = ref.phi(tau, xp)
    Gt = ref.grad_phi_tau(tau, xp)
    gx = ref.grad_phi_x(tau, xp)
    pxx = ref.phi_xx(tau, xp)
    pxt = ref.phi_x_tau(tau, xp)
    om = ref.omega(tau)
    h = ref.h(x)
    M = ref.M

    s_beta = smooth_plus(beta + phi, smooth)
    w_beta = smooth_plus_deriv(beta + phi, smooth)
    w_chi = smooth_plus_deriv(chi + x, smooth)
    w_zeta = float(smooth_plus_deriv(zeta[0] + h, smooth))
    w_th1 = smooth_plus_deriv(th1 + om, smooth)
    w_th2 = smooth_plus_deriv(th2 - om, smooth)
    w_vr = smooth_plus_deriv(vr - tau, smooth)

    n, K = lay.n, lay.K
    J = np.zeros((lay.dim, lay.dim))
    sl = lay.slices

    # -- tau row
    Jtt = ref.hess_f(tau).copy()
    for k in range(K):
        if s_beta[k] or w_beta[k]:
            Jtt += s_beta[k] * ref.hess_phi_tau(k, tau, xp)
            Jtt += w_beta[k] * np.outer(Gt[k], Gt[k])
    Jtt += M.T @ ((w_th1 + w_th2)[:, None] * M)
    Jtt += np.diag(w_vr)
    J[sl["tau"], sl["tau"]] = -Jtt

    Jtx = np.zeros((n, K))
    for k in range(K):
        if s_beta[k] or w_beta[k]:
            Jtx[:, k] = -(s_beta[k] * pxt[k] + w_beta[k] * gx[k] * Gt[k])
    J[sl["tau"], sl["x"]] = Jtx
    J[sl["x"], sl["tau"]] = Jtx.T

    J[sl["tau"], sl["beta"]] = -(Gt.T * w_beta)
    J[sl["tau"], sl["theta1"]] = -(M.T * w_th1)
    J[sl["tau"], sl["theta2"]] = M.T * w_th2
    J[sl["tau"], sl["varrho"]] = np.diag(w_vr)

    # -- x row
    Jxx = np.diag(s_beta * pxx + w_beta * gx**2 + w_chi)
    Jxx += w_zeta * np.ones((K, K))
    J[sl["x"], sl["x"]] = -Jxx
    J[sl["x"], sl["beta"]] = -np.diag(w_beta * gx)
    J[sl["x"], sl["chi"]] = -np.diag(w_chi)
    J[sl["x"], sl["zeta"]] = (w_zeta * np.ones(K))[:, None]

    # -- multiplier rows: d/dt m = (m + c)+ - m
    J[sl["beta"], sl["tau"]] = Gt * w_beta[:, None]
    J[sl["beta"], sl["x"]] = np.diag(w_beta * gx)
    J[sl["beta"], sl["beta"]] = np.diag(w_beta - 1.0)

    J[sl["chi"], sl["x"]] = np.diag(w_chi)
    J[sl["chi"], sl["chi"]] = np.diag(w_chi - 1.0)

    J[sl["zeta"], sl["x"]] = -w_zeta * np.ones((1, K))
    J[sl["zeta"], sl["zeta"]] = np.array([[w_zeta - 1.0]])

    J[sl["theta1"], sl["tau"]] = M * w_th1[:, None]
    J[sl["theta1"], sl["theta1"]] = np.diag(w_th1 - 1.0)

    J[sl["theta2"], sl["tau"]] = -(M * w_th2[:, None])
    J[sl["theta2"], sl["theta2"]] = np.diag(w_th2 - 1.0)

    J[sl["varrho"], sl["tau"]] = -np.diag(w_vr)
    J[sl["varrho"], sl["varrho"]] = np.diag(w_vr - 1.0)

    if clamped.any():
        xs = sl["x"]
        cols = np.flatnonzero(clamped) + xs.start
        J[:, cols] = 0.0

    return kappa * J


def jacobian_fd(
    ref: Reformulation,
    z,
    kappa: float = 1.0,
    wall: float | None = None,
    smooth: float = 0.0,
    eps: float = 1e-7,
) -> np.ndarray:
    """Central-difference Jacobian of the flow field (testing aid)."""
    f = FlowField(ref, kappa, wall, smooth)
    z = np.asarray(z, dtype=float)
    dim = z.shape[0]
    J = np.empty((dim, dim))
    for j in range(dim):
        step = eps * max(1.0, abs(z[j]))
        zp = z.copy()
        zm = z.copy()
        zp[j] += step
        zm[j] -= step
        J[:, j] = (f.rhs(zp) - f.rhs(zm)) / (2.0 * step)
    return J


def lyapunov_value(
    ref: Reformulation,
    z,
    z_star,
    kappa: float = 1.0,
    wall: float | None = None,
    smooth: float = 0.0,
) -> float:
    """V(z) = ||field(z)||^2 + 0.5 ||z - z*||^2, monitored retrospectively."""
    dz = vector_field(ref, z, kappa, wall, smooth)
    diff = np.asarray(z, dtype=float) - np.asarray(z_star, dtype=float)
    return float(dz @ dz + 0.5 * diff @ diff)


# ---------------------------------------------------------------------------
# time stepping


@dataclass
class Trajectory:
    """Accepted integrator steps of one flow run.

    Rows of z are the accepted states (after the x clamp); accuracy[i] is the
    largest block speed at row i.  events records active-branch switches and
    clamps as (t, description).
    """

    t: np.ndarray
    z: np.ndarray
    accuracy: np.ndarray
    events: list[tuple[float, str]]
    stats: dict
    layout: StateLayout
    wall: float | None = None
    smooth: float = 0.0

    @property
    def final_z(self) -> np.ndarray:
        return self.z[-1]

    @property
    def final_accuracy(self) -> float:
        return float(self.accuracy[-1])

    def block(self, name: str) -> np.ndarray:
        return self.z[:, self.layout.slices[name]]

    def lyapunov(self, ref: Reformulation, z_star=None, kappa: float = 1.0):
        zs = self.final_z if z_star is None else z_star
        return np.array(
            [
                lyapunov_value(ref, row, zs, kappa, self.wall, self.smooth)
                for row in self.z
            ]
        )

    def objective(self, ref: Reformulation) -> np.ndarray:
        sl = self.layout.slices["tau"]
        return np.array([ref.f(row[sl]) for row in self.z])


# Dormand-Prince 5(4) tableau; the first b row is the 5th-order weights and
# E holds b5 - b4 for the embedded error estimate.  FSAL: k[6] of an accepted
# step is the k[0] of the next.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = _DP_B - np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)


def _initial_step(fun, t0, y0, f0, rtol, atol, t_end):
    scale = atol + rtol * np.abs(y0)
    d0 = np.linalg.norm(y0 / scale) / np.sqrt(y0.size)
    d1 = np.linalg.norm(f0 / scale) / np.sqrt(y0.size)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * f0
    f1 = fun(t0 + h0, y1)
    d2 = np.linalg.norm((f1 - f0) / scale) / np.sqrt(y0.size) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, t_end - t0)


def _rk45_loop(field, z0, t_end, rtol, atol, max_step, on_step):
    """Own embedded RK4(5) with PI step-size control and FSAL."""
    t = 0.0
    y = z0.copy()
    f0 = field.rhs(y)
    h = min(_initial_step(field, t, y, f0, rtol, atol, t_end), max_step)
    err_prev = 1.0
    n_rejected = 0
    n_steps = 0
    k = np.empty((7, y.size))
    k[0] = f0
    while t < t_end:
        h = min(h, t_end - t, max_step)
        if h < 1e-14 * max(1.0, t):
            raise IntegrationError(f"step size underflow at t={t!r}")
        for i in range(1, 7):
            yi = y + h * (_DP_A[i] @ k[:i])
            k[i] = field.rhs(yi)
        y_new = y + h * (_DP_B @ k)
        err_vec = h * (_DP_E @ k)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = np.linalg.norm(err_vec / scale) / np.sqrt(y.size)
        if err <= 1.0:
            t += h
            y = y_new
            n_steps += 1
            fac = 0.9 * max(err, 1e-10) ** -0.14 * max(err_prev, 1e-10) ** 0.08
            err_prev = max(err, 1e-10)
            h *= min(5.0, max(0.2, fac))
            k[0] = k[6]
            stop, y_clamped = on_step(t, y, k[6])
            if y_clamped is not None:
                y = y_clamped
                k[0] = field.rhs(y)
            if stop:
                break
        else:
            n_rejected += 1
            fac = 0.9 * err**-0.2
            h *= min(1.0, max(0.2, fac))
    return {"n_steps": n_steps, "n_rejected": n_rejected}


def _radau_loop(field, z0, t_end, rtol, atol, max_step, on_step):
    from scipy.integrate import Radau

    def jac(t, y):
        return jacobian(field.ref, y, field.kappa, field.wall, field.smooth)

    stepper = Radau(
        field, 0.0, z0, t_end, rtol=rtol, atol=atol, max_step=max_step, jac=jac
    )
    n_steps = 0
    while stepper.status == "running":
        msg = stepper.step()
        if stepper.status == "failed":
            raise IntegrationError(f"radau failed at t={stepper.t!r}: {msg}")
        n_steps += 1
        stop, y_clamped = on_step(stepper.t, stepper.y, None)
        if y_clamped is not None:
            stepper.y[:] = y_clamped
            stepper.f = field.rhs(stepper.y)
        if stop:
            break
    return {
        "n_steps": n_steps,
        "nfev": int(stepper.nfev),
        "njev": int(stepper.njev),
        "nlu": int(stepper.nlu),
    }


def integrate(
    ref: Reformulation,
    z0,
    t_end: float,
    *,
    kappa: float = 1.0,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    method: str = "rk45",
    max_step: float = np.inf,
    sample_dt: float | None = None,
    stop_accuracy: float | None = 1e-8,
    stop_steps: int = 10,
    wall: float | None | str = "auto",
    smooth: float = DEFAULT_SMOOTH,
) -> Trajectory:
    """Integrate the flow from z0 to t_end and return the accepted steps.

    method is "rk45" (own embedded 4(5) pair with PI control) or "radau"
    (implicit, L-stable, for the stiff trajectories the benchmark produces).
    After every accepted step x is clamped to the wall (logged as an event
    when it moves a component by more than the integration tolerance).
    sample_dt bounds the spacing of the recorded rows by capping the step
    size; rows are always genuine accepted states, never interpolants.
    Stops early once the accuracy stays at or below stop_accuracy for
    stop_steps consecutive accepted steps.
    """
    z0 = np.asarray(z0, dtype=float).copy()
    if wall is not None:
        wall = min(wall, X_GUARD)
        # Keep the clamped configuration strictly inside the joint-level
        # constraint, else the zeta pressure never discharges.
        if ref.K * abs(wall) > 0.5 * abs(ref.log_eps):
            wall = ref.log_eps / (2.0 * ref.K)
    field = FlowField(ref, kappa, wall, smooth)
    xsl = field.layout.slices["x"]
    x_cap = X_GUARD if wall is None else wall
    z0[xsl] = np.minimum(z0[xsl], x_cap)
    if sample_dt is not None:
        max_step = min(max_step, sample_dt)

    ts = [0.0]
    zs = [z0.copy()]
    accs = [accuracy(ref, z0, kappa, wall, smooth)]
    events: list[tuple[float, str]] = []
    act_prev = field.activity(z0)
    labels = field.activity_labels()
    quiet = [0]
    riding = [False]

    def on_step(t, y, fy):
        y_clamped = None
        if np.any(y[xsl] > x_cap):
            y = y.copy()
            y[xsl] = np.minimum(y[xsl], x_cap)
            y_clamped = y
            if not riding[0]:
                events.append((t, "x reached the level wall"))
                riding[0] = True
        elif riding[0]:
            events.append((t, "x left the level wall"))
            riding[0] = False
        nonlocal act_prev
        act = field.activity(y)
        flips = np.flatnonzero(act != act_prev)
        if flips.size:
            on = [labels[i] for i in flips if act[i]]
            off = [labels[i] for i in flips if not act[i]]
            desc = []
            if on:
                desc.append("on: " + ", ".join(on))
            if off:
                desc.append("off: " + ", ".join(off))
            events.append((t, "branch " + "; ".join(desc)))
            act_prev = act
        a = accuracy(ref, y, kappa, wall, smooth)
        ts.append(t)
        zs.append(y.copy())
        accs.append(a)
        stop = False
        if stop_accuracy is not None:
            quiet[0] = quiet[0] + 1 if a <= stop_accuracy else 0
            stop = quiet[0] >= stop_steps
        return stop, y_clamped

    start = time.perf_counter()
    if method == "rk45":
        stats = _rk45_loop(field, z0, t_end, rtol, atol, max_step, on_step)
    elif method == "radau":
        stats = _radau_loop(field, z0, t_end, rtol, atol, max_step, on_step)
    else:
        raise ValueError(f"unknown method {method!r}")
    stats["method"] = method
    stats["runtime"] = time.perf_counter() - start
    stats["stopped_early"] = bool(ts[-1] < t_end)

    return Trajectory(
        t=np.array(ts),
        z=np.array(zs),
        accuracy=np.array(accs),
        events=events,
        stats=stats,
        layout=field.layout,
        wall=wall,
        smooth=smooth,
    )


@dataclass
class FlowSolution:
    tau: np.ndarray
    x: np.ndarray
    multipliers: dict[str, np.ndarray]
    value: float
    accuracy: float
    kkt_residual: float
    trajectory: Trajectory
    runtime: float
    policy: object = None


def default_start(ref: Reformulation) -> np.ndarray:
    """Interior-feasible generic start: uniform-policy occupation, levels
    spread evenly just inside the joint constraint, small multipliers."""
    from .mdp import StationaryPolicy, occupation_from_policy

    lay = StateLayout.for_reformulation(ref)
    tau0 = occupation_from_policy(
        ref.problem.mdp, StationaryPolicy.uniform(ref.problem.mdp)
    )
    x0 = np.full(lay.K, ref.log_eps / (lay.K + 1))
    z0 = np.full(lay.dim, 1e-4)
    z0[lay.slices["tau"]] = tau0
    z0[lay.slices["x"]] = x0
    return z0


def solve_flow(
    ref: Reformulation,
    z0=None,
    t_end: float = 2000.0,
    method: str = "radau",
    **kwargs,
) -> FlowSolution:
    """Run the flow to t_end and package the terminal state as a solution."""
    if z0 is None:
        z0 = default_start(ref)
    start = time.perf_counter()
    traj = integrate(ref, z0, t_end, method=method, **kwargs)
    runtime = time.perf_counter() - start
    zf = traj.final_z
    lay = traj.layout
    p = lay.split(zf)
    try:
        policy = policy_from_occupation(ref.problem.mdp, p["tau"])
    except Exception:
        policy = None
    return FlowSolution(
        tau=p["tau"],
        x=p["x"],
        multipliers={
            k: p[k] for k in ("beta", "chi", "zeta", "theta1", "theta2", "varrho")
        },
        value=ref.f(p["tau"]),
        accuracy=traj.final_accuracy,
        kkt_residual=kkt_residual(ref, zf),
        trajectory=traj,
        runtime=runtime,
        policy=policy,
    )
