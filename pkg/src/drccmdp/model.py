"""Moment-ambiguity robust model over occupation measures.

Rewards are random vectors whose distribution is only known to have a mean
inside a Mahalanobis ellipsoid around mu_k (radius sqrt(rho1_k), metric
Sigma_k^-1) and a covariance bounded by rho2_k * Sigma_k.  The worst-case
objective and the joint chance constraint then reduce to smooth algebra in
the occupation measure tau and auxiliary variables x_k = log h_k, where h_k
is the probability level assigned to row k:

    f(tau)        = (1/(1-alpha)) * (-tau @ mu_0 + sqrt(rho1_0) * ||S0 tau||)
    phi_k(tau, x) = c_k(x_k) * ||Sk tau|| - tau @ mu_k + xi_k       <= 0
    g_k(x)        = x_k                                             <= 0
    h(x)          = log(eps_hat) - sum_k x_k                        <= 0
    omega(tau)    = M tau - (1-alpha) q                              = 0
    nu(tau)       = -tau                                           <= 0

with ||Sk tau|| = sqrt(tau' Sigma_k tau) and the level coefficient

    c_k(x) = sqrt(e^x / (1 - e^x)) * sqrt(rho2_k) + sqrt(rho1_k).

Values use the exact norm; first and second derivatives use the floored
norm sqrt(tau' Sigma tau + NORM_FLOOR**2) so they stay defined at tau = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import MdpSpec, occupancy_operator, occupation_residual, validate_mdp

__all__ = [
    "ModelError",
    "DomainError",
    "MomentAmbiguity",
    "DrccmdpProblem",
    "Reformulation",
    "FeasibilityReport",
    "reformulate",
    "feasibility_check",
    "X_GUARD",
    "NORM_FLOOR",
]

# x_k = log h_k must stay strictly below zero: c_k blows up like
# 1/sqrt(1 - e^x) as x -> 0-, and is complex beyond.  Callers clamp to this.
X_GUARD = -1e-12

# Floor inside gradient norms only; values keep the exact norm.
NORM_FLOOR = 1e-12


class ModelError(ValueError):
    """Malformed ambiguity data (shapes, PSD-ness, parameter ranges)."""


class DomainError(ValueError):
    """Evaluation outside the model's domain (x_k above X_GUARD)."""


@dataclass
class MomentAmbiguity:
    """Moment ambiguity set for one random reward vector.

    mean lies in an ellipsoid of squared radius rho1 around mu (metric
    Sigma^-1); covariance is bounded above by rho2 * Sigma in the Loewner
    order.  rho2 = 0 is allowed for the objective row, which only uses rho1.
    """

    mu: np.ndarray
    sigma: np.ndarray
    rho1: float
    rho2: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.sigma.ndim == 1:
            self.sigma = np.diag(self.sigma)
        n = self.mu.shape[0]
        if self.sigma.shape != (n, n):
            raise ModelError(f"sigma shape {self.sigma.shape} != ({n}, {n})")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-12):
            raise ModelError("sigma is not symmetric")
        if self.rho1 < 0 or self.rho2 < 0:
            raise ModelError("rho1 and rho2 must be nonnegative")
        w = np.linalg.eigvalsh(self.sigma)
        if w.min() < -1e-10 * max(1.0, w.max()):
            raise ModelError("sigma is not positive semidefinite")

    def sigma_sqrt(self) -> np.ndarray:
        w, V = np.linalg.eigh(self.sigma)
        return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


@dataclass
class DrccmdpProblem:
    """A distributionally robust chance-constrained MDP instance.

    objective is the ambiguity set of the reward being optimized; each entry
    of constraints is the ambiguity set of one constrained reward row, with
    threshold xi[k] and a joint satisfaction level of at least eps_hat.
    """

    mdp: MdpSpec
    objective: MomentAmbiguity
    constraints: list[MomentAmbiguity]
    xi: np.ndarray
    eps_hat: float

    def __post_init__(self):
        self.xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        validate_mdp(self.mdp)
        n = self.mdp.num_pairs
        for amb in [self.objective, *self.constraints]:
            if amb.mu.shape != (n,):
                raise ModelError(
                    f"ambiguity mean has shape {amb.mu.shape}, expected ({n},)"
                )
        if len(self.constraints) != self.xi.shape[0]:
            raise ModelError("xi length != number of constraint rows")
        if not 0.0 < self.eps_hat < 1.0:
            raise ModelError(f"eps_hat {self.eps_hat} not in (0, 1)")

    @property
    def num_constraints(self) -> int:
        return len(self.constraints)


def _check_x(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(x > X_GUARD):
        raise DomainError(f"x must be <= {X_GUARD}; got max {x.max()!r}")
    return x


def _level_coeff(x: np.ndarray, rho1: np.ndarray, rho2: np.ndarray):
    """c_k(x_k) and its first two derivatives, vectorized over k.

    With E = e^x, D = 1 - E and s = sqrt(E/D):
        s'  = E / (2 s D^2)  = sqrt(E) / (2 D^(3/2))
        s'' = E (2E + 1) / (4 s D^3) = sqrt(E) (2E + 1) / (4 D^(5/2))
    The sqrt(E) forms stay finite when e^x underflows to zero at very
    negative x, where all three derivatives vanish.
    """
    E = np.exp(x)
    D = 1.0 - E
    rE = np.sqrt(E)
    sr2 = np.sqrt(rho2)
    c = sr2 * rE / np.sqrt(D) + np.sqrt(rho1)
    c1 = sr2 * rE / (2.0 * D**1.5)
    c2 = sr2 * rE * (2.0 * E + 1.0) / (4.0 * D**2.5)
    return c, c1, c2


class Reformulation:
    """Callable bundle of the reformulated objective and constraints.

    Both solvers consume exactly this object: the KKT-flow field uses the
    values and first derivatives; the convex kernel additionally uses the
    Hessians.  Index k always refers to a constraint row, never the objective.
    """

    def __init__(self, problem: DrccmdpProblem):
        self.problem = problem
        self.n = problem.mdp.num_pairs
        self.K = problem.num_constraints
        self.S = problem.mdp.num_states
        self.one_minus_alpha = 1.0 - problem.mdp.discount
        self.M, self.rhs = occupancy_operator(problem.mdp)
        self.mu0 = problem.objective.mu
        self.sigma0 = problem.objective.sigma
        self.sqrt_rho1_0 = np.sqrt(problem.objective.rho1)
        self.mu = np.stack([c.mu for c in problem.constraints])
        self.sigmas = np.stack([c.sigma for c in problem.constraints])
        self.rho1 = np.array([c.rho1 for c in problem.constraints])
        self.rho2 = np.array([c.rho2 for c in problem.constraints])
        self.xi = problem.xi
        self.log_eps = float(np.log(problem.eps_hat))
        for k, c in enumerate(problem.constraints):
            if c.rho2 <= 0:
                raise ModelError(f"constraint row {k} needs rho2 > 0")

    # -- norms ------------------------------------------------------------

    def _norm(self, sigma, tau, floored):
        q = float(tau @ (sigma @ tau))
        if floored:
            return np.sqrt(q + NORM_FLOOR**2)
        return np.sqrt(max(q, 0.0))

    def norms(self, tau, floored=False) -> np.ndarray:
        """||Sigma_k^{1/2} tau|| for every constraint row."""
        return np.array(
            [self._norm(self.sigmas[k], tau, floored) for k in range(self.K)]
        )

    # -- objective ---------------------------------------------------------

    def f(self, tau) -> float:
        val = -float(tau @ self.mu0) + self.sqrt_rho1_0 * self._norm(
            self.sigma0, tau, floored=False
        )
        return val / self.one_minus_alpha

    def grad_f(self, tau) -> np.ndarray:
        st = self.sigma0 @ tau
        nrm = self._norm(self.sigma0, tau, floored=True)
        return (-self.mu0 + self.sqrt_rho1_0 * st / nrm) / self.one_minus_alpha

    def hess_f(self, tau) -> np.ndarray:
        st = self.sigma0 @ tau
        nrm = self._norm(self.sigma0, tau, floored=True)
        H = self.sigma0 / nrm - np.outer(st, st) / nrm**3
        return self.sqrt_rho1_0 * H / self.one_minus_alpha

    # -- robust chance-constraint rows --------------------------------------

    def phi(self, tau, x) -> np.ndarray:
        x = _check_x(x)
        c, _, _ = _level_coeff(x, self.rho1, self.rho2)
        return c * self.norms(tau) - self.mu @ tau + self.xi

    def grad_phi_tau(self, tau, x) -> np.ndarray:
        """K x n matrix of d phi_k / d tau."""
        x = _check_x(x)
        c, _, _ = _level_coeff(x, self.rho1, self.rho2)
        out = np.empty((self.K, self.n))
        for k in range(self.K):
            st = self.sigmas[k] @ tau
            nrm = self._norm(self.sigmas[k], tau, floored=True)
            out[k] = c[k] * st / nrm - self.mu[k]
        return out

    def grad_phi_x(self, tau, x) -> np.ndarray:
        """Diagonal entries d phi_k / d x_k (phi_k depends only on x_k)."""
        x = _check_x(x)
        _, c1, _ = _level_coeff(x, self.rho1, self.rho2)
        return c1 * self.norms(tau, floored=True)

    def phi_xx(self, tau, x) -> np.ndarray:
        """Diagonal entries d^2 phi_k / d x_k^2 (positive: convex in x_k)."""
        x = _check_x(x)
        _, _, c2 = _level_coeff(x, self.rho1, self.rho2)
        return c2 * self.norms(tau, floored=True)

    def phi_x_tau(self, tau, x) -> np.ndarray:
        """K x n matrix of d^2 phi_k / (d x_k d tau)."""
        x = _check_x(x)
        _, c1, _ = _level_coeff(x, self.rho1, self.rho2)
        out = np.empty((self.K, self.n))
        for k in range(self.K):
            st = self.sigmas[k] @ tau
            nrm = self._norm(self.sigmas[k], tau, floored=True)
            out[k] = c1[k] * st / nrm
        return out

    def hess_phi_tau(self, k, tau, x) -> np.ndarray:
        """d^2 phi_k / d tau^2 for one row k."""
        x = _check_x(x)
        c, _, _ = _level_coeff(x, self.rho1, self.rho2)
        st = self.sigmas[k] @ tau
        nrm = self._norm(self.sigmas[k], tau, floored=True)
        return c[k] * (self.sigmas[k] / nrm - np.outer(st, st) / nrm**3)

    # -- plain constraints ---------------------------------------------------

    def g(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float)

    def h(self, x) -> float:
        return self.log_eps - float(np.sum(x))

    def omega(self, tau) -> np.ndarray:
        return self.M @ tau - self.rhs

    def nu(self, tau) -> np.ndarray:
        return -np.asarray(tau, dtype=float)

    def value(self, tau) -> float:
        """Worst-case expected discounted cost (positive = cost)."""
        return self.f(tau)


def reformulate(problem: DrccmdpProblem) -> Reformulation:
    return Reformulation(problem)


@dataclass
class FeasibilityReport:
    ok: bool
    phi_slack: np.ndarray
    x_upper_slack: np.ndarray
    joint_slack: float
    equality_residual: float
    min_tau: float
    messages: list[str] = field(default_factory=list)


def feasibility_check(
    problem: DrccmdpProblem, tau, x, tol: float = 1e-8
) -> FeasibilityReport:
    """Check (tau, x) against every reformulated constraint at tolerance tol."""
    ref = reformulate(problem)
    tau = np.asarray(tau, dtype=float)
    x = np.asarray(x, dtype=float)
    messages = []
    if np.any(x > X_GUARD):
        # Out-of-domain x can't even be scored; report it as infeasible.
        return FeasibilityReport(
            ok=False,
            phi_slack=np.full(ref.K, np.nan),
            x_upper_slack=X_GUARD - x,
            joint_slack=np.nan,
            equality_residual=np.nan,
            min_tau=float(tau.min()),
            messages=[f"x outside domain (max {x.max()!r})"],
        )
    phi = ref.phi(tau, x)
    h = ref.h(x)
    res = float(np.linalg.norm(occupation_residual(problem.mdp, tau)))
    if np.any(phi > tol):
        messages.append(f"robust constraint rows violated: {np.flatnonzero(phi > tol)}")
    if h > tol:
        messages.append(f"joint level violated: sum log h_k short by {h!r}")
    if res > tol:
        messages.append(f"occupation equalities off by {res!r}")
    if tau.min() < -tol:
        messages.append(f"negative occupation mass {tau.min()!r}")
    return FeasibilityReport(
        ok=not messages,
        phi_slack=-phi,
        x_upper_slack=-x,
        joint_slack=-h,
        equality_residual=res,
        min_tau=float(tau.min()),
        messages=messages,
    )
