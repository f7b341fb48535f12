"""Built-in machine-replacement benchmark instance.

A machine ages through five states.  In every state the controller either
repairs (action 0: the machine mostly returns to the newest state) or keeps
running (action 1: it mostly ages one step; the oldest state is absorbing
under no-repair).  Three random cost rows with moment ambiguity: one is
minimized, two are bounded by -xi under a joint chance constraint.  Rewards
are negated costs, which is why the means below are negative.
"""

from __future__ import annotations

import numpy as np

from .mdp import MdpSpec, StationaryPolicy
from .model import DrccmdpProblem, MomentAmbiguity

__all__ = [
    "ACTION_LABELS",
    "machine_replacement_mdp",
    "machine_replacement_problem",
    "flow_start",
    "sca_start",
    "SCA_DEFAULTS",
]

ACTION_LABELS = ("repair", "no-repair")

_NUM_STATES = 5

# Cost means per state-action pair, lexicographic (s0a0, s0a1, ..., s4a1).
# Row 0 is the objective; rows 1 and 2 are the constrained costs.
_COST_MEANS = np.array(
    [
        [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 4.0, 30.0, 4.0, 70.0],
        [1.5, 8.0, 1.5, 8.0, 1.5, 8.0, 5.0, 100.0, 5.0, 200.0],
        [0.0, 5.0, 0.0, 5.0, 0.0, 8.0, 1.5, 30.0, 3.0, 50.0],
    ]
)

_SIGMA_DIAGS = np.array(
    [
        [0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 5.0, 2.0, 8.0, 9.0],
        [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 8.0, 9.0, 8.0, 9.0],
        [0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 9.0, 8.0, 8.5, 10.0],
    ]
)

_RHO1 = (0.1, 0.1, 0.15)
_RHO2 = (0.0, 0.1, 0.15)
_XI = (-40.0, -40.0)
_EPS_HAT = 0.95
_DISCOUNT = 0.6

# Flow start: small uniform occupation mass, deep-interior levels, small
# positive multipliers.  Deliberately infeasible (equalities badly violated).
_TAU0 = 1e-3
_X0 = (-8.0, -60.0)
_MULT0 = 1e-4

SCA_DEFAULTS = dict(h0=(0.83, 0.85), gamma=0.6, n_max=100, stop_delta=1e-8)


def machine_replacement_mdp() -> MdpSpec:
    S = _NUM_STATES
    transition = []
    for s in range(S):
        if s == 0:
            repair = np.zeros(S)
            repair[0] = 1.0
        else:
            repair = np.zeros(S)
            repair[0] = 0.8
            repair[s] = 0.2
        if s == S - 1:
            keep = np.zeros(S)
            keep[s] = 1.0
        else:
            keep = np.zeros(S)
            keep[s + 1] = 0.9
            keep[s] = 0.1
        transition.append([repair, keep])
    return MdpSpec(
        num_states=S,
        actions_per_state=[2] * S,
        transition=transition,
        discount=_DISCOUNT,
        initial_dist=np.full(S, 1.0 / S),
    )


def machine_replacement_problem() -> DrccmdpProblem:
    mdp = machine_replacement_mdp()
    objective = MomentAmbiguity(
        mu=-_COST_MEANS[0], sigma=_SIGMA_DIAGS[0], rho1=_RHO1[0], rho2=_RHO2[0]
    )
    constraints = [
        MomentAmbiguity(
            mu=-_COST_MEANS[k], sigma=_SIGMA_DIAGS[k], rho1=_RHO1[k], rho2=_RHO2[k]
        )
        for k in (1, 2)
    ]
    return DrccmdpProblem(
        mdp=mdp,
        objective=objective,
        constraints=constraints,
        xi=np.array(_XI),
        eps_hat=_EPS_HAT,
    )


def flow_start() -> np.ndarray:
    """Initial state for the KKT-flow run: (tau, x, beta, chi, zeta, th1, th2, rho)."""
    mdp = machine_replacement_mdp()
    n, K, S = mdp.num_pairs, 2, mdp.num_states
    n_mult = K + K + 1 + S + S + n
    return np.concatenate(
        [np.full(n, _TAU0), np.array(_X0), np.full(n_mult, _MULT0)]
    )


def sca_start(problem: DrccmdpProblem | None = None) -> np.ndarray:
    """Feasible interior occupation measure to warm-start the convex kernel."""
    mdp = (problem or machine_replacement_problem()).mdp
    from .mdp import occupation_from_policy

    return occupation_from_policy(mdp, StationaryPolicy.uniform(mdp))
