"""Finite discounted MDPs and their occupation-measure geometry.

A stationary policy mu induces a discounted state-visitation distribution
d(s) = (1 - alpha) * sum_t alpha^t P(s_t = s), and the pair occupation
measure tau(s, a) = d(s) * mu(a | s).  The set of valid occupation measures
is the polytope

    sum_{(s,a)} tau(s,a) * (delta(s', s) - alpha * p(s'|s,a)) = (1-alpha) q(s')
    tau >= 0,

over which discounted control problems become linear (or convex) programs.
State-action pairs are ordered lexicographically: (s0,a0), (s0,a1), ...,
(s1,a0), ...  All public functions use that flat ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MdpError",
    "MdpSpec",
    "StationaryPolicy",
    "validate_mdp",
    "occupancy_operator",
    "occupation_residual",
    "occupation_from_policy",
    "policy_from_occupation",
    "discounted_value",
]


class MdpError(ValueError):
    """Raised for malformed MDP data or invalid occupation measures."""


@dataclass
class MdpSpec:
    """Finite MDP with a discount factor and an initial distribution.

    transition[s][a] is the probability vector over next states for taking
    action a in state s.  Rows may have different action counts.
    """

    num_states: int
    actions_per_state: list[int]
    transition: list[list[np.ndarray]]
    discount: float
    initial_dist: np.ndarray

    _offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        self.transition = [
            [np.asarray(row, dtype=float) for row in self.transition[s]]
            for s in range(self.num_states)
        ]
        self._offsets = np.concatenate(
            ([0], np.cumsum(self.actions_per_state))
        ).astype(int)

    @property
    def num_pairs(self) -> int:
        return int(self._offsets[-1])

    def pair_index(self, s: int, a: int) -> int:
        return int(self._offsets[s] + a)

    def pairs(self):
        """Yield (flat_index, s, a) in the canonical lexicographic order."""
        idx = 0
        for s in range(self.num_states):
            for a in range(self.actions_per_state[s]):
                yield idx, s, a
                idx += 1

    def pair_labels(self) -> list[str]:
        return [f"s{s}a{a}" for _, s, a in self.pairs()]


@dataclass
class StationaryPolicy:
    """Randomized stationary policy; probs[s] is a distribution over actions."""

    probs: list[np.ndarray]

    def __post_init__(self):
        self.probs = [np.asarray(p, dtype=float) for p in self.probs]

    @classmethod
    def uniform(cls, mdp: MdpSpec) -> "StationaryPolicy":
        return cls([np.full(n, 1.0 / n) for n in mdp.actions_per_state])

    @classmethod
    def deterministic(cls, mdp: MdpSpec, actions: list[int]) -> "StationaryPolicy":
        probs = []
        for s, a in enumerate(actions):
            p = np.zeros(mdp.actions_per_state[s])
            p[a] = 1.0
            probs.append(p)
        return cls(probs)

    def as_flat(self, mdp: MdpSpec) -> np.ndarray:
        return np.concatenate(self.probs)


def validate_mdp(mdp: MdpSpec, tol: float = 1e-8) -> None:
    """Raise MdpError if the MDP data is inconsistent.

    Checks: row stochasticity of every transition vector, discount in (0, 1),
    initial distribution nonnegative and summing to one, shape agreement.
    """
    problems = []
    if not 0.0 < mdp.discount < 1.0:
        problems.append(f"discount {mdp.discount} not in (0, 1)")
    if len(mdp.actions_per_state) != mdp.num_states:
        problems.append("actions_per_state length != num_states")
    if mdp.initial_dist.shape != (mdp.num_states,):
        problems.append("initial_dist has wrong shape")
    else:
        if np.any(mdp.initial_dist < -tol):
            problems.append("initial_dist has negative entries")
        if abs(mdp.initial_dist.sum() - 1.0) > tol:
            problems.append(f"initial_dist sums to {mdp.initial_dist.sum()!r}")
    for s in range(mdp.num_states):
        if len(mdp.transition[s]) != mdp.actions_per_state[s]:
            problems.append(f"state {s}: wrong number of action rows")
            continue
        for a, row in enumerate(mdp.transition[s]):
            if row.shape != (mdp.num_states,):
                problems.append(f"transition[{s}][{a}] has wrong shape")
            elif np.any(row < -tol):
                problems.append(f"transition[{s}][{a}] has negative entries")
            elif abs(row.sum() - 1.0) > tol:
                problems.append(
                    f"transition[{s}][{a}] rows sum to {row.sum()!r}"
                )
    if problems:
        raise MdpError("; ".join(problems))


def occupancy_operator(mdp: MdpSpec) -> tuple[np.ndarray, np.ndarray]:
    """Matrix form (M, rhs) of the occupation-measure equality constraints.

    M[s', (s,a)] = delta(s', s) - alpha * p(s'|s,a)  and  rhs = (1-alpha) q,
    so valid occupation measures satisfy M @ tau = rhs exactly.
    """
    M = np.zeros((mdp.num_states, mdp.num_pairs))
    for j, s, a in mdp.pairs():
        M[s, j] += 1.0
        M[:, j] -= mdp.discount * mdp.transition[s][a]
    rhs = (1.0 - mdp.discount) * mdp.initial_dist
    return M, rhs


def occupation_residual(mdp: MdpSpec, tau: np.ndarray) -> np.ndarray:
    """Equality residual omega(tau) = M @ tau - (1-alpha) q, one entry per state."""
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (mdp.num_pairs,):
        raise MdpError(f"tau has shape {tau.shape}, expected ({mdp.num_pairs},)")
    M, rhs = occupancy_operator(mdp)
    return M @ tau - rhs


def occupation_from_policy(mdp: MdpSpec, policy: StationaryPolicy) -> np.ndarray:
    """Occupation measure of a stationary policy, by dense linear solve.

    Solves (I - alpha * P_pi^T) d = (1 - alpha) q for the discounted state
    distribution, then spreads d over actions with the policy weights.
    """
    P = np.zeros((mdp.num_states, mdp.num_states))
    for s in range(mdp.num_states):
        for a in range(mdp.actions_per_state[s]):
            P[s] += policy.probs[s][a] * mdp.transition[s][a]
    A = np.eye(mdp.num_states) - mdp.discount * P.T
    d = np.linalg.solve(A, (1.0 - mdp.discount) * mdp.initial_dist)
    tau = np.empty(mdp.num_pairs)
    for j, s, a in mdp.pairs():
        tau[j] = d[s] * policy.probs[s][a]
    return tau


def policy_from_occupation(mdp: MdpSpec, tau: np.ndarray) -> StationaryPolicy:
    """Recover mu(a|s) = tau(s,a) / sum_a' tau(s,a') from an occupation measure.

    A state with no occupation mass has no well-defined conditional; that is
    reported as an error naming the state rather than patched silently.
    """
    tau = np.asarray(tau, dtype=float)
    probs = []
    for s in range(mdp.num_states):
        lo, hi = mdp._offsets[s], mdp._offsets[s + 1]
        block = tau[lo:hi]
        mass = block.sum()
        if mass <= 0.0:
            raise MdpError(f"state {s} has zero occupation mass; policy undefined")
        probs.append(block / mass)
    return StationaryPolicy(probs)


def discounted_value(tau: np.ndarray, reward: np.ndarray, discount: float) -> float:
    """Expected discounted reward of an occupation measure: tau @ r / (1 - alpha)."""
    return float(np.asarray(tau) @ np.asarray(reward) / (1.0 - discount))
