"""Tabular MDPs, trajectories, datasets, and exact distributional computations.

Everything downstream (data generation, curriculum training, bound
verification) is built on the types here.  The design constraint is that all
distributional quantities are *exactly* computable: occupancy measures come
from a linear solve, policy values from dynamic programming, so numerical
claims can be checked against closed forms instead of Monte Carlo estimates.

Conventions:
  * states and actions are integer ids in ``range(n_states)`` / ``range(n_actions)``;
  * occupancy measures are stored unnormalized (they sum to 1/(1-gamma));
    request ``normalized=True`` to get the probability view;
  * trajectory returns used for ordering and filtering are undiscounted sums
    of step rewards; discounted returns are available via
    :func:`trajectory_return`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

StateLike = Union[int, np.ndarray]
ActionLike = Union[int, np.ndarray]

_PROB_ATOL = 1e-12
_RETURN_ATOL = 1e-9


class InvariantError(ValueError):
    """A constructed value violates one of its declared invariants."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with dense transition tensor and reward table.

    ``transition`` has shape (S, A, S) with rows summing to one,
    ``reward`` has shape (S, A), ``initial_dist`` shape (S,).
    ``horizon_cap`` truncates episodes; truncation counts as termination
    without bootstrapping (this is an offline-data laboratory, there are no
    value targets).
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    horizon_cap: int

    def __post_init__(self) -> None:
        t = _readonly(self.transition)
        r = _readonly(self.reward)
        rho0 = _readonly(self.initial_dist)
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", rho0)
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise InvariantError(f"transition must be (S, A, S), got {t.shape}")
        s, a, _ = t.shape
        if r.shape != (s, a):
            raise InvariantError(f"reward must be {(s, a)}, got {r.shape}")
        if rho0.shape != (s,):
            raise InvariantError(f"initial_dist must be ({s},), got {rho0.shape}")
        if np.any(t < -_PROB_ATOL) or np.any(rho0 < -_PROB_ATOL):
            raise InvariantError("negative probabilities")
        row_sums = t.sum(axis=2)
        if not np.allclose(row_sums, 1.0, atol=_PROB_ATOL, rtol=0.0):
            raise InvariantError("transition rows must sum to 1 within 1e-12")
        if abs(rho0.sum() - 1.0) > _PROB_ATOL:
            raise InvariantError("initial_dist must sum to 1 within 1e-12")
        if not 0.0 <= self.gamma < 1.0:
            raise InvariantError("gamma must lie in [0, 1)")
        if self.horizon_cap < 1:
            raise InvariantError("horizon_cap must be positive")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def absorbing_states(self) -> np.ndarray:
        """Boolean mask of states where every action self-loops with prob 1."""
        s = self.n_states
        self_loop = self.transition[np.arange(s), :, np.arange(s)]
        return np.all(self_loop >= 1.0 - _PROB_ATOL, axis=1)


@dataclass(frozen=True)
class Step:
    """One transition (s, a, s', r)."""

    state: StateLike
    action: ActionLike
    next_state: StateLike
    reward: float


def _same_state(a: StateLike, b: StateLike) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(np.asarray(a), np.asarray(b))
    return a == b


@dataclass(frozen=True)
class Trajectory:
    """Ordered steps plus the cached undiscounted return.

    ``collection_index`` records the order in which the generating online
    agent produced the trajectory (-1 when unknown); the curriculum analysis
    leans on it heavily.
    """

    id: int
    steps: tuple[Step, ...]
    accumulated_return: float
    collection_index: int = -1
    policy_tag: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) == 0:
            raise InvariantError("empty trajectory")
        total = math.fsum(s.reward for s in self.steps)
        if abs(total - self.accumulated_return) > _RETURN_ATOL:
            raise InvariantError(
                f"cached return {self.accumulated_return} != step sum {total}"
            )
        for t in range(len(self.steps) - 1):
            if not _same_state(self.steps[t].next_state, self.steps[t + 1].state):
                raise InvariantError(f"steps {t} and {t + 1} do not chain")

    @classmethod
    def from_steps(
        cls,
        traj_id: int,
        steps: Sequence[Step],
        collection_index: int = -1,
        policy_tag: str | None = None,
    ) -> "Trajectory":
        return cls(
            id=traj_id,
            steps=tuple(steps),
            accumulated_return=math.fsum(s.reward for s in steps),
            collection_index=collection_index,
            policy_tag=policy_tag,
        )

    def __len__(self) -> int:
        return len(self.steps)

    def state_action_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(states, actions) as arrays; only valid for discrete trajectories."""
        s = np.array([st.state for st in self.steps], dtype=np.int64)
        a = np.array([st.action for st in self.steps], dtype=np.int64)
        return s, a


@dataclass(frozen=True)
class Dataset:
    """A bag of trajectories with unique ids.

    Size is deliberately exposed two ways: ``n_trajectories`` for curriculum
    bookkeeping and ``n_pairs`` (state-action pairs) for the sample-complexity
    bounds, which sum per pair.
    """

    trajectories: tuple[Trajectory, ...]
    source_mdp_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        ids = [t.id for t in self.trajectories]
        if len(set(ids)) != len(ids):
            raise InvariantError("trajectory ids must be unique")

    @property
    def n_trajectories(self) -> int:
        return len(self.trajectories)

    @property
    def n_pairs(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def returns(self) -> np.ndarray:
        return np.array([t.accumulated_return for t in self.trajectories])

    def __iter__(self):
        return iter(self.trajectories)

    def __len__(self) -> int:
        return len(self.trajectories)

    def best_fraction_mean_return(self, fraction: float = 0.01) -> float:
        """Mean return of the ceil(fraction * N) best trajectories."""
        if not 0.0 < fraction <= 1.0:
            raise ValueError("fraction must be in (0, 1]")
        if self.n_trajectories == 0:
            raise ValueError("empty dataset")
        k = math.ceil(fraction * self.n_trajectories)
        top = np.sort(self.returns())[::-1][:k]
        return float(np.mean(top))


@dataclass(frozen=True)
class OccupancyTable:
    """Discounted state(-action) visitation measure.

    Unnormalized entries sum to 1/(1-gamma); the normalized view is a proper
    probability table (used by every bound computation so TV terms live in
    [0, 1]).
    """

    rho_sa: np.ndarray
    rho_s: np.ndarray
    normalized: bool
    gamma: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "rho_sa", _readonly(self.rho_sa))
        object.__setattr__(self, "rho_s", _readonly(self.rho_s))
        if self.rho_sa.shape[0] != self.rho_s.shape[0]:
            raise InvariantError("rho_sa / rho_s state dimensions differ")
        if not np.allclose(self.rho_sa.sum(axis=1), self.rho_s, atol=1e-9, rtol=0.0):
            raise InvariantError("rho_s must equal the action-sum of rho_sa")
        total = self.rho_s.sum()
        if self.normalized:
            if abs(total - 1.0) > 1e-9:
                raise InvariantError("normalized occupancy must sum to 1")
        else:
            if abs(total - 1.0 / (1.0 - self.gamma)) > 1e-6:
                raise InvariantError("unnormalized occupancy must sum to 1/(1-gamma)")

    def normalized_view(self) -> "OccupancyTable":
        if self.normalized:
            return self
        scale = 1.0 - self.gamma
        return OccupancyTable(
            rho_sa=self.rho_sa * scale,
            rho_s=self.rho_s * scale,
            normalized=True,
            gamma=self.gamma,
        )


def trajectory_return(traj: Trajectory, gamma: float) -> float:
    """Discounted return sum_t gamma^t r_t; gamma=1 recovers the cached sum."""
    if len(getattr(traj, "steps", ())) == 0:
        raise ValueError("empty trajectory")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    rewards = np.array([s.reward for s in traj.steps])
    weights = gamma ** np.arange(len(rewards))
    return float(np.dot(weights, rewards))


def policy_matrix(policy, n_states: int, n_actions: int) -> np.ndarray:
    """Dense (S, A) action-probability matrix for a discrete policy."""
    probs = policy.prob_matrix()
    if probs.shape != (n_states, n_actions):
        raise ValueError(
            f"policy table {probs.shape} does not match ({n_states}, {n_actions})"
        )
    return probs


def empirical_behavior_policy(data: Dataset, n_states: int, n_actions: int):
    """Count-ratio estimate of the behavior policy that produced ``data``.

    Rows of unvisited states fall back to uniform: the count formula is 0/0
    there and uniform is the maximum-entropy completion that keeps every row
    a distribution.
    """
    from .policies import TabularSoftmaxPolicy

    if data.n_trajectories == 0:
        raise ValueError("empty dataset")
    counts = pair_counts(data, n_states, n_actions)
    return TabularSoftmaxPolicy.from_probs(_counts_to_policy(counts))


def pair_counts(data: Dataset, n_states: int, n_actions: int) -> np.ndarray:
    """(S, A) visit counts over all stored (s, a) pairs."""
    counts = np.zeros((n_states, n_actions))
    for traj in data:
        s, a = traj.state_action_arrays()
        if np.any(s < 0) or np.any(s >= n_states) or np.any(a < 0) or np.any(a >= n_actions):
            raise ValueError("step ids out of range for the given spaces")
        np.add.at(counts, (s, a), 1.0)
    return counts


def _counts_to_policy(counts: np.ndarray) -> np.ndarray:
    n_actions = counts.shape[1]
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.full_like(counts, 1.0 / n_actions)
    visited = totals[:, 0] > 0
    probs[visited] = counts[visited] / totals[visited]
    return probs


def occupancy_measure(mdp: TabularMdp, policy, normalized: bool = False) -> OccupancyTable:
    """Exact discounted occupancy via the linear system d = rho0 + gamma P_pi^T d."""
    probs = policy_matrix(policy, mdp.n_states, mdp.n_actions)
    # P_pi[s, s'] = sum_a pi(a|s) T[s, a, s']
    p_pi = np.einsum("sa,sat->st", probs, mdp.transition)
    n = mdp.n_states
    d = np.linalg.solve(np.eye(n) - mdp.gamma * p_pi.T, mdp.initial_dist)
    rho_sa = probs * d[:, None]
    if normalized:
        scale = 1.0 - mdp.gamma
        return OccupancyTable(rho_sa * scale, d * scale, normalized=True, gamma=mdp.gamma)
    return OccupancyTable(rho_sa, d, normalized=False, gamma=mdp.gamma)


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total variation distance 0.5 * sum |p - q| between probability tables."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    ps, qs = p.sum(), q.sum()
    if abs(ps - 1.0) > 1e-6 or abs(qs - 1.0) > 1e-6:
        raise ValueError("inputs must each sum to 1 within 1e-6")
    return float(0.5 * np.abs(p / ps - q / qs).sum())


# ---------------------------------------------------------------------------
# Exact solvers (oracles for everything sampled elsewhere)
# ---------------------------------------------------------------------------


def policy_state_values(mdp: TabularMdp, policy) -> np.ndarray:
    """Exact discounted state values of ``policy``: solve (I - gamma P_pi) v = r_pi."""
    probs = policy_matrix(policy, mdp.n_states, mdp.n_actions)
    p_pi = np.einsum("sa,sat->st", probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", probs, mdp.reward)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)


def discounted_return(mdp: TabularMdp, policy) -> float:
    """Exact expected discounted return from the initial distribution."""
    return float(np.dot(mdp.initial_dist, policy_state_values(mdp, policy)))


def expected_return(mdp: TabularMdp, policy, horizon: int | None = None) -> float:
    """Exact expected *undiscounted* return over ``horizon`` steps.

    This matches the distribution of rollout returns exactly: episodes run to
    the horizon cap, and absorbing states contribute zero reward, which is
    also what early rollout termination yields.
    """
    h = mdp.horizon_cap if horizon is None else horizon
    probs = policy_matrix(mdp := mdp, policy=policy, n_states=mdp.n_states, n_actions=mdp.n_actions) if False else policy_matrix(policy, mdp.n_states, mdp.n_actions)
    p_pi = np.einsum("sa,sat->st", probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", probs, mdp.reward)
    v = np.zeros(mdp.n_states)
    for _ in range(h):
        v = r_pi + p_pi @ v
    return float(np.dot(mdp.initial_dist, v))


def value_iteration(
    mdp: TabularMdp, tol: float = 1e-12, max_iter: int = 100_000
) -> tuple[np.ndarray, np.ndarray]:
    """Optimal discounted values and a greedy deterministic policy.

    Returns ``(v, greedy_actions)`` with ties broken toward the lowest action
    id so the result is deterministic.
    """
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        q = mdp.reward + mdp.gamma * np.einsum("sat,t->sa", mdp.transition, v)
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    q = mdp.reward + mdp.gamma * np.einsum("sat,t->sa", mdp.transition, v)
    return v, q.argmax(axis=1)


@dataclass(frozen=True)
class PolicyComparison:
    """Estimated partial order between two policies (Definition-style)."""

    mean_1: float
    std_1: float
    mean_2: float
    std_2: float
    first_le_second: bool
    second_le_first: bool


def compare_policies(
    mdp: TabularMdp, pi1, pi2, n_eval: int, seed: int
) -> PolicyComparison:
    """Order two policies by mean return over ``n_eval`` seeded rollouts.

    Both policies are evaluated with identically seeded episode streams, so
    comparing a policy against itself yields exactly equal estimates.
    """
    from .envs import evaluate_policy

    if n_eval < 1:
        raise ValueError("n_eval must be >= 1")
    m1, s1, _ = evaluate_policy(mdp, pi1, n_eval, seed)
    m2, s2, _ = evaluate_policy(mdp, pi2, n_eval, seed)
    return PolicyComparison(
        mean_1=m1,
        std_1=s1,
        mean_2=m2,
        std_2=s2,
        first_le_second=m1 <= m2,
        second_le_first=m2 <= m1,
    )
