"""Toy environments with known or densely estimable ground-truth values.

Two continuous toys (a 2-D heading world and a 1-D linear-Gaussian chain)
plus a small tabular MDP that supports exact enumeration and dynamic
programming, used as the oracle substrate for estimator tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Trajectory
from .rng import RngStream


class OutOfBoundsActionError(ValueError):
    pass


@dataclass(frozen=True)
class MdpSpec:
    """A continuous-state MDP described by batched samplers.

    All callables are batch-first: states ``(n, state_dim)``, actions
    ``(n, action_dim)``.  ``action_low/high`` of ``None`` means unbounded.
    """

    name: str
    state_dim: int
    action_dim: int
    horizon: int
    gamma: float
    r_max: float
    init_sampler: Callable[[int, RngStream], np.ndarray]
    transition: Callable[[np.ndarray, np.ndarray, RngStream], np.ndarray]
    reward_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    termination_fn: Callable[[np.ndarray], np.ndarray] | None = None
    action_low: np.ndarray | None = None
    action_high: np.ndarray | None = None

    def check_actions(self, actions: np.ndarray) -> None:
        if self.action_low is not None and np.any(actions < self.action_low):
            raise OutOfBoundsActionError(f"action below bound in {self.name}")
        if self.action_high is not None and np.any(actions > self.action_high):
            raise OutOfBoundsActionError(f"action above bound in {self.name}")


def make_gaussian_world(noise_std: float = 0.2, step_size: float = 0.02,
                        horizon: int = 128, gamma: float = 0.99) -> MdpSpec:
    """2-D particle world; the action is the heading angle of the move vector.

    The position advances by ``step_size`` along angle ``a + eps`` with
    ``eps ~ N(0, noise_std^2)``.  Reward is ``-sin(a)``: moving downward pays.
    """

    def init(n: int, rng: RngStream) -> np.ndarray:
        return np.zeros((n, 2))

    def trans(s: np.ndarray, a: np.ndarray, rng: RngStream) -> np.ndarray:
        eps = noise_std * rng.normal(s.shape[0]) if noise_std > 0 else np.zeros(s.shape[0])
        ang = a[:, 0] + eps
        return s + step_size * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def reward(s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return -np.sin(a[:, 0])

    return MdpSpec(
        name="gaussian_world", state_dim=2, action_dim=1, horizon=horizon,
        gamma=gamma, r_max=1.0, init_sampler=init, transition=trans,
        reward_fn=reward,
    )


def make_linear_toy(ar: float = 0.5, gain: float = 0.5, noise_std: float = 0.2,
                    horizon: int = 16, gamma: float = 0.95,
                    init_mean: float = 0.2, init_std: float = 0.35,
                    r_max: float = 10.0) -> MdpSpec:
    """1-D linear-Gaussian chain ``s' = ar*s + gain*a + noise`` with ``r = s + a``.

    The default initial distribution sits near the chain's typical operating
    band under a mildly positive-mean policy, so behavior data is roughly
    stationary from the first step.
    """

    def init(n: int, rng: RngStream) -> np.ndarray:
        return init_mean + init_std * rng.normal((n, 1))

    def trans(s: np.ndarray, a: np.ndarray, rng: RngStream) -> np.ndarray:
        return ar * s + gain * a + noise_std * rng.normal(s.shape)

    def reward(s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return s[:, 0] + a[:, 0]

    return MdpSpec(
        name="linear_toy", state_dim=1, action_dim=1, horizon=horizon,
        gamma=gamma, r_max=r_max, init_sampler=init, transition=trans,
        reward_fn=reward,
    )


def env_step(env: MdpSpec, s: np.ndarray, a: np.ndarray, rng: RngStream):
    """One batched transition; returns ``(s', r, done)``."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    env.check_actions(a)
    s_next = env.transition(s, a, rng)
    r = env.reward_fn(s, a)
    if env.termination_fn is not None:
        done = env.termination_fn(s_next)
    else:
        done = np.zeros(s.shape[0], dtype=bool)
    return s_next, r, done


@dataclass
class RolloutSet:
    """Stacked rollouts: ``states (n, T+1, ds)``, per-step arrays of length T."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def to_trajectories(self) -> list[Trajectory]:
        return [Trajectory(self.states[i], self.actions[i],
                           self.rewards[i], self.dones[i])
                for i in range(self.states.shape[0])]

    def returns(self, gamma: float) -> np.ndarray:
        t = self.rewards.shape[1]
        disc = gamma ** np.arange(t)
        return (self.rewards * disc).sum(axis=1)


def rollout_batch(env: MdpSpec, policy, rng: RngStream, n: int,
                  horizon: int | None = None) -> RolloutSet:
    """Roll ``n`` episodes in lockstep with per-step substreams.

    Step ``t`` draws actions from ``rng.child(1 + t, 0)`` and transition noise
    from ``rng.child(1 + t, 1)``; the initial state uses ``rng.child(0)``.
    Row ``i`` is therefore stable for any batch size > i.  Episodes freeze at
    the first done flag: later rewards are zero and states repeat.
    """
    t_max = env.horizon if horizon is None else int(horizon)
    if t_max > env.horizon:
        raise ValueError("requested horizon exceeds the environment's")
    s = env.init_sampler(n, rng.child(0))
    ds, da = env.state_dim, env.action_dim
    states = np.zeros((n, t_max + 1, ds))
    actions = np.zeros((n, t_max, da))
    rewards = np.zeros((n, t_max))
    dones = np.zeros((n, t_max), dtype=bool)
    states[:, 0] = s
    alive = np.ones(n, dtype=bool)
    for t in range(t_max):
        step_rng = rng.child(1 + t)
        a = policy.sample(s, step_rng.child(0))
        env.check_actions(a)
        s_next = env.transition(s, a, step_rng.child(1))
        r = env.reward_fn(s, a)
        if env.termination_fn is not None:
            done_now = env.termination_fn(s_next)
        else:
            done_now = np.zeros(n, dtype=bool)
        actions[alive, t] = a[alive]
        rewards[alive, t] = r[alive]
        s = np.where(alive[:, None], s_next, s)
        states[:, t + 1] = s
        dones[:, t] = alive & done_now
        alive = alive & ~done_now
    return RolloutSet(states, actions, rewards, dones)


def ground_truth_value(env, policy, n_rollouts: int, rng: RngStream,
                       horizon: int | None = None):
    """Monte Carlo J with standard error; exact DP when env is tabular.

    Returns ``(value, stderr)``.
    """
    if isinstance(env, TabularMdp):
        return tabular_dp_value(env, policy.table), 0.0
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rolls = rollout_batch(env, policy, rng, n_rollouts, horizon)
    rets = rolls.returns(env.gamma)
    stderr = float(rets.std(ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return float(rets.mean()), stderr


# -- tabular oracle substrate --------------------------------------------------


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with explicit tables; supports exact enumeration and DP."""

    transitions: np.ndarray  # (S, A, S), rows sum to 1
    rewards: np.ndarray      # (S, A)
    init_dist: np.ndarray    # (S,)
    horizon: int
    gamma: float

    def __post_init__(self):
        p = np.asarray(self.transitions)
        if not np.allclose(p.sum(axis=2), 1.0, atol=1e-10):
            raise ValueError("transition rows must sum to 1")
        if not np.isclose(self.init_dist.sum(), 1.0, atol=1e-10):
            raise ValueError("initial distribution must sum to 1")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.abs(self.rewards).max())


def tabular_rollouts(mdp: TabularMdp, policy_table: np.ndarray, rng: RngStream,
                     n: int, horizon: int | None = None):
    """Vectorized rollouts; returns integer arrays (states, actions, rewards)."""
    t_max = mdp.horizon if horizon is None else horizon
    cum_p = np.cumsum(mdp.transitions, axis=2)
    cum_pi = np.cumsum(policy_table, axis=1)
    cum_d0 = np.cumsum(mdp.init_dist)
    states = np.zeros((n, t_max + 1), dtype=np.int64)
    actions = np.zeros((n, t_max), dtype=np.int64)
    rewards = np.zeros((n, t_max))
    u0 = rng.child(0).uniform(n)
    s = np.searchsorted(cum_d0, u0, side="right").clip(0, mdp.n_states - 1)
    states[:, 0] = s
    for t in range(t_max):
        step_rng = rng.child(1 + t)
        ua = step_rng.child(0).uniform(n)
        a = _rowwise_searchsorted(cum_pi[s], ua)
        us = step_rng.child(1).uniform(n)
        s_next = _rowwise_searchsorted(cum_p[s, a], us)
        actions[:, t] = a
        rewards[:, t] = mdp.rewards[s, a]
        s = s_next
        states[:, t + 1] = s
    return states, actions, rewards


def _rowwise_searchsorted(cum_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    hits = u[:, None] < cum_rows
    return hits.argmax(axis=1)


def tabular_dp_value(mdp: TabularMdp, policy_table: np.ndarray,
                     horizon: int | None = None) -> float:
    """Exact finite-horizon J(pi) by backward dynamic programming."""
    t_max = mdp.horizon if horizon is None else horizon
    v = np.zeros(mdp.n_states)
    r_pi = (policy_table * mdp.rewards).sum(axis=1)
    p_pi = np.einsum("sa,sat->st", policy_table, mdp.transitions)
    for _ in range(t_max):
        v = r_pi + mdp.gamma * p_pi @ v
    return float(mdp.init_dist @ v)


def tabular_state_marginals(mdp: TabularMdp, policy_table: np.ndarray,
                            horizon: int | None = None) -> np.ndarray:
    """Exact state-visit marginals, shape (horizon+1, S)."""
    t_max = mdp.horizon if horizon is None else horizon
    p_pi = np.einsum("sa,sat->st", policy_table, mdp.transitions)
    out = np.zeros((t_max + 1, mdp.n_states))
    out[0] = mdp.init_dist
    for t in range(t_max):
        out[t + 1] = out[t] @ p_pi
    return out


def tabular_q_stationary(mdp: TabularMdp, policy_table: np.ndarray) -> np.ndarray:
    """Infinite-horizon Q^pi by solving the linear Bellman system, shape (S, A)."""
    s_n, a_n = mdp.n_states, mdp.n_actions
    # Q = r + gamma * P (Pi Q): solve over the (S*A) flattened system.
    p = mdp.transitions.reshape(s_n * a_n, s_n)
    pi_op = np.zeros((s_n, s_n * a_n))
    for s in range(s_n):
        pi_op[s, s * a_n : (s + 1) * a_n] = policy_table[s]
    mat = np.eye(s_n * a_n) - mdp.gamma * p @ pi_op
    q = np.linalg.solve(mat, mdp.rewards.reshape(-1))
    return q.reshape(s_n, a_n)


def enumerate_paths(mdp: TabularMdp, policy_table: np.ndarray, horizon: int,
                    budget: int = 10 ** 6):
    """Yield every (path, probability) pair; path = (s0, a0, s1, ..., sH).

    Raises if the number of paths would exceed the enumeration budget.
    """
    n_paths = mdp.n_states * (mdp.n_states * mdp.n_actions) ** horizon
    if n_paths > budget:
        raise ValueError(f"enumeration budget exceeded: {n_paths} > {budget}")
    stack = [((s,), float(mdp.init_dist[s])) for s in range(mdp.n_states)
             if mdp.init_dist[s] > 0]
    for _ in range(horizon):
        nxt = []
        for path, prob in stack:
            s = path[-1]
            for a in range(mdp.n_actions):
                pa = policy_table[s, a]
                if pa == 0:
                    continue
                for s2 in range(mdp.n_states):
                    ps = mdp.transitions[s, a, s2]
                    if ps == 0:
                        continue
                    nxt.append((path + (a, s2), prob * pa * ps))
        stack = nxt
    return stack


def random_tabular_mdp(rng: RngStream, n_states: int, n_actions: int,
                       horizon: int, gamma: float = 0.95) -> TabularMdp:
    """Random dense tabular MDP (Dirichlet-like rows via normalized uniforms)."""
    raw = rng.uniform((n_states, n_actions, n_states)) + 0.05
    transitions = raw / raw.sum(axis=2, keepdims=True)
    rewards = rng.uniform((n_states, n_actions))
    d0 = rng.uniform(n_states) + 0.05
    return TabularMdp(transitions, rewards, d0 / d0.sum(), horizon, gamma)
