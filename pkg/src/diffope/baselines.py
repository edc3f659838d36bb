"""Classical off-policy estimators: per-decision importance sampling,
single-step model-based rollouts, fitted Q-evaluation, and doubly-robust.

All estimators operate on behavior trajectories plus log-density or value
callables, so the same code paths serve both continuous Gaussian policies
and tabular policies (with integer indices carried in float arrays).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NormStats, Trajectory
from .errors import NumericalAbortError
from .nn import Adam, Mlp, grads_flat
from .rng import RngStream

PDIS_WEIGHT_CLIP = 1e6


class ZeroBehaviorDensityError(ValueError):
    """The behavior policy assigns zero density to a logged action."""


def pdis_per_trajectory(trajectories, logp_target, logp_behavior, gamma: float):
    """Per-trajectory PDIS values; returns ``(values, n_clipped)``.

    ``logp_*`` map ``(states (t, ds), actions (t, da)) -> (t,)`` log-densities.
    Cumulative ratios are clipped at 1e6 for numerical safety.
    """
    per_traj = []
    clipped = 0
    for j, traj in enumerate(trajectories):
        t = traj.n_steps
        states, actions = traj.states[:-1], traj.actions
        lp_t = np.asarray(logp_target(states, actions), dtype=np.float64)
        lp_b = np.asarray(logp_behavior(states, actions), dtype=np.float64)
        if np.any(np.isneginf(lp_b)):
            step = int(np.flatnonzero(np.isneginf(lp_b))[0])
            raise ZeroBehaviorDensityError(
                f"behavior density is zero at trajectory {j}, step {step}")
        cum = np.exp(np.cumsum(lp_t - lp_b))
        over = cum > PDIS_WEIGHT_CLIP
        clipped += int(over.sum())
        cum = np.minimum(cum, PDIS_WEIGHT_CLIP)
        disc = gamma ** np.arange(t)
        per_traj.append(float((disc * cum * traj.rewards).sum()))
    return np.asarray(per_traj), clipped


def pdis_estimate(trajectories, logp_target, logp_behavior, gamma: float):
    """Mean PDIS estimate over trajectories; returns (estimate, stderr, n_clipped)."""
    vals, clipped = pdis_per_trajectory(trajectories, logp_target,
                                        logp_behavior, gamma)
    stderr = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
    return float(vals.mean()), stderr, clipped


@dataclass
class DynamicsModel:
    """Learned single-step dynamics: next-state delta mean + residual noise."""

    net: Mlp
    norm: NormStats
    delta_mean: np.ndarray
    delta_std: np.ndarray
    noise_std: np.ndarray
    term_net: Mlp | None = None

    def predict_next(self, states, actions, rng: RngStream | None = None):
        x = np.concatenate([self.norm.normalize_state(states),
                            self.norm.normalize_action(actions)], axis=1)
        delta = self.net.forward(x) * self.delta_std + self.delta_mean
        nxt = states + delta
        if rng is not None:
            nxt = nxt + self.noise_std * rng.normal(nxt.shape)
        return nxt

    def predict_done_prob(self, states) -> np.ndarray:
        if self.term_net is None:
            return np.zeros(np.atleast_2d(states).shape[0])
        z = self.term_net.forward(self.norm.normalize_state(states))[:, 0]
        return 1.0 / (1.0 + np.exp(-z))


def train_dynamics(trajectories, rng: RngStream, hidden=(64, 64),
                   steps: int = 2000, batch_size: int = 128, lr: float = 1e-3,
                   norm: NormStats | None = None) -> DynamicsModel:
    """Fit s' - s regression; per-coordinate residual std becomes the noise model.

    A termination classifier is fit only when the dataset contains done flags.
    """
    trajectories = list(trajectories)
    states = np.concatenate([t.states[:-1] for t in trajectories])
    actions = np.concatenate([t.actions for t in trajectories])
    nexts = np.concatenate([t.states[1:] for t in trajectories])
    if norm is None:
        norm = NormStats.fit(trajectories)
    deltas = nexts - states
    d_mean = deltas.mean(axis=0)
    d_std = np.maximum(deltas.std(axis=0), 1e-8)
    targets = (deltas - d_mean) / d_std
    x = np.concatenate([norm.normalize_state(states),
                        norm.normalize_action(actions)], axis=1)
    net = _fit_regression(x, targets, rng.child(0), hidden, steps, batch_size, lr)
    resid = net.forward(x) * d_std + d_mean - deltas
    noise_std = np.maximum(resid.std(axis=0), 1e-8)
    term_net = None
    if any(t.dones.any() for t in trajectories):
        term_net = _fit_termination(trajectories, norm, rng.child(1), hidden,
                                    steps, batch_size, lr)
    return DynamicsModel(net, norm, d_mean, d_std, noise_std, term_net)


def _fit_regression(x, targets, rng, hidden, steps, batch_size, lr) -> Mlp:
    targets = np.atleast_2d(targets)
    if targets.shape[0] != x.shape[0]:
        targets = targets.T
    net = Mlp.init_random([x.shape[1], *hidden, targets.shape[1]], rng.child(0))
    opt = Adam(net.n_params(), lr=lr)
    params = net.get_flat()
    n = x.shape[0]
    bsz = min(batch_size, n)
    for step in range(steps):
        idx = rng.child(1 + step).integers(0, n, size=bsz)
        net.set_flat(params)
        pred, cache = net.forward_cached(x[idx])
        resid = pred - targets[idx]
        loss = float((resid ** 2).mean())
        if not np.isfinite(loss):
            raise NumericalAbortError(f"regression diverged at step {step}")
        opt.lr = lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * step / steps)))
        grads, _ = net.backward(cache, 2.0 * resid / resid.size)
        params = opt.step(params, grads_flat(net, grads))
    net.set_flat(params)
    return net


def _fit_termination(trajectories, norm, rng, hidden, steps, batch_size, lr) -> Mlp:
    """Logistic regression of the done flag on the next state."""
    xs = np.concatenate([t.states[1:] for t in trajectories])
    ys = np.concatenate([t.dones for t in trajectories]).astype(np.float64)
    x = norm.normalize_state(xs)
    net = Mlp.init_random([x.shape[1], *hidden, 1], rng.child(0))
    opt = Adam(net.n_params(), lr=lr)
    params = net.get_flat()
    n = x.shape[0]
    bsz = min(batch_size, n)
    for step in range(steps):
        idx = rng.child(1 + step).integers(0, n, size=bsz)
        net.set_flat(params)
        z, cache = net.forward_cached(x[idx])
        p = 1.0 / (1.0 + np.exp(-z[:, 0]))
        grad_z = ((p - ys[idx]) / bsz)[:, None]
        grads, _ = net.backward(cache, grad_z)
        params = opt.step(params, grads_flat(net, grads))
    net.set_flat(params)
    return net


def mb_estimate(dynamics: DynamicsModel, policy, reward_fn, d0_sampler,
                horizon: int, gamma: float, n_rollouts: int, rng: RngStream,
                state_clip: float = 1e6):
    """Autoregressive model rollouts under the target policy.

    Divergent states are clipped into ``[-state_clip, state_clip]`` with a
    warning count.  Returns ``(estimate, stderr, n_clipped)``.
    """
    s = np.atleast_2d(d0_sampler(n_rollouts, rng.child(0)))
    returns = np.zeros(n_rollouts)
    alive = np.ones(n_rollouts)
    clipped = 0
    for t in range(horizon):
        step_rng = rng.child(1 + t)
        a = policy.sample(s, step_rng.child(0))
        r = np.asarray(reward_fn(s, a))
        returns += alive * (gamma ** t) * r
        s = dynamics.predict_next(s, a, step_rng.child(1))
        over = np.abs(s) > state_clip
        clipped += int(over.sum())
        s = np.clip(s, -state_clip, state_clip)
        if dynamics.term_net is not None:
            p_done = dynamics.predict_done_prob(s)
            done = step_rng.child(2).uniform(n_rollouts) < p_done
            alive = alive * (1.0 - done.astype(np.float64))
    stderr = float(returns.std(ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return float(returns.mean()), stderr, clipped


@dataclass
class QModel:
    """Q-network with a Polyak-averaged target copy."""

    net: Mlp
    target_net: Mlp
    polyak: float = 0.05

    @classmethod
    def create(cls, in_dim: int, rng: RngStream, hidden=(64, 64),
               polyak: float = 0.05) -> "QModel":
        net = Mlp.init_random([in_dim, *hidden, 1], rng)
        return cls(net, net.copy(), polyak)

    def q(self, s, a) -> np.ndarray:
        return self.net.forward(np.concatenate([np.atleast_2d(s),
                                                np.atleast_2d(a)], axis=1))[:, 0]

    def q_target(self, s, a) -> np.ndarray:
        return self.target_net.forward(np.concatenate([np.atleast_2d(s),
                                                       np.atleast_2d(a)],
                                                      axis=1))[:, 0]


def fqe_estimate(transitions, sample_next_action, initial_pairs, qmodel: QModel,
                 gamma: float, rng: RngStream, steps: int = 4000,
                 batch_size: int = 128, lr: float = 1e-3, n_initial: int = 256):
    """Fitted Q-evaluation: TD regression with a target network.

    ``transitions`` is ``(s, a, r, s_next, done)`` arrays; ``sample_next_action
    (s_next_batch, rng) -> a'`` draws from the target policy;
    ``initial_pairs(n, rng) -> (s0, a0)`` samples the initial distribution and
    the target policy's first action.  The estimate is read from the Polyak
    copy, which averages out late-stage minibatch wobble.  Returns
    ``(estimate, qmodel, losses)``.
    """
    s, a, r, s_next, done = transitions
    n = s.shape[0]
    opt = Adam(qmodel.net.n_params(), lr=lr)
    params = qmodel.net.get_flat()
    target_params = qmodel.target_net.get_flat()
    losses = np.zeros(steps)
    bsz = min(batch_size, n)
    for step in range(steps):
        step_rng = rng.child(step)
        idx = step_rng.child(0).integers(0, n, size=bsz)
        a_next = sample_next_action(s_next[idx], step_rng.child(1))
        qmodel.target_net.set_flat(target_params)
        q_next = qmodel.q_target(s_next[idx], a_next)
        y = r[idx] + gamma * (1.0 - done[idx].astype(np.float64)) * q_next
        qmodel.net.set_flat(params)
        x = np.concatenate([s[idx], a[idx]], axis=1)
        pred, cache = qmodel.net.forward_cached(x)
        resid = pred[:, 0] - y
        loss = float((resid ** 2).mean())
        if not np.isfinite(loss):
            raise NumericalAbortError(f"FQE diverged at step {step}")
        losses[step] = loss
        grads, _ = qmodel.net.backward(cache, (2.0 * resid / bsz)[:, None])
        params = opt.step(params, grads_flat(qmodel.net, grads))
        target_params = (1.0 - qmodel.polyak) * target_params + qmodel.polyak * params
    qmodel.net.set_flat(params)
    qmodel.target_net.set_flat(target_params)
    s0, a0 = initial_pairs(n_initial, rng.child(steps))
    estimate = float(qmodel.q_target(s0, a0).mean())
    return estimate, qmodel, losses


def dr_per_trajectory(trajectories, logp_target, logp_behavior, gamma: float,
                      q_fn, v_fn) -> np.ndarray:
    """Per-trajectory doubly-robust values via the backward recursion.

    The printed recursion's superscript is read as steps-remaining: starting
    from v = 0 at the episode end,
    ``v <- V(s_t) + rho_t * (r_t + gamma * v - Q(s_t, a_t))`` for
    t = T-1 .. 0, where rho_t is the per-step likelihood ratio.  With
    Q = V = 0 this reduces exactly to per-decision importance sampling.
    ``q_fn``/``v_fn`` receive the trajectory's step arrays in time order, so
    a time-dependent oracle can key off the row index.
    """
    per_traj = []
    for j, traj in enumerate(trajectories):
        states, actions = traj.states[:-1], traj.actions
        lp_t = np.asarray(logp_target(states, actions), dtype=np.float64)
        lp_b = np.asarray(logp_behavior(states, actions), dtype=np.float64)
        if np.any(np.isneginf(lp_b)):
            step = int(np.flatnonzero(np.isneginf(lp_b))[0])
            raise ZeroBehaviorDensityError(
                f"behavior density is zero at trajectory {j}, step {step}")
        rho = np.exp(lp_t - lp_b)
        q_vals = np.asarray(q_fn(states, actions), dtype=np.float64)
        v_vals = np.asarray(v_fn(states), dtype=np.float64)
        v = 0.0
        for t in range(traj.n_steps - 1, -1, -1):
            v = v_vals[t] + rho[t] * (traj.rewards[t] + gamma * v - q_vals[t])
        per_traj.append(float(v))
    return np.asarray(per_traj)


def dr_estimate(trajectories, logp_target, logp_behavior, gamma: float,
                q_fn, v_fn):
    """Mean doubly-robust estimate; returns ``(estimate, stderr)``."""
    vals = dr_per_trajectory(trajectories, logp_target, logp_behavior, gamma,
                             q_fn, v_fn)
    stderr = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
    return float(vals.mean()), stderr


def make_v_from_q(q_fn, policy, rng: RngStream, n_samples: int = 8):
    """Monte Carlo state-value from Q: average Q(s, a) over policy samples."""

    def v_fn(states):
        states = np.atleast_2d(states)
        total = np.zeros(states.shape[0])
        for i in range(n_samples):
            a = policy.sample(states, rng.child(i))
            total += np.asarray(q_fn(states, a))
        return total / n_samples

    return v_fn
