"""Policy objects exposing sampling, log-density, and score functions.

The score (gradient of log-density with respect to state and action) is what
the guided sampler consumes; every policy here computes it analytically, with
the state gradient flowing through the mean network.
"""

from __future__ import annotations

import numpy as np

from .nn import Mlp
from .rng import RngStream

LOG_STD_FLOOR = -5.0
BOUND_EPS = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


class BoundaryActionError(ValueError):
    """Raised when a squashed policy is queried on or outside the action bounds."""


class GaussianPolicy:
    """Gaussian policy with an MLP mean, state-independent log-std.

    With ``squash`` enabled the Gaussian sample is passed through tanh and
    scaled into ``[low, high]``; log-densities then carry the change-of-
    variables correction, and inputs within ``BOUND_EPS`` of the boundary are
    clamped before inverting the squash.
    """

    def __init__(self, mean_net: Mlp, log_std, squash: bool = False,
                 low=None, high=None):
        self.mean_net = mean_net
        self.log_std = np.atleast_1d(np.asarray(log_std, dtype=np.float64))
        self.squash = bool(squash)
        if self.squash:
            if low is None or high is None:
                raise ValueError("squashed policy needs action bounds")
            self.low = np.atleast_1d(np.asarray(low, dtype=np.float64))
            self.high = np.atleast_1d(np.asarray(high, dtype=np.float64))
            if np.any(self.high <= self.low):
                raise ValueError("need high > low")
        else:
            self.low = None
            self.high = None
        self.action_dim = self.log_std.shape[0]
        if mean_net.layer_dims[-1] != self.action_dim:
            raise ValueError("mean net output dim != action dim")

    @classmethod
    def constant(cls, state_dim: int, mean, std, **kwargs) -> "GaussianPolicy":
        """State-independent Gaussian: zero-weight linear net, bias = mean."""
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        net = Mlp.zeros([state_dim, mean.shape[0]])
        net.biases[0] = mean.copy()
        return cls(net, np.log(np.full(mean.shape[0], float(std))), **kwargs)

    @classmethod
    def linear(cls, weight, bias, std, **kwargs) -> "GaussianPolicy":
        weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
        bias = np.atleast_1d(np.asarray(bias, dtype=np.float64))
        net = Mlp([weight.shape[1], weight.shape[0]], [weight], [bias])
        return cls(net, np.log(np.full(bias.shape[0], float(std))), **kwargs)

    @property
    def std(self) -> np.ndarray:
        return np.exp(np.maximum(self.log_std, LOG_STD_FLOOR))

    def mean(self, states: np.ndarray) -> np.ndarray:
        return np.atleast_2d(self.mean_net.forward(np.atleast_2d(states)))

    def sample(self, states: np.ndarray, rng: RngStream) -> np.ndarray:
        states = np.atleast_2d(states)
        u = self.mean(states) + self.std * rng.normal((states.shape[0], self.action_dim))
        if not self.squash:
            return u
        mid = (self.low + self.high) / 2.0
        half = (self.high - self.low) / 2.0
        return mid + half * np.tanh(u)

    def _invert_squash(self, actions: np.ndarray, clamp: bool):
        mid = (self.low + self.high) / 2.0
        half = (self.high - self.low) / 2.0
        v = (actions - mid) / half
        if clamp:
            v = np.clip(v, -1.0 + BOUND_EPS, 1.0 - BOUND_EPS)
        elif np.any(np.abs(v) >= 1.0):
            raise BoundaryActionError(
                "action on or outside the bound boundary; the squashed score "
                "diverges there (pass clamp=True to clamp inputs)")
        u = np.arctanh(v)
        return u, v, half

    def log_prob(self, states: np.ndarray, actions: np.ndarray,
                 clamp: bool = False) -> np.ndarray:
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        mu = self.mean(states)
        std = self.std
        if self.squash:
            u, v, half = self._invert_squash(actions, clamp)
            base = -0.5 * ((u - mu) / std) ** 2 - np.log(std) - 0.5 * _LOG_2PI
            corr = -np.log(half) - np.log1p(-v * v)
            return (base + corr).sum(axis=1)
        z = (actions - mu) / std
        return (-0.5 * z * z - np.log(std) - 0.5 * _LOG_2PI).sum(axis=1)

    def score(self, states: np.ndarray, actions: np.ndarray,
              clamp: bool = False):
        """Gradient of log-prob w.r.t. (state, action); returns ``(gs, ga)``."""
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        mu, cache = self.mean_net.forward_cached(states)
        mu = np.atleast_2d(mu)
        var = self.std ** 2
        if self.squash:
            u, v, half = self._invert_squash(actions, clamp)
            z = (u - mu) / var
            ga = (-z + 2.0 * v) / (half * (1.0 - v * v))
        else:
            z = (actions - mu) / var
            ga = -z
        _, gs = self.mean_net.backward(cache, z)
        return gs, ga


class TabularPolicy:
    """Discrete policy over a tabular MDP; states/actions are integer indices."""

    def __init__(self, table: np.ndarray):
        self.table = np.asarray(table, dtype=np.float64)
        if not np.allclose(self.table.sum(axis=1), 1.0, atol=1e-10):
            raise ValueError("policy rows must sum to 1")

    def sample(self, states: np.ndarray, rng: RngStream) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64).ravel()
        cum = np.cumsum(self.table[states], axis=1)
        u = rng.uniform(states.shape[0])
        return (u[:, None] < cum).argmax(axis=1)

    def log_prob(self, states, actions) -> np.ndarray:
        s = np.asarray(states, dtype=np.int64).ravel()
        a = np.asarray(actions, dtype=np.int64).ravel()
        p = self.table[s, a]
        with np.errstate(divide="ignore"):
            return np.log(p)


class DiffusionPolicyAdapter:
    """Score access for a policy represented by an action denoiser.

    The adapter only needs the denoiser output at the lowest noise level:
    the action score is ``-eps(a, 1 | s) / sigma_1``.  The state gradient is
    not available from the denoiser and is reported as zero.
    """

    def __init__(self, eps_fn, schedule, action_dim: int):
        self.eps_fn = eps_fn
        self.schedule = schedule
        self.action_dim = action_dim

    def score(self, states: np.ndarray, actions: np.ndarray,
              clamp: bool = False):
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        sigma_1 = self.schedule.sigmas[0]
        ga = -self.eps_fn(actions, 1, states) / sigma_1
        return np.zeros_like(states), ga

    def sample(self, states: np.ndarray, rng: RngStream) -> np.ndarray:
        """Ancestral sampling of the action denoiser's reverse chain."""
        states = np.atleast_2d(states)
        n = states.shape[0]
        sched = self.schedule
        x = rng.child(0).normal((n, self.action_dim))
        for k in range(sched.n_steps, 0, -1):
            alpha_k = sched.alphas[k - 1]
            sigma_k = sched.sigmas[k - 1]
            beta_k = 1.0 - alpha_k
            eps_hat = self.eps_fn(x, k, states)
            mean = (x - (beta_k / sigma_k) * eps_hat) / np.sqrt(alpha_k)
            if k > 1:
                x = mean + np.sqrt(beta_k) * rng.child(k).normal((n, self.action_dim))
            else:
                x = mean
        return x


def policy_family(state_dim: int, means, std: float, **kwargs) -> list[GaussianPolicy]:
    """Constant-mean Gaussian policies at the given mean levels.

    Mirrors a checkpoint ladder of policies of varying ability: the means
    interpolate between the worst and best scripted behavior.
    """
    return [GaussianPolicy.constant(state_dim, m, std, **kwargs) for m in means]


def kappa_max(target, behavior, states: np.ndarray, actions: np.ndarray) -> float:
    """Empirical sup of the likelihood ratio target/behavior over given pairs."""
    lr = target.log_prob(states, actions, clamp=True) \
        - behavior.log_prob(states, actions, clamp=True)
    return float(np.exp(lr.max()))
