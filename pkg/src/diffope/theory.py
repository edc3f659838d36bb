"""Executable verification of the theoretical guarantees.

Two families of checks: an exact conditional-entropy comparison on enumerable
tabular instances (conditioning a window on its first state alone never has
less entropy than conditioning on the full history), and an evaluable
mean-squared-error bound whose quantities are measured empirically on toy
problems (with a clearly labeled surrogate for the model-fit constant, making
the bound check a plausibility check rather than a proof).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .envs import TabularMdp, enumerate_paths
from .metrics import ks_two_sample
from .rng import RngStream


def b_w(r_max: float, gamma: float, w: int) -> float:
    """Maximum discounted return of a length-w window: R_max (1-g^w)/(1-g)."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if w < 1:
        raise ValueError("w must be >= 1")
    return float(r_max * (1.0 - gamma ** w) / (1.0 - gamma))


@dataclass(frozen=True)
class BoundInputs:
    r_max: float
    gamma: float
    w: int
    horizon: int
    kappa: float
    delta_beta: float
    var_j: float

    def __post_init__(self):
        if min(self.r_max, self.kappa, self.delta_beta, self.var_j) < 0:
            raise ValueError("bound inputs must be nonnegative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass(frozen=True)
class MseBound:
    bias_sq: float
    var_boundary: float   # 10 (T/w)^2 B_w^2 kappa^w delta
    var_within: float     # 8 B_w^2 kappa^w delta / (1 - gamma^{2w})
    var_intrinsic: float  # Var(J) under the target policy

    @property
    def variance(self) -> float:
        return self.var_boundary + self.var_within + self.var_intrinsic

    @property
    def total(self) -> float:
        return self.bias_sq + self.variance


def mse_bound(inputs: BoundInputs) -> MseBound:
    """Evaluate the printed error bound exactly as stated.

    bias^2 = (2 B_w kappa^w delta / (1 - gamma^w))^2, variance adds
    10 (T/w)^2 B_w^2 kappa^w delta, 8 B_w^2 kappa^w delta / (1 - gamma^{2w}),
    and the intrinsic Var(J).
    """
    bw = b_w(inputs.r_max, inputs.gamma, inputs.w)
    kd = inputs.kappa ** inputs.w * inputs.delta_beta
    bias_sq = (2.0 * bw * kd / (1.0 - inputs.gamma ** inputs.w)) ** 2
    var_boundary = 10.0 * (inputs.horizon / inputs.w) ** 2 * bw ** 2 * kd
    var_within = 8.0 * bw ** 2 * kd / (1.0 - inputs.gamma ** (2 * inputs.w))
    return MseBound(bias_sq, var_boundary, var_within, inputs.var_j)


# -- conditional-entropy check ---------------------------------------------------


@dataclass
class EntropyCheck:
    h_given_state: float
    h_given_history: float
    holds: bool
    slack: float


ENTROPY_SLACK = 1e-10


def _conditional_entropy(joint: dict) -> float:
    """H(X | Y) from a {(y_key, x_key): prob} dictionary."""
    marg: dict = {}
    for (y, _), p in joint.items():
        marg[y] = marg.get(y, 0.0) + p
    h = 0.0
    for (y, _), p in joint.items():
        if p > 0.0:
            h -= p * math.log(p / marg[y])
    return h


def entropy_inequality_check(mdp: TabularMdp, policy, t: int,
                             horizon: int | None = None,
                             budget: int = 10 ** 6) -> EntropyCheck:
    """Compare H(tau | S_t) with H(tau | S_0, A_0, ..., S_t) by enumeration.

    ``tau`` is the sub-trajectory from time t on (A_t, S_{t+1}, ..., S_H).
    ``policy`` is a (S, A) table, or a list of ``(weight, table)`` pairs for a
    mixture whose component is drawn once per episode; the mixture makes the
    history strictly more informative than the current state, so the
    inequality becomes strict.
    """
    h = mdp.horizon if horizon is None else horizon
    if not 0 <= t <= h:
        raise ValueError("need 0 <= t <= horizon")
    components = policy if isinstance(policy, list) else [(1.0, policy)]
    by_state: dict = {}
    by_history: dict = {}
    for weight, table in components:
        for path, prob in enumerate_paths(mdp, np.asarray(table), h,
                                          budget=budget):
            p = weight * prob
            prefix = path[: 2 * t + 1]   # (s_0, a_0, ..., s_t)
            suffix = path[2 * t + 1 :]   # (a_t, s_{t+1}, ..., s_H)
            s_t = path[2 * t]
            key_h = (prefix, suffix)
            key_s = (s_t, suffix)
            by_history[key_h] = by_history.get(key_h, 0.0) + p
            by_state[key_s] = by_state.get(key_s, 0.0) + p
    h_state = _conditional_entropy(by_state)
    h_history = _conditional_entropy(by_history)
    slack = h_state - h_history
    return EntropyCheck(h_state, h_history, slack >= -ENTROPY_SLACK, slack)


# -- empirical bound quantities ---------------------------------------------------


def kappa_empirical(target, behavior, states: np.ndarray, actions: np.ndarray,
                    extra_action_sampler=None, rng: RngStream | None = None) -> float:
    """Empirical sup of target/behavior density ratio over dataset pairs.

    Optionally augments the grid with actions sampled from the target policy
    at the same states (the ratio's quantifier runs over all pairs; dataset
    support plus target draws is the measurable proxy).
    """
    lr = target.log_prob(states, actions, clamp=True) \
        - behavior.log_prob(states, actions, clamp=True)
    best = float(lr.max())
    if extra_action_sampler is not None and rng is not None:
        extra = extra_action_sampler(states, rng)
        lr2 = target.log_prob(states, extra, clamp=True) \
            - behavior.log_prob(states, extra, clamp=True)
        best = max(best, float(lr2.max()))
    return float(np.exp(best))


def delta_beta_surrogate(true_windows: np.ndarray, model_windows: np.ndarray,
                         n_projections: int = 8, seed: int = 0) -> float:
    """1-D projection surrogate for the window-model total-variation error.

    The total variation between the learned and true window distributions is
    not directly observable in continuous spaces; this reports the max over a
    fixed set of unit projections (axes-aligned first, then seeded random
    directions) of the two-sample KS distance.  It lower-bounds the true TV,
    so downstream bound checks are plausibility checks only.
    """
    true_windows = np.atleast_2d(true_windows)
    model_windows = np.atleast_2d(model_windows)
    dim = true_windows.shape[1]
    dirs = []
    for i in range(min(dim, n_projections)):
        e = np.zeros(dim)
        e[i] = 1.0
        dirs.append(e)
    rng = RngStream(seed, 777)
    while len(dirs) < n_projections:
        v = rng.normal((dim,))
        dirs.append(v / np.linalg.norm(v))
    worst = 0.0
    for v in dirs:
        worst = max(worst, ks_two_sample(true_windows @ v, model_windows @ v))
    return float(worst)


@dataclass
class MseCheck:
    empirical_mse: float
    bound: MseBound
    holds: bool
    kappa: float
    delta_beta: float
    w_curve: list  # (w, total bound) pairs


def empirical_mse_check(returns_hat: np.ndarray, j_true: float,
                        inputs: BoundInputs,
                        w_grid=(1, 2, 4, 8)) -> MseCheck:
    """Compare the measured MSE of stitched estimates against the bound.

    ``returns_hat`` holds independent estimates of J (one per trial).  The
    curve over window sizes shows the kappa^w growth with all other inputs
    fixed.
    """
    returns_hat = np.asarray(returns_hat, dtype=np.float64)
    emp = float(((returns_hat - j_true) ** 2).mean())
    bound = mse_bound(inputs)
    curve = []
    for w in list(w_grid) + [inputs.horizon]:
        if inputs.horizon % w != 0:
            continue
        alt = BoundInputs(inputs.r_max, inputs.gamma, w, inputs.horizon,
                          inputs.kappa, inputs.delta_beta, inputs.var_j)
        curve.append((w, mse_bound(alt).total))
    return MseCheck(emp, bound, emp <= bound.total, inputs.kappa,
                    inputs.delta_beta, curve)
