"""Value estimation by stitching guided diffusion windows end to end.

A rollout draws an initial state, generates a guided window conditioned on
it, then repeatedly conditions the next window on the previous window's last
state until the horizon is filled.  Returns are accumulated from a learned
reward model over the generated (state, action) pairs with absolute-time
discounting; the reward at the terminal state is not counted.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .data import NormStats, Trajectory, unflatten_window
from .diffusion import DenoiserModel, GuidanceSpec, guided_sample
from .errors import NumericalAbortError
from .nn import Adam, Mlp, grads_flat
from .rng import RngStream


class RewardModel:
    """MLP regression of immediate reward on (state, action)."""

    def __init__(self, net: Mlp, norm: NormStats, r_mean: float, r_std: float):
        self.net = net
        self.norm = norm
        self.r_mean = float(r_mean)
        self.r_std = float(r_std)

    def predict(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        x = np.concatenate([self.norm.normalize_state(states),
                            self.norm.normalize_action(actions)], axis=1)
        out = self.net.forward(x)[:, 0]
        if not np.all(np.isfinite(out)):
            raise NumericalAbortError("reward model produced non-finite prediction")
        return out * self.r_std + self.r_mean


def train_reward(trajectories, rng: RngStream, hidden=(32, 32), steps: int = 2000,
                 batch_size: int = 64, lr: float = 1e-3,
                 norm: NormStats | None = None):
    """Squared-error regression of r on behavior (s, a); returns (model, losses)."""
    trajectories = list(trajectories)
    if not trajectories or not any(t.n_steps for t in trajectories):
        raise ValueError("dataset has no rewards to fit")
    states = np.concatenate([t.states[:-1] for t in trajectories])
    actions = np.concatenate([t.actions for t in trajectories])
    rewards = np.concatenate([t.rewards for t in trajectories])
    if norm is None:
        norm = NormStats.fit(trajectories)
    r_mean = float(rewards.mean())
    r_std = max(float(rewards.std()), 1e-8)
    targets = (rewards - r_mean) / r_std
    x = np.concatenate([norm.normalize_state(states),
                        norm.normalize_action(actions)], axis=1)
    ds, da = states.shape[1], actions.shape[1]
    net = Mlp.init_random([ds + da, *hidden, 1], rng.child(0))
    opt = Adam(net.n_params(), lr=lr)
    params = net.get_flat()
    n = x.shape[0]
    bsz = min(batch_size, n)
    losses = np.zeros(steps)
    for step in range(steps):
        idx = rng.child(1 + step).integers(0, n, size=bsz)
        net.set_flat(params)
        pred, cache = net.forward_cached(x[idx])
        resid = pred[:, 0] - targets[idx]
        loss = float((resid ** 2).mean())
        if not np.isfinite(loss):
            raise NumericalAbortError(f"reward training diverged at step {step}")
        losses[step] = loss
        grads, _ = net.backward(cache, (2.0 * resid / bsz)[:, None])
        params = opt.step(params, grads_flat(net, grads))
    net.set_flat(params)
    return RewardModel(net, norm, r_mean, r_std), losses


@dataclass
class StitchConfig:
    """Guided-stitching run parameters; w must divide the horizon."""

    w: int
    horizon: int
    gamma: float
    n_rollouts: int
    alpha: float = 0.5
    lam: float = 0.25
    normalize: bool = True
    clip_denoised: bool = False
    clip_range: float = 2.0
    use_true_reward: bool = False

    def __post_init__(self):
        if self.w < 1 or self.horizon % self.w != 0:
            raise ValueError("w must be >= 1 and divide the horizon")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass
class StitchResult:
    """Generated rollouts: states (n, T+1, ds), per-step arrays, returns (n,)."""

    states: np.ndarray
    actions: np.ndarray
    rewards_hat: np.ndarray
    returns: np.ndarray
    completed: np.ndarray  # (n,) bool; False where a window went non-finite

    def to_trajectories(self) -> list[Trajectory]:
        out = []
        for i in range(self.states.shape[0]):
            if not self.completed[i]:
                continue
            t = self.actions.shape[1]
            out.append(Trajectory(self.states[i], self.actions[i],
                                  self.rewards_hat[i], np.zeros(t, dtype=bool)))
        return out


def score_handle(policy):
    """Adapt a policy to the guidance score interface (boundary inputs clamped)."""
    return lambda states, actions: policy.score(states, actions, clamp=True)


def stitch_rollout_batch(model: DenoiserModel, reward_fn, cfg: StitchConfig,
                         init_sampler, spec: GuidanceSpec, rng: RngStream,
                         n: int | None = None) -> StitchResult:
    """Generate ``n`` stitched rollouts and their discounted return estimates.

    Window ``t`` is conditioned on the previous window's final state (the
    initial state for t = 0) and uses the substream ``rng.child(1 + t)``, so
    a single-window run (w = horizon) consumes streams identically to one
    guided_sample call.  Rows whose window generation produces non-finite
    values are marked incomplete and reported, never silently dropped.
    """
    n = cfg.n_rollouts if n is None else n
    ds, da = model.state_dim, model.action_dim
    t_max = cfg.horizon
    w = cfg.w
    if model.w != w:
        raise ValueError(f"model was trained for w={model.w}, config asks w={w}")
    states = np.zeros((n, t_max + 1, ds))
    actions = np.zeros((n, t_max, da))
    completed = np.ones(n, dtype=bool)
    cond = np.atleast_2d(init_sampler(n, rng.child(0)))
    states[:, 0] = cond
    for t in range(t_max // w):
        win = guided_sample(model, cond, spec, rng.child(1 + t),
                            clip_denoised=cfg.clip_denoised,
                            clip_range=cfg.clip_range, check_finite=False)
        finite = np.isfinite(win).all(axis=1)
        completed &= finite
        win = np.where(finite[:, None], win, 0.0)
        st, ac = unflatten_window(win, w, ds, da)
        states[:, t * w : (t + 1) * w + 1] = st
        actions[:, t * w : (t + 1) * w] = ac
        cond = st[:, w]
    if not completed.any():
        raise NumericalAbortError("every stitched rollout aborted (non-finite windows)")
    flat_s = states[:, :t_max].reshape(n * t_max, ds)
    flat_a = actions.reshape(n * t_max, da)
    rhat = np.asarray(reward_fn(flat_s, flat_a)).reshape(n, t_max)
    disc = cfg.gamma ** np.arange(t_max)
    returns = np.where(completed, (rhat * disc).sum(axis=1), np.nan)
    return StitchResult(states, actions, rhat, returns, completed)


@dataclass
class PolicyEval:
    policy_id: str
    estimate: float
    stderr: float
    ground_truth: float
    n_rollouts: int


@dataclass
class EvalReport:
    """Per-target-policy estimates; ``estimate`` is the mean per-rollout return."""

    estimator: str
    rows: list[PolicyEval] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)
    aborted: int = 0

    CSV_HEADER = "estimator,policy_id,estimate,stderr,ground_truth,n_rollouts"

    def estimates(self) -> np.ndarray:
        return np.array([r.estimate for r in self.rows])

    def ground_truths(self) -> np.ndarray:
        return np.array([r.ground_truth for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.CSV_HEADER + "\n")
        for r in self.rows:
            buf.write(f"{self.estimator},{r.policy_id},{r.estimate!r},"
                      f"{r.stderr!r},{r.ground_truth!r},{r.n_rollouts}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if lines[0] != cls.CSV_HEADER:
            raise ValueError("bad eval report header")
        rows, estimator = [], ""
        for ln in lines[1:]:
            est, pid, val, se, gt, nr = ln.split(",")
            estimator = est
            rows.append(PolicyEval(pid, float(val), float(se), float(gt), int(nr)))
        return cls(estimator, rows)


def evaluate_policies(model: DenoiserModel, reward_model, cfg: StitchConfig,
                      targets, behavior, init_sampler, rng: RngStream,
                      ground_truths=None, policy_ids=None,
                      true_reward_fn=None, workers: int = 1) -> EvalReport:
    """Stitched-diffusion estimates for every target policy.

    Each policy gets an independent substream ``rng.child(i)``; results are
    reduced in policy order, so reports are deterministic for a given seed
    regardless of worker count.
    """
    if ground_truths is None:
        ground_truths = [float("nan")] * len(targets)
    if policy_ids is None:
        policy_ids = [f"pi_{i}" for i in range(len(targets))]
    if cfg.use_true_reward:
        if true_reward_fn is None:
            raise ValueError("use_true_reward requires true_reward_fn")
        reward_fn = true_reward_fn
    else:
        reward_fn = reward_model.predict
    behavior_handle = score_handle(behavior)

    def run_one(i: int):
        spec = GuidanceSpec(cfg.alpha, cfg.lam, cfg.normalize,
                            target_score=score_handle(targets[i]),
                            behavior_score=behavior_handle)
        return stitch_rollout_batch(model, reward_fn, cfg, init_sampler,
                                    spec, rng.child(i))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, range(len(targets))))
    else:
        results = [run_one(i) for i in range(len(targets))]

    report = EvalReport(estimator="stitch")
    for i, res in enumerate(results):
        rets = res.returns[res.completed]
        stderr = float(rets.std(ddof=1) / np.sqrt(rets.size)) if rets.size > 1 else 0.0
        report.rows.append(PolicyEval(policy_ids[i], float(rets.mean()), stderr,
                                      float(ground_truths[i]), int(rets.size)))
        report.aborted += int((~res.completed).sum())
    return report
