"""Trajectory storage, window slicing, normalization, and on-disk persistence.

A trajectory of ``T`` steps holds ``T+1`` states, ``T`` actions, rewards and
done flags.  Training slices trajectories into overlapping windows of ``w``
steps laid out as ``(s_t, a_t, ..., s_{t+w-1}, a_{t+w-1}, s_{t+w})`` and
flattened; the window's own first state doubles as its conditioning state.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

FORMAT_VERSION = 1


@dataclass
class Trajectory:
    states: np.ndarray   # (T+1, state_dim)
    actions: np.ndarray  # (T, action_dim)
    rewards: np.ndarray  # (T,)
    dones: np.ndarray    # (T,) bool

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        t = self.actions.shape[0]
        if self.states.shape[0] != t + 1:
            raise ValueError("need T+1 states for T actions")
        if self.rewards.shape != (t,) or self.dones.shape != (t,):
            raise ValueError("rewards/dones length mismatch")
        for name, arr in (("states", self.states), ("actions", self.actions),
                          ("rewards", self.rewards)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def effective_length(self) -> int:
        """Steps up to and including the first done flag (full length if none)."""
        hits = np.flatnonzero(self.dones)
        return int(hits[0]) + 1 if hits.size else self.n_steps


def window_width(w: int, state_dim: int, action_dim: int) -> int:
    return w * (state_dim + action_dim) + state_dim


@dataclass
class WindowBatch:
    """Flattened length-w windows plus their conditioning (first) states."""

    windows: np.ndarray      # (B, window_width)
    cond_states: np.ndarray  # (B, state_dim)
    w: int
    state_dim: int
    action_dim: int
    loss_mask: np.ndarray | None = None  # (B, window_width), 1 = real data

    def __post_init__(self):
        expect = window_width(self.w, self.state_dim, self.action_dim)
        if self.windows.shape[1] != expect:
            raise ValueError(f"window width {self.windows.shape[1]} != {expect}")
        if self.cond_states.shape != (self.windows.shape[0], self.state_dim):
            raise ValueError("cond_states shape mismatch")

    @property
    def n(self) -> int:
        return self.windows.shape[0]


def flatten_window(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Interleave w+1 states and w actions into one flat vector."""
    w = actions.shape[0]
    parts = []
    for u in range(w):
        parts.append(states[u])
        parts.append(actions[u])
    parts.append(states[w])
    return np.concatenate(parts)

def unflatten_window(vec: np.ndarray, w: int, state_dim: int, action_dim: int):
    """Inverse of :func:`flatten_window`; accepts a batch ``(n, width)`` too."""
    batch = np.atleast_2d(vec)
    n = batch.shape[0]
    step = state_dim + action_dim
    states = np.empty((n, w + 1, state_dim))
    actions = np.empty((n, w, action_dim))
    for u in range(w):
        start = u * step
        states[:, u] = batch[:, start : start + state_dim]
        actions[:, u] = batch[:, start + state_dim : start + step]
    states[:, w] = batch[:, w * step : w * step + state_dim]
    if vec.ndim == 1:
        return states[0], actions[0]
    return states, actions


def slice_windows(trajectories, w: int, stride: int = 1,
                  pad_short: bool = False) -> WindowBatch:
    """Slice trajectories into length-w windows at the given stride.

    Windows never cross a done boundary.  Episodes shorter than ``w`` are
    skipped unless ``pad_short`` is set, in which case a single zero-padded
    window with a loss mask is emitted (training-time only; generation never
    pads).
    """
    if w < 1 or stride < 1:
        raise ValueError("w and stride must be >= 1")
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("empty dataset")
    ds, da = trajectories[0].state_dim, trajectories[0].action_dim
    width = window_width(w, ds, da)
    rows, conds, masks = [], [], []
    any_pad = False
    for traj in trajectories:
        eff = traj.effective_length()
        if eff < w:
            if not pad_short:
                continue
            any_pad = True
            st = np.zeros((w + 1, ds))
            ac = np.zeros((w, da))
            st[: eff + 1] = traj.states[: eff + 1]
            ac[:eff] = traj.actions[:eff]
            mask_st = np.zeros((w + 1, ds))
            mask_ac = np.zeros((w, da))
            mask_st[: eff + 1] = 1.0
            mask_ac[:eff] = 1.0
            rows.append(flatten_window(st, ac))
            masks.append(flatten_window(mask_st, mask_ac))
            conds.append(traj.states[0])
            continue
        for off in range(0, eff - w + 1, stride):
            rows.append(flatten_window(traj.states[off : off + w + 1],
                                       traj.actions[off : off + w]))
            conds.append(traj.states[off])
            masks.append(np.ones(width))
    if not rows:
        raise ValueError(f"no window of length {w} fits any trajectory")
    return WindowBatch(
        windows=np.asarray(rows),
        cond_states=np.asarray(conds),
        w=w,
        state_dim=ds,
        action_dim=da,
        loss_mask=np.asarray(masks) if any_pad else None,
    )


@dataclass
class NormStats:
    """Per-coordinate mean/std of states and actions (population std, floored)."""

    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    STD_FLOOR = 1e-6

    def __post_init__(self):
        self.state_std = np.maximum(np.asarray(self.state_std, dtype=np.float64),
                                    self.STD_FLOOR)
        self.action_std = np.maximum(np.asarray(self.action_std, dtype=np.float64),
                                     self.STD_FLOOR)

    @classmethod
    def identity(cls, state_dim: int, action_dim: int) -> "NormStats":
        return cls(np.zeros(state_dim), np.ones(state_dim),
                   np.zeros(action_dim), np.ones(action_dim))

    @classmethod
    def fit(cls, trajectories) -> "NormStats":
        """Single-pass Welford accumulation over all states and actions."""
        trajectories = list(trajectories)
        if not trajectories:
            raise ValueError("empty dataset")
        ds = trajectories[0].state_dim
        da = trajectories[0].action_dim
        s_acc = _Welford(ds)
        a_acc = _Welford(da)
        for traj in trajectories:
            for row in traj.states:
                s_acc.add(row)
            for row in traj.actions:
                a_acc.add(row)
        return cls(s_acc.mean.copy(), s_acc.std(), a_acc.mean.copy(), a_acc.std())

    # -- per-entity transforms --

    def normalize_state(self, s):
        return (np.asarray(s) - self.state_mean) / self.state_std

    def denormalize_state(self, s):
        return np.asarray(s) * self.state_std + self.state_mean

    def normalize_action(self, a):
        return (np.asarray(a) - self.action_mean) / self.action_std

    def denormalize_action(self, a):
        return np.asarray(a) * self.action_std + self.action_mean

    # -- flat window transforms --

    def window_mean(self, w: int) -> np.ndarray:
        parts = []
        for _ in range(w):
            parts.append(self.state_mean)
            parts.append(self.action_mean)
        parts.append(self.state_mean)
        return np.concatenate(parts)

    def window_std(self, w: int) -> np.ndarray:
        parts = []
        for _ in range(w):
            parts.append(self.state_std)
            parts.append(self.action_std)
        parts.append(self.state_std)
        return np.concatenate(parts)

    def normalize_window(self, x, w: int):
        return (np.asarray(x) - self.window_mean(w)) / self.window_std(w)

    def denormalize_window(self, x, w: int):
        return np.asarray(x) * self.window_std(w) + self.window_mean(w)


@dataclass
class WindowCodec:
    """Model-space window representation relative to the conditioning state.

    State coordinates at offset u are stored as
    ``(s_u - s_cond - drift_u) / delta_std_u`` with per-offset drift and scale
    measured on the training windows; action coordinates use plain
    normalization.  Relative coordinates make the conditional window
    distribution nearly offset-free (unit scale, zero pooled mean), which the
    denoiser fits far more reliably than absolute positions, and they make a
    fixed clipping box meaningful during sampling.  The window's own first
    state encodes to exactly zero.
    """

    w: int
    state_dim: int
    action_dim: int
    drift: np.ndarray        # (w+1, state_dim); row 0 is zero
    delta_std: np.ndarray    # (w+1, state_dim); row 0 is one
    action_mean: np.ndarray  # (action_dim,)
    action_std: np.ndarray   # (action_dim,)

    @classmethod
    def fit(cls, batch: "WindowBatch") -> "WindowCodec":
        w, ds, da = batch.w, batch.state_dim, batch.action_dim
        rows = batch.windows
        conds = batch.cond_states
        if batch.loss_mask is not None:
            full = batch.loss_mask.all(axis=1)
            if not full.any():
                raise ValueError("no unpadded window to fit the codec on")
            rows, conds = rows[full], conds[full]
        states, actions = unflatten_window(rows, w, ds, da)
        drift = np.zeros((w + 1, ds))
        delta_std = np.ones((w + 1, ds))
        for u in range(1, w + 1):
            rel = states[:, u] - conds
            drift[u] = rel.mean(axis=0)
            delta_std[u] = np.maximum(rel.std(axis=0), 1e-6)
        flat_a = actions.reshape(-1, da)
        a_std = np.maximum(flat_a.std(axis=0), 1e-6)
        return cls(w, ds, da, drift, delta_std, flat_a.mean(axis=0), a_std)

    @classmethod
    def identity(cls, w: int, state_dim: int, action_dim: int) -> "WindowCodec":
        return cls(w, state_dim, action_dim, np.zeros((w + 1, state_dim)),
                   np.ones((w + 1, state_dim)), np.zeros(action_dim),
                   np.ones(action_dim))

    def encode(self, windows: np.ndarray, cond_states: np.ndarray) -> np.ndarray:
        windows = np.atleast_2d(windows)
        cond_states = np.atleast_2d(cond_states)
        states, actions = unflatten_window(windows, self.w, self.state_dim,
                                           self.action_dim)
        xs = (states - cond_states[:, None, :] - self.drift[None]) \
            / self.delta_std[None]
        xa = (actions - self.action_mean) / self.action_std
        return self._interleave(xs, xa)

    def decode(self, x: np.ndarray, cond_states: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        cond_states = np.atleast_2d(cond_states)
        xs, xa = unflatten_window(x, self.w, self.state_dim, self.action_dim)
        states = xs * self.delta_std[None] + self.drift[None] \
            + cond_states[:, None, :]
        actions = xa * self.action_std + self.action_mean
        return self._interleave(states, actions)

    def scale_vector(self) -> np.ndarray:
        """Diagonal of d(window)/d(model coordinates), flattened."""
        parts = []
        for u in range(self.w):
            parts.append(self.delta_std[u])
            parts.append(self.action_std)
        parts.append(self.delta_std[self.w])
        return np.concatenate(parts)

    def _interleave(self, states, actions) -> np.ndarray:
        parts = []
        for u in range(self.w):
            parts.append(states[:, u])
            parts.append(actions[:, u])
        parts.append(states[:, self.w])
        return np.concatenate(parts, axis=1)


class _Welford:
    """Deterministic streaming mean/M2 accumulator (population variance)."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, row: np.ndarray) -> None:
        self.n += 1
        delta = row - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (row - self.mean)

    def std(self) -> np.ndarray:
        if self.n == 0:
            raise ValueError("no data accumulated")
        return np.sqrt(self.m2 / self.n)


# -- on-disk dataset format ---------------------------------------------------
#
# A dataset directory contains a `meta` file (flat key = value text) and
# `trajectories.csv` with one row per (episode, t) pair in ascending order.
# Floats are stored at 32-bit precision using round-trip-exact decimal text.
# The trailing row of each episode carries the final state with zero
# action/reward and done=0; the loader drops those fields.

def _fmt32(x: float) -> str:
    return repr(float(np.float32(x)))


def save_dataset(path: str, trajectories, meta: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("refusing to write an empty dataset")
    ds = trajectories[0].state_dim
    da = trajectories[0].action_dim
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"state_dim = {ds}",
        f"action_dim = {da}",
        f"n_episodes = {len(trajectories)}",
    ]
    for key in sorted(meta or {}):
        lines.append(f"{key} = {meta[key]}")
    with open(os.path.join(path, "meta"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    cols = (["episode", "t"] + [f"s_{i}" for i in range(ds)]
            + [f"a_{i}" for i in range(da)] + ["reward", "done"])
    with open(os.path.join(path, "trajectories.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for ep, traj in enumerate(trajectories):
            t_steps = traj.n_steps
            for t in range(t_steps + 1):
                svals = [_fmt32(v) for v in traj.states[t]]
                if t < t_steps:
                    avals = [_fmt32(v) for v in traj.actions[t]]
                    r = _fmt32(traj.rewards[t])
                    d = str(int(traj.dones[t]))
                else:
                    avals = [_fmt32(0.0)] * da
                    r = _fmt32(0.0)
                    d = "0"
                fh.write(",".join([str(ep), str(t)] + svals + avals + [r, d]) + "\n")


def load_dataset(path: str):
    """Load a dataset directory; returns (trajectories, meta)."""
    meta: dict[str, str] = {}
    with open(os.path.join(path, "meta"), "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition(" = ")
            meta[key] = val
    ds = int(meta["state_dim"])
    da = int(meta["action_dim"])
    episodes: dict[int, list] = {}
    with open(os.path.join(path, "trajectories.csv"), "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("episode,"):
            raise ValueError("bad trajectories.csv header")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            ep, t = int(parts[0]), int(parts[1])
            vals = [np.float64(np.float32(float(v))) for v in parts[2 : 2 + ds + da + 1]]
            done = bool(int(parts[2 + ds + da + 1]))
            episodes.setdefault(ep, []).append((t, vals[:ds], vals[ds : ds + da],
                                                vals[ds + da], done))
    trajectories = []
    for ep in sorted(episodes):
        rows = sorted(episodes[ep], key=lambda r: r[0])
        n = len(rows) - 1
        states = np.array([r[1] for r in rows])
        actions = np.array([r[2] for r in rows[:n]])
        rewards = np.array([r[3] for r in rows[:n]])
        dones = np.array([r[4] for r in rows[:n]])
        trajectories.append(Trajectory(states, actions, rewards, dones))
    return trajectories, meta
