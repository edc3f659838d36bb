"""Flat, ordered, versioned run configuration.

The config file is ``key = value`` text with ``#`` comments.  Unknown keys
are hard errors (silent typos corrupt sweeps); every value has a default and
the effective config is echoed verbatim into every output directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError

CONFIG_VERSION = 1


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected boolean, got {s!r}")


def _parse_float_list(s: str) -> tuple:
    s = s.strip()
    if not s:
        return ()
    return tuple(float(x) for x in s.split(","))


def _parse_int_list(s: str) -> tuple:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(x) for x in s.split(","))


def _parse_str_list(s: str) -> tuple:
    s = s.strip()
    if not s:
        return ()
    return tuple(x.strip() for x in s.split(","))


@dataclass
class RunConfig:
    """Every experiment knob, with defaults following the reference tables
    (window 8, target guidance 0.5 with behavior/target ratio 0.5, 50
    evaluation rollouts) where the source states one."""

    env: str = "gaussian_world"
    seed: int = 1
    episodes: int = 200
    horizon: int = 0            # 0 = environment default
    gamma: float = 0.0          # 0 = environment default
    n_policies: int = 5
    policy_mean_min: float = -0.5
    policy_mean_max: float = 0.5
    policy_std: float = 0.4
    behavior_means: str = "middle"   # "middle" or comma-separated floats
    w: int = 8
    k_steps: int = 64
    schedule: str = "cosine"
    hidden: tuple = (128, 128)
    embed_dim: int = 16
    train_steps: int = 6000
    batch_size: int = 256
    lr: float = 3e-3
    ema: float = 0.999
    reward_train_steps: int = 2000
    dynamics_train_steps: int = 2000
    fqe_train_steps: int = 4000
    alpha: float = 0.5
    lam: float = 0.25
    normalize_guidance: bool = True
    n_rollouts: int = 50
    clip_denoised: bool = False
    clip_range: float = 2.0
    true_reward: bool = False
    estimators: tuple = ("stitch",)
    gt_rollouts: int = 2000
    sweep_alpha: tuple = ()
    sweep_lambda: tuple = ()
    sweep_w: tuple = ()

    _PARSERS = {
        "env": str, "seed": int, "episodes": int, "horizon": int,
        "gamma": float, "n_policies": int, "policy_mean_min": float,
        "policy_mean_max": float, "policy_std": float, "behavior_means": str,
        "w": int, "k_steps": int, "schedule": str, "hidden": _parse_int_list,
        "embed_dim": int, "train_steps": int, "batch_size": int, "lr": float,
        "ema": float, "reward_train_steps": int, "dynamics_train_steps": int,
        "fqe_train_steps": int, "alpha": float, "lam": float,
        "normalize_guidance": _parse_bool, "n_rollouts": int,
        "clip_denoised": _parse_bool, "clip_range": float,
        "true_reward": _parse_bool, "estimators": _parse_str_list,
        "gt_rollouts": int, "sweep_alpha": _parse_float_list,
        "sweep_lambda": _parse_float_list, "sweep_w": _parse_int_list,
    }

    # file keys that differ from field names (lambda is a Python keyword)
    _KEY_TO_FIELD = {"lambda": "lam"}
    _FIELD_TO_KEY = {"lam": "lambda"}

    def validate(self) -> None:
        if self.env not in ("gaussian_world", "linear_toy"):
            raise ConfigError(f"unknown env {self.env!r}")
        if self.schedule not in ("linear", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.n_policies < 1:
            raise ConfigError("n_policies must be >= 1")
        if self.w < 1 or self.k_steps < 1:
            raise ConfigError("w and k_steps must be >= 1")
        if self.alpha < 0 or self.lam < 0:
            raise ConfigError("guidance weights must be nonnegative")
        if not self.estimators:
            raise ConfigError("estimators must be nonempty")
        for name in self.estimators:
            if name not in ("stitch", "pdis", "mb", "fqe", "dr"):
                raise ConfigError(f"unknown estimator {name!r}")
        if self.behavior_means != "middle":
            try:
                vals = _parse_float_list(self.behavior_means)
            except ValueError as exc:
                raise ConfigError(f"bad behavior_means: {exc}") from exc
            if not vals:
                raise ConfigError("behavior_means must be 'middle' or floats")

    def behavior_mean_values(self) -> tuple:
        """Resolved behavior-policy means (mixture components)."""
        if self.behavior_means == "middle":
            means = self.policy_means()
            return (means[len(means) // 2],)
        return _parse_float_list(self.behavior_means)

    def policy_means(self) -> tuple:
        import numpy as np
        return tuple(np.linspace(self.policy_mean_min, self.policy_mean_max,
                                 self.n_policies))

    def serialize(self) -> str:
        lines = [f"config_version = {CONFIG_VERSION}"]
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            key = self._FIELD_TO_KEY.get(f.name, f.name)
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls()
        seen_version = False
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key = key.strip()
            value = value.strip()
            if key == "config_version":
                if int(value) != CONFIG_VERSION:
                    raise ConfigError(f"unsupported config_version {value}")
                seen_version = True
                continue
            fname = cls._KEY_TO_FIELD.get(key, key)
            if fname not in cls._PARSERS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            parser = cls._PARSERS[fname]
            try:
                setattr(cfg, fname, parser(value))
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") \
                    from exc
        if not seen_version:
            raise ConfigError("missing config_version")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.serialize())
