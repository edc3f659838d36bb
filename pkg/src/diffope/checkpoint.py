"""Model checkpoint files: text header + little-endian 32-bit parameter block.

One file per model.  The header is flat ``key = value`` text (vectors as
comma-separated 32-bit round-trip decimals) terminated by a blank line; the
remainder of the file is the concatenated float32 parameters of the nets in a
fixed order.  Loading reproduces forward passes to 32-bit precision.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

from .data import NormStats, WindowCodec
from .diffusion import DenoiserModel, NoiseSchedule, make_schedule
from .estimator import RewardModel
from .nn import Mlp
from .policies import GaussianPolicy

FILE_VERSION = 1


def _fmt_vec(v) -> str:
    return ",".join(repr(float(np.float32(x))) for x in np.atleast_1d(v))


def _parse_vec(s: str) -> np.ndarray:
    return np.array([np.float64(np.float32(float(x))) for x in s.split(",")])


def _write(path: str, header: dict, arrays: list[np.ndarray]) -> None:
    blob = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
    lines = [f"checkpoint_version = {FILE_VERSION}"]
    for key, val in header.items():
        lines.append(f"{key} = {val}")
    lines.append(f"params_bytes = {len(blob)}")
    text = "\n".join(lines) + "\n\n"
    with open(path, "wb") as fh:
        fh.write(text.encode("utf-8"))
        fh.write(blob)


def _read(path: str):
    with open(path, "rb") as fh:
        raw = fh.read()
    head, _, blob = raw.partition(b"\n\n")
    header: dict[str, str] = {}
    for line in head.decode("utf-8").splitlines():
        key, _, val = line.partition(" = ")
        header[key] = val
    if int(header["checkpoint_version"]) != FILE_VERSION:
        raise ValueError("unsupported checkpoint version")
    n = int(header["params_bytes"])
    if len(blob) != n:
        raise ValueError(f"parameter block truncated: {len(blob)} != {n}")
    flat = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    return header, flat


def _net_header(prefix: str, net: Mlp) -> dict:
    return {
        f"{prefix}_dims": ",".join(str(d) for d in net.layer_dims),
        f"{prefix}_activation": net.activation,
    }


def _net_from_header(header: dict, prefix: str, flat: np.ndarray, offset: int):
    dims = [int(d) for d in header[f"{prefix}_dims"].split(",")]
    net = Mlp.zeros(dims, header[f"{prefix}_activation"])
    n = net.n_params()
    net.set_flat(flat[offset : offset + n])
    return net, offset + n


def _norm_header(norm: NormStats) -> dict:
    return {
        "state_mean": _fmt_vec(norm.state_mean),
        "state_std": _fmt_vec(norm.state_std),
        "action_mean": _fmt_vec(norm.action_mean),
        "action_std": _fmt_vec(norm.action_std),
    }


def _norm_from_header(header: dict) -> NormStats:
    return NormStats(_parse_vec(header["state_mean"]),
                     _parse_vec(header["state_std"]),
                     _parse_vec(header["action_mean"]),
                     _parse_vec(header["action_std"]))


def save_denoiser(path: str, model: DenoiserModel,
                  schedule_kind: str = "cosine") -> None:
    if model.codec is None:
        raise ValueError("refusing to save an untrained denoiser (no codec)")
    header = {
        "kind": "denoiser",
        "w": str(model.w),
        "state_dim": str(model.state_dim),
        "action_dim": str(model.action_dim),
        "n_steps": str(model.schedule.n_steps),
        "schedule_kind": schedule_kind,
        "embed_dim": str(model.embed_dim),
        "embed_period": repr(float(model.embed_period)),
        "codec_drift": _fmt_vec(model.codec.drift.ravel()),
        "codec_delta_std": _fmt_vec(model.codec.delta_std.ravel()),
        "codec_action_mean": _fmt_vec(model.codec.action_mean),
        "codec_action_std": _fmt_vec(model.codec.action_std),
    }
    header.update(_norm_header(model.norm))
    header.update(_net_header("net", model.net))
    _write(path, header, [model.net.get_flat()])


def load_denoiser(path: str) -> DenoiserModel:
    header, flat = _read(path)
    if header["kind"] != "denoiser":
        raise ValueError(f"expected denoiser checkpoint, got {header['kind']!r}")
    net, _ = _net_from_header(header, "net", flat, 0)
    schedule = make_schedule(header["schedule_kind"], int(header["n_steps"]))
    w = int(header["w"])
    ds = int(header["state_dim"])
    da = int(header["action_dim"])
    codec = WindowCodec(
        w, ds, da,
        _parse_vec(header["codec_drift"]).reshape(w + 1, ds),
        _parse_vec(header["codec_delta_std"]).reshape(w + 1, ds),
        _parse_vec(header["codec_action_mean"]),
        _parse_vec(header["codec_action_std"]),
    )
    return DenoiserModel(net, schedule, w, ds, da, _norm_from_header(header),
                         int(header["embed_dim"]), float(header["embed_period"]),
                         codec)


def save_reward(path: str, model: RewardModel) -> None:
    header = {
        "kind": "reward",
        "r_mean": repr(float(np.float32(model.r_mean))),
        "r_std": repr(float(np.float32(model.r_std))),
    }
    header.update(_norm_header(model.norm))
    header.update(_net_header("net", model.net))
    _write(path, header, [model.net.get_flat()])


def load_reward(path: str) -> RewardModel:
    header, flat = _read(path)
    if header["kind"] != "reward":
        raise ValueError(f"expected reward checkpoint, got {header['kind']!r}")
    net, _ = _net_from_header(header, "net", flat, 0)
    return RewardModel(net, _norm_from_header(header),
                       float(header["r_mean"]), float(header["r_std"]))


def save_policy(path: str, policy: GaussianPolicy) -> None:
    header = {
        "kind": "gaussian_policy",
        "log_std": _fmt_vec(policy.log_std),
        "squash": str(int(policy.squash)),
    }
    if policy.squash:
        header["low"] = _fmt_vec(policy.low)
        header["high"] = _fmt_vec(policy.high)
    header.update(_net_header("mean_net", policy.mean_net))
    _write(path, header, [policy.mean_net.get_flat()])


def load_policy(path: str) -> GaussianPolicy:
    header, flat = _read(path)
    if header["kind"] != "gaussian_policy":
        raise ValueError(f"expected policy checkpoint, got {header['kind']!r}")
    net, _ = _net_from_header(header, "mean_net", flat, 0)
    squash = bool(int(header["squash"]))
    kwargs = {}
    if squash:
        kwargs = {"low": _parse_vec(header["low"]),
                  "high": _parse_vec(header["high"])}
    return GaussianPolicy(net, _parse_vec(header["log_std"]), squash=squash,
                          **kwargs)


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()
