"""End-to-end experiment pipeline behind the CLI verbs.

Each verb reads a config, derives every random stream from the config seed,
and writes CSV / structured-text artifacts plus a manifest sufficient to
re-create the run bit for bit.
"""

from __future__ import annotations

import os

import numpy as np

from . import checkpoint as ckpt
from .baselines import (
    QModel,
    dr_estimate,
    fqe_estimate,
    make_v_from_q,
    mb_estimate,
    pdis_estimate,
    train_dynamics,
)
from .config import RunConfig
from .data import NormStats, load_dataset, save_dataset, slice_windows
from .diffusion import DenoiserModel, make_schedule, train_denoiser
from .envs import ground_truth_value, make_gaussian_world, make_linear_toy, rollout_batch
from .errors import ConfigError
from .estimator import (
    EvalReport,
    PolicyEval,
    StitchConfig,
    evaluate_policies,
    stitch_rollout_batch,
    train_reward,
)
from .estimator import score_handle
from .diffusion import GuidanceSpec
from .policies import GaussianPolicy, policy_family
from .rng import RngStream

# stream ids for the top-level seed tree (stable across releases)
S_DATA, S_TRAIN, S_EVAL, S_GT, S_VERIFY = 1, 2, 3, 4, 5


def build_env(cfg: RunConfig):
    if cfg.env == "gaussian_world":
        env = make_gaussian_world()
    elif cfg.env == "linear_toy":
        env = make_linear_toy()
    else:
        raise ConfigError(f"unknown env {cfg.env!r}")
    horizon = cfg.horizon if cfg.horizon > 0 else env.horizon
    gamma = cfg.gamma if cfg.gamma > 0 else env.gamma
    if horizon != env.horizon or gamma != env.gamma:
        from dataclasses import replace
        env = replace(env, horizon=horizon, gamma=gamma)
    return env


def build_policies(cfg: RunConfig, env):
    targets = policy_family(env.state_dim, cfg.policy_means(), cfg.policy_std)
    behaviors = policy_family(env.state_dim, cfg.behavior_mean_values(),
                              cfg.policy_std)
    return targets, behaviors


def _write_manifest(path: str, entries: list[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, val in entries:
            fh.write(f"{key} = {val}\n")


def _config_echo(cfg: RunConfig) -> list[tuple[str, str]]:
    out = []
    for line in cfg.serialize().strip().splitlines():
        key, _, val = line.partition("=")
        out.append(("config_echo_" + key.strip(), val.strip()))
    return out


def gen_data(cfg: RunConfig, out_dir: str) -> str:
    """Roll behavior episodes and write the dataset directory."""
    os.makedirs(out_dir, exist_ok=True)
    env = build_env(cfg)
    behaviors = policy_family(env.state_dim, cfg.behavior_mean_values(),
                              cfg.policy_std)
    rng = RngStream(cfg.seed, S_DATA)
    trajs = []
    counts = []
    n_parts = len(behaviors)
    for i, pol in enumerate(behaviors):
        count = cfg.episodes // n_parts + (1 if i < cfg.episodes % n_parts else 0)
        counts.append(count)
        if count == 0:
            continue
        rolls = rollout_batch(env, pol, rng.child(i), count, env.horizon)
        trajs.extend(rolls.to_trajectories())
    data_dir = os.path.join(out_dir, "dataset")
    meta = {
        "env": cfg.env,
        "seed": str(cfg.seed),
        "horizon": str(env.horizon),
        "gamma": repr(env.gamma),
        "behavior_means": ",".join(repr(m) for m in cfg.behavior_mean_values()),
        "behavior_counts": ",".join(str(c) for c in counts),
    }
    save_dataset(data_dir, trajs, meta)
    manifest = [("verb", "gen-data"), ("seed", str(cfg.seed)),
                ("episodes", str(len(trajs)))]
    manifest += [(f"behavior_component_{i}_mean", repr(m))
                 for i, m in enumerate(cfg.behavior_mean_values())]
    manifest += [(f"behavior_component_{i}_episodes", str(c))
                 for i, c in enumerate(counts)]
    manifest += _config_echo(cfg)
    _write_manifest(os.path.join(out_dir, "manifest"), manifest)
    cfg.save(os.path.join(out_dir, "config.echo"))
    return data_dir


def _w_values(cfg: RunConfig) -> list[int]:
    ws = [cfg.w] + [w for w in cfg.sweep_w if w != cfg.w]
    return ws


def train(cfg: RunConfig, data_dir: str, out_dir: str) -> None:
    """Train the denoiser(s), reward model, and any baseline models."""
    os.makedirs(out_dir, exist_ok=True)
    env = build_env(cfg)
    trajs, _ = load_dataset(data_dir)
    norm = NormStats.fit(trajs)
    rng = RngStream(cfg.seed, S_TRAIN)
    schedule = make_schedule(cfg.schedule, cfg.k_steps)
    hashes: list[tuple[str, str]] = []

    for wi, w in enumerate(_w_values(cfg)):
        if env.horizon % w != 0:
            raise ConfigError(f"w={w} does not divide horizon {env.horizon}")
        batch = slice_windows(trajs, w=w, stride=1, pad_short=True)
        model = DenoiserModel.create(w, env.state_dim, env.action_dim, schedule,
                                     norm, rng.child(10 + wi, 0),
                                     hidden=cfg.hidden, embed_dim=cfg.embed_dim)
        losses = train_denoiser(batch, model, rng.child(10 + wi, 1),
                                steps=cfg.train_steps,
                                batch_size=cfg.batch_size, lr=cfg.lr,
                                ema_rate=cfg.ema)
        path = os.path.join(out_dir, f"denoiser_w{w}.ckpt")
        ckpt.save_denoiser(path, model, cfg.schedule)
        hashes.append((f"denoiser_w{w}.ckpt", ckpt.file_sha256(path)))
        _write_curve(os.path.join(out_dir, f"loss_denoiser_w{w}.csv"), losses)

    reward, r_losses = train_reward(trajs, rng.child(20),
                                    steps=cfg.reward_train_steps, norm=norm)
    rpath = os.path.join(out_dir, "reward.ckpt")
    ckpt.save_reward(rpath, reward)
    hashes.append(("reward.ckpt", ckpt.file_sha256(rpath)))
    _write_curve(os.path.join(out_dir, "loss_reward.csv"), r_losses)

    if "mb" in cfg.estimators:
        dyn = train_dynamics(trajs, rng.child(30), steps=cfg.dynamics_train_steps,
                             norm=norm)
        _save_dynamics(os.path.join(out_dir, "dynamics.ckpt"), dyn)
        hashes.append(("dynamics.ckpt",
                       ckpt.file_sha256(os.path.join(out_dir, "dynamics.ckpt"))))

    manifest = [("verb", "train"), ("seed", str(cfg.seed)),
                ("k_steps", str(cfg.k_steps)), ("schedule", cfg.schedule)]
    manifest += hashes
    manifest += _config_echo(cfg)
    _write_manifest(os.path.join(out_dir, "manifest"), manifest)
    cfg.save(os.path.join(out_dir, "config.echo"))


def _write_curve(path: str, losses: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")


def _save_dynamics(path: str, dyn) -> None:
    from .checkpoint import _net_header, _norm_header, _fmt_vec, _write
    header = {
        "kind": "dynamics",
        "delta_mean": _fmt_vec(dyn.delta_mean),
        "delta_std": _fmt_vec(dyn.delta_std),
        "noise_std": _fmt_vec(dyn.noise_std),
        "has_term": str(int(dyn.term_net is not None)),
    }
    header.update(_norm_header(dyn.norm))
    header.update(_net_header("net", dyn.net))
    arrays = [dyn.net.get_flat()]
    if dyn.term_net is not None:
        header.update(_net_header("term_net", dyn.term_net))
        arrays.append(dyn.term_net.get_flat())
    _write(path, header, arrays)


def _load_dynamics(path: str):
    from .baselines import DynamicsModel
    from .checkpoint import _net_from_header, _norm_from_header, _parse_vec, _read
    header, flat = _read(path)
    if header["kind"] != "dynamics":
        raise ValueError("expected dynamics checkpoint")
    net, off = _net_from_header(header, "net", flat, 0)
    term_net = None
    if int(header["has_term"]):
        term_net, _ = _net_from_header(header, "term_net", flat, off)
    return DynamicsModel(net, _norm_from_header(header),
                         _parse_vec(header["delta_mean"]),
                         _parse_vec(header["delta_std"]),
                         _parse_vec(header["noise_std"]), term_net)


def _ground_truths(cfg: RunConfig, env, targets, rng: RngStream):
    out = []
    for i, pol in enumerate(targets):
        val, se = ground_truth_value(env, pol, cfg.gt_rollouts, rng.child(i))
        out.append((val, se))
    return out


def evaluate(cfg: RunConfig, ckpt_dir: str, data_dir: str, out_dir: str,
             workers: int = 1) -> None:
    """Run every requested estimator; write one EvalReport CSV per estimator."""
    os.makedirs(out_dir, exist_ok=True)
    env = build_env(cfg)
    targets, behaviors = build_policies(cfg, env)
    if len(behaviors) != 1:
        raise ConfigError("evaluation needs a single behavior policy "
                          "(mixture datasets still evaluate against one)")
    behavior = behaviors[0]
    trajs, _ = load_dataset(data_dir)
    rng = RngStream(cfg.seed, S_EVAL)
    gts = _ground_truths(cfg, env, targets, RngStream(cfg.seed, S_GT))
    gt_vals = [g[0] for g in gts]
    policy_ids = [f"pi_{i}" for i in range(len(targets))]
    hashes: list[tuple[str, str]] = []
    reward = ckpt.load_reward(os.path.join(ckpt_dir, "reward.ckpt"))
    hashes.append(("reward.ckpt",
                   ckpt.file_sha256(os.path.join(ckpt_dir, "reward.ckpt"))))

    aborted_total = 0
    for name in cfg.estimators:
        if name == "stitch":
            report, trace_rows = _evaluate_stitch(
                cfg, env, targets, behavior, reward, ckpt_dir, rng.child(0),
                gt_vals, policy_ids, workers)
            aborted_total += report.aborted
            path = os.path.join(ckpt_dir, f"denoiser_w{cfg.w}.ckpt")
            hashes.append((f"denoiser_w{cfg.w}.ckpt", ckpt.file_sha256(path)))
            _write_traces(os.path.join(out_dir, "traces.csv"), trace_rows,
                          env.state_dim, env.action_dim)
        elif name == "pdis":
            report = _evaluate_pdis(cfg, env, targets, behavior, trajs,
                                    gt_vals, policy_ids)
        elif name == "mb":
            dyn = _load_dynamics(os.path.join(ckpt_dir, "dynamics.ckpt"))
            report = _evaluate_mb(cfg, env, targets, dyn, reward, rng.child(2),
                                  gt_vals, policy_ids)
        elif name == "fqe":
            report = _evaluate_fqe(cfg, env, targets, trajs, rng.child(3),
                                   gt_vals, policy_ids)
        elif name == "dr":
            report = _evaluate_dr(cfg, env, targets, behavior, trajs,
                                  rng.child(4), gt_vals, policy_ids)
        else:
            raise ConfigError(f"unknown estimator {name!r}")
        report.config_echo = {"seed": str(cfg.seed)}
        with open(os.path.join(out_dir, f"eval_{name}.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write(report.to_csv())

    if cfg.sweep_alpha or cfg.sweep_lambda or cfg.sweep_w:
        _evaluate_sweeps(cfg, env, targets, behavior, reward, ckpt_dir,
                         rng.child(5), gt_vals, policy_ids, out_dir, workers)

    manifest = [("verb", "evaluate"), ("seed", str(cfg.seed)),
                ("k_steps", str(cfg.k_steps)),
                ("guidance_convention", "scores at current iterate"),
                ("aborted_rollouts", str(aborted_total))]
    manifest += [(f"ground_truth_pi_{i}", f"{v!r} +- {se!r}")
                 for i, (v, se) in enumerate(gts)]
    manifest += hashes
    manifest += _config_echo(cfg)
    _write_manifest(os.path.join(out_dir, "manifest"), manifest)
    cfg.save(os.path.join(out_dir, "config.echo"))


def _stitch_config(cfg: RunConfig, env, **overrides) -> StitchConfig:
    base = dict(w=cfg.w, horizon=env.horizon, gamma=env.gamma,
                n_rollouts=cfg.n_rollouts, alpha=cfg.alpha, lam=cfg.lam,
                normalize=cfg.normalize_guidance,
                clip_denoised=cfg.clip_denoised, clip_range=cfg.clip_range,
                use_true_reward=cfg.true_reward)
    base.update(overrides)
    return StitchConfig(**base)


def _evaluate_stitch(cfg, env, targets, behavior, reward, ckpt_dir, rng,
                     gt_vals, policy_ids, workers):
    model = ckpt.load_denoiser(os.path.join(ckpt_dir, f"denoiser_w{cfg.w}.ckpt"))
    scfg = _stitch_config(cfg, env)
    report = evaluate_policies(model, reward, scfg, targets, behavior,
                               env.init_sampler, rng.child(0),
                               ground_truths=gt_vals, policy_ids=policy_ids,
                               true_reward_fn=env.reward_fn, workers=workers)
    # trajectory traces for figures: first rollouts of the extreme policies
    trace_rows = []
    for pi in (0, len(targets) - 1):
        spec = GuidanceSpec(scfg.alpha, scfg.lam, scfg.normalize,
                            target_score=score_handle(targets[pi]),
                            behavior_score=score_handle(behavior))
        res = stitch_rollout_batch(model, reward.predict, scfg,
                                   env.init_sampler, spec,
                                   rng.child(0).child(pi), n=3)
        trace_rows.append((policy_ids[pi], res))
    return report, trace_rows


def _write_traces(path, trace_rows, state_dim, action_dim):
    cols = ["policy_id", "rollout", "t"] + [f"s_{i}" for i in range(state_dim)] \
        + [f"a_{i}" for i in range(action_dim)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for pid, res in trace_rows:
            n, t_max = res.actions.shape[:2]
            for i in range(n):
                for t in range(t_max + 1):
                    svals = [repr(float(v)) for v in res.states[i, t]]
                    if t < t_max:
                        avals = [repr(float(v)) for v in res.actions[i, t]]
                    else:
                        avals = ["0.0"] * action_dim
                    fh.write(",".join([pid, str(i), str(t)] + svals + avals) + "\n")


def _evaluate_pdis(cfg, env, targets, behavior, trajs, gt_vals, policy_ids):
    report = EvalReport(estimator="pdis")
    lp_b = lambda s, a: behavior.log_prob(s, a)
    for i, pol in enumerate(targets):
        lp_t = lambda s, a, pol=pol: pol.log_prob(s, a)
        est, se, _ = pdis_estimate(trajs, lp_t, lp_b, env.gamma)
        report.rows.append(PolicyEval(policy_ids[i], est, se, gt_vals[i],
                                      len(trajs)))
    return report


def _evaluate_mb(cfg, env, targets, dyn, reward, rng, gt_vals, policy_ids):
    report = EvalReport(estimator="mb")
    reward_fn = env.reward_fn if cfg.true_reward else reward.predict
    for i, pol in enumerate(targets):
        est, se, _ = mb_estimate(dyn, pol, reward_fn, env.init_sampler,
                                 env.horizon, env.gamma, cfg.n_rollouts,
                                 rng.child(i))
        report.rows.append(PolicyEval(policy_ids[i], est, se, gt_vals[i],
                                      cfg.n_rollouts))
    return report


def _transitions_from_trajs(trajs):
    s = np.concatenate([t.states[:-1] for t in trajs])
    a = np.concatenate([t.actions for t in trajs])
    r = np.concatenate([t.rewards for t in trajs])
    sn = np.concatenate([t.states[1:] for t in trajs])
    d = np.concatenate([t.dones for t in trajs])
    return s, a, r, sn, d


def _fqe_for_policy(cfg, env, pol, trajs, rng):
    transitions = _transitions_from_trajs(trajs)

    def next_action(s_next, r):
        return pol.sample(s_next, r)

    def initial_pairs(n, r):
        s0 = env.init_sampler(n, r.child(0))
        return s0, pol.sample(s0, r.child(1))

    qm = QModel.create(env.state_dim + env.action_dim, rng.child(0))
    est, qm, _ = fqe_estimate(transitions, next_action, initial_pairs, qm,
                              env.gamma, rng.child(1),
                              steps=cfg.fqe_train_steps, batch_size=256,
                              lr=1e-3, n_initial=1024)
    return est, qm


def _evaluate_fqe(cfg, env, targets, trajs, rng, gt_vals, policy_ids):
    report = EvalReport(estimator="fqe")
    for i, pol in enumerate(targets):
        est, _ = _fqe_for_policy(cfg, env, pol, trajs, rng.child(i))
        report.rows.append(PolicyEval(policy_ids[i], est, 0.0, gt_vals[i],
                                      len(trajs)))
    return report


def _evaluate_dr(cfg, env, targets, behavior, trajs, rng, gt_vals, policy_ids):
    report = EvalReport(estimator="dr")
    lp_b = lambda s, a: behavior.log_prob(s, a)
    for i, pol in enumerate(targets):
        _, qm = _fqe_for_policy(cfg, env, pol, trajs, rng.child(i, 0))
        q_fn = lambda s, a, qm=qm: qm.q_target(s, a)
        v_fn = make_v_from_q(q_fn, pol, rng.child(i, 1), n_samples=8)
        lp_t = lambda s, a, pol=pol: pol.log_prob(s, a)
        est, se = dr_estimate(trajs, lp_t, lp_b, env.gamma, q_fn, v_fn)
        report.rows.append(PolicyEval(policy_ids[i], est, se, gt_vals[i],
                                      len(trajs)))
    return report


def _evaluate_sweeps(cfg, env, targets, behavior, reward, ckpt_dir, rng,
                     gt_vals, policy_ids, out_dir, workers):
    """Grid evaluations over guidance weights and window size."""
    rows = []
    alphas = list(cfg.sweep_alpha) or [cfg.alpha]
    lambdas = list(cfg.sweep_lambda) or [cfg.lam]
    ws = list(cfg.sweep_w) or [cfg.w]
    run = 0
    for w in ws:
        model = ckpt.load_denoiser(os.path.join(ckpt_dir, f"denoiser_w{w}.ckpt"))
        for alpha in alphas:
            for lam in lambdas:
                scfg = _stitch_config(cfg, env, w=w, alpha=alpha, lam=lam)
                report = evaluate_policies(
                    model, reward, scfg, targets, behavior, env.init_sampler,
                    rng.child(run), ground_truths=gt_vals,
                    policy_ids=policy_ids, true_reward_fn=env.reward_fn,
                    workers=workers)
                for row in report.rows:
                    rows.append((w, alpha, lam, row.policy_id, row.estimate,
                                 row.stderr, row.ground_truth, row.n_rollouts))
                run += 1
    with open(os.path.join(out_dir, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write("w,alpha,lambda,policy_id,estimate,stderr,ground_truth,"
                 "n_rollouts\n")
        for r in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in r) + "\n")
