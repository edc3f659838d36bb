"""Metric aggregation across run directories, plus rendered figures.

``report`` consumes the per-seed evaluation CSVs written by ``evaluate``,
computes the metric suite on min-max normalized values, and writes both
delimited tables and matplotlib figures.  All outputs are byte-deterministic:
no timestamps, fixed float formatting, and stripped PNG metadata.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .estimator import EvalReport
from .metrics import log_rmse, normalize_values, regret_at_1, seed_mean_stderr, spearman

_SAVEFIG_KW = dict(dpi=110, metadata={"Software": None})


def load_run_reports(run_dirs) -> dict:
    """Collect eval CSVs: {estimator: [EvalReport per seed-run]}."""
    out: dict[str, list[EvalReport]] = {}
    for d in run_dirs:
        for name in sorted(os.listdir(d)):
            if not (name.startswith("eval_") and name.endswith(".csv")):
                continue
            with open(os.path.join(d, name), "r", encoding="utf-8") as fh:
                rep = EvalReport.from_csv(fh.read())
            out.setdefault(rep.estimator, []).append(rep)
    if not out:
        raise ValueError("no eval_*.csv found in the given run directories")
    return out


def metric_rows(reports_by_estimator: dict, env_name: str = "env"):
    """Per-estimator metric table rows: (env, estimator, metric, mean, stderr).

    Estimates and truths are min-max normalized by the ground-truth range
    before LogRMSE and regret; Spearman is rank-based and unaffected.  With a
    single policy the correlation/regret rows are skipped.
    """
    rows = []
    for est_name in sorted(reports_by_estimator):
        reports = reports_by_estimator[est_name]
        truth = reports[0].ground_truths()
        v_min, v_max = float(truth.min()), float(truth.max())
        degenerate = not (v_max > v_min) or truth.size < 2
        lr_seeds, rho_seeds, reg_seeds = [], [], []
        for rep in reports:
            est = rep.estimates()
            tru = rep.ground_truths()
            if degenerate:
                lr_seeds.append(log_rmse(est[None, :], tru))
                continue
            est_n = normalize_values(est, v_min, v_max)
            tru_n = normalize_values(tru, v_min, v_max)
            lr_seeds.append(log_rmse(est_n[None, :], tru_n))
            rho, _ = spearman(est, tru)
            rho_seeds.append(rho)
            reg_seeds.append(regret_at_1(est_n, tru_n))
        for metric, vals in (("logrmse", lr_seeds), ("spearman", rho_seeds),
                             ("regret_at_1", reg_seeds)):
            if not vals:
                continue
            mean, se = seed_mean_stderr(vals)
            rows.append((env_name, est_name, metric, mean, se))
    return rows


def write_metric_csv(path: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("env,estimator,metric,mean,stderr\n")
        for env_name, est, metric, mean, se in rows:
            fh.write(f"{env_name},{est},{metric},{mean!r},{se!r}\n")


def figure_metrics(path: str, rows) -> None:
    """Grouped bar chart: one panel per metric, bars per estimator."""
    metrics = sorted({r[2] for r in rows})
    estimators = sorted({r[1] for r in rows})
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.2))
    if len(metrics) == 1:
        axes = [axes]
    for ax, metric in zip(axes, metrics):
        vals, errs = [], []
        for est in estimators:
            hit = [r for r in rows if r[1] == est and r[2] == metric]
            vals.append(hit[0][3] if hit else np.nan)
            errs.append(hit[0][4] if hit else 0.0)
        ax.bar(range(len(estimators)), vals, yerr=errs, capsize=3,
               color="#4878a8")
        ax.set_xticks(range(len(estimators)))
        ax.set_xticklabels(estimators, rotation=30, ha="right")
        ax.set_title(metric)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)


def load_traces(run_dir: str):
    """Parse traces.csv -> {policy_id: [dict(t=..., s=(n,ds), a=...)]}."""
    path = os.path.join(run_dir, "traces.csv")
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        s_cols = [i for i, c in enumerate(header) if c.startswith("s_")]
        rows = [ln.strip().split(",") for ln in fh if ln.strip()]
    out: dict = {}
    for parts in rows:
        pid, rollout = parts[0], int(parts[1])
        svals = [float(parts[i]) for i in s_cols]
        out.setdefault(pid, {}).setdefault(rollout, []).append(svals)
    return {pid: [np.array(v) for _, v in sorted(rolls.items())]
            for pid, rolls in out.items()}


def figure_traces(path: str, traces: dict) -> None:
    """State traces of generated rollouts; 2-D states plot as planar paths."""
    fig, ax = plt.subplots(figsize=(5, 4))
    colors = plt.cm.viridis(np.linspace(0.15, 0.85, max(len(traces), 2)))
    for color, (pid, rolls) in zip(colors, sorted(traces.items())):
        for i, states in enumerate(rolls):
            if states.shape[1] >= 2:
                ax.plot(states[:, 0], states[:, 1], color=color, alpha=0.8,
                        label=pid if i == 0 else None)
            else:
                ax.plot(states[:, 0], color=color, alpha=0.8,
                        label=pid if i == 0 else None)
    if any(r[0].shape[1] >= 2 for r in traces.values()):
        ax.set_xlabel("x")
        ax.set_ylabel("y")
    else:
        ax.set_xlabel("t")
        ax.set_ylabel("state")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)


def load_ablation(run_dirs):
    """Stack ablation.csv rows across runs; returns list of per-run dicts."""
    runs = []
    for d in run_dirs:
        path = os.path.join(d, "ablation.csv")
        if not os.path.exists(path):
            continue
        rows = []
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            for ln in fh:
                parts = ln.strip().split(",")
                rows.append(dict(zip(header, parts)))
        runs.append(rows)
    return runs


def ablation_metric_rows(runs):
    """Per (w, alpha, lambda) metrics per seed-run, averaged with stderr."""
    from collections import defaultdict
    cells = defaultdict(lambda: defaultdict(list))
    for run_idx, rows in enumerate(runs):
        by_cfg = defaultdict(list)
        for r in rows:
            key = (float(r["w"]), float(r["alpha"]), float(r["lambda"]))
            by_cfg[key].append((r["policy_id"], float(r["estimate"]),
                                float(r["ground_truth"])))
        for key, entries in by_cfg.items():
            entries.sort(key=lambda e: e[0])
            est = np.array([e[1] for e in entries])
            tru = np.array([e[2] for e in entries])
            v_min, v_max = tru.min(), tru.max()
            if v_max > v_min and est.size >= 2:
                est_n = normalize_values(est, v_min, v_max)
                tru_n = normalize_values(tru, v_min, v_max)
                cells[key]["logrmse"].append(log_rmse(est_n[None, :], tru_n))
                cells[key]["spearman"].append(spearman(est, tru)[0])
                cells[key]["regret_at_1"].append(regret_at_1(est_n, tru_n))
    out = []
    for key in sorted(cells):
        for metric in ("logrmse", "spearman", "regret_at_1"):
            vals = cells[key][metric]
            if vals:
                mean, se = seed_mean_stderr(vals)
                out.append((*key, metric, mean, se))
    return out


def write_ablation_metrics_csv(path: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("w,alpha,lambda,metric,mean,stderr\n")
        for w, alpha, lam, metric, mean, se in rows:
            fh.write(f"{w!r},{alpha!r},{lam!r},{metric},{mean!r},{se!r}\n")


def figure_ablation(path_lambda: str, path_w: str, rows) -> None:
    """Sensitivity curves: metric vs lambda/alpha ratio, and vs window size."""
    lam_pts = {}
    w_pts = {}
    ws = sorted({r[0] for r in rows})
    lams = sorted({r[2] for r in rows})
    for w, alpha, lam, metric, mean, se in rows:
        if metric not in ("spearman", "logrmse"):
            continue
        if len(lams) > 1:
            lam_pts.setdefault((metric, w), []).append((lam / alpha if alpha else 0,
                                                        mean, se))
        if len(ws) > 1:
            w_pts.setdefault((metric, lam), []).append((w, mean, se))
    if lam_pts:
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for ax, metric in zip(axes, ("spearman", "logrmse")):
            for (m, w), pts in sorted(lam_pts.items()):
                if m != metric:
                    continue
                pts.sort()
                xs, ys, es = zip(*pts)
                ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3,
                            label=f"w={int(w)}")
            ax.set_xlabel("behavior/target guidance ratio")
            ax.set_ylabel(metric)
            ax.grid(alpha=0.3)
            ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path_lambda, **_SAVEFIG_KW)
        plt.close(fig)
    if w_pts:
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for ax, metric in zip(axes, ("spearman", "logrmse")):
            for (m, lam), pts in sorted(w_pts.items()):
                if m != metric:
                    continue
                pts.sort()
                xs, ys, es = zip(*pts)
                ax.errorbar(xs, ys, yerr=es, marker="s", capsize=3,
                            label=f"lambda={lam}")
            ax.set_xscale("log", base=2)
            ax.set_xlabel("window length")
            ax.set_ylabel(metric)
            ax.grid(alpha=0.3)
            ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path_w, **_SAVEFIG_KW)
        plt.close(fig)


def report(run_dirs, out_dir: str, env_name: str = "env") -> None:
    """Aggregate seed runs into metric tables, plot data, and figures."""
    os.makedirs(out_dir, exist_ok=True)
    reports = load_run_reports(run_dirs)
    rows = metric_rows(reports, env_name)
    write_metric_csv(os.path.join(out_dir, "metrics.csv"), rows)
    figure_metrics(os.path.join(out_dir, "fig_metrics.png"), rows)

    # consolidated plot data: per-seed estimates table
    with open(os.path.join(out_dir, "estimates.csv"), "w", encoding="utf-8") as fh:
        fh.write("estimator,run,policy_id,estimate,stderr,ground_truth\n")
        for est_name in sorted(reports):
            for run_idx, rep in enumerate(reports[est_name]):
                for row in rep.rows:
                    fh.write(f"{est_name},{run_idx},{row.policy_id},"
                             f"{row.estimate!r},{row.stderr!r},"
                             f"{row.ground_truth!r}\n")

    for d in run_dirs:
        traces = load_traces(d)
        if traces:
            with open(os.path.join(d, "traces.csv"), "r", encoding="utf-8") as src, \
                 open(os.path.join(out_dir, "plot_traces.csv"), "w",
                      encoding="utf-8") as dst:
                dst.write(src.read())
            figure_traces(os.path.join(out_dir, "fig_traces.png"), traces)
            break

    runs = load_ablation(run_dirs)
    if runs:
        ab_rows = ablation_metric_rows(runs)
        write_ablation_metrics_csv(os.path.join(out_dir, "ablation_metrics.csv"),
                                   ab_rows)
        figure_ablation(os.path.join(out_dir, "fig_ablation_guidance.png"),
                        os.path.join(out_dir, "fig_ablation_window.png"),
                        ab_rows)
