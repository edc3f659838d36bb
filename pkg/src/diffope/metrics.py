"""Evaluation metrics: LogRMSE, Spearman rank correlation, Regret@1,
min-max return normalization, and Kolmogorov-Smirnov helpers used by the
verification suite.
"""

from __future__ import annotations

import numpy as np

LOG_RMSE_FLOOR = 1e-12


def normalize_values(values, v_min: float, v_max: float) -> np.ndarray:
    """Affine map sending v_min to 0 and v_max to 1."""
    if not v_max > v_min:
        raise ValueError("need v_max > v_min")
    return (np.asarray(values, dtype=np.float64) - v_min) / (v_max - v_min)


def log_rmse(estimates, truth) -> float:
    """Mean over seeds of log sqrt(mean squared error) against the truth.

    ``estimates`` is (n_seeds, n_policies) or a single row; an exactly zero
    RMSE is floored at 1e-12 before the log.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    truth = np.asarray(truth, dtype=np.float64)
    if est.shape[1] != truth.shape[0]:
        raise ValueError("estimates/truth shape mismatch")
    rmse = np.sqrt(((est - truth) ** 2).mean(axis=1))
    return float(np.log(np.maximum(rmse, LOG_RMSE_FLOOR)).mean())


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; ties receive the average of their positions."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(estimates_row, truth) -> tuple[float, bool]:
    """Rank correlation in [-1, 1]; returns ``(value, defined)``.

    An all-equal vector has no rank ordering; the correlation is reported as
    0.0 with ``defined = False``.
    """
    a = np.asarray(estimates_row, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need two same-length vectors of size >= 2")
    if np.all(a == a[0]) or np.all(b == b[0]):
        return 0.0, False
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    return float((ra * rb).sum() / denom), True


def regret_at_1(estimates_row, truth) -> float:
    """Return gap between the truly best policy and the one ranked first.

    Argmax ties in the estimates resolve to the lowest policy index.
    """
    est = np.asarray(estimates_row, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    if est.shape != tru.shape or est.size < 1:
        raise ValueError("need same-length nonempty vectors")
    picked = int(np.argmax(est))  # numpy argmax returns the first maximizer
    return float(abs(tru.max() - tru[picked]))


def seed_mean_stderr(per_seed_values) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt(n)) across seeds."""
    v = np.asarray(per_seed_values, dtype=np.float64)
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


# -- Kolmogorov-Smirnov helpers (verification suite) ---------------------------


def ks_statistic(samples, cdf) -> float:
    """One-sample KS distance between an empirical sample and a cdf callable."""
    xs = np.sort(np.asarray(samples, dtype=np.float64))
    n = xs.size
    c = np.asarray(cdf(xs), dtype=np.float64)
    hi = np.abs(np.arange(1, n + 1) / n - c).max()
    lo = np.abs(np.arange(0, n) / n - c).max()
    return float(max(hi, lo))


def ks_two_sample(a, b) -> float:
    """Two-sample KS distance."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    allv = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, allv, side="right") / a.size
    cdf_b = np.searchsorted(b, allv, side="right") / b.size
    return float(np.abs(cdf_a - cdf_b).max())
