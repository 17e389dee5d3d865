"""Statistics protocol: paired t-tests, BH-FDR, bootstrap CIs, Pearson r."""

from __future__ import annotations

import numpy as np
from scipy import stats as _st

from sgdm.errors import InvalidInput


def paired_t_test(x, y) -> tuple[float, float]:
    """Two-tailed paired t-test on ``x - y`` with ``n - 1`` degrees of freedom.

    When the differences have zero variance the statistic is ``+-inf`` with
    ``p = 0``, or ``t = 0, p = 1`` when every difference is zero.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInput(f"paired samples must be equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InvalidInput("need at least two pairs")
    d = x - y
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, 1.0
        return float(np.copysign(np.inf, mean)), 0.0
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * _st.t.sf(abs(t), df=n - 1)
    return float(t), float(min(p, 1.0))


def bh_fdr(p_values, q: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Benjamini-Hochberg step-up adjusted p-values and rejection flags."""
    p = np.asarray(p_values, dtype=float)
    if p.ndim != 1:
        raise InvalidInput("p_values must be a flat list")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise InvalidInput("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.copy(), np.zeros(0, dtype=bool)
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    scaled = np.minimum.accumulate(scaled[::-1])[::-1]
    adjusted = np.empty(m)
    adjusted[order] = np.minimum(scaled, 1.0)
    adjusted = np.maximum(adjusted, p)
    return adjusted, adjusted <= q


def bootstrap_ci(x, n_resamples: int = 1000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile interval of the resampled mean."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise InvalidInput("bootstrap needs at least one value")
    if n_resamples < 100:
        raise InvalidInput("n_resamples must be >= 100")
    if not 0 < level < 1:
        raise InvalidInput("level must be in (0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(n_resamples, x.size))
    means = x[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def pearson_r(x, y) -> tuple[float, float]:
    """Product-moment correlation with a two-tailed p-value via the t transform."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInput("x and y must be equal-length vectors")
    n = x.size
    if n < 3:
        raise InvalidInput("need at least three points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.dot(dx, dx)
    syy = np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise InvalidInput("zero variance input")
    r = float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * _st.t.sf(abs(t), df=n - 2))


def sem(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
