"""Closed-form predictor of correlation-boundary risk.

For a balanced design with N clusters of size s, true correlation rho and
error-to-random-effect variance ratio r = sigma2_e / sigma2_r, the functions
here score how prone restricted-likelihood maximisation is to landing on the
boundary rho_hat = -1 (or +1): *smaller values mean higher risk*.  The score
comes from the expected slope of the profiled restricted likelihood at the
boundary; it is positive for all valid inputs, decreasing in r, increasing in
N and s, and tends to zero as rho approaches the boundary being scored or as
r grows without bound.

Two algebraic variants circulate.  The default uses
(1 + r/s)(1 + r/q) - 1 as the leading denominator, which is the form the
reference tables reproduced by this package's tests are consistent with;
``as_printed=True`` keeps the variant without the trailing "- 1" for
comparison.  All evaluators accept scalars or numpy arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .reml_core import profiled_log_rl

__all__ = [
    "PredictorInputs",
    "predictor_minus_one",
    "predictor_plus_one",
    "log10_predictor_minus_one",
    "log10_predictor_plus_one",
    "predictor_sweep",
    "write_sweep_csv",
    "profiled_rho_slope",
    "DEFAULT_SWEEP_GRIDS",
]


def _validate_arrays(n, s, rho, r):
    n = np.asarray(n)
    s = np.asarray(s)
    rho = np.asarray(rho, dtype=float)
    r = np.asarray(r, dtype=float)
    if not np.all(n >= 2):
        raise ValueError("n_clusters must be >= 2")
    if not (np.all(s >= 3) and np.all(s % 2 == 1)):
        raise ValueError("cluster size must be odd and >= 3")
    if not (np.all(rho > -1.0) and np.all(rho < 1.0)):
        raise ValueError("rho must lie strictly inside (-1, 1)")
    if not (np.all(r > 0) and np.all(np.isfinite(r))):
        raise ValueError("variance ratio r must be positive and finite")
    return n, s, rho, r


def _grid_q(s):
    m = (np.asarray(s) - 1) // 2
    return (2 * m * m + 3 * m + 1) / (3.0 * m)


def _core(n, s, rho_eff, r, as_printed):
    """Shared evaluation; rho_eff is already mirrored for the +1 variant."""
    q = _grid_q(s)
    # (1 + r/s)(1 + r/q) - 1 computed directly, avoiding cancellation
    gm1 = r / s + r / q + (r * r) / (s * q)
    c1 = (n - 1) / (n * (s - 2.0))
    ratio = (n * s - 2.0) / (n * s - n - 1.0)
    numer = 1.0 - c1 * rho_eff
    denom = 1.0 + 2.0 * c1 * (1.0 + (1.0 + rho_eff) / gm1)
    bracket = 1.0 - ratio * numer / denom
    lead_den = gm1 + 1.0 if as_printed else gm1
    return (n * s - n - 1.0) / lead_den * bracket


def predictor_minus_one(n_clusters, cluster_size, rho, r, as_printed=False):
    """Boundary-risk score for rho_hat = -1.  Small values mean high risk."""
    n, s, rho, r = _validate_arrays(n_clusters, cluster_size, rho, r)
    out = _core(n, s, rho, r, as_printed)
    return float(out) if np.ndim(out) == 0 else out


def predictor_plus_one(n_clusters, cluster_size, rho, r, as_printed=False):
    """Boundary-risk score for rho_hat = +1: the -1 score at mirrored rho."""
    n, s, rho, r = _validate_arrays(n_clusters, cluster_size, rho, r)
    out = _core(n, s, -rho, r, as_printed)
    return float(out) if np.ndim(out) == 0 else out


def _log10_core(n, s, rho_eff, r, as_printed):
    # overflow/underflow in the direct form is repaired by the fallback below
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        direct = _core(n, s, rho_eff, r, as_printed)
        out = np.log10(direct)
    bad = ~np.isfinite(out)
    if np.any(bad):
        # extreme r: leading denominator ~ r^2/(s q); bracket at its r -> inf limit
        n_b, s_b, rho_b, r_b = (np.broadcast_to(a, out.shape)[bad] for a in (n, s, rho_eff, r))
        q_b = _grid_q(s_b)
        c1 = (n_b - 1) / (n_b * (s_b - 2.0))
        ratio = (n_b * s_b - 2.0) / (n_b * s_b - n_b - 1.0)
        bracket = 1.0 - ratio * (1.0 - c1 * rho_b) / (1.0 + 2.0 * c1)
        log_lead = 2.0 * np.log10(r_b) - np.log10(s_b * q_b)
        out = np.asarray(out)
        out[bad] = np.log10(n_b * s_b - n_b - 1.0) - log_lead + np.log10(bracket)
    return out


def log10_predictor_minus_one(n_clusters, cluster_size, rho, r, as_printed=False):
    """log10 of the -1 score, stable for r far beyond float overflow."""
    n, s, rho, r = _validate_arrays(n_clusters, cluster_size, rho, r)
    out = _log10_core(n, s, rho, r, as_printed)
    return float(out) if np.ndim(out) == 0 else out


def log10_predictor_plus_one(n_clusters, cluster_size, rho, r, as_printed=False):
    """log10 of the +1 score."""
    n, s, rho, r = _validate_arrays(n_clusters, cluster_size, rho, r)
    out = _log10_core(n, s, -rho, r, as_printed)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PredictorInputs:
    """Validated scalar inputs for the boundary-risk score."""

    n_clusters: int
    cluster_size: int
    rho: float
    r: float

    def __post_init__(self):
        _validate_arrays(self.n_clusters, self.cluster_size, self.rho, self.r)

    def minus_one(self, as_printed=False):
        return predictor_minus_one(self.n_clusters, self.cluster_size, self.rho, self.r, as_printed)

    def plus_one(self, as_printed=False):
        return predictor_plus_one(self.n_clusters, self.cluster_size, self.rho, self.r, as_printed)


# ---------------------------------------------------------------------------
# Boundary-slope diagnostic
# ---------------------------------------------------------------------------


def profiled_rho_slope(ss, r, boundary=-1.0, step=1e-6):
    """Inward one-sided slope of the profiled log restricted likelihood.

    Numerically differentiates ``profiled_log_rl`` in rho at rho = -1 or +1
    for observed data.  A negative slope at -1 (positive at +1, looking
    inward) certifies the boundary as a local maximiser along rho; the
    closed-form score above approximates the expectation of this quantity,
    and this diagnostic is the ground truth to arbitrate against.
    """
    if boundary not in (-1.0, 1.0):
        raise ValueError("boundary must be -1.0 or +1.0")
    if boundary == -1.0:
        return (profiled_log_rl(ss, r, -1.0 + step) - profiled_log_rl(ss, r, -1.0)) / step
    return (profiled_log_rl(ss, r, 1.0) - profiled_log_rl(ss, r, 1.0 - step)) / step


# ---------------------------------------------------------------------------
# Random sweep over design grids
# ---------------------------------------------------------------------------

DEFAULT_SWEEP_GRIDS = {
    "n_clusters": tuple(range(50, 1051, 100)),
    "cluster_size": tuple(range(5, 106, 10)),
    "rho": tuple(-(9 - k) / 10 for k in range(9)),  # -0.9 .. -0.1
    "log10_r": tuple((2 * k - 10) / 5 for k in range(11)),  # -2 .. 2 step 0.4
}


def predictor_sweep(seed, n_draws=1000, grids=None):
    """Score both boundaries at uniformly drawn grid settings.

    Each draw picks one level per factor, independently and uniformly, using
    a counter-based generator keyed by ``seed``.  Returns a column table:
    draw, n_clusters, cluster_size, rho, log10_r, log10_pred_m1,
    log10_pred_p1.
    """
    g = dict(DEFAULT_SWEEP_GRIDS)
    if grids:
        g.update(grids)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    n_lv = np.array(g["n_clusters"])
    s_lv = np.array(g["cluster_size"])
    rho_lv = np.array(g["rho"])
    lr_lv = np.array(g["log10_r"])
    n = n_lv[rng.integers(0, len(n_lv), n_draws)]
    s = s_lv[rng.integers(0, len(s_lv), n_draws)]
    rho = rho_lv[rng.integers(0, len(rho_lv), n_draws)]
    log10_r = lr_lv[rng.integers(0, len(lr_lv), n_draws)]
    r = 10.0 ** log10_r
    return {
        "draw": np.arange(1, n_draws + 1),
        "n_clusters": n,
        "cluster_size": s,
        "rho": rho,
        "log10_r": log10_r,
        "log10_pred_m1": log10_predictor_minus_one(n, s, rho, r),
        "log10_pred_p1": log10_predictor_plus_one(n, s, rho, r),
    }


def write_sweep_csv(table, path):
    """Write a sweep table at full float precision."""
    cols = list(table.keys())
    n = len(table[cols[0]])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i in range(n):
            row = []
            for c in cols:
                v = table[c][i]
                row.append(int(v) if c in ("draw", "n_clusters", "cluster_size") else repr(float(v)))
            writer.writerow(row)
