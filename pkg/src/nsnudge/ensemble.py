"""Ensemble estimates of E||U - u||^2 and related diagnostics."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .assimilation import DIVERGED_CAP, FILTERED, AssimilationConfig, ErrorSeries, TruthCache, assimilate

DEFAULT_BANDS = (0.88, 0.70, 0.40)


class EnsembleError(RuntimeError):
    pass


def percentile_bands(samples, p: float) -> tuple[float, float]:
    """Interval I_p = [a, b] holding the central fraction p of the samples.

    Quantile levels (1 - p)/2 and (1 + p)/2 with linear interpolation between
    order statistics.
    """
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise ValueError("percentile band of an empty sample")
    if not 0 <= p < 1:
        raise ValueError(f"band level must lie in [0, 1), got {p}")
    a, b = np.quantile(s, [(1 - p) / 2, (1 + p) / 2], axis=0)
    return a, b


@dataclass
class EnsembleStats:
    times: np.ndarray
    mean_sq_error: np.ndarray
    bands: dict = field(default_factory=dict)
    member_count: int = 0
    diverged_count: int = 0
    members: np.ndarray | None = field(default=None, repr=False)

    @property
    def median(self) -> np.ndarray:
        return np.median(self.members, axis=0)

    def to_csv(self, path, header_comment: str | None = None) -> None:
        cols = ["t", "mean_sq_error"]
        data = [self.times, self.mean_sq_error]
        for p, (a, b) in sorted(self.bands.items(), reverse=True):
            tag = f"{round(100 * p):d}"
            cols += [f"a_{tag}", f"b_{tag}"]
            data += [a, b]
        rows = np.column_stack(data)
        with open(path, "w") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            fh.write(",".join(cols) + "\n")
            for r in rows:
                fh.write(",".join(repr(float(x)) for x in r) + "\n")

    @classmethod
    def from_csv(cls, path) -> EnsembleStats:
        with open(path) as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        cols = lines[0].strip().split(",")
        data = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
        bands = {}
        for i, c in enumerate(cols):
            if c.startswith("a_"):
                bands[int(c[2:]) / 100] = (data[:, i], data[:, cols.index("b_" + c[2:])])
        return cls(data[:, 0], data[:, 1], bands)


def reduce_members(series: list[ErrorSeries], ps=DEFAULT_BANDS, norm: str = "h1") -> EnsembleStats:
    """Combine member error series (sorted by member index) into ensemble statistics."""
    if not series:
        raise EnsembleError("no ensemble members")
    series = sorted(series, key=lambda s: s.member)
    diverged = sum(s.diverged for s in series)
    if diverged == len(series):
        raise EnsembleError(f"all {diverged} ensemble members diverged")
    attr = "w_h1_sq" if norm == "h1" else "w_l2_sq"
    mat = np.array([np.minimum(getattr(s, attr), DIVERGED_CAP) for s in series])
    # explicit left-to-right sum so the result does not depend on numpy's pairwise blocking
    total = np.zeros(mat.shape[1])
    for row in mat:
        total += row
    mean = total / len(series)
    bands = {p: percentile_bands(mat, p) for p in ps}
    return EnsembleStats(series[0].t.copy(), mean, bands, len(series), diverged, mat)


_WORKER = {}


def _init_worker(config, truth_path, observed, times):
    _WORKER["config"] = config
    _WORKER["truth"] = TruthCache(np.load(truth_path, mmap_mode="r"), observed, times, truth_path)


def _run_member(args):
    member, mode = args
    return assimilate(_WORKER["config"], _WORKER["truth"], member, mode)


def worker_count(requested: int | None = None) -> int:
    cap = int(os.environ.get("NUDGE_WORKERS", "1") or 1)
    n = cap if requested is None else min(requested, cap)
    return max(1, n)


def run_ensemble(config: AssimilationConfig, truth: TruthCache, n_members: int, mode: str = FILTERED,
                 ps=DEFAULT_BANDS, workers: int | None = None, progress=None) -> EnsembleStats:
    """Assimilate ``n_members`` noise realisations against one reference trajectory.

    Member j draws its noise from the stream keyed by (noise seed, j), so the
    result is independent of scheduling and worker count.
    """
    if n_members < 1:
        raise EnsembleError("need at least one ensemble member")
    nw = worker_count(workers)
    jobs = [(j, mode) for j in range(n_members)]
    if nw == 1:
        out = []
        for j, m in jobs:
            out.append(assimilate(config, truth, j, m))
            if progress:
                progress(j)
    else:
        with ProcessPoolExecutor(nw, initializer=_init_worker,
                                 initargs=(config, truth.path, truth.observed, truth.times)) as pool:
            out = list(pool.map(_run_member, jobs))
    return reduce_members(out, ps)


def trapezoid_mean(t, y) -> float:
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    if len(t) == 1:
        return float(y[0])
    return float(np.trapezoid(y, t) / (t[-1] - t[0]))


def turnover_time(t, l2, h_neg_half) -> float:
    """tau = 4 pi^2 <||U||_{-1/2}^2> / <|U|^2>^(3/2) with trapezoidal time averages."""
    energy = trapezoid_mean(t, np.asarray(l2) ** 2)
    if energy <= 0:
        raise ValueError("turnover time undefined for a zero-energy trajectory")
    return 4 * math.pi**2 * trapezoid_mean(t, np.asarray(h_neg_half) ** 2) / energy**1.5


def window_stats(stats: EnsembleStats, t_lo: float, t_hi: float) -> tuple[float, float, float]:
    """(max, time average, min) of the ensemble mean over t_lo <= t <= t_hi."""
    sel = (stats.times >= t_lo) & (stats.times <= t_hi)
    if not sel.any():
        raise ValueError(f"no observation times in [{t_lo}, {t_hi}]")
    y = stats.mean_sq_error[sel]
    return float(y.max()), trapezoid_mean(stats.times[sel], y), float(y.min())


def log_correction(sigma: float, C1: float, kappa: float, theta: float) -> float:
    """f(sigma) = log(C1/sigma^2) + log((log(C1/sigma^2) + kappa)/log(1/theta))."""
    if not 0 < theta < 1:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    if sigma <= 0 or sigma**2 >= C1:
        raise ValueError(f"need 0 < sigma^2 < C1, got sigma^2={sigma**2}, C1={C1}")
    L = math.log(C1 / sigma**2)
    inner = (L + kappa) / math.log(1 / theta)
    if inner <= 0:
        raise ValueError("log(C1/sigma^2) + kappa must be positive")
    return L + math.log(inner)


def expected_error_bound(sigma: float, C0: float, C1: float, kappa: float, theta: float) -> float:
    """C0 sigma^2 f(sigma), the asymptotic bound on E||U - u||^2."""
    return C0 * sigma**2 * log_correction(sigma, C1, kappa, theta)


def scaling_slope(sigma_sq, values) -> float:
    """Least-squares slope of log(values) against log(sigma_sq)."""
    x = np.log(np.asarray(sigma_sq, float))
    y = np.log(np.asarray(values, float))
    if len(x) < 2:
        raise ValueError("need at least two noise levels for a slope")
    return float(np.polyfit(x, y, 1)[0])
