"""Empirical distributions, the two-sample Kolmogorov-Smirnov test, summary
statistics, and histogram/ECDF/KDE tables for the probability distributions."""
import itertools
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

EXACT_LIMIT = 16
P_DISPLAY_FLOOR = 1e-9
TABLE_ROWS = ("SN1", "SN2", "SN1*", "SN2*")
# Table row -> variant whose surname scores are compared against ORIG
TABLE_VARIANTS = {"SN1": "SN1", "SN2": "SN2", "SN1*": "SNGN1", "SN2*": "SNGN2"}


@dataclass(frozen=True)
class EmpiricalDistribution:
    sorted_samples: np.ndarray

    @property
    def n(self) -> int:
        return len(self.sorted_samples)

    def __call__(self, x):
        """S(x) = fraction of samples <= x (right-continuous)."""
        return np.searchsorted(self.sorted_samples, x, side="right") / self.n


def ecdf(samples) -> EmpiricalDistribution:
    arr = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if arr.size == 0:
        raise ValueError("ECDF of an empty sample")
    return EmpiricalDistribution(arr)


@dataclass(frozen=True)
class KsResult:
    D: float
    m: int
    n: int
    p_asymptotic: float
    p_exact: Optional[float] = None

    def as_dict(self) -> Dict:
        return {"D": self.D, "m": self.m, "n": self.n, "p_asymptotic": self.p_asymptotic, "p_exact": self.p_exact}


def ks_statistic(a, b) -> float:
    """sup_x |S_a(x) - S_b(x)| evaluated at every pooled sample point."""
    sa, sb = ecdf(a), ecdf(b)
    pooled = np.concatenate([sa.sorted_samples, sb.sorted_samples])
    return float(np.max(np.abs(sa(pooled) - sb(pooled))))


def kolmogorov_sf(lam: float) -> float:
    """Q(lambda) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lambda^2), clamped to [0, 1].

    Below lambda = 1 the equivalent theta-function form
    1 - sqrt(2 pi)/lambda sum exp(-(2k-1)^2 pi^2 / (8 lambda^2)) is summed instead;
    the alternating series needs thousands of terms there."""
    if lam <= 0:
        return 1.0
    total = 0.0
    k = 1
    if lam < 1.0:
        while True:
            term = math.exp(-((2 * k - 1) ** 2) * math.pi ** 2 / (8 * lam * lam))
            total += term
            if term < 1e-16:
                break
            k += 1
        p = 1.0 - math.sqrt(2 * math.pi) / lam * total
    else:
        while True:
            term = math.exp(-2.0 * k * k * lam * lam)
            total += term if k % 2 else -term
            if term < 1e-16:
                break
            k += 1
        p = 2.0 * total
    return min(1.0, max(0.0, p))


def _ks_exact_p(a: np.ndarray, b: np.ndarray, d_obs: float) -> float:
    """Permutation p-value: share of all C(m+n, m) relabelings with D >= observed."""
    m, n = len(a), len(b)
    pooled = np.sort(np.concatenate([a, b]))
    N = m + n
    # last index of every tie group: ECDFs only change there
    ends = np.flatnonzero(np.append(pooled[1:] != pooled[:-1], True))
    combos = np.array(list(itertools.combinations(range(N), m)), dtype=int)
    member = np.zeros((len(combos), N))
    member[np.arange(len(combos))[:, None], combos] = 1.0
    cum_a = np.cumsum(member, axis=1)[:, ends]
    d = np.max(np.abs(cum_a / m - ((ends + 1) - cum_a) / n), axis=1)
    return float(np.mean(d >= d_obs - 1e-12))


def ks_two_sample(a, b, exact_limit: int = EXACT_LIMIT) -> KsResult:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("KS test needs two non-empty samples")
    m, n = a.size, b.size
    D = ks_statistic(a, b)
    lam = D * math.sqrt(m * n / (m + n))
    p_exact = _ks_exact_p(a, b, D) if m + n <= exact_limit else None
    return KsResult(D, m, n, kolmogorov_sf(lam), p_exact)


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    median: float
    std: float
    max: float
    min: float
    n: int


def summary_stats(samples) -> SummaryStats:
    arr = np.asarray(samples, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("summary of an empty sample")
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return SummaryStats(float(np.mean(arr)), float(np.median(arr)), std, float(np.max(arr)), float(np.min(arr)), int(arr.size))


# --- curves ---

@dataclass
class Curves:
    histogram: pd.DataFrame
    ecdf: pd.DataFrame
    kde: pd.DataFrame
    bandwidth: float


def kde_bandwidth(arr: np.ndarray, fallback: float = 0.01) -> float:
    sigma = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    if sigma == 0.0:
        return fallback
    return 1.06 * sigma * arr.size ** (-0.2)


def gaussian_kde(arr: np.ndarray, grid: np.ndarray, h: float) -> np.ndarray:
    z = (grid[:, None] - arr[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) / (arr.size * h * math.sqrt(2 * math.pi))


def export_curves(samples, bins: int = 20, bandwidth: Union[str, float] = "silverman",
                  grid_points: int = 512, value_range: Optional[Sequence[float]] = None) -> Curves:
    arr = np.asarray(samples, dtype=np.float64).ravel()
    if arr.size == 0:
        empty = pd.DataFrame(columns=["x", "value"])
        return Curves(pd.DataFrame(columns=["x", "value", "left", "right"]), empty, empty.copy(), float("nan"))
    density, edges = np.histogram(arr, bins=bins, range=value_range, density=True)
    histogram = pd.DataFrame({"x": (edges[:-1] + edges[1:]) / 2, "value": density,
                              "left": edges[:-1], "right": edges[1:]})
    h = kde_bandwidth(arr) if bandwidth == "silverman" else float(bandwidth)
    grid = np.linspace(arr.min() - 5 * h, arr.max() + 5 * h, grid_points)
    kde = pd.DataFrame({"x": grid, "value": gaussian_kde(arr, grid, h)})
    dist = ecdf(arr)
    ecdf_table = pd.DataFrame({"x": grid, "value": dist(grid)})
    return Curves(histogram, ecdf_table, kde, h)


def write_curves(prefix: str, curves: Curves) -> Dict[str, str]:
    paths = {}
    for name in ("histogram", "ecdf", "kde"):
        path = f"{prefix}_{name}.csv"
        getattr(curves, name).to_csv(path, index=False, float_format="%.17g")
        paths[name] = path
    return paths


# --- tables ---

def format_p(p: Optional[float]) -> str:
    if p is None or (isinstance(p, float) and math.isnan(p)):
        return ""
    return "<e-9" if p < P_DISPLAY_FLOOR else f"{p:.1e}"


def ks_table(results: Mapping[str, Mapping[str, KsResult]]) -> pd.DataFrame:
    """Raw KS results, one row per (model, variant)."""
    rows = []
    for model_label, by_variant in results.items():
        for variant, res in by_variant.items():
            rows.append({"model": model_label, "variant": variant, **res.as_dict()})
    return pd.DataFrame(rows, columns=["model", "variant", "D", "m", "n", "p_asymptotic", "p_exact"])


def table1(results: Mapping[str, Mapping[str, KsResult]], models: Sequence[str] = ("no-CRF", "CRF")) -> pd.DataFrame:
    """Rows SN1, SN2, SN1*, SN2*; columns D and p per model, p floored at "<e-9"."""
    data = {"row": list(TABLE_ROWS)}
    for model_label in models:
        by_variant = results.get(model_label, {})
        ds, ps = [], []
        for row in TABLE_ROWS:
            res = by_variant.get(TABLE_VARIANTS[row])
            ds.append(f"{res.D:.1e}" if res else "")
            ps.append(format_p(res.p_asymptotic) if res else "")
        data[f"{model_label} D"] = ds
        data[f"{model_label} p"] = ps
    return pd.DataFrame(data)


def summary_table(scores: Mapping[str, Mapping[str, np.ndarray]]) -> pd.DataFrame:
    rows = []
    for model_label, by_variant in scores.items():
        for variant, arr in by_variant.items():
            if len(arr) == 0:
                continue
            s = summary_stats(arr)
            rows.append({"model": model_label, "variant": variant, "n": s.n, "mean": s.mean,
                         "median": s.median, "std": s.std, "max": s.max, "min": s.min})
    return pd.DataFrame(rows, columns=["model", "variant", "n", "mean", "median", "std", "max", "min"])
