"""Final-point error metrics, bootstrap intervals, Clarke grid, correlations and SIV usage."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .transform import DataError

ZONES = ("A", "B", "C", "D", "E")


class UndefinedCorrelation(ValueError):
    pass


# ----------------------------------------------------------------- errors

def final_point_errors(preds: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(rMSE, MAE) of the last horizon step. Inputs must already be in mg/dL."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise DataError(f"predictions {preds.shape} vs labels {labels.shape}")
    if preds.ndim == 1:
        preds, labels = preds[:, None], labels[:, None]
    if len(preds) == 0:
        raise DataError("no windows to score")
    e = preds[:, -1] - labels[:, -1]
    return math.sqrt(float(np.mean(e * e))), float(np.mean(np.abs(e)))


def rmse(e: np.ndarray) -> float:
    return math.sqrt(float(np.mean(np.square(e))))


def mae(e: np.ndarray) -> float:
    return float(np.mean(np.abs(e)))


METRICS: dict[str, Callable[[np.ndarray], float]] = {"rmse": rmse, "mae": mae}


def bootstrap_ci(errors: np.ndarray, metric: str | Callable = "rmse", B: int = 1000,
                 level: float = 0.95, rng: np.random.Generator | int = 0) -> tuple[float, float]:
    """Percentile interval of ``metric`` over windows resampled with replacement."""
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise DataError("bootstrap_ci: no errors")
    if B < 100:
        raise ValueError(f"bootstrap_ci: B={B} below 100")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n = errors.size
    idx = rng.integers(0, n, size=(B, n))
    sample = errors[idx]
    if metric == "rmse":
        values = np.sqrt(np.mean(sample * sample, axis=1))
    elif metric == "mae":
        values = np.mean(np.abs(sample), axis=1)
    else:
        values = np.array([metric(s) for s in sample])
    alpha = (1.0 - level) / 2
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


# ------------------------------------------------------------ Clarke grid

def clarke_zone(ref: float, pred: float) -> str:
    """Standard Clarke error grid zone of one (reference, prediction) pair in mg/dL."""
    if ref <= 0 or pred <= 0:
        raise DataError(f"Clarke grid needs positive values, got ref={ref}, pred={pred}")
    if (ref <= 70 and pred <= 70) or (0.8 * ref <= pred <= 1.2 * ref):
        return "A"
    if (ref >= 180 and pred <= 70) or (ref <= 70 and pred >= 180):
        return "E"
    if (70 <= ref <= 290 and pred >= ref + 110) or (130 <= ref <= 180 and pred <= 7 / 5 * ref - 182):
        return "C"
    if ((ref >= 240 and 70 <= pred <= 180) or (ref <= 175 / 3 and 70 <= pred <= 180)
            or (175 / 3 <= ref <= 70 and pred >= 6 / 5 * ref)):
        return "D"
    return "B"


def clarke_grid(preds: np.ndarray, refs: np.ndarray) -> dict[str, float]:
    """Proportion of pairs in each zone A-E."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    refs = np.asarray(refs, dtype=np.float64).reshape(-1)
    if preds.shape != refs.shape or preds.size == 0:
        raise DataError(f"clarke_grid: {preds.size} predictions vs {refs.size} references")
    counts = dict.fromkeys(ZONES, 0)
    for r, p in zip(refs, preds):
        counts[clarke_zone(float(r), float(p))] += 1
    return {z: c / preds.size for z, c in counts.items()}


# ---------------------------------------------------------- correlations

def pearson(xs, ys) -> tuple[float, float]:
    """Sample correlation and two-sided p-value from a t distribution with n-2 dof."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson: shapes {x.shape} and {y.shape}")
    n = x.size
    if n < 2:
        raise ValueError("pearson: need at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelation("pearson: zero variance")
    r = float(np.clip(dx @ dy / math.sqrt(sxx * syy), -1.0, 1.0))
    if n < 3:
        return r, math.nan
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return r, float(2 * stats.t.sf(abs(t), n - 2))


def paired_t(a, b) -> tuple[float, float]:
    res = stats.ttest_rel(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------- reports

@dataclass
class MetricSummary:
    value: float
    ci: tuple[float, float]


@dataclass
class EvalReport:
    ident: str
    n_windows: int
    rmse: MetricSummary
    mae: MetricSummary
    clarke: dict[str, float]
    usage: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict:
        out = {
            "individual": self.ident, "n_windows": self.n_windows,
            "rmse": self.rmse.value, "rmse_lo": self.rmse.ci[0], "rmse_hi": self.rmse.ci[1],
            "mae": self.mae.value, "mae_lo": self.mae.ci[0], "mae_hi": self.mae.ci[1],
        }
        out.update({f"clarke_{z}": self.clarke[z] for z in ZONES})
        out["usage_rmse"] = self.usage.get("rmse", math.nan)
        out["usage_mae"] = self.usage.get("mae", math.nan)
        return out


def evaluate(ident: str, preds_mgdl: np.ndarray, labels_mgdl: np.ndarray, B: int = 1000,
             seed: int = 0) -> EvalReport:
    preds_mgdl = np.asarray(preds_mgdl)
    labels_mgdl = np.asarray(labels_mgdl)
    r, a = final_point_errors(preds_mgdl, labels_mgdl)
    e = preds_mgdl[:, -1] - labels_mgdl[:, -1]
    rng = np.random.default_rng(seed)
    r_ci = bootstrap_ci(e, "rmse", B, rng=rng)
    a_ci = bootstrap_ci(e, "mae", B, rng=rng)
    positive = (preds_mgdl[:, -1] > 0) & (labels_mgdl[:, -1] > 0)
    clarke = clarke_grid(preds_mgdl[positive, -1], labels_mgdl[positive, -1]) if positive.any() \
        else dict.fromkeys(ZONES, math.nan)
    return EvalReport(ident, len(e), MetricSummary(r, r_ci), MetricSummary(a, a_ci), clarke)


def aggregate(reports: list[EvalReport]) -> dict[str, float]:
    """Unweighted mean across individuals of point values and interval bounds."""
    if not reports:
        raise DataError("aggregate: no reports")
    rows = [rep.row() for rep in reports]
    keys = [k for k in rows[0] if k != "individual"]
    return {k: float(np.mean([row[k] for row in rows])) for k in keys}


# ---------------------------------------------------------------- usage

@dataclass
class UsagePair:
    with_siv: dict[str, float]
    without_siv: dict[str, float]

    @property
    def usage(self) -> dict[str, float]:
        return {k: self.without_siv[k] - self.with_siv[k] for k in self.with_siv}


def siv_usage(fit_and_score: Callable[[bool], dict[str, float]]) -> UsagePair:
    """Usage = L(f0(X0)) - L(f(X)).

    ``fit_and_score(zeroed)`` trains a model on the dataset (SIVs zeroed in
    every split when ``zeroed``) with a fixed config and seed and returns its
    test errors by metric name.
    """
    return UsagePair(fit_and_score(False), fit_and_score(True))
