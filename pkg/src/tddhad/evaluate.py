"""3D-ROC evaluation, separability statistics and the global RX baseline."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import ArgumentError, NumericError
from .hsi import BinaryMask, HsiCube, ScoreMap

__all__ = [
    "RocSeries",
    "AucReport",
    "normalize_scores",
    "roc_series",
    "auc_report",
    "evaluate",
    "grx",
    "separability_stats",
    "AUC_FIELDS",
    "write_auc_csv",
    "read_auc_csv",
    "write_roc_csv",
    "write_separability_csv",
    "identity_violations",
]


def _arrays(scores, gt):
    s = scores.scores if isinstance(scores, ScoreMap) else np.asarray(scores, dtype=np.float64)
    g = gt.values if isinstance(gt, BinaryMask) else np.asarray(gt)
    if s.shape != g.shape:
        raise ArgumentError(f"score map {s.shape} and ground truth {g.shape} differ in shape")
    if not np.all((g == 0) | (g == 1)):
        raise ArgumentError("ground truth must be binary")
    return s.ravel().astype(np.float64), g.ravel().astype(bool)


def normalize_scores(scores: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


@dataclass(frozen=True)
class RocSeries:
    """Detection and false-alarm rates at descending thresholds.

    The first entry is the empty-detection point at ``t = 1``; every other
    entry counts pixels whose normalized score is ``>= t``.
    """

    thresholds: np.ndarray
    pd: np.ndarray
    pf: np.ndarray


def roc_series(scores, gt) -> RocSeries:
    s, g = _arrays(scores, gt)
    n_anom = int(g.sum())
    n_back = g.size - n_anom
    if n_anom == 0 or n_back == 0:
        raise ArgumentError("ground truth needs at least one anomaly and one background pixel")
    s = normalize_scores(s)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    g_sorted = g[order]
    tp = np.cumsum(g_sorted)
    fp = np.cumsum(~g_sorted)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1]
    thresholds = np.r_[1.0, s_sorted[last]]
    pd = np.r_[0.0, tp[last] / n_anom]
    pf = np.r_[0.0, fp[last] / n_back]
    if thresholds[-1] != 0.0:  # unreachable after min-max, kept for safety
        thresholds = np.r_[thresholds, 0.0]
        pd = np.r_[pd, 1.0]
        pf = np.r_[pf, 1.0]
    return RocSeries(thresholds, pd, pf)


AUC_FIELDS = ("auc_df", "auc_dt", "auc_ft", "auc_td", "auc_bs", "auc_odp", "auc_snpr")


@dataclass(frozen=True)
class AucReport:
    auc_df: float
    auc_dt: float
    auc_ft: float
    auc_td: float
    auc_bs: float
    auc_odp: float
    auc_snpr: float
    snpr_defined: bool = True

    @classmethod
    def from_base(cls, auc_df, auc_dt, auc_ft) -> "AucReport":
        """Derive the four composite scores from the three base areas."""
        if auc_ft == 0:
            snpr, defined = math.inf, False
        else:
            snpr, defined = auc_dt / auc_ft, True
        return cls(
            auc_df=auc_df,
            auc_dt=auc_dt,
            auc_ft=auc_ft,
            auc_td=auc_df + auc_dt,
            auc_bs=auc_df - auc_ft,
            auc_odp=auc_dt - auc_ft + 1,
            auc_snpr=snpr,
            snpr_defined=defined,
        )

    def as_row(self) -> list:
        return [getattr(self, f) for f in AUC_FIELDS]


def _trapezoid(x, y) -> float:
    return float(abs(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0)))


def auc_report(series: RocSeries) -> AucReport:
    t, pd, pf = series.thresholds, series.pd, series.pf
    return AucReport.from_base(_trapezoid(pf, pd), _trapezoid(t, pd), _trapezoid(t, pf))


def evaluate(scores, gt) -> AucReport:
    return auc_report(roc_series(scores, gt))


# ---------------------------------------------------------------------------
# GRX


def grx(cube: HsiCube, regularization: float | None = None) -> ScoreMap:
    """Squared Mahalanobis distance of each pixel to the global mean.

    The covariance is the maximum-likelihood estimate (divided by H*W) plus
    ``regularization * I``; by default ``1e-6 * trace(cov) / B``, floored at
    ``1e-12`` times the mean squared pixel value.
    """
    x = cube.data.reshape(-1, cube.bands).astype(np.float64)
    mu = x.mean(axis=0)
    dev = x - mu
    cov = dev.T @ dev / x.shape[0]
    if regularization is None:
        # the floor keeps round-off in the mean from dominating flat cubes
        floor = 1e-12 * max(float(np.mean(x * x)), 1e-300)
        regularization = max(1e-6 * np.trace(cov) / cube.bands, floor)
    if regularization < 0:
        raise ArgumentError(f"regularization must be >= 0, got {regularization}")
    cov = cov + regularization * np.eye(cube.bands)
    try:
        factor = cho_factor(cov, lower=True, check_finite=False)
    except LinAlgError:
        raise NumericError(
            f"covariance + {regularization:g}*I is not positive definite; try a larger regularization"
        ) from None
    solved = cho_solve(factor, dev.T, check_finite=False)
    scores = np.einsum("ij,ji->i", dev, solved)
    return ScoreMap(np.maximum(scores, 0.0).reshape(cube.height, cube.width))


# ---------------------------------------------------------------------------
# separability


def separability_stats(scores, gt) -> dict:
    """Five-number summaries of normalized scores per class."""
    s, g = _arrays(scores, gt)
    if g.all() or not g.any():
        raise ArgumentError("separability needs both anomaly and background pixels")
    s = normalize_scores(s)
    out = {}
    for name, values in (("background", s[~g]), ("anomaly", s[g])):
        q = np.percentile(values, [0, 25, 50, 75, 100])
        out[name] = dict(zip(("min", "q1", "median", "q3", "max"), (float(v) for v in q)))
    return out


# ---------------------------------------------------------------------------
# CSV emission

AUC_HEADER = ("dataset", "method") + AUC_FIELDS


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def write_auc_csv(path, rows) -> None:
    """``rows`` are ``(dataset, method, AucReport)`` tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AUC_HEADER)
        for dataset, method, report in rows:
            w.writerow([dataset, method] + [_fmt(v) for v in report.as_row()])


def read_auc_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(AUC_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ArgumentError(f"{path} is missing columns {sorted(missing)}")
        rows = []
        for row in reader:
            rec = {"dataset": row["dataset"], "method": row["method"]}
            rec.update({f: float(row[f]) for f in AUC_FIELDS})
            rows.append(rec)
        return rows


def identity_violations(row: dict, tol=5e-4, snpr_rtol=5e-3) -> list[str]:
    """Names of derived fields that disagree with the base three."""
    expected = AucReport.from_base(row["auc_df"], row["auc_dt"], row["auc_ft"])
    bad = []
    for name in ("auc_td", "auc_bs", "auc_odp"):
        if abs(getattr(expected, name) - row[name]) > tol:
            bad.append(name)
    if expected.snpr_defined:
        if abs(expected.auc_snpr - row["auc_snpr"]) > snpr_rtol * abs(row["auc_snpr"]):
            bad.append("auc_snpr")
    elif not math.isinf(row["auc_snpr"]):
        bad.append("auc_snpr")
    return bad


def write_roc_csv(path, series: RocSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("threshold", "pd", "pf"))
        for t, d, f in zip(series.thresholds, series.pd, series.pf):
            w.writerow((repr(float(t)), repr(float(d)), repr(float(f))))


def write_separability_csv(path, stats: dict, method="") -> None:
    """One header and one row: ``method`` then ten class statistics."""
    keys = ("min", "q1", "median", "q3", "max")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("method",) + tuple(f"{c}_{k}" for c in ("background", "anomaly") for k in keys))
        w.writerow([method] + [repr(stats[c][k]) for c in ("background", "anomaly") for k in keys])
