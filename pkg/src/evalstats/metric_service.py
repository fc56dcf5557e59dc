import logging
logger = logging.getLogger(__name__)

import numpy as np
from scipy import stats

from models.errors import ParameterError, UndefinedMetricError
from models.report import KmCurve

CHUNK = 512


def c_index(scores, times, events) -> float:
    """Harrell's concordance. Tied times form a comparable pair when only one of the two had the event."""
    scores, times, events = np.asarray(scores, dtype=float), np.asarray(times, dtype=float), np.asarray(events)
    case_index = np.nonzero(events == 1)[0]
    concordant, comparable = 0.0, 0
    for start in range(0, len(case_index), CHUNK):
        cases = case_index[start:start + CHUNK]
        pairs = (times[None, :] > times[cases, None]) | ((times[None, :] == times[cases, None]) & (events[None, :] == 0))
        higher = scores[cases, None] > scores[None, :]
        tied = scores[cases, None] == scores[None, :]
        comparable += int(pairs.sum())
        concordant += float((pairs & higher).sum()) + 0.5 * float((pairs & tied).sum())
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs for the concordance index")
    return concordant / comparable


def concordance_with_truth(scores, true_risk) -> float:
    """Fraction of subject pairs ranked in the same order as the true risk."""
    true_risk = np.asarray(true_risk, dtype=float)
    return c_index(scores, -true_risk, np.ones(len(true_risk), dtype=int))


def km_fit(times, events) -> KmCurve:
    times, events = np.asarray(times, dtype=float), np.asarray(events, dtype=int)
    unique_times, inverse = np.unique(times, return_inverse=True)
    deaths = np.bincount(inverse, weights=events, minlength=len(unique_times)).astype(int)
    exits = np.bincount(inverse, minlength=len(unique_times))
    at_risk = len(times) - np.concatenate([[0], np.cumsum(exits)[:-1]])
    survival = np.cumprod(1.0 - deaths / np.maximum(at_risk, 1))
    return KmCurve(times=unique_times.tolist(), survival=survival.tolist(), at_risk=at_risk.tolist(),
                   events=deaths.tolist())


def left_limit(curve: KmCurve, t) -> np.ndarray:
    values = np.concatenate([[1.0], np.asarray(curve.survival)])
    return values[np.searchsorted(np.asarray(curve.times), np.asarray(t, dtype=float), side="left")]


def td_auc(scores, times, events, horizon: float) -> float:
    """Cumulative/dynamic AUC at `horizon`, cases weighted by the inverse censoring survival."""
    scores, times, events = np.asarray(scores, dtype=float), np.asarray(times, dtype=float), np.asarray(events)
    cases = (times <= horizon) & (events == 1)
    controls = times > horizon
    if not cases.any() or not controls.any():
        raise UndefinedMetricError(f"AUC at {horizon:g} years needs cases and controls, got "
                                   f"{int(cases.sum())} and {int(controls.sum())}")
    censoring = km_fit(times, 1 - events)
    weights = 1.0 / left_limit(censoring, times[cases])
    case_scores, control_scores = scores[cases], scores[controls]
    wins = (case_scores[:, None] > control_scores[None, :]).sum(axis=1) \
        + 0.5 * (case_scores[:, None] == control_scores[None, :]).sum(axis=1)
    return float(np.sum(weights * wins) / (np.sum(weights) * len(control_scores)))


def picp_mpiw(lo, hi, truth) -> tuple[float, float]:
    lo, hi, truth = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float), np.asarray(truth, dtype=float)
    if np.any(lo > hi):
        raise ParameterError("interval lower bounds must not exceed upper bounds")
    inside = (truth >= lo) & (truth <= hi)
    return float(inside.mean()), float(np.mean(hi - lo))


def regression_metrics(pred, truth) -> tuple[float, float, float | None]:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if len(truth) < 2:
        raise UndefinedMetricError("regression metrics need at least two subjects")
    total = np.sum((truth - truth.mean()) ** 2)
    if total == 0:
        raise UndefinedMetricError("R2 is undefined when the truth has zero variance")
    residual = np.sum((truth - pred) ** 2)
    pearson = float(stats.pearsonr(pred, truth)[0]) if np.ptp(pred) > 0 else None
    return float(1.0 - residual / total), float(np.sqrt(residual / len(truth))), pearson
