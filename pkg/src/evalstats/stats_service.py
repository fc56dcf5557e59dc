import logging
logger = logging.getLogger(__name__)
from itertools import combinations, product
from typing import List

import numpy as np
from scipy import stats
from statsmodels.stats.multitest import multipletests

from models.errors import InsufficientDataError, ParameterError, UndefinedMetricError
from models.report import StatTestResult, BootstrapResult, TertileSummary

EXACT_WILCOXON_MAX_N = 20
TERTILE_LABELS = ["low", "intermediate", "high"]
P_ADJUST_METHODS = {"holm": "holm", "bh": "fdr_bh"}


def logrank_test(groups: List[tuple]) -> StatTestResult:
    """Observed-minus-expected chi-square over the pooled event times, df = groups - 1."""
    if len(groups) < 2:
        raise ParameterError("log-rank needs at least two groups")
    times = np.concatenate([np.asarray(group_times, dtype=float) for group_times, _ in groups])
    events = np.concatenate([np.asarray(group_events, dtype=int) for _, group_events in groups])
    labels = np.concatenate([np.full(len(group_times), index) for index, (group_times, _) in enumerate(groups)])
    event_times = np.unique(times[events == 1])
    if len(event_times) == 0:
        raise UndefinedMetricError("log-rank is undefined without events")

    n_groups = len(groups)
    observed_minus_expected = np.zeros(n_groups)
    covariance = np.zeros((n_groups, n_groups))
    for t in event_times:
        at_risk = np.bincount(labels[times >= t], minlength=n_groups).astype(float)
        deaths = np.bincount(labels[(times == t) & (events == 1)], minlength=n_groups).astype(float)
        n_total, d_total = at_risk.sum(), deaths.sum()
        observed_minus_expected += deaths - d_total * at_risk / n_total
        if n_total > 1:
            scale = d_total * (n_total - d_total) / (n_total ** 2 * (n_total - 1))
            covariance += scale * (n_total * np.diag(at_risk) - np.outer(at_risk, at_risk))
    reduced = observed_minus_expected[:-1]
    statistic = float(reduced @ np.linalg.pinv(covariance[:-1, :-1]) @ reduced)
    return StatTestResult(statistic=statistic, p_value=float(stats.chi2.sf(statistic, n_groups - 1)),
                          df=n_groups - 1)


def tertile_stratify(scores, times, events) -> TertileSummary:
    scores, times, events = np.asarray(scores, dtype=float), np.asarray(times, dtype=float), np.asarray(events)
    if len(scores) < 9:
        raise InsufficientDataError(f"tertile stratification needs at least 9 subjects, got {len(scores)}")
    cuts = np.percentile(scores, [100 / 3, 200 / 3])
    # scores equal to a cut fall in the lower tertile
    assignments = np.searchsorted(cuts, scores, side="left")
    counts, rates, groups = [], [], []
    for tertile in range(3):
        members = assignments == tertile
        counts.append(int(members.sum()))
        rates.append(float(events[members].mean()) if members.any() else None)
        groups.append((times[members], events[members]))

    def safe_logrank(selected):
        try:
            return logrank_test([groups[index] for index in selected if counts[index] > 0])
        except (ParameterError, UndefinedMetricError) as err:
            logger.warning(f"Log-rank for tertiles {selected} undefined: {err}")
            return None

    pairwise = {f"{TERTILE_LABELS[a]}-{TERTILE_LABELS[b]}": safe_logrank((a, b)) for a, b in combinations(range(3), 2)}
    return TertileSummary(cuts=(float(cuts[0]), float(cuts[1])), counts=counts, event_rates=rates,
                          overall=safe_logrank((0, 1, 2)), pairwise=pairwise, assignments=assignments.tolist())


def wilcoxon_signed_rank(a, b) -> StatTestResult:
    differences = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    differences = differences[differences != 0]
    n = len(differences)
    if n == 0:
        return StatTestResult(statistic=0.0, p_value=1.0)
    if n < 5:
        raise InsufficientDataError(f"signed-rank test needs 5 non-zero differences, got {n}")
    ranks = stats.rankdata(np.abs(differences))
    positive = float(ranks[differences > 0].sum())
    statistic = min(positive, n * (n + 1) / 2 - positive)
    if n <= EXACT_WILCOXON_MAX_N:
        # average ranks are multiples of 1/2, so doubled ranks enumerate exactly
        doubled = np.rint(2 * ranks).astype(int)
        counts = np.zeros(doubled.sum() + 1)
        counts[0] = 1.0
        for rank in doubled:
            shifted = np.zeros_like(counts)
            shifted[rank:] = counts[:len(counts) - rank]
            counts = counts + shifted
        probabilities = counts / counts.sum()
        observed = int(np.rint(2 * positive))
        tail = min(probabilities[:observed + 1].sum(), probabilities[observed:].sum())
        return StatTestResult(statistic=statistic, p_value=float(min(1.0, 2 * tail)))
    _, tie_counts = np.unique(ranks, return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_counts ** 3 - tie_counts) / 48
    z = max(0.0, abs(positive - n * (n + 1) / 4) - 0.5) / np.sqrt(variance)
    return StatTestResult(statistic=statistic, p_value=float(min(1.0, 2 * stats.norm.sf(z))))


def bootstrap_bca(differences, resamples: int = 10000, level: float = 0.95, seed: int = 0) -> BootstrapResult:
    differences = np.asarray(differences, dtype=float)
    if len(differences) < 5:
        raise InsufficientDataError(f"bootstrap needs at least 5 paired differences, got {len(differences)}")
    mean = float(differences.mean())
    if np.ptp(differences) == 0:
        return BootstrapResult(mean=mean, lo=mean, hi=mean, p_value=1.0 if mean == 0 else 0.0)
    result = stats.bootstrap((differences,), np.mean, n_resamples=resamples, confidence_level=level,
                             method="BCa", random_state=np.random.default_rng(seed))
    distribution = result.bootstrap_distribution
    p_value = min(1.0, 2 * min(np.mean(distribution <= 0), np.mean(distribution >= 0)))
    return BootstrapResult(mean=mean, lo=float(result.confidence_interval.low),
                           hi=float(result.confidence_interval.high), p_value=float(p_value))


def permutation_test(a, b, permutations: int = 1000, seed: int = 0) -> float:
    """Sign-flip test on paired differences; all 2^n sign patterns are used when 2^n <= permutations."""
    differences = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    n = len(differences)
    if n < 5:
        raise InsufficientDataError(f"permutation test needs at least 5 pairs, got {n}")
    observed = abs(differences.mean())
    if 2 ** n <= permutations:
        signs = np.array(list(product([1.0, -1.0], repeat=n)))
        extreme = np.abs((signs * differences).mean(axis=1)) >= observed - 1e-12
        return float(extreme.mean())
    signs = np.random.default_rng(seed).choice([-1.0, 1.0], size=(permutations, n))
    extreme = np.abs((signs * differences).mean(axis=1)) >= observed - 1e-12
    return float((1 + extreme.sum()) / (permutations + 1))


def p_adjust(raw, method: str = "holm") -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    if np.any((raw < 0) | (raw > 1)):
        raise ParameterError("p-values must lie in [0, 1]")
    try:
        statsmodels_method = P_ADJUST_METHODS[method]
    except KeyError:
        raise ParameterError(f"unknown adjustment method {method}, expected one of {sorted(P_ADJUST_METHODS)}")
    if len(raw) == 0:
        return raw
    return np.minimum(1.0, multipletests(raw, method=statsmodels_method)[1])


def pearson(x, y) -> StatTestResult:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 3 or np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedMetricError("Pearson correlation needs three or more non-constant pairs")
    result = stats.pearsonr(x, y)
    return StatTestResult(statistic=float(result[0]), p_value=float(result[1]))
