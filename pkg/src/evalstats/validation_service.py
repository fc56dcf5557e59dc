import logging
logger = logging.getLogger(__name__)
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np
from sklearn.model_selection import StratifiedKFold, train_test_split

from evalstats.metric_service import c_index, td_auc, picp_mpiw, regression_metrics
from evalstats.stats_service import wilcoxon_signed_rank, bootstrap_bca, permutation_test, p_adjust, pearson
from models.cohort import CohortArrays, CohortFilter
from models.errors import InsufficientDataError, UndefinedMetricError
from models.report import CvProtocol, CvRow, StratumReport, ReportTable

SIZE_BANDS = [("small", 0, 30), ("medium", 30, 101), ("large", 101, np.inf)]


@dataclass
class HoldoutPrediction:
    risk: np.ndarray
    intercept_mean: np.ndarray | None = None
    intercept_lo: np.ndarray | None = None
    intercept_hi: np.ndarray | None = None


# (train, test, seed) -> predictions for the test subjects
ModelFactory = Callable[[CohortArrays, CohortArrays, int], HoldoutPrediction]


def task_seed(root: int, *index: int) -> int:
    return int(np.random.SeedSequence([root, *index]).generate_state(1)[0])


def stratify_labels(events: np.ndarray) -> np.ndarray | None:
    _, counts = np.unique(events, return_counts=True)
    if len(counts) < 2 or counts.min() < 2:
        logger.warning("Too few events or censored subjects to stratify, splitting at random")
        return None
    return events


def stratified_holdout(index, events, fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    index, events = np.asarray(index, dtype=int), np.asarray(events)
    if fraction <= 0:
        return index, index[:0]
    kept, held = train_test_split(index, test_size=fraction, random_state=seed, stratify=stratify_labels(events))
    return np.sort(kept), np.sort(held)


def stratified_split(events,
                     train_fraction: float = 0.722,
                     val_fraction: float = 0.128,
                     test_fraction: float = 0.150,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Train, validation and test indices, each stratified by the event flag."""
    events = np.asarray(events)
    if len(events) < 3:
        raise InsufficientDataError(f"a three-way split needs at least 3 subjects, got {len(events)}")
    rest, test = stratified_holdout(np.arange(len(events)), events, test_fraction, seed)
    train, val = stratified_holdout(rest, events[rest], val_fraction / (train_fraction + val_fraction), seed)
    return train, val, test


def stratified_folds(events: np.ndarray, protocol: CvProtocol, repeat: int) -> List[np.ndarray]:
    events = np.asarray(events)
    for attempt in range(protocol.max_refolds):
        splitter = StratifiedKFold(n_splits=protocol.folds, shuffle=True,
                                   random_state=task_seed(protocol.seed, repeat, attempt))
        folds = [test for _, test in splitter.split(np.zeros(len(events)), events)]
        if all(events[test].sum() > 0 for test in folds):
            return folds
        logger.warning(f"Repeat {repeat}: a fold has no events, refolding (attempt {attempt + 1})")
    raise InsufficientDataError(f"could not build {protocol.folds} folds with events in each after "
                                f"{protocol.max_refolds} attempts")


def repeated_cv(dataset: CohortArrays,
                protocol: CvProtocol,
                factories: Dict[str, ModelFactory],
                jobs: int = 1) -> List[CvRow]:
    """Every method sees the same folds within a repeat, giving paired rows."""
    tasks = []
    for repeat in range(protocol.repeats):
        for fold, test in enumerate(stratified_folds(dataset.events, protocol, repeat)):
            train = np.setdiff1d(np.arange(len(dataset)), test)
            tasks.append((repeat, fold, train, test))

    def run(task) -> List[CvRow]:
        repeat, fold, train, test = task
        held_out = dataset.subset(test)
        rows = []
        for method, factory in factories.items():
            prediction = factory(dataset.subset(train), held_out, task_seed(protocol.seed, repeat, fold))
            rows.append(CvRow(repeat=repeat, fold=fold, method=method,
                              c_index=c_index(prediction.risk, held_out.times, held_out.events),
                              n_test=len(test), events_test=int(held_out.events.sum())))
        logger.info(f"CV repeat {repeat} fold {fold}: " + ", ".join(f"{row.method}={row.c_index:.3f}" for row in rows))
        return rows

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(run, tasks))
    return [row for rows in results for row in rows]


def cv_summary(rows: List[CvRow]) -> ReportTable:
    summary = []
    for method in dict.fromkeys(row.method for row in rows):
        values = np.array([row.c_index for row in rows if row.method == method])
        mean, sd = float(values.mean()), float(values.std(ddof=1)) if len(values) > 1 else 0.0
        summary.append({"method": method, "n": len(values), "mean": mean, "sd": sd,
                        "cv_pct": 100.0 * sd / mean if mean else None})
    return ReportTable(name="cv_summary", columns=["method", "n", "mean", "sd", "cv_pct"], rows=summary)


def paired_values(rows: List[CvRow], method: str) -> np.ndarray:
    ordered = sorted((row.repeat, row.fold, row.c_index) for row in rows if row.method == method)
    return np.array([value for _, _, value in ordered])


def compare_methods(rows: List[CvRow],
                    reference: str,
                    resamples: int = 10000,
                    permutations: int = 1000,
                    seed: int = 0) -> tuple[ReportTable, ReportTable]:
    reference_values = paired_values(rows, reference)
    significance = []
    for method in dict.fromkeys(row.method for row in rows):
        if method == reference:
            continue
        other = paired_values(rows, method)
        differences = reference_values - other
        comparison = f"{reference} vs {method}"

        def guarded(test, compute):
            try:
                return compute()
            except InsufficientDataError as err:
                logger.warning(f"{comparison} {test}: {err}")
                return None

        wilcoxon = guarded("signed-rank", lambda: wilcoxon_signed_rank(reference_values, other))
        boot = guarded("bootstrap", lambda: bootstrap_bca(differences, resamples=resamples, seed=seed))
        significance.append({"comparison": comparison, "delta_c_index": float(differences.mean()),
                             "wilcoxon_p": wilcoxon.p_value if wilcoxon is not None else None,
                             "bootstrap_lo": boot.lo if boot is not None else None,
                             "bootstrap_hi": boot.hi if boot is not None else None,
                             "bootstrap_p": boot.p_value if boot is not None else None,
                             "permutation_p": guarded("permutation", lambda: permutation_test(
                                 reference_values, other, permutations, seed))})
    testable = [row for row in significance if row["wilcoxon_p"] is not None]
    raw = np.array([row["wilcoxon_p"] for row in testable])
    holm, bh = p_adjust(raw, "holm"), p_adjust(raw, "bh")
    adjusted = [{"comparison": row["comparison"], "raw_p": float(p), "holm_p": float(h), "bh_p": float(b)}
                for row, p, h, b in zip(testable, raw, holm, bh)]
    return (ReportTable(name="significance", columns=["comparison", "delta_c_index", "wilcoxon_p", "bootstrap_lo",
                                                      "bootstrap_hi", "bootstrap_p", "permutation_p"],
                        rows=significance),
            ReportTable(name="multiple_testing", columns=["comparison", "raw_p", "holm_p", "bh_p"], rows=adjusted))


def holdout_metrics(test: CohortArrays,
                    prediction: HoldoutPrediction,
                    cohort_filter: CohortFilter = CohortFilter.MCI_ONLY,
                    horizon: float = 3.0) -> tuple[Dict[str, float | None], List[str]]:
    metrics, flags = {}, []

    def guarded(name, compute):
        try:
            metrics[name] = float(compute())
        except (UndefinedMetricError, InsufficientDataError) as err:
            metrics[name] = None
            flags.append(f"undefined:{name}")
            logger.debug(f"{name} undefined: {err}")

    survival = test.survival_mask(cohort_filter)
    risk, times, events = prediction.risk[survival], test.times[survival], test.events[survival]
    guarded("c_index", lambda: c_index(risk, times, events))
    guarded(f"auc_{horizon:g}yr", lambda: td_auc(risk, times, events, horizon))
    if prediction.intercept_mean is not None:
        trajectory = test.reliable & ~np.isnan(test.targets[:, 0])
        truth = test.targets[trajectory, 0]
        guarded("intercept_r2", lambda: regression_metrics(prediction.intercept_mean[trajectory], truth)[0])
        if trajectory.any() and prediction.intercept_lo is not None:
            metrics["intercept_picp"] = picp_mpiw(prediction.intercept_lo[trajectory],
                                                  prediction.intercept_hi[trajectory], truth)[0]
        else:
            metrics["intercept_picp"] = None
            flags.append("undefined:intercept_picp")
    return metrics, flags


def loco_harness(dataset: CohortArrays,
                 factory: ModelFactory,
                 min_center_n: int = 20,
                 cohort_filter: CohortFilter = CohortFilter.MCI_ONLY,
                 horizon: float = 3.0,
                 seed: int = 0,
                 jobs: int = 1) -> List[StratumReport]:
    """Hold out each center with at least `min_center_n` subjects; smaller centers only ever train."""
    centers, sizes = np.unique(dataset.centers, return_counts=True)
    qualifying = [center for center, size in zip(centers, sizes) if size >= min_center_n]
    if len(qualifying) < 2:
        raise InsufficientDataError(f"LOCO needs two centers with >= {min_center_n} subjects, "
                                    f"got {len(qualifying)}")
    skipped = [center for center in centers if center not in qualifying]
    if skipped:
        logger.info(f"LOCO: centers {skipped} below {min_center_n} subjects are kept for training only")

    def run(item) -> StratumReport:
        index, center = item
        held_out = dataset.centers == center
        test = dataset.subset(np.nonzero(held_out)[0])
        prediction = factory(dataset.subset(np.nonzero(~held_out)[0]), test, task_seed(seed, index))
        metrics, flags = holdout_metrics(test, prediction, cohort_filter, horizon)
        logger.info(f"LOCO center {center} (n={len(test)}): {metrics}")
        return StratumReport(stratum=str(center), n=len(test), metrics=metrics, flags=flags)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(pool.map(run, enumerate(qualifying)))


def loco_summary(reports: List[StratumReport]) -> Dict[str, ReportTable]:
    names = list(dict.fromkeys(name for report in reports for name in report.metrics))
    summary = []
    for name in names:
        values = np.array([report.metrics[name] for report in reports if report.metrics.get(name) is not None])
        if len(values) == 0:
            summary.append({"metric": name, "centers": 0, "mean": None, "sd": None, "cv_pct": None})
            continue
        mean = float(values.mean())
        sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        summary.append({"metric": name, "centers": len(values), "mean": mean, "sd": sd,
                        "cv_pct": 100.0 * sd / abs(mean) if mean else None})

    bands = []
    for label, low, high in SIZE_BANDS:
        members = [report for report in reports if low <= report.n < high]
        values = [report.metrics.get("c_index") for report in members if report.metrics.get("c_index") is not None]
        bands.append({"band": label, "centers": len(members),
                      "mean_c_index": float(np.mean(values)) if values else None})

    paired = [(report.n, report.metrics.get("intercept_r2")) for report in reports
              if report.metrics.get("intercept_r2") is not None]
    correlation = []
    try:
        result = pearson([n for n, _ in paired], [r2 for _, r2 in paired])
        correlation.append({"x": "center_size", "y": "intercept_r2", "r": result.statistic, "p": result.p_value})
    except UndefinedMetricError as err:
        logger.warning(f"Center-size correlation undefined: {err}")
    return {"loco_summary": ReportTable(name="loco_summary", columns=["metric", "centers", "mean", "sd", "cv_pct"],
                                        rows=summary),
            "loco_bands": ReportTable(name="loco_bands", columns=["band", "centers", "mean_c_index"], rows=bands),
            "loco_size_correlation": ReportTable(name="loco_size_correlation", columns=["x", "y", "r", "p"],
                                                 rows=correlation)}


def fairness_strata(dataset: CohortArrays,
                    prediction: HoldoutPrediction,
                    cohort_filter: CohortFilter = CohortFilter.MCI_ONLY,
                    horizon: float = 3.0,
                    gap_threshold: float = 0.05,
                    min_stratum_n: int = 30) -> tuple[List[StratumReport], ReportTable]:
    education_median = float(np.median(dataset.education))
    strata = {"overall": np.ones(len(dataset), dtype=bool),
              "female": dataset.female, "male": ~dataset.female,
              "age<=70": dataset.age <= 70, "age>70": dataset.age > 70,
              "education<median": dataset.education < education_median,
              "education>=median": dataset.education >= education_median}

    def restrict(mask) -> HoldoutPrediction:
        pick = lambda values: values[mask] if values is not None else None
        return HoldoutPrediction(risk=prediction.risk[mask], intercept_mean=pick(prediction.intercept_mean),
                                 intercept_lo=pick(prediction.intercept_lo), intercept_hi=pick(prediction.intercept_hi))

    reports, demographics = [], []
    overall_metrics = None
    for label, mask in strata.items():
        index = np.nonzero(mask)[0]
        if len(index) == 0:
            continue
        metrics, flags = holdout_metrics(dataset.subset(index), restrict(mask), cohort_filter, horizon)
        if overall_metrics is None:
            overall_metrics = metrics
        deltas = {name: (value - overall_metrics[name]
                         if value is not None and overall_metrics.get(name) is not None else None)
                  for name, value in metrics.items()}
        if len(index) < min_stratum_n:
            flags.append("small_sample")
        if deltas.get("c_index") is not None and abs(deltas["c_index"]) > gap_threshold:
            flags.append("c_index_gap")
            logger.warning(f"Stratum {label}: C-index deviates {deltas['c_index']:+.3f} from overall")
        reports.append(StratumReport(stratum=label, n=len(index), metrics=metrics, deltas=deltas, flags=flags))
        demographics.append({"stratum": label, "n": len(index), "event_rate": float(dataset.events[index].mean()),
                             "mean_age": float(dataset.age[index].mean()),
                             "mean_education": float(dataset.education[index].mean()),
                             "female_pct": float(100 * dataset.female[index].mean())})
    return reports, ReportTable(name="fairness_demographics",
                                columns=["stratum", "n", "event_rate", "mean_age", "mean_education", "female_pct"],
                                rows=demographics)
