import pytest
import numpy as np

from models.cohort import CohortArrays, CohortFilter, GeneratorConfig
from models.errors import InsufficientDataError
from models.report import CvProtocol, CvRow
from models.run import RunConfig
from evalstats.validation_service import (HoldoutPrediction, stratified_folds, repeated_cv, cv_summary,
                                          compare_methods, holdout_metrics, loco_harness, loco_summary,
                                          fairness_strata, task_seed, stratified_split,
                                          stratified_holdout)
from commands.pipeline import PipelineCommandsV1


def make_arrays(n=200, seed=0, centers=None, age=None):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    times = rng.exponential(1.0 / (0.2 * np.exp(X[:, 0])))
    censoring = rng.exponential(8.0, n)
    targets = np.column_stack([1.0 + X[:, 1], 0.5 + 0.1 * X[:, 2], np.zeros(n)])
    return CohortArrays(ids=np.array([f"S{index:04d}" for index in range(n)]), X=X,
                        times=np.minimum(times, censoring) + 0.01, events=(times <= censoring).astype(int),
                        centers=np.asarray(centers) if centers is not None else rng.choice(["1", "2"], n),
                        age=np.asarray(age, dtype=float) if age is not None else rng.uniform(55.0, 85.0, n),
                        female=rng.random(n) < 0.5, education=rng.integers(8, 21, n).astype(float),
                        mci_baseline=np.ones(n, dtype=bool), targets=targets, reliable=np.ones(n, dtype=bool))


def first_feature(train, test, seed) -> HoldoutPrediction:
    return HoldoutPrediction(risk=test.X[:, 0], intercept_mean=test.targets[:, 0],
                             intercept_lo=test.targets[:, 0] - 0.5, intercept_hi=test.targets[:, 0] + 0.5)


def noise(train, test, seed) -> HoldoutPrediction:
    return HoldoutPrediction(risk=np.random.default_rng(seed).normal(size=len(test)))


def test_task_seed_is_deterministic():
    assert task_seed(3, 1, 2) == task_seed(3, 1, 2)
    assert task_seed(3, 1, 2) != task_seed(3, 2, 1)


def test_stratified_split_partitions_subjects():
    # SETUP
    events = np.array([1] * 60 + [0] * 240)

    # RUN
    train, val, test = stratified_split(events, 0.722, 0.128, 0.150, seed=4)

    # ASSERT
    np.testing.assert_array_equal(np.sort(np.concatenate([train, val, test])), np.arange(300))
    assert len(test) == 45
    assert len(val) == pytest.approx(300 * 0.128, abs=1)
    for part in (train, val, test):
        assert events[part].mean() == pytest.approx(0.2, abs=0.03)


def test_stratified_split_is_reproducible():
    events = np.random.default_rng(0).integers(0, 2, 120)
    first, second = stratified_split(events, seed=9), stratified_split(events, seed=9)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


def test_stratified_split_without_events_falls_back_to_random():
    train, val, test = stratified_split(np.zeros(50, dtype=int), seed=1)
    assert len(train) + len(val) + len(test) == 50


def test_stratified_split_too_small():
    with pytest.raises(InsufficientDataError):
        stratified_split([1, 0])


def test_stratified_holdout_zero_fraction():
    kept, held = stratified_holdout(np.arange(10, 20), np.zeros(10), 0.0)
    np.testing.assert_array_equal(kept, np.arange(10, 20))
    assert len(held) == 0


def test_stratified_folds_cover_every_subject():
    # SETUP
    events = np.array([1] * 20 + [0] * 80)

    # RUN
    folds = stratified_folds(events, CvProtocol(), repeat=0)

    # ASSERT
    assert len(folds) == 5
    np.testing.assert_array_equal(np.sort(np.concatenate(folds)), np.arange(100))
    assert all(events[fold].sum() == 4 for fold in folds)


def test_stratified_folds_need_events():
    with pytest.raises(InsufficientDataError):
        stratified_folds(np.array([1, 1] + [0] * 50), CvProtocol(max_refolds=3), repeat=0)


def test_repeated_cv_row_count():
    # RUN
    rows = repeated_cv(make_arrays(), CvProtocol(), {"first": first_feature, "noise": noise})

    # ASSERT
    assert len(rows) == 50
    for method in ("first", "noise"):
        cells = {(row.repeat, row.fold) for row in rows if row.method == method}
        assert len(cells) == 25


def test_repeated_cv_identical_factories_pair_up():
    # RUN
    rows = repeated_cv(make_arrays(seed=1), CvProtocol(seed=4), {"a": first_feature, "b": first_feature}, jobs=4)

    # ASSERT
    by_method = {method: sorted((row.repeat, row.fold, row.c_index, row.n_test) for row in rows
                                if row.method == method) for method in ("a", "b")}
    assert by_method["a"] == by_method["b"]


def test_repeated_cv_is_reproducible():
    dataset = make_arrays(seed=2)
    first = repeated_cv(dataset, CvProtocol(seed=9), {"noise": noise}, jobs=3)
    second = repeated_cv(dataset, CvProtocol(seed=9), {"noise": noise}, jobs=1)
    assert sorted(first, key=lambda row: (row.repeat, row.fold)) == \
        sorted(second, key=lambda row: (row.repeat, row.fold))


def test_cv_summary_and_comparison():
    # SETUP
    rows = repeated_cv(make_arrays(n=300, seed=3), CvProtocol(), {"first": first_feature, "noise": noise})

    # RUN
    summary = cv_summary(rows)
    significance, multiple = compare_methods(rows, reference="first", resamples=500, permutations=200)

    # ASSERT
    means = {row["method"]: row["mean"] for row in summary.rows}
    assert means["first"] > means["noise"]
    assert len(significance.rows) == 1
    comparison = significance.rows[0]
    assert comparison["delta_c_index"] > 0 and comparison["wilcoxon_p"] < 0.01
    assert comparison["bootstrap_lo"] > 0
    assert multiple.rows[0]["holm_p"] == pytest.approx(comparison["wilcoxon_p"])


def test_compare_methods_with_too_few_folds(caplog):
    # SETUP
    rows = [CvRow(repeat=0, fold=fold, method=method, c_index=value, n_test=50, events_test=10)
            for method, values in (("first", [0.71, 0.74, 0.69]), ("noise", [0.52, 0.49, 0.55]))
            for fold, value in enumerate(values)]

    # RUN
    with caplog.at_level("WARNING"):
        significance, multiple = compare_methods(rows, reference="first", resamples=200, permutations=100)

    # ASSERT
    comparison = significance.rows[0]
    assert comparison["delta_c_index"] == pytest.approx(np.mean([0.19, 0.25, 0.14]))
    for column in ("wilcoxon_p", "bootstrap_lo", "bootstrap_hi", "bootstrap_p", "permutation_p"):
        assert comparison[column] is None
    assert multiple.rows == []
    assert "bootstrap" in caplog.text and "permutation" in caplog.text


def test_holdout_metrics_without_events():
    # SETUP
    dataset = make_arrays(n=40, seed=4)
    dataset.events[:] = 0

    # RUN
    metrics, flags = holdout_metrics(dataset, first_feature(dataset, dataset, 0))

    # ASSERT
    assert metrics["c_index"] is None and "undefined:c_index" in flags
    assert metrics["intercept_r2"] == pytest.approx(1.0)
    assert metrics["intercept_picp"] == 1.0


def test_holdout_metrics_filter():
    # SETUP
    dataset = make_arrays(n=100, seed=5)
    dataset.mci_baseline[:50] = False
    prediction = first_feature(dataset, dataset, 0)

    # RUN
    restricted, _ = holdout_metrics(dataset, prediction, CohortFilter.MCI_ONLY)
    everyone, _ = holdout_metrics(dataset, prediction, CohortFilter.ALL)

    # ASSERT
    subset = dataset.subset(np.arange(50, 100))
    assert restricted["c_index"] == pytest.approx(holdout_metrics(subset, first_feature(subset, subset, 0),
                                                                  CohortFilter.ALL)[0]["c_index"])
    assert restricted["c_index"] != everyone["c_index"]


def test_loco_harness_two_centers():
    # SETUP
    centers = ["1"] * 90 + ["2"] * 90 + ["3"] * 10
    dataset = make_arrays(n=190, seed=6, centers=centers)
    seen = []

    def tracking(train, test, seed):
        seen.append(set(train.centers))
        return first_feature(train, test, seed)

    # RUN
    reports = loco_harness(dataset, tracking)

    # ASSERT
    assert [report.stratum for report in reports] == ["1", "2"]
    assert [report.n for report in reports] == [90, 90]
    assert all("3" in centers_seen for centers_seen in seen)
    assert all(report.metrics["c_index"] is not None for report in reports)


@pytest.mark.slow
def test_loco_generated_cohort_is_stable_across_centers(harmonized_arrays_factory_fixture):
    # SETUP
    dataset = harmonized_arrays_factory_fixture(GeneratorConfig(n_subjects=2000, n_centers=8, seed=17),
                                                with_targets=True)
    config = RunConfig(seed=17, surv_width=64, max_epochs=300, patience=30, learning_rate=5e-3, mc_passes=10)
    factory = PipelineCommandsV1().__loco_factory__(config)

    # RUN
    reports = loco_harness(dataset, factory, min_center_n=config.min_center_n, seed=config.seed, jobs=2)

    # ASSERT
    values = np.array([report.metrics["c_index"] for report in reports], dtype=float)
    assert len(reports) == 8
    assert not np.isnan(values).any()
    assert values.std(ddof=1) < 0.10
    assert values.min() > 0.65


def test_loco_harness_needs_two_centers():
    dataset = make_arrays(n=60, seed=7, centers=["1"] * 50 + ["2"] * 10)
    with pytest.raises(InsufficientDataError):
        loco_harness(dataset, first_feature)


def test_loco_summary_tables():
    # SETUP
    centers = [str(index) for index in np.repeat(np.arange(1, 7), [25, 25, 60, 60, 150, 150])]
    dataset = make_arrays(n=470, seed=8, centers=centers)
    reports = loco_harness(dataset, first_feature, jobs=3)

    # RUN
    tables = loco_summary(reports)

    # ASSERT
    summary = {row["metric"]: row for row in tables["loco_summary"].rows}
    assert summary["c_index"]["centers"] == 6
    assert summary["c_index"]["sd"] < 0.1
    bands = {row["band"]: row["centers"] for row in tables["loco_bands"].rows}
    assert bands == {"small": 2, "medium": 2, "large": 2}


def test_fairness_strata_age_boundary():
    # SETUP
    age = np.array([70.0] * 10 + [71.0] * 10 + [60.0] * 20)
    dataset = make_arrays(n=40, seed=9, age=age)

    # RUN
    reports, demographics = fairness_strata(dataset, first_feature(dataset, dataset, 0))

    # ASSERT
    sizes = {report.stratum: report.n for report in reports}
    assert sizes["age<=70"] == 30 and sizes["age>70"] == 10
    overall = reports[0]
    assert overall.stratum == "overall" and overall.deltas["c_index"] == 0.0
    assert "small_sample" in next(report for report in reports if report.stratum == "age>70").flags
    assert len(demographics.rows) == len(reports)


def test_fairness_strata_flags_noisy_stratum():
    # SETUP
    dataset = make_arrays(n=1200, seed=10)
    older = dataset.age > 70
    risk = np.where(older, np.random.default_rng(11).normal(size=len(dataset)), dataset.X[:, 0])

    # RUN
    reports, _ = fairness_strata(dataset, HoldoutPrediction(risk=risk))

    # ASSERT
    by_stratum = {report.stratum: report for report in reports}
    assert by_stratum["age>70"].metrics["c_index"] < by_stratum["age<=70"].metrics["c_index"]
    assert "c_index_gap" in by_stratum["age>70"].flags
    assert "intercept_r2" not in by_stratum["overall"].metrics
