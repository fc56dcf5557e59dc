import pytest
import numpy as np
import pandas as pd

from dataio.service import DataIntegrationService, read_records
from models.cohort import GeneratorConfig, SubjectTruth, HazardLink
from models.harmonization import AtnThresholds
from models.errors import JoinError
from survnet.service import linear_coxph_fit
from synthcohort.service import CohortGenerator, draw_event_times, oracle_metrics, theoretical_c_index, write_cohort


def metric_values(reports):
    return {report.metric: report.value for report in reports}


def test_generate_is_deterministic():
    # SETUP
    config = GeneratorConfig(n_subjects=50, n_centers=3, seed=5)

    # RUN
    first, second = CohortGenerator(config).generate(), CohortGenerator(config).generate()

    # ASSERT
    for name in ("csf", "visits", "demographics"):
        pd.testing.assert_frame_equal(getattr(first, name), getattr(second, name))
    assert first.truth == second.truth


def test_generate_changes_with_seed():
    first = CohortGenerator(GeneratorConfig(n_subjects=50, seed=1)).generate()
    second = CohortGenerator(GeneratorConfig(n_subjects=50, seed=2)).generate()
    assert first.truth != second.truth


def test_generate_without_censoring_everyone_converts():
    # SETUP
    config = GeneratorConfig(n_subjects=100, n_centers=2, censoring_rate=0.0, max_follow_up=float("inf"),
                             baseline_hazard=0.5, seed=3)

    # RUN
    subjects = CohortGenerator(config).simulate()

    # ASSERT
    assert all(subject.truth.observed_event == 1 for subject in subjects)
    assert all(subject.truth.censoring_time is None for subject in subjects)
    assert all(subject.truth.observed_time >= subject.truth.event_time for subject in subjects)


def test_generate_unbounded_follow_up_rejected():
    with pytest.raises(ValueError):
        GeneratorConfig(censoring_rate=0.0, baseline_hazard=0.0, max_follow_up=float("inf"))


def test_generate_population_curve_without_variation():
    # SETUP
    config = GeneratorConfig(n_subjects=30, random_covariance=np.zeros((3, 3)).tolist(), residual_variance=0.0,
                             trajectory_link=[0.0, 0.0, 0.0], cdrsb_grid=None, seed=8)
    fixed = np.asarray(config.fixed_effects)

    # RUN
    subjects = CohortGenerator(config).simulate()

    # ASSERT
    for subject in subjects:
        times = np.asarray(subject.visit_times)
        expected = np.clip(np.vander(times, 3, increasing=True) @ fixed, 0.0, 18.0)
        np.testing.assert_allclose(subject.cdrsb, expected, atol=1e-10)
        assert subject.truth.alpha == pytest.approx(fixed[0])


def test_generate_pathology_shifts_curves_along_trajectory_link():
    # SETUP
    config = GeneratorConfig(n_subjects=60, random_covariance=np.zeros((3, 3)).tolist(), residual_variance=0.0,
                             cdrsb_grid=None, seed=12)
    fixed, link = np.asarray(config.fixed_effects), np.asarray(config.trajectory_link)

    # RUN
    subjects = CohortGenerator(config).simulate()

    # ASSERT
    shifts = []
    for subject in subjects:
        theta = np.array([subject.truth.alpha, subject.truth.beta, subject.truth.gamma])
        times = np.asarray(subject.visit_times)
        expected = np.clip(np.vander(times, 3, increasing=True) @ theta, 0.0, 18.0)
        np.testing.assert_allclose(subject.cdrsb, expected, atol=1e-10)
        pathology = (theta - fixed) / link
        np.testing.assert_allclose(pathology, pathology[0], atol=1e-10)
        shifts.append(pathology[0])
    assert np.std(shifts) > 0.1
    assert np.mean(shifts) == pytest.approx(0.0, abs=1e-10)


def test_generator_config_rejects_short_trajectory_link():
    with pytest.raises(ValueError):
        GeneratorConfig(trajectory_link=[1.0, 0.5])


def test_generate_visits_respect_follow_up():
    config = GeneratorConfig(n_subjects=200, max_follow_up=4.0, seed=9)
    for subject in CohortGenerator(config).simulate():
        assert subject.visit_times[0] == 0.0
        assert subject.visit_times[-1] <= 4.0
        assert np.all(np.diff(subject.visit_times) >= 0.25)


def test_generated_cohort_integrates(generated_cohort_fixture, integrated_records_fixture):
    # SETUP
    cohort, _ = generated_cohort_fixture
    truth = {item.subject_id: item for item in cohort.truth}
    records = integrated_records_fixture

    # ASSERT
    assert len(records) >= 0.85 * len(truth)
    for record in records:
        expected = truth[record.subject_id]
        assert record.event == expected.observed_event
        assert record.event_time == pytest.approx(expected.observed_time, abs=2 / 365)
        assert record.center_id == expected.center_id


def test_write_cohort_ground_truth(generated_cohort_fixture):
    # SETUP
    cohort, paths = generated_cohort_fixture

    # RUN
    truth = read_records(paths["ground_truth"], SubjectTruth)

    # ASSERT
    assert truth == cohort.truth
    assert set(paths) == {"csf", "visits", "demographics", "ground_truth"}


def test_draw_event_times_proportional_hazards():
    # SETUP
    rng = np.random.default_rng(0)

    # RUN
    reference = draw_event_times(np.zeros(20000), 0.1, rng)
    doubled = draw_event_times(np.full(20000, np.log(2.0)), 0.1, rng)

    # ASSERT
    assert np.median(reference) == pytest.approx(np.log(2) / 0.1, rel=0.05)
    assert np.median(doubled) / np.median(reference) == pytest.approx(0.5, rel=0.05)


def test_draw_event_times_zero_rate():
    assert np.all(np.isinf(draw_event_times(np.zeros(5), 0.0, np.random.default_rng(0))))


def test_oracle_metrics_perfect_predictions(generated_cohort_fixture):
    # SETUP
    cohort, _ = generated_cohort_fixture
    predictions = {item.subject_id: {"alpha": item.alpha, "beta": item.beta, "gamma": item.gamma,
                                     "risk": item.log_risk} for item in cohort.truth}

    # RUN
    values = metric_values(oracle_metrics(cohort.truth, predictions))

    # ASSERT
    for name in ("alpha", "beta", "gamma"):
        assert values[f"r2_{name}_vs_truth"] == pytest.approx(1.0)
        assert values[f"rmse_{name}_vs_truth"] == pytest.approx(0.0)
    assert values["c_index_vs_true_risk"] == pytest.approx(1.0)
    assert 0.5 < values["c_index_vs_outcomes"] < 1.0


def test_oracle_metrics_mean_prediction(generated_cohort_fixture):
    # SETUP
    cohort, _ = generated_cohort_fixture
    mean_alpha = np.mean([item.alpha for item in cohort.truth])
    predictions = {item.subject_id: {"alpha": mean_alpha} for item in cohort.truth}

    # RUN
    values = metric_values(oracle_metrics(cohort.truth, predictions))

    # ASSERT
    assert values["r2_alpha_vs_truth"] == pytest.approx(0.0, abs=1e-12)
    assert "c_index_vs_true_risk" not in values


def test_oracle_metrics_unknown_subject(generated_cohort_fixture):
    cohort, _ = generated_cohort_fixture
    with pytest.raises(JoinError):
        oracle_metrics(cohort.truth, {"NACC999999": {"alpha": 1.0}})


def test_theoretical_c_index_above_chance():
    value = theoretical_c_index(GeneratorConfig(seed=4), n=3000)
    assert 0.6 < value < 1.0


@pytest.mark.slow
def test_default_cohort_profile(tmp_path):
    # SETUP
    cohort = CohortGenerator(GeneratorConfig(seed=2024)).generate()
    paths = write_cohort(cohort, str(tmp_path))
    service = DataIntegrationService()

    # RUN
    parsed = service.parse_dataset(paths["csf"], paths["visits"], paths["demographics"])
    records = service.integrate(parsed.csf, parsed.visits, parsed.demographics).records

    # ASSERT
    event_rate = np.mean([item.observed_event for item in cohort.truth])
    assert 0.15 <= event_rate <= 0.30
    assert np.mean([record.age for record in records]) == pytest.approx(71.4, abs=2.0)


@pytest.mark.slow
@pytest.mark.parametrize("link", [HazardLink.LINEAR, HazardLink.NONLINEAR])
def test_hazard_weights_recovered_by_cox_fit(link):
    # SETUP
    config = GeneratorConfig(n_subjects=4000, hazard_link=link, seed=21)
    weights = config.hazard_weights
    truth = [subject.truth for subject in CohortGenerator(config).simulate()]
    event = np.array([np.inf if item.event_time is None else item.event_time for item in truth])
    censor = np.array([np.inf if item.censoring_time is None else item.censoring_time for item in truth])
    exit_time = np.minimum(np.minimum(event, censor), config.max_follow_up)
    z_ptau = np.array([item.z_ptau for item in truth])
    z_inv_abeta42 = np.array([item.z_inv_abeta42 for item in truth])
    positive = np.array([item.abeta42 < AtnThresholds().abeta42 for item in truth])
    if link == HazardLink.LINEAR:
        features = np.column_stack([z_ptau, z_inv_abeta42])
        expected = [weights.ptau, weights.inv_abeta42]
    else:
        features = np.column_stack([z_ptau * positive, z_ptau * ~positive, z_inv_abeta42])
        expected = [weights.ptau + weights.ptau_amyloid_positive, weights.ptau + weights.ptau_amyloid_negative,
                    weights.inv_abeta42]

    # RUN
    model = linear_coxph_fit(features, exit_time, (event <= exit_time).astype(int))

    # ASSERT
    assert model.ridge == 0.0
    deviation = np.abs(np.asarray(model.coefficients) - expected)
    assert np.all(deviation <= 3 * np.asarray(model.standard_errors))
