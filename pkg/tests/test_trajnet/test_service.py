import pytest
import numpy as np
import pandas as pd
from scipy import stats

from models.cohort import GeneratorConfig
from models.errors import ParameterError, TrainingError
from models.network import TrajNetCheckpoint
from models.trajectory import Z_95
from numcore.service import attention_apply
from trajnet.service import (TrajNetModel, TrajectoryNetworkService, LinearTrajectoryBaseline, traj_forward,
                             nll_loss, calibration_loss, objective, evaluation_loss, traj_train, mc_samples,
                             mc_predict, trajectory_metrics, write_predictions)


def small_model(seed=0, dropout=0.0, calibration_weight=0.1, weight_decay=1e-4, width=16, input_dim=3):
    return TrajNetModel(input_dim=input_dim, width=width, dropout=dropout, weight_decay=weight_decay,
                        calibration_weight=calibration_weight, seed=seed)


def noise_problem(n, seed, input_dim=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, input_dim)), rng.normal(size=(n, 3))


def test_zero_head_weights_return_biases():
    # SETUP
    model = small_model()
    for index, head in enumerate(model.heads):
        head.weights[0][:] = 0.0
        head.biases[0][:] = index - 2.0

    # RUN
    mu, logvar = traj_forward(model, np.array([0.3, -1.0, 2.0]))

    # ASSERT
    np.testing.assert_array_equal(mu, [-2.0, -1.0, 0.0])
    np.testing.assert_array_equal(logvar, [1.0, 2.0, 3.0])


def test_forward_matches_component_composition():
    # SETUP
    model = small_model(seed=4)
    x = np.random.default_rng(1).normal(size=(5, 3))

    # RUN
    mu, logvar = traj_forward(model, x)

    # ASSERT
    hidden = model.encoder.forward(attention_apply(model.attention, x))[0]
    outputs = np.column_stack([head.forward(hidden)[0][:, 0] for head in model.heads])
    np.testing.assert_allclose(mu, outputs[:, :3])
    np.testing.assert_allclose(logvar, outputs[:, 3:])


def test_seeded_dropout_is_repeatable():
    model = small_model(dropout=0.3)
    x = np.ones((4, 3))
    first = traj_forward(model, x, dropout_active=True, rng=np.random.default_rng(5))
    second = traj_forward(model, x, dropout_active=True, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(first[0], second[0])
    np.testing.assert_array_equal(first[1], second[1])


def test_logvar_is_clamped():
    # SETUP
    model = small_model()
    model.heads[3].biases[0][:] = 50.0
    model.heads[4].biases[0][:] = -50.0

    # RUN
    _, logvar = traj_forward(model, np.zeros(3))

    # ASSERT
    assert logvar[0] == 10.0 and logvar[1] == -10.0


def test_nll_loss_values():
    assert nll_loss(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3))) == 0.0
    assert nll_loss(np.zeros((1, 3)), np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])) == 0.5


def test_nll_loss_matches_gaussian_log_density():
    # SETUP
    rng = np.random.default_rng(2)
    mu, logvar, targets = rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.normal(size=(6, 3))

    # RUN
    loss = nll_loss(mu, logvar, targets)

    # ASSERT
    density = stats.norm.logpdf(targets, loc=mu, scale=np.exp(0.5 * logvar))
    constant = 0.5 * np.log(2 * np.pi) * 3
    assert loss == pytest.approx(-np.mean(density.sum(axis=1)) - constant, rel=1e-12)


def test_calibration_loss_all_inside():
    mu = np.zeros((10, 3))
    assert calibration_loss(mu, mu, mu) == pytest.approx(0.15)


def test_calibration_loss_nominal_coverage():
    # SETUP
    targets = np.zeros((20, 3))
    targets[0] = 3.0

    # RUN
    loss = calibration_loss(np.zeros((20, 3)), np.zeros((20, 3)), targets)

    # ASSERT
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_calibration_loss_matches_counting():
    # SETUP
    rng = np.random.default_rng(3)
    mu, logvar, targets = rng.normal(size=(40, 3)), rng.normal(size=(40, 3)), rng.normal(size=(40, 3))

    # RUN
    loss = calibration_loss(mu, logvar, targets)

    # ASSERT
    expected = 0.0
    for column in range(3):
        sd = np.exp(0.5 * logvar[:, column])
        inside = sum(abs(t - m) <= Z_95 * s for t, m, s in zip(targets[:, column], mu[:, column], sd))
        expected += abs(inside / 40 - 0.95)
    assert loss == pytest.approx(expected, abs=1e-12)


def test_calibration_loss_needs_a_batch():
    with pytest.raises(ParameterError):
        calibration_loss(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)))


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_objective_gradient_matches_finite_differences(seed):
    # SETUP
    model = small_model(seed=seed, dropout=0.2, calibration_weight=0.5, weight_decay=1e-3)
    x, targets = noise_problem(8, seed)
    masks = model.sample_masks(8, np.random.default_rng(seed))

    # RUN
    _, analytic = objective(model, x, targets, masks=masks)

    # ASSERT
    numeric = []
    step = 1e-6
    for param in model.parameters():
        grad = np.zeros_like(param)
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + step
            upper = objective(model, x, targets, masks=masks, with_gradients=False)[0]
            param[index] = original - step
            lower = objective(model, x, targets, masks=masks, with_gradients=False)[0]
            param[index] = original
            grad[index] = (upper - lower) / (2 * step)
        numeric.append(grad)
    analytic, numeric = np.concatenate([g.ravel() for g in analytic]), np.concatenate([g.ravel() for g in numeric])
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic + numeric) < 1e-4


def test_traj_train_memorizes_a_single_subject():
    # SETUP
    model = small_model(seed=1, calibration_weight=0.0, weight_decay=0.0)
    x, targets = np.array([[0.5, -0.2, 1.0]]), np.array([[1.0, -0.5, 0.25]])

    # RUN
    traj_train(model, x, targets, max_epochs=1000, patience=1000, batch_size=1, learning_rate=1e-2)

    # ASSERT
    mu, _ = traj_forward(model, x)
    np.testing.assert_allclose(mu, targets, atol=0.05)


def test_traj_train_restores_best_epoch():
    # SETUP
    x, targets = noise_problem(40, seed=5)
    x_val, targets_val = noise_problem(30, seed=6)
    model = small_model(seed=2)

    # RUN
    _, history = traj_train(model, x, targets, x_val, targets_val, max_epochs=200, patience=3,
                            batch_size=8, learning_rate=1e-2, seed=7)

    # ASSERT
    assert history.stopped_early
    assert len(history.epochs) == history.best_epoch + 3
    best = min(epoch.val_loss for epoch in history.epochs)
    assert evaluation_loss(model, x_val, targets_val) == pytest.approx(best, rel=1e-12)
    assert model.history is history


def test_traj_train_without_validation_monitors_training_loss():
    x, targets = noise_problem(20, seed=8)
    _, history = traj_train(small_model(), x, targets, max_epochs=5, batch_size=10)
    assert len(history.epochs) == 5
    assert all(epoch.val_loss is None for epoch in history.epochs)


def test_traj_train_diverges_on_missing_target():
    # SETUP
    x, targets = noise_problem(10, seed=9)
    targets[4, 1] = np.nan

    # RUN
    with pytest.raises(TrainingError) as err:
        traj_train(small_model(), x, targets, max_epochs=5, batch_size=10)

    # ASSERT
    assert err.value.epoch == 1


def test_mc_predict_without_dropout_has_no_epistemic_spread():
    x, _ = noise_problem(12, seed=10)
    means, aleatoric, epistemic = mc_predict(small_model(dropout=0.0), x, passes=10)
    assert np.all(epistemic == 0.0)
    np.testing.assert_allclose(means, traj_forward(small_model(dropout=0.0), x)[0])


def test_mc_predict_needs_two_passes():
    with pytest.raises(ParameterError):
        mc_predict(small_model(), np.zeros((2, 3)), passes=1)


def test_mc_predict_decomposition():
    # SETUP
    model = small_model(dropout=0.3, seed=3)
    x, _ = noise_problem(15, seed=11)

    # RUN
    means, aleatoric, epistemic = mc_predict(model, x, passes=25, seed=4)

    # ASSERT
    sample_means, sample_variances = mc_samples(model, x, passes=25, seed=4)
    np.testing.assert_allclose(means, sample_means.mean(axis=0))
    np.testing.assert_allclose(aleatoric, sample_variances.mean(axis=0))
    np.testing.assert_allclose(epistemic, sample_means.var(axis=0), rtol=1e-9, atol=1e-15)
    assert np.all(epistemic > 0.0)


def test_mc_epistemic_grows_with_dropout():
    # SETUP
    x, _ = noise_problem(50, seed=12)
    wins = 0

    # RUN
    for seed in range(20):
        low = mc_predict(small_model(dropout=0.1, seed=seed), x, passes=30, seed=seed)[2].mean()
        high = mc_predict(small_model(dropout=0.3, seed=seed), x, passes=30, seed=seed)[2].mean()
        wins += int(high > low)

    # ASSERT
    assert wins >= 18


def test_attention_importance_is_a_distribution():
    x, _ = noise_problem(30, seed=13, input_dim=5)
    importance = small_model(input_dim=5).attention_importance(x)
    assert importance.shape == (5,)
    assert importance.sum() == pytest.approx(1.0)
    assert np.all(importance > 0.0)


def test_model_rejects_narrow_width():
    with pytest.raises(ParameterError):
        TrajNetModel(width=2)


def test_linear_baseline(cohort_arrays_fixture):
    # SETUP
    dataset = cohort_arrays_fixture

    # RUN
    baseline = LinearTrajectoryBaseline().fit(dataset)
    predictions = baseline.predict(dataset)

    # ASSERT
    assert len(predictions) == len(dataset)
    assert all(prediction.epistemic == [0.0, 0.0, 0.0] for prediction in predictions)
    reports = {report.metric: report for report in trajectory_metrics(predictions, dataset, method="linear")}
    assert reports["r2_alpha"].value > 0.0
    assert reports["r2_alpha"].stratum == "linear"
    assert reports["r2_alpha"].n == len(dataset.trajectory_subset())


def test_service_fit_and_predict(cohort_arrays_fixture, tmp_path):
    # SETUP
    dataset = cohort_arrays_fixture
    order = np.random.default_rng(0).permutation(len(dataset))
    train, val, test = (dataset.subset(order[:200]), dataset.subset(order[200:260]), dataset.subset(order[260:]))
    service = TrajectoryNetworkService(width=32, max_epochs=30, patience=5, mc_passes=10, seed=3)

    # RUN
    model = service.fit(train, val)
    predictions = service.predict(model, test)

    # ASSERT
    assert [prediction.subject_id for prediction in predictions] == [str(i) for i in test.ids]
    for prediction in predictions:
        np.testing.assert_allclose(prediction.total, np.add(prediction.aleatoric, prediction.epistemic))
        assert all(lo < mean < hi for (lo, hi), mean in zip(prediction.intervals, prediction.means))
    reports = trajectory_metrics(predictions, test)
    assert len(reports) == 12
    assert all(0.0 <= report.value <= 1.0 for report in reports if report.metric.startswith("picp"))

    restored = TrajNetModel.from_checkpoint(TrajNetCheckpoint.model_validate_json(
        model.to_checkpoint().model_dump_json()))
    again = service.predict(restored, test)
    np.testing.assert_allclose([p.means for p in again], [p.means for p in predictions], rtol=1e-12)

    path = str(tmp_path / "trajectory_predictions.csv")
    write_predictions(predictions, path)
    frame = pd.read_csv(path, dtype={"subject_id": str})
    assert list(frame.columns[:4]) == ["subject_id", "mu_a", "mu_b", "mu_g"]
    assert len(frame) == len(test)
    np.testing.assert_allclose(frame["sd_total_a"] ** 2, [p.total[0] for p in predictions], rtol=1e-9)


@pytest.mark.slow
def test_full_cohort_calibration(harmonized_arrays_factory_fixture):
    # SETUP
    dataset = harmonized_arrays_factory_fixture(GeneratorConfig(n_subjects=2000, seed=21), with_targets=True)
    order = np.random.default_rng(1).permutation(len(dataset))
    cut_val, cut_test = int(0.7 * len(dataset)), int(0.85 * len(dataset))
    service = TrajectoryNetworkService(seed=5)

    # RUN
    model = service.fit(dataset.subset(order[:cut_val]), dataset.subset(order[cut_val:cut_test]))
    test = dataset.subset(order[cut_test:])
    reports = {report.metric: report.value for report in trajectory_metrics(service.predict(model, test), test)}

    # ASSERT
    for component in ("alpha", "beta", "gamma"):
        assert 0.90 <= reports[f"picp_{component}"] <= 0.99
    assert reports["r2_alpha"] > 0.25
