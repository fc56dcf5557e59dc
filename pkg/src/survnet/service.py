import logging
logger = logging.getLogger(__name__)
from typing import Dict, List

import numpy as np
import pandas as pd
from statsmodels.nonparametric.smoothers_lowess import lowess

from config import app_config
from evalstats.metric_service import c_index, km_fit, td_auc
from models.cohort import CohortArrays, CohortFilter
from models.errors import (DegenerateInputError, InsufficientDataError, ParameterError, TrainingError,
                           UndefinedMetricError)
from models.network import Activation, SurvNetCheckpoint, LinearCoxModel, TrainingHistory, EpochLoss
from models.report import MetricReport
from models.survival import BaselineHazard, SurvivalCurve, DEFAULT_HORIZONS
from numcore.service import DenseNet, OptimizerState, optimizer_step, fit_scaler

MIN_TRAINING_EVENTS = 10
RIDGE = 1e-6
SCORE_TOLERANCE = 1e-8
# information this small relative to its value at beta = 0 means the covariates separate the event order
SEPARATION_TOLERANCE = 1e-8
ICI_GROUPS = 10


def survival_arrays(scores, times, events) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scores, times, events = np.asarray(scores, dtype=float), np.asarray(times, dtype=float), np.asarray(events)
    if not len(scores) == len(times) == len(events):
        raise ParameterError(f"scores, times and events differ in length: {len(scores)}, {len(times)}, {len(events)}")
    return scores, times, events.astype(int)


def risk_set_log_sums(scores: np.ndarray, times: np.ndarray) -> np.ndarray:
    """log of sum(exp(score_j)) over the risk set {j: T_j >= T_i} of every subject."""
    order = np.argsort(times, kind="stable")
    sorted_times = times[order]
    suffix = np.logaddexp.accumulate(scores[order][::-1])[::-1]
    return suffix[np.searchsorted(sorted_times, times, side="left")]


def cox_partial_likelihood(scores, times, events) -> float:
    """Negative log partial likelihood, Breslow ties (every tied event sees the full risk set)."""
    scores, times, events = survival_arrays(scores, times, events)
    if len(scores) < 2:
        raise InsufficientDataError("partial likelihood needs at least two subjects")
    if not events.any():
        raise UndefinedMetricError("partial likelihood is undefined without events")
    observed = events == 1
    return float(-np.sum(scores[observed] - risk_set_log_sums(scores, times)[observed]))


def cox_gradient(scores, times, events) -> np.ndarray:
    scores, times, events = survival_arrays(scores, times, events)
    observed = events == 1
    event_times = times[observed]
    order = np.argsort(event_times, kind="stable")
    # log sum over events i with T_i <= T_j of 1 / (risk-set sum at T_i)
    cumulative = np.logaddexp.accumulate(-risk_set_log_sums(scores, times)[observed][order])
    position = np.searchsorted(event_times[order], times, side="right") - 1
    exposure = np.where(position >= 0, np.exp(scores + cumulative[np.maximum(position, 0)]), 0.0)
    return exposure - observed


def comparable_pairs(times, events) -> np.ndarray:
    """(i, j) with T_i < T_j and subject i converted."""
    times, events = np.asarray(times, dtype=float), np.asarray(events)
    return (times[:, None] < times[None, :]) & (events[:, None] == 1)


def ranking_loss(scores, times, events, margin: float = 0.1) -> float:
    """Mean hinge max(0, score_j - score_i + margin) over comparable pairs."""
    scores, times, events = survival_arrays(scores, times, events)
    pairs = comparable_pairs(times, events)
    count = pairs.sum()
    if count == 0:
        return 0.0
    hinge = np.maximum(0.0, scores[None, :] - scores[:, None] + margin)
    return float(np.sum(hinge[pairs]) / count)


def ranking_grad(scores, times, events, margin: float = 0.1) -> np.ndarray:
    scores, times, events = survival_arrays(scores, times, events)
    pairs = comparable_pairs(times, events)
    count = pairs.sum()
    if count == 0:
        return np.zeros_like(scores)
    active = pairs & (scores[None, :] - scores[:, None] + margin > 0)
    return (active.sum(axis=0) - active.sum(axis=1)) / count


class SurvNetModel:
    """ReLU risk network with a scalar log-risk output."""

    def __init__(self,
                 input_dim: int = 10,
                 width: int = 128,
                 margin: float = 0.1,
                 ranking_weight: float = 0.1,
                 weight_decay: float = 1e-4,
                 seed: int = 0) -> None:
        if width < 2:
            raise ParameterError(f"width must be at least 2, got {width}")
        if margin <= 0:
            raise ParameterError(f"ranking margin must be positive, got {margin}")
        self.network = DenseNet([input_dim, width, width // 2, 1],
                                [Activation.RELU, Activation.RELU, Activation.IDENTITY], seed=seed)
        self.margin = margin
        self.ranking_weight = ranking_weight
        self.weight_decay = weight_decay
        self.input_scaler = None
        self.baseline_hazard: BaselineHazard | None = None
        self.history: TrainingHistory | None = None

    @property
    def parameter_count(self) -> int:
        return self.network.parameter_count

    def parameters(self) -> List[np.ndarray]:
        return self.network.parameters()

    def mark_updated(self) -> None:
        self.network.mark_updated()

    def risk(self, x: np.ndarray) -> np.ndarray:
        return self.network.forward(np.atleast_2d(np.asarray(x, dtype=float)))[0][:, 0]

    def to_checkpoint(self) -> SurvNetCheckpoint:
        return SurvNetCheckpoint(network=self.network.to_checkpoint(), margin=self.margin,
                                 ranking_weight=self.ranking_weight, weight_decay=self.weight_decay,
                                 input_scaler=self.input_scaler, baseline_hazard=self.baseline_hazard,
                                 history=self.history)

    @classmethod
    def from_checkpoint(cls, checkpoint: SurvNetCheckpoint) -> "SurvNetModel":
        model = cls.__new__(cls)
        model.network = DenseNet.from_checkpoint(checkpoint.network)
        model.margin = checkpoint.margin
        model.ranking_weight = checkpoint.ranking_weight
        model.weight_decay = checkpoint.weight_decay
        model.input_scaler = checkpoint.input_scaler
        model.baseline_hazard = checkpoint.baseline_hazard
        model.history = checkpoint.history
        return model


def surv_objective(model: SurvNetModel,
                   x: np.ndarray,
                   times: np.ndarray,
                   events: np.ndarray,
                   with_gradients: bool = True) -> tuple[float, List[np.ndarray] | None]:
    """Partial likelihood per event + ranking weight * ranking hinge + weight decay * squared parameter norm."""
    output, cache = model.network.forward(x)
    scores = output[:, 0]
    n_events = max(int(np.sum(events)), 1)
    params = model.parameters()
    loss = (cox_partial_likelihood(scores, times, events) / n_events
            + model.ranking_weight * ranking_loss(scores, times, events, model.margin)
            + model.weight_decay * sum(float(np.sum(p * p)) for p in params))
    if not with_gradients:
        return loss, None
    score_grad = cox_gradient(scores, times, events) / n_events
    if model.ranking_weight > 0:
        score_grad = score_grad + model.ranking_weight * ranking_grad(scores, times, events, model.margin)
    grads = model.network.backward(cache, score_grad[:, None]).as_list()
    return loss, [grad + 2.0 * model.weight_decay * param for grad, param in zip(grads, params)]


def surv_train(model: SurvNetModel,
               x: np.ndarray,
               times: np.ndarray,
               events: np.ndarray,
               x_val: np.ndarray = None,
               times_val: np.ndarray = None,
               events_val: np.ndarray = None,
               max_epochs: int = None,
               patience: int = 15,
               learning_rate: float = None) -> tuple[SurvNetModel, TrainingHistory]:
    """Full-batch Adam; risk sets span the whole training set."""
    max_epochs = max_epochs or app_config.MAX_EPOCHS
    learning_rate = learning_rate or app_config.LEARNING_RATE
    x, times, events = np.asarray(x, dtype=float), np.asarray(times, dtype=float), np.asarray(events, dtype=int)
    if events.sum() < MIN_TRAINING_EVENTS:
        raise InsufficientDataError(f"survival training needs {MIN_TRAINING_EVENTS} events, got {int(events.sum())}")
    with_val = x_val is not None and len(x_val) >= 2 and np.sum(events_val) > 0
    if x_val is not None and not with_val:
        logger.warning("Validation set is too small or has no events, early stopping monitors the training loss")
    monitored = (np.asarray(x_val, dtype=float), np.asarray(times_val, dtype=float),
                 np.asarray(events_val, dtype=int)) if with_val else (x, times, events)
    state = OptimizerState.for_parameters(model.parameters(), learning_rate=learning_rate)
    history = TrainingHistory()
    best_loss, best_params, waited = np.inf, [p.copy() for p in model.parameters()], 0

    for epoch in range(1, max_epochs + 1):
        loss, grads = surv_objective(model, x, times, events)
        if not np.isfinite(loss):
            raise TrainingError(f"survival loss diverged at epoch {epoch}", epoch=epoch)
        optimizer_step(model.parameters(), grads, state)
        model.mark_updated()
        monitored_loss = surv_objective(model, *monitored, with_gradients=False)[0]
        if not np.isfinite(monitored_loss):
            raise TrainingError(f"monitored survival loss diverged at epoch {epoch}", epoch=epoch)
        history.epochs.append(EpochLoss(epoch=epoch, train_loss=loss, val_loss=monitored_loss if with_val else None))
        if monitored_loss < best_loss:
            best_loss, best_params, waited = monitored_loss, [p.copy() for p in model.parameters()], 0
            history.best_epoch = epoch
        else:
            waited += 1
            if waited >= patience:
                history.stopped_early = True
                break

    for param, best in zip(model.parameters(), best_params):
        param[...] = best
    model.mark_updated()
    model.history = history
    logger.info(f"Survival network trained {len(history.epochs)} epochs, best loss {best_loss:.4f} "
                f"at epoch {history.best_epoch}")
    return model, history


def breslow_fit(scores, times, events) -> BaselineHazard:
    """Cumulative baseline hazard: sum over event times t_k <= t of d_k / sum(exp(score_j)) over the risk set."""
    scores, times, events = survival_arrays(scores, times, events)
    if not events.any():
        raise UndefinedMetricError("baseline hazard needs at least one event")
    event_times, counts = np.unique(times[events == 1], return_counts=True)
    order = np.argsort(times, kind="stable")
    suffix = np.logaddexp.accumulate(scores[order][::-1])[::-1]
    log_sums = suffix[np.searchsorted(times[order], event_times, side="left")]
    return BaselineHazard(times=event_times.tolist(), cumulative_hazard=np.cumsum(counts * np.exp(-log_sums)).tolist())


def survival_curve(hazard: BaselineHazard, psi: float) -> SurvivalCurve:
    return SurvivalCurve(risk_score=float(psi), hazard=hazard)


def survival_row(subject_id: str, curve: SurvivalCurve, horizons: List[float] = DEFAULT_HORIZONS) -> Dict:
    return {"subject_id": subject_id, "psi": curve.risk_score, **curve.horizons(horizons),
            "median_survival": curve.median_survival()}


def cox_terms(X: np.ndarray, times: np.ndarray, events: np.ndarray,
                  beta: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Log partial likelihood, score and information at `beta`, Breslow ties."""
    eta = X @ beta
    order = np.argsort(times, kind="stable")
    Xs, ts, es, eta_s = X[order], times[order], events[order] == 1, eta[order]
    weights = np.exp(eta_s - eta_s.max())
    s0 = np.cumsum(weights[::-1])[::-1]
    s1 = np.cumsum((weights[:, None] * Xs)[::-1], axis=0)[::-1]
    s2 = np.cumsum((weights[:, None, None] * Xs[:, :, None] * Xs[:, None, :])[::-1], axis=0)[::-1]
    start = np.searchsorted(ts, ts[es], side="left")
    mean = s1[start] / s0[start, None]
    log_likelihood = float(np.sum(eta_s[es] - eta_s.max() - np.log(s0[start])))
    score = np.sum(Xs[es] - mean, axis=0)
    information = np.sum(s2[start] / s0[start, None, None] - mean[:, :, None] * mean[:, None, :], axis=0)
    return log_likelihood, score, information


def linear_coxph_fit(features, times, events, max_iterations: int = 50) -> LinearCoxModel:
    """Newton-Raphson on the partial likelihood with linear risk x'beta; a small ridge is added if the information
    matrix is singular or vanishes along the iterations (separation)."""
    X = np.asarray(features, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    times, events = np.asarray(times, dtype=float), np.asarray(events, dtype=int)
    n, p = X.shape
    if n <= p:
        raise InsufficientDataError(f"linear Cox needs more subjects than covariates, got {n} for {p}")
    if not events.any():
        raise UndefinedMetricError("linear Cox needs at least one event")
    constant = np.nonzero(np.ptp(X, axis=0) == 0)[0]
    if len(constant):
        raise DegenerateInputError(f"covariates {constant.tolist()} have no variance")

    beta, ridge = np.zeros(p), 0.0
    log_likelihood, score, information = cox_terms(X, times, events, beta)
    information_scale = np.trace(information)
    iteration = 0
    for iteration in range(1, max_iterations + 1):
        if ridge == 0.0 and np.linalg.eigvalsh(information).min() < SEPARATION_TOLERANCE * information_scale:
            ridge = RIDGE
            logger.warning(f"Information matrix vanishing at iteration {iteration}, covariates separate the event "
                           f"order; adding ridge {ridge:g}")
        penalized_score = score - ridge * beta
        if np.linalg.norm(penalized_score) < SCORE_TOLERANCE:
            break
        try:
            if ridge == 0.0 and np.linalg.cond(information) > 1e12:
                raise np.linalg.LinAlgError("ill-conditioned information matrix")
            step = np.linalg.solve(information + ridge * np.eye(p), penalized_score)
        except np.linalg.LinAlgError as err:
            if ridge > 0.0:
                raise
            ridge = RIDGE
            logger.warning(f"Singular information matrix ({err}), adding ridge {ridge:g}")
            continue
        objective = log_likelihood - 0.5 * ridge * beta @ beta
        for _ in range(30):
            candidate = beta + step
            terms = cox_terms(X, times, events, candidate)
            if terms[0] - 0.5 * ridge * candidate @ candidate >= objective - 1e-12:
                break
            step = step / 2
        beta = candidate
        log_likelihood, score, information = terms
    else:
        logger.warning(f"Linear Cox did not converge in {max_iterations} iterations, "
                       f"score norm {np.linalg.norm(score - ridge * beta):.2e}")

    covariance = np.linalg.inv(information + ridge * np.eye(p))
    standard_errors = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    logger.info(f"Linear Cox converged after {iteration} iterations, log partial likelihood {log_likelihood:.3f}")
    return LinearCoxModel(coefficients=beta.tolist(), standard_errors=standard_errors.tolist(),
                          log_likelihood=log_likelihood, iterations=iteration, ridge=ridge,
                          baseline_hazard=breslow_fit(X @ beta, times, events))


def ici(predicted_probs, times, events, horizon: float = 3.0) -> float:
    """Integrated calibration index at `horizon`: decile-weighted mean |smoothed observed - predicted| where the
    observed event probability of each decile is its Kaplan-Meier estimate."""
    predicted = np.asarray(predicted_probs, dtype=float)
    times, events = np.asarray(times, dtype=float), np.asarray(events, dtype=int)
    if len(predicted) < ICI_GROUPS:
        raise InsufficientDataError(f"calibration index needs {ICI_GROUPS} subjects, got {len(predicted)}")
    if np.any((predicted < 0) | (predicted > 1)):
        raise ParameterError("predicted event probabilities must lie in [0, 1]")
    groups = np.array_split(np.argsort(predicted, kind="stable"), ICI_GROUPS)
    sizes = np.array([len(group) for group in groups], dtype=float)
    mean_predicted = np.array([predicted[group].mean() for group in groups])
    observed = np.array([1.0 - km_fit(times[group], events[group]).at(horizon) for group in groups], dtype=float)
    if len(np.unique(mean_predicted)) >= 3:
        smoothed = lowess(observed, mean_predicted, frac=2.0 / 3.0, it=0, delta=0.0, return_sorted=False)
    else:
        smoothed = np.full(ICI_GROUPS, np.average(observed, weights=sizes))
    return float(np.average(np.abs(smoothed - mean_predicted), weights=sizes))


def event_probabilities(risk: np.ndarray, hazard: BaselineHazard, horizon: float) -> np.ndarray:
    return 1.0 - np.exp(-hazard.at(horizon) * np.exp(np.asarray(risk, dtype=float)))


class SurvivalNetworkService:

    def __init__(self,
                 width: int = 128,
                 margin: float = 0.1,
                 ranking_weight: float = 0.1,
                 weight_decay: float = 1e-4,
                 patience: int = 15,
                 max_epochs: int = None,
                 learning_rate: float = None,
                 cohort_filter: CohortFilter = CohortFilter.MCI_ONLY,
                 seed: int = 0) -> None:
        self.width = width
        self.margin = margin
        self.ranking_weight = ranking_weight
        self.weight_decay = weight_decay
        self.patience = patience
        self.max_epochs = max_epochs or app_config.MAX_EPOCHS
        self.learning_rate = learning_rate or app_config.LEARNING_RATE
        self.cohort_filter = cohort_filter
        self.seed = seed

    def fit(self, train: CohortArrays, val: CohortArrays = None) -> SurvNetModel:
        train = train.survival_subset(self.cohort_filter)
        model = SurvNetModel(input_dim=train.X.shape[1], width=self.width, margin=self.margin,
                             ranking_weight=self.ranking_weight, weight_decay=self.weight_decay, seed=self.seed)
        model.input_scaler = fit_scaler(train.X)
        x_val = times_val = events_val = None
        if val is not None:
            val = val.survival_subset(self.cohort_filter)
            x_val, times_val, events_val = model.input_scaler.transform(val.X), val.times, val.events
        logger.info(f"Training survival network ({model.parameter_count} parameters) on {len(train)} subjects, "
                    f"{int(train.events.sum())} events")
        x = model.input_scaler.transform(train.X)
        surv_train(model, x, train.times, train.events, x_val, times_val, events_val,
                   max_epochs=self.max_epochs, patience=self.patience, learning_rate=self.learning_rate)
        model.baseline_hazard = breslow_fit(model.risk(x), train.times, train.events)
        return model

    def risk(self, model: SurvNetModel, dataset: CohortArrays) -> np.ndarray:
        return model.risk(model.input_scaler.transform(dataset.X))

    def curves(self, model: SurvNetModel, dataset: CohortArrays) -> List[SurvivalCurve]:
        return [survival_curve(model.baseline_hazard, psi) for psi in self.risk(model, dataset)]


class LinearCoxBaseline:
    """Linear Cox model on standardized baseline features."""

    def __init__(self, cohort_filter: CohortFilter = CohortFilter.MCI_ONLY) -> None:
        self.cohort_filter = cohort_filter
        self.model: LinearCoxModel | None = None

    def fit(self, train: CohortArrays) -> "LinearCoxBaseline":
        train = train.survival_subset(self.cohort_filter)
        scaler = fit_scaler(train.X)
        self.model = linear_coxph_fit(scaler.transform(train.X), train.times, train.events)
        self.model.input_scaler = scaler
        return self

    def risk(self, dataset: CohortArrays) -> np.ndarray:
        return self.model.input_scaler.transform(dataset.X) @ np.asarray(self.model.coefficients)

    def curves(self, dataset: CohortArrays) -> List[SurvivalCurve]:
        return [survival_curve(self.model.baseline_hazard, psi) for psi in self.risk(dataset)]


def survival_metrics(risk: np.ndarray,
                     hazard: BaselineHazard,
                     dataset: CohortArrays,
                     method: str = "survnet",
                     horizons: List[float] = DEFAULT_HORIZONS) -> List[MetricReport]:
    """C-index, time-dependent AUC and ICI per horizon; undefined metrics are reported as None."""
    n = len(dataset)
    reports = []

    def guarded(metric, compute):
        try:
            reports.append(MetricReport(metric=metric, value=float(compute()), n=n, stratum=method))
        except (UndefinedMetricError, InsufficientDataError) as err:
            logger.warning(f"{method} {metric} undefined: {err}")
            reports.append(MetricReport(metric=metric, value=None, n=n, stratum=method, flags=["undefined"]))

    guarded("c_index", lambda: c_index(risk, dataset.times, dataset.events))
    for horizon in horizons:
        guarded(f"auc_{horizon:g}yr", lambda: td_auc(risk, dataset.times, dataset.events, horizon))
        guarded(f"ici_{horizon:g}yr", lambda: ici(event_probabilities(risk, hazard, horizon),
                                                   dataset.times, dataset.events, horizon))
    return reports


def write_risk_scores(ids, curves: List[SurvivalCurve], path: str) -> None:
    rows = [survival_row(str(subject_id), curve) for subject_id, curve in zip(ids, curves)]
    pd.DataFrame(rows, columns=["subject_id", "psi", "S2yr", "S3yr", "S5yr", "median_survival"]).to_csv(path, index=False)


def write_baseline_hazard(hazard: BaselineHazard, path: str) -> None:
    pd.DataFrame({"time": hazard.times, "H0": hazard.cumulative_hazard}).to_csv(path, index=False)


def read_risk_scores(path: str) -> Dict[str, float]:
    frame = pd.read_csv(path, dtype={"subject_id": str})
    return dict(zip(frame["subject_id"], frame["psi"].astype(float)))
