import logging
logger = logging.getLogger(__name__)
from collections import defaultdict
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from config import app_config
from models.errors import ConvergenceError, InsufficientDataError
from models.participant import ParticipantRecord
from models.trajectory import MixedModel, TrajectoryParams

LOG_VARIANCE_BOUNDS = (-25.0, 10.0)
MIN_FIT_SUBJECTS = 30


def design_matrix(times) -> np.ndarray:
    """Rows [1, t, t^2] shared by the fixed and random parts of the quadratic."""
    return np.vander(np.asarray(times, dtype=float), 3, increasing=True)


def ols_quadratic(times, values) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if len(np.unique(times)) < 3:
        raise InsufficientDataError(f"a quadratic needs three distinct visit times, got {len(np.unique(times))}")
    return np.polynomial.polynomial.polyfit(times, np.asarray(values, dtype=float), 2)


def unpack_parameters(params: np.ndarray) -> tuple[np.ndarray, float]:
    root = np.zeros((3, 3))
    root[np.tril_indices(3)] = params[:6]
    return root @ root.T, float(np.exp(params[6]))


def group_curves(curves: Sequence[tuple]) -> List[tuple[np.ndarray, np.ndarray]]:
    """Stack curves with the same number of observations so V_i can be factored in batches."""
    by_length = defaultdict(list)
    for times, values in curves:
        by_length[len(times)].append((times, values))
    groups = []
    for length in sorted(by_length):
        members = by_length[length]
        designs = np.stack([design_matrix(times) for times, _ in members])
        values = np.array([np.asarray(values, dtype=float) for _, values in members]).reshape(len(members), length)
        groups.append((designs, values))
    return groups


def gls_statistics(groups, sigma_u: np.ndarray, sigma2: float) -> tuple[float, np.ndarray, np.ndarray, float]:
    log_det, information, score, quadratic = 0.0, np.zeros((3, 3)), np.zeros(3), 0.0
    for designs, values in groups:
        length = designs.shape[1]
        covariance = np.einsum("mij,jk,mlk->mil", designs, sigma_u, designs) + sigma2 * np.eye(length)
        root = np.linalg.cholesky(covariance)
        log_det += 2.0 * np.log(np.diagonal(root, axis1=1, axis2=2)).sum()
        solved_design = np.linalg.solve(covariance, designs)
        solved_values = np.linalg.solve(covariance, values[..., None])[..., 0]
        information += np.einsum("mni,mnj->ij", designs, solved_design)
        score += np.einsum("mni,mn->i", designs, solved_values)
        quadratic += float(np.einsum("mn,mn->", values, solved_values))
    return log_det, information, score, quadratic


def restricted_log_likelihood(params: np.ndarray, groups, n_observations: int) -> float:
    sigma_u, sigma2 = unpack_parameters(params)
    try:
        log_det, information, score, quadratic = gls_statistics(groups, sigma_u, sigma2)
        sign, information_log_det = np.linalg.slogdet(information)
        if sign <= 0:
            return -np.inf
        beta = np.linalg.solve(information, score)
    except np.linalg.LinAlgError:
        return -np.inf
    return -0.5 * (log_det + information_log_det + quadratic - score @ beta
                   + (n_observations - 3) * np.log(2 * np.pi))


def starting_values(curves) -> np.ndarray:
    coefficients = np.array([ols_quadratic(times, values) for times, values in curves])
    residuals = [np.asarray(values) - design_matrix(times) @ coef
                 for (times, values), coef in zip(curves, coefficients) if len(times) > 3]
    dof = sum(len(residual) - 3 for residual in residuals)
    if dof > 0:
        sigma2 = sum(float(residual @ residual) for residual in residuals) / dof
    else:
        sigma2 = 0.1 * np.var(np.concatenate([np.asarray(values, dtype=float) for _, values in curves]))
    root = np.linalg.cholesky(np.cov(coefficients.T) + 1e-6 * np.eye(3))
    return np.concatenate([root[np.tril_indices(3)], [np.log(max(sigma2, 1e-6))]])


def exact_quadratic(curves) -> np.ndarray | None:
    times = np.concatenate([np.asarray(times, dtype=float) for times, _ in curves])
    values = np.concatenate([np.asarray(values, dtype=float) for _, values in curves])
    coefficients = np.polynomial.polynomial.polyfit(times, values, 2)
    residual = values - design_matrix(times) @ coefficients
    if np.max(np.abs(residual)) <= 1e-10 * (1.0 + np.max(np.abs(values))):
        return coefficients
    return None


def reml_fit_curves(curves: Sequence[tuple],
                    max_iterations: int = None,
                    tolerance: float = None,
                    history: List[float] = None) -> MixedModel:
    """Fit y_ij = (b0 + u0) + (b1 + u1) t + (b2 + u2) t^2 + e by REML.

    `curves` holds one (times, values) pair per subject. Criterion values after each
    optimizer iteration are appended to `history` when a list is given.
    """
    max_iterations = max_iterations or app_config.MAX_REML_ITERATIONS
    tolerance = tolerance or app_config.REML_TOLERANCE
    curves = [(np.asarray(times, dtype=float), np.asarray(values, dtype=float)) for times, values in curves]
    n_observations = sum(len(times) for times, _ in curves)

    exact = exact_quadratic(curves)
    if exact is not None:
        logger.info(f"All {n_observations} observations lie on one quadratic, random effects are zero")
        return MixedModel(fixed_effects=exact.tolist(), random_covariance=np.zeros((3, 3)).tolist(),
                          residual_variance=1e-12, n_subjects=len(curves))

    groups = group_curves(curves)
    objective = lambda params: -restricted_log_likelihood(params, groups, n_observations)

    def record(intermediate_result):
        if history is not None:
            history.append(-float(intermediate_result.fun))

    result = minimize(objective, starting_values(curves), method="L-BFGS-B", jac="3-point",
                      bounds=[(None, None)] * 6 + [LOG_VARIANCE_BOUNDS], callback=record,
                      options={"maxiter": max_iterations, "ftol": tolerance, "gtol": 1e-8})
    if not result.success:
        if result.nit >= max_iterations:
            raise ConvergenceError(f"REML did not converge in {max_iterations} iterations: {result.message}",
                                   last_value=-float(result.fun))
        logger.warning(f"REML optimizer stopped after {result.nit} iterations: {result.message}")

    sigma_u, sigma2 = unpack_parameters(result.x)
    _, information, score, _ = gls_statistics(groups, sigma_u, sigma2)
    beta = np.linalg.solve(information, score)
    standard_errors = np.sqrt(np.diag(np.linalg.inv(information)))
    sigma_u = (sigma_u + sigma_u.T) / 2
    logger.info(f"REML converged after {result.nit} iterations, criterion {-result.fun:.6f}, "
                f"fixed effects {np.round(beta, 4).tolist()}, residual variance {sigma2:.4f}")
    return MixedModel(fixed_effects=beta.tolist(), fixed_effects_se=standard_errors.tolist(),
                      random_covariance=sigma_u.tolist(), residual_variance=sigma2,
                      reml_criterion=-float(result.fun), iterations=int(result.nit), n_subjects=len(curves))


def fit_curves(records: List[ParticipantRecord], n_min: int = 3) -> List[tuple]:
    curves = []
    for record in records:
        times, values = record.trajectory_points()
        if len(np.unique(times)) >= n_min:
            curves.append((times, values))
    return curves


def reml_fit(records: List[ParticipantRecord],
             max_iterations: int = None,
             tolerance: float = None) -> MixedModel:
    curves = fit_curves(records)
    if len(curves) < MIN_FIT_SUBJECTS:
        raise InsufficientDataError(f"REML needs {MIN_FIT_SUBJECTS} subjects with three or more CDR-SB "
                                    f"visits, got {len(curves)}")
    return reml_fit_curves(curves, max_iterations, tolerance)


def eb_from_points(model: MixedModel, times, values, subject_id: str = "") -> TrajectoryParams:
    sigma_u, beta = model.sigma_u, model.beta
    times, values = np.asarray(times, dtype=float), np.asarray(values, dtype=float)
    if len(times) == 0:
        theta, covariance = beta, sigma_u
    else:
        design = design_matrix(times)
        covariance_y = design @ sigma_u @ design.T + model.residual_variance * np.eye(len(times))
        gain = np.linalg.solve(covariance_y, design @ sigma_u).T
        theta = beta + gain @ (values - design @ beta)
        covariance = sigma_u - gain @ design @ sigma_u
        covariance = (covariance + covariance.T) / 2
    return TrajectoryParams(subject_id=subject_id, alpha=float(theta[0]), beta=float(theta[1]),
                            gamma=float(theta[2]), conditional_covariance=covariance.tolist(),
                            n_visits=len(times))


def eb_estimates(model: MixedModel, record: ParticipantRecord) -> TrajectoryParams:
    times, values = record.trajectory_points()
    return eb_from_points(model, times, values, record.subject_id)


def reliability_filter(params: TrajectoryParams,
                       record: ParticipantRecord = None,
                       tau_var: float = np.inf,
                       n_min: int = 3) -> bool:
    n_visits = len(record.trajectory_points()[0]) if record is not None else params.n_visits
    return n_visits >= n_min and params.cond_var_trace <= tau_var


class MixedEffectsService:

    def __init__(self,
                 tau_percentile: float = 75.0,
                 n_min: int = 3,
                 max_iterations: int = None,
                 tolerance: float = None) -> None:
        self.tau_percentile = tau_percentile
        self.n_min = n_min
        self.max_iterations = max_iterations
        self.tolerance = tolerance

    def fit(self, records: List[ParticipantRecord]) -> MixedModel:
        return reml_fit(records, self.max_iterations, self.tolerance)

    def extract(self,
                records: List[ParticipantRecord],
                model: MixedModel,
                train_ids: set = None,
                tau_var: float = None) -> tuple[List[TrajectoryParams], float]:
        params = [eb_estimates(model, record) for record in records]
        if tau_var is None:
            traces = [item.cond_var_trace for item in params if train_ids is None or item.subject_id in train_ids]
            if not traces:
                raise InsufficientDataError("no training subjects to set the reliability threshold")
            tau_var = float(np.percentile(traces, self.tau_percentile))
        reliable = [item.model_copy(update={"reliable": reliability_filter(item, record, tau_var, self.n_min)})
                    for item, record in zip(params, records)]
        logger.info(f"{sum(item.reliable for item in reliable)} of {len(reliable)} trajectories reliable "
                    f"at tau_var={tau_var:.4f}")
        return reliable, tau_var


def targets_by_subject(params: List[TrajectoryParams]) -> Dict[str, TrajectoryParams]:
    return {item.subject_id: item for item in params}


def write_targets(params: List[TrajectoryParams], path: str) -> None:
    pd.DataFrame([item.to_target_row() for item in params],
                 columns=["subject_id", "alpha", "beta", "gamma", "cond_var_trace", "reliable"]).to_csv(path, index=False)
