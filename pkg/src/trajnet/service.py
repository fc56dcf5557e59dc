import logging
logger = logging.getLogger(__name__)
from dataclasses import dataclass
from typing import List

import numpy as np
import pandas as pd
from scipy.special import expit
from sklearn.linear_model import LinearRegression

from config import app_config
from evalstats.metric_service import picp_mpiw, regression_metrics
from models.cohort import CohortArrays
from models.errors import ParameterError, TrainingError, UndefinedMetricError
from models.network import Activation, TrajNetCheckpoint, TrainingHistory, EpochLoss, ScalerCheckpoint
from models.report import MetricReport
from models.trajectory import TrajPrediction, PARAMETER_NAMES, Z_95
from numcore.service import (DenseNet, AttentionBlock, AttentionCache, ForwardCache, OptimizerState,
                             optimizer_step, fit_scaler)

N_HEADS = 6
LOGVAR_BOUNDS = (-10.0, 10.0)
NOMINAL_COVERAGE = 0.95
CALIBRATION_TEMPERATURE = 50.0


@dataclass
class TrajCache:
    attention: AttentionCache
    encoder: ForwardCache
    heads: List[ForwardCache]
    raw_logvar: np.ndarray


class TrajNetModel:
    """Attention over the baseline features, a GELU encoder and six scalar heads (mean and log-variance per parameter)."""

    def __init__(self,
                 input_dim: int = 10,
                 width: int = 128,
                 dropout: float = 0.1,
                 weight_decay: float = 1e-4,
                 calibration_weight: float = 0.1,
                 seed: int = 0) -> None:
        if width < 4:
            raise ParameterError(f"width must be at least 4, got {width}")
        seeds = np.random.SeedSequence(seed).generate_state(N_HEADS + 2)
        self.attention = AttentionBlock(input_dim, seed=int(seeds[0]))
        self.encoder = DenseNet([input_dim, width, width // 2, width // 4], [Activation.GELU] * 3,
                                [dropout] * 3, seed=int(seeds[1]))
        self.heads = [DenseNet([width // 4, 1], [Activation.IDENTITY], seed=int(head_seed))
                      for head_seed in seeds[2:]]
        self.weight_decay = weight_decay
        self.calibration_weight = calibration_weight
        self.input_scaler: ScalerCheckpoint | None = None
        self.target_scaler: ScalerCheckpoint | None = None
        self.history: TrainingHistory | None = None

    @property
    def input_dim(self) -> int:
        return self.attention.dim

    @property
    def parameter_count(self) -> int:
        return (self.attention.parameter_count + self.encoder.parameter_count
                + sum(head.parameter_count for head in self.heads))

    def parameters(self) -> List[np.ndarray]:
        return (self.attention.parameters() + self.encoder.parameters()
                + [param for head in self.heads for param in head.parameters()])

    def mark_updated(self) -> None:
        for component in [self.attention, self.encoder, *self.heads]:
            component.mark_updated()

    def sample_masks(self, n: int, rng: np.random.Generator) -> List[np.ndarray | None]:
        return self.encoder.sample_masks(n, rng)

    def forward(self,
                x: np.ndarray,
                dropout_active: bool = False,
                rng: np.random.Generator = None,
                masks: List[np.ndarray | None] = None) -> tuple[np.ndarray, np.ndarray, TrajCache]:
        x = np.asarray(x, dtype=float)
        attended, attention_cache = self.attention.forward(x if x.ndim == 2 else x[None, :])
        hidden, encoder_cache = self.encoder.forward(attended, dropout_active=dropout_active, rng=rng, masks=masks)
        outputs, head_caches = [], []
        for head in self.heads:
            output, cache = head.forward(hidden)
            outputs.append(output[:, 0])
            head_caches.append(cache)
        outputs = np.column_stack(outputs)
        raw_logvar = outputs[:, 3:]
        mu, logvar = outputs[:, :3], np.clip(raw_logvar, *LOGVAR_BOUNDS)
        cache = TrajCache(attention=attention_cache, encoder=encoder_cache, heads=head_caches, raw_logvar=raw_logvar)
        if x.ndim == 1:
            return mu[0], logvar[0], cache
        return mu, logvar, cache

    def backward(self, cache: TrajCache, mu_grad: np.ndarray, logvar_grad: np.ndarray) -> List[np.ndarray]:
        """Parameter gradients in the order of `parameters()`."""
        inside = (cache.raw_logvar > LOGVAR_BOUNDS[0]) & (cache.raw_logvar < LOGVAR_BOUNDS[1])
        output_grads = np.column_stack([np.atleast_2d(mu_grad), np.atleast_2d(logvar_grad) * inside])
        hidden_grad = 0.0
        head_grads = []
        for index, head in enumerate(self.heads):
            grads = head.backward(cache.heads[index], output_grads[:, [index]])
            head_grads.extend(grads.as_list())
            hidden_grad = hidden_grad + grads.inputs
        encoder_grads = self.encoder.backward(cache.encoder, hidden_grad)
        attention_grads, _ = self.attention.backward(cache.attention, encoder_grads.inputs)
        return attention_grads + encoder_grads.as_list() + head_grads

    def attention_importance(self, x: np.ndarray) -> np.ndarray:
        """Mean attention each input feature receives across subjects; sums to 1."""
        weights = self.attention.weights(np.atleast_2d(np.asarray(x, dtype=float)))
        return weights.mean(axis=(0, 1))

    def to_checkpoint(self) -> TrajNetCheckpoint:
        return TrajNetCheckpoint(attention=self.attention.to_checkpoint(), encoder=self.encoder.to_checkpoint(),
                                 heads=[head.to_checkpoint() for head in self.heads],
                                 weight_decay=self.weight_decay, calibration_weight=self.calibration_weight,
                                 input_scaler=self.input_scaler, target_scaler=self.target_scaler,
                                 history=self.history)

    @classmethod
    def from_checkpoint(cls, checkpoint: TrajNetCheckpoint) -> "TrajNetModel":
        model = cls.__new__(cls)
        model.attention = AttentionBlock.from_checkpoint(checkpoint.attention)
        model.encoder = DenseNet.from_checkpoint(checkpoint.encoder)
        model.heads = [DenseNet.from_checkpoint(head) for head in checkpoint.heads]
        model.weight_decay = checkpoint.weight_decay
        model.calibration_weight = checkpoint.calibration_weight
        model.input_scaler = checkpoint.input_scaler
        model.target_scaler = checkpoint.target_scaler
        model.history = checkpoint.history
        return model


def traj_forward(model: TrajNetModel,
                 x: np.ndarray,
                 dropout_active: bool = False,
                 rng: np.random.Generator = None) -> tuple[np.ndarray, np.ndarray]:
    mu, logvar, _ = model.forward(x, dropout_active=dropout_active, rng=rng)
    return mu, logvar


def nll_loss(mu: np.ndarray, logvar: np.ndarray, targets: np.ndarray) -> float:
    """Heteroscedastic Gaussian NLL without the constant, summed over parameters and averaged over the batch."""
    mu, logvar, targets = np.atleast_2d(mu), np.atleast_2d(logvar), np.atleast_2d(targets)
    return float(np.mean(np.sum(0.5 * (targets - mu) ** 2 * np.exp(-logvar) + 0.5 * logvar, axis=1)))


def nll_grad(mu: np.ndarray, logvar: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(mu)
    precision = np.exp(-logvar)
    residual = targets - mu
    return -residual * precision / n, (0.5 - 0.5 * residual ** 2 * precision) / n


def band_membership(mu: np.ndarray, logvar: np.ndarray, targets: np.ndarray,
                    exact: bool, temperature: float = CALIBRATION_TEMPERATURE) -> np.ndarray:
    standardized = np.abs(targets - mu) * np.exp(-0.5 * logvar)
    if exact:
        return (standardized <= Z_95).astype(float)
    return expit(temperature * (Z_95 - standardized))


def calibration_loss(mu: np.ndarray, logvar: np.ndarray, targets: np.ndarray, exact: bool = True,
                     temperature: float = CALIBRATION_TEMPERATURE) -> float:
    """Summed |coverage - 0.95| of the 95% band; the sigmoid surrogate replaces the indicator when `exact` is off."""
    mu, logvar, targets = np.atleast_2d(mu), np.atleast_2d(logvar), np.atleast_2d(targets)
    if len(mu) < 2:
        raise ParameterError("calibration needs a batch of at least two subjects")
    coverage = band_membership(mu, logvar, targets, exact, temperature).mean(axis=0)
    return float(np.sum(np.abs(coverage - NOMINAL_COVERAGE)))


def calibration_grad(mu: np.ndarray, logvar: np.ndarray, targets: np.ndarray,
                     temperature: float = CALIBRATION_TEMPERATURE) -> tuple[np.ndarray, np.ndarray]:
    n = len(mu)
    membership = band_membership(mu, logvar, targets, exact=False, temperature=temperature)
    direction = np.sign(membership.mean(axis=0) - NOMINAL_COVERAGE)
    residual = targets - mu
    inverse_sd = np.exp(-0.5 * logvar)
    slope = direction * membership * (1.0 - membership) * temperature / n
    return slope * np.sign(residual) * inverse_sd, slope * 0.5 * np.abs(residual) * inverse_sd


def objective(model: TrajNetModel,
              x: np.ndarray,
              targets: np.ndarray,
              masks: List[np.ndarray | None] = None,
              exact: bool = False,
              with_gradients: bool = True) -> tuple[float, List[np.ndarray] | None]:
    """NLL + calibration weight * calibration + weight decay * squared parameter norm."""
    dropout_active = masks is not None
    mu, logvar, cache = model.forward(x, dropout_active=dropout_active, masks=masks)
    params = model.parameters()
    loss = nll_loss(mu, logvar, targets) + model.weight_decay * sum(float(np.sum(p * p)) for p in params)
    use_calibration = model.calibration_weight > 0 and len(mu) >= 2
    if use_calibration:
        loss += model.calibration_weight * calibration_loss(mu, logvar, targets, exact=exact)
    if not with_gradients:
        return loss, None
    mu_grad, logvar_grad = nll_grad(mu, logvar, targets)
    if use_calibration:
        cal_mu, cal_logvar = calibration_grad(mu, logvar, targets)
        mu_grad = mu_grad + model.calibration_weight * cal_mu
        logvar_grad = logvar_grad + model.calibration_weight * cal_logvar
    grads = model.backward(cache, mu_grad, logvar_grad)
    return loss, [grad + 2.0 * model.weight_decay * param for grad, param in zip(grads, params)]


def evaluation_loss(model: TrajNetModel, x: np.ndarray, targets: np.ndarray) -> float:
    return objective(model, x, targets, exact=True, with_gradients=False)[0]


def traj_train(model: TrajNetModel,
               x: np.ndarray,
               targets: np.ndarray,
               x_val: np.ndarray = None,
               targets_val: np.ndarray = None,
               max_epochs: int = None,
               patience: int = 15,
               batch_size: int = None,
               learning_rate: float = None,
               seed: int = 0) -> tuple[TrajNetModel, TrainingHistory]:
    """Mini-batch Adam with early stopping on the validation loss (training loss without a validation set)."""
    max_epochs = max_epochs or app_config.MAX_EPOCHS
    batch_size = batch_size or app_config.BATCH_SIZE
    learning_rate = learning_rate or app_config.LEARNING_RATE
    x, targets = np.asarray(x, dtype=float), np.asarray(targets, dtype=float)
    if len(x) == 0:
        raise ParameterError("trajectory training set is empty")
    monitored = (x, targets) if x_val is None or len(x_val) == 0 else (np.asarray(x_val), np.asarray(targets_val))
    rng = np.random.default_rng(seed)
    state = OptimizerState.for_parameters(model.parameters(), learning_rate=learning_rate)
    history = TrainingHistory()
    best_loss, best_params, waited = np.inf, [p.copy() for p in model.parameters()], 0

    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(x))
        epoch_loss = 0.0
        for start in range(0, len(x), batch_size):
            batch = order[start:start + batch_size]
            loss, grads = objective(model, x[batch], targets[batch], masks=model.sample_masks(len(batch), rng))
            if not np.isfinite(loss):
                raise TrainingError(f"trajectory loss diverged at epoch {epoch}", epoch=epoch)
            optimizer_step(model.parameters(), grads, state)
            model.mark_updated()
            epoch_loss += loss * len(batch)
        val_loss = evaluation_loss(model, *monitored)
        if not np.isfinite(val_loss):
            raise TrainingError(f"validation loss diverged at epoch {epoch}", epoch=epoch)
        history.epochs.append(EpochLoss(epoch=epoch, train_loss=epoch_loss / len(x),
                                        val_loss=val_loss if x_val is not None else None))
        if val_loss < best_loss:
            best_loss, best_params, waited = val_loss, [p.copy() for p in model.parameters()], 0
            history.best_epoch = epoch
        else:
            waited += 1
            if waited >= patience:
                history.stopped_early = True
                logger.info(f"Trajectory network stopped at epoch {epoch}, best epoch {history.best_epoch}")
                break

    for param, best in zip(model.parameters(), best_params):
        param[...] = best
    model.mark_updated()
    model.history = history
    logger.info(f"Trajectory network trained {len(history.epochs)} epochs, best loss {best_loss:.4f} "
                f"at epoch {history.best_epoch}")
    return model, history


def mc_samples(model: TrajNetModel, x: np.ndarray, passes: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if passes < 2:
        raise ParameterError(f"MC dropout needs at least 2 passes, got {passes}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    means, variances = [], []
    for index in range(passes):
        mu, logvar = traj_forward(model, x, dropout_active=True, rng=np.random.default_rng([seed, index]))
        means.append(mu)
        variances.append(np.exp(logvar))
    return np.stack(means), np.stack(variances)


def mc_predict(model: TrajNetModel, x: np.ndarray, passes: int = None,
               seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(means, aleatoric, epistemic), each n x 3, in the model's target scale."""
    means, variances = mc_samples(model, x, passes or app_config.MC_PASSES, seed)
    # variance of the shifted draws is exactly zero when all passes agree
    epistemic = (means - means[0]).var(axis=0)
    return means.mean(axis=0), variances.mean(axis=0), epistemic


class TrajectoryNetworkService:

    def __init__(self,
                 width: int = 128,
                 dropout: float = 0.1,
                 weight_decay: float = 1e-4,
                 calibration_weight: float = 0.1,
                 patience: int = 15,
                 max_epochs: int = None,
                 batch_size: int = None,
                 learning_rate: float = None,
                 mc_passes: int = None,
                 seed: int = 0) -> None:
        self.width = width
        self.dropout = dropout
        self.weight_decay = weight_decay
        self.calibration_weight = calibration_weight
        self.patience = patience
        self.max_epochs = max_epochs or app_config.MAX_EPOCHS
        self.batch_size = batch_size or app_config.BATCH_SIZE
        self.learning_rate = learning_rate or app_config.LEARNING_RATE
        self.mc_passes = mc_passes or app_config.MC_PASSES
        self.seed = seed

    def fit(self, train: CohortArrays, val: CohortArrays = None) -> TrajNetModel:
        """Trains on the subjects with reliable trajectory targets."""
        train = train.trajectory_subset()
        if len(train) < 2:
            raise ParameterError(f"trajectory training needs reliable targets, got {len(train)} subjects")
        model = TrajNetModel(input_dim=train.X.shape[1], width=self.width, dropout=self.dropout,
                             weight_decay=self.weight_decay, calibration_weight=self.calibration_weight,
                             seed=self.seed)
        model.input_scaler = fit_scaler(train.X)
        model.target_scaler = fit_scaler(train.targets)
        x_val = targets_val = None
        if val is not None and len(val.trajectory_subset()) > 0:
            val = val.trajectory_subset()
            x_val, targets_val = model.input_scaler.transform(val.X), model.target_scaler.transform(val.targets)
        logger.info(f"Training trajectory network ({model.parameter_count} parameters) on {len(train)} subjects")
        traj_train(model, model.input_scaler.transform(train.X), model.target_scaler.transform(train.targets),
                   x_val, targets_val, max_epochs=self.max_epochs, patience=self.patience,
                   batch_size=self.batch_size, learning_rate=self.learning_rate, seed=self.seed)
        return model

    def predict(self, model: TrajNetModel, dataset: CohortArrays, seed: int = None) -> List[TrajPrediction]:
        x = model.input_scaler.transform(dataset.X) if model.input_scaler else dataset.X
        means, aleatoric, epistemic = mc_predict(model, x, self.mc_passes, self.seed if seed is None else seed)
        if model.target_scaler is not None:
            means = model.target_scaler.inverse_transform(means)
            aleatoric = model.target_scaler.inverse_variance(aleatoric)
            epistemic = model.target_scaler.inverse_variance(epistemic)
        return [TrajPrediction.from_components(means[index], aleatoric[index], epistemic[index],
                                               subject_id=str(subject_id))
                for index, subject_id in enumerate(dataset.ids)]


class LinearTrajectoryBaseline:
    """Per-parameter least squares with residual-variance intervals."""

    def __init__(self) -> None:
        self.regression = LinearRegression()
        self.residual_variance = np.zeros(3)

    def fit(self, train: CohortArrays) -> "LinearTrajectoryBaseline":
        train = train.trajectory_subset()
        if len(train) <= train.X.shape[1] + 1:
            raise ParameterError(f"linear baseline needs more subjects than features, got {len(train)}")
        self.regression.fit(train.X, train.targets)
        residuals = train.targets - self.regression.predict(train.X)
        self.residual_variance = residuals.var(axis=0, ddof=train.X.shape[1] + 1)
        return self

    def predict(self, dataset: CohortArrays) -> List[TrajPrediction]:
        means = self.regression.predict(dataset.X)
        return [TrajPrediction.from_components(mean, self.residual_variance, np.zeros(3), subject_id=str(subject_id))
                for mean, subject_id in zip(means, dataset.ids)]


def trajectory_metrics(predictions: List[TrajPrediction], dataset: CohortArrays,
                       method: str = "trajnet") -> List[MetricReport]:
    """R2, RMSE, PICP and MPIW per parameter over subjects with reliable targets."""
    by_id = {prediction.subject_id: prediction for prediction in predictions}
    scored = dataset.trajectory_subset()
    selected = [by_id[str(subject_id)] for subject_id in scored.ids]
    reports = []
    for index, name in enumerate(PARAMETER_NAMES):
        truth = scored.targets[:, index]
        means = np.array([prediction.means[index] for prediction in selected])
        lo = np.array([prediction.intervals[index][0] for prediction in selected])
        hi = np.array([prediction.intervals[index][1] for prediction in selected])
        try:
            r2, rmse, _ = regression_metrics(means, truth)
        except UndefinedMetricError as err:
            logger.warning(f"{method} {name}: {err}")
            r2 = rmse = None
        picp, mpiw = picp_mpiw(lo, hi, truth) if len(truth) else (None, None)
        for metric, value in (("r2", r2), ("rmse", rmse), ("picp", picp), ("mpiw", mpiw)):
            reports.append(MetricReport(metric=f"{metric}_{name}", value=value, n=len(truth), stratum=method))
    return reports


def write_predictions(predictions: List[TrajPrediction], path: str) -> None:
    suffixes = ["a", "b", "g"]
    rows = []
    for prediction in predictions:
        row = {"subject_id": prediction.subject_id}
        for index, s in enumerate(suffixes):
            row[f"mu_{s}"] = prediction.means[index]
            row[f"sd_total_{s}"] = float(np.sqrt(prediction.total[index]))
            row[f"sd_aleatoric_{s}"] = float(np.sqrt(prediction.aleatoric[index]))
            row[f"sd_epistemic_{s}"] = float(np.sqrt(prediction.epistemic[index]))
            row[f"lo_{s}"], row[f"hi_{s}"] = prediction.intervals[index]
        rows.append(row)
    columns = (["subject_id"] + [f"{kind}_{s}" for kind in ("mu", "sd_total", "sd_aleatoric", "sd_epistemic")
                                 for s in suffixes] + [f"{bound}_{s}" for s in suffixes for bound in ("lo", "hi")])
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)


def read_predictions(path: str) -> List[TrajPrediction]:
    frame = pd.read_csv(path, dtype={"subject_id": str})
    suffixes = ["a", "b", "g"]
    return [TrajPrediction.from_components([row[f"mu_{s}"] for s in suffixes],
                                           [row[f"sd_aleatoric_{s}"] ** 2 for s in suffixes],
                                           [row[f"sd_epistemic_{s}"] ** 2 for s in suffixes],
                                           subject_id=row["subject_id"])
            for row in frame.to_dict("records")]
