from pydantic import BaseModel, Field, model_validator
from typing import List
from enum import Enum

import numpy as np

from models.survival import BaselineHazard


class Activation(str, Enum):
    GELU="gelu"
    RELU="relu"
    IDENTITY="identity"


class NetCheckpoint(BaseModel):
    layer_dims: List[int] = Field(min_length=2)
    activations: List[Activation]
    dropout_rates: List[float]
    weights: List[List[float]]
    biases: List[List[float]]
    seed: int = 0

    @model_validator(mode="after")
    def check_layers(self):
        n_layers = len(self.layer_dims) - 1
        if not len(self.activations) == len(self.dropout_rates) == len(self.weights) == len(self.biases) == n_layers:
            raise ValueError(f"checkpoint describes {n_layers} layers but carries mismatched parameter lists")
        for index, (fan_in, fan_out) in enumerate(zip(self.layer_dims, self.layer_dims[1:])):
            if len(self.weights[index]) != fan_in * fan_out or len(self.biases[index]) != fan_out:
                raise ValueError(f"layer {index} parameters do not match dimensions {fan_out}x{fan_in}")
        return self


class AttentionCheckpoint(BaseModel):
    dim: int = Field(ge=1)
    query: List[float]
    key: List[float]
    value: List[float]
    seed: int = 0


class ScalerCheckpoint(BaseModel):
    mean: List[float]
    scale: List[float]

    def transform(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - np.asarray(self.mean)) / np.asarray(self.scale)

    def inverse_transform(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * np.asarray(self.scale) + np.asarray(self.mean)

    def inverse_variance(self, variances) -> np.ndarray:
        return np.asarray(variances, dtype=float) * np.asarray(self.scale) ** 2


class EpochLoss(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float | None = None


class TrainingHistory(BaseModel):
    epochs: List[EpochLoss] = []
    best_epoch: int = 0
    stopped_early: bool = False


class TrajNetCheckpoint(BaseModel):
    attention: AttentionCheckpoint
    encoder: NetCheckpoint
    heads: List[NetCheckpoint] = Field(min_length=6, max_length=6)
    weight_decay: float = 1e-4
    calibration_weight: float = 0.1
    input_scaler: ScalerCheckpoint | None = None
    target_scaler: ScalerCheckpoint | None = None
    history: TrainingHistory | None = None


class SurvNetCheckpoint(BaseModel):
    network: NetCheckpoint
    margin: float = 0.1
    ranking_weight: float = 0.1
    weight_decay: float = 1e-4
    input_scaler: ScalerCheckpoint | None = None
    baseline_hazard: BaselineHazard | None = None
    history: TrainingHistory | None = None


class LinearCoxModel(BaseModel):
    coefficients: List[float]
    standard_errors: List[float]
    log_likelihood: float
    iterations: int
    ridge: float = 0.0
    input_scaler: ScalerCheckpoint | None = None
    baseline_hazard: BaselineHazard | None = None
