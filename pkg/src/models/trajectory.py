from pydantic import BaseModel, Field, model_validator
from typing import List

import numpy as np

PARAMETER_NAMES = ["alpha", "beta", "gamma"]
Z_95 = 1.959964


class MixedModel(BaseModel):
    fixed_effects: List[float] = Field(min_length=3, max_length=3)
    fixed_effects_se: List[float] = Field(default=[0.0, 0.0, 0.0], min_length=3, max_length=3)
    random_covariance: List[List[float]]
    residual_variance: float = Field(gt=0.0)
    reml_criterion: float | None = None
    iterations: int = 0
    n_subjects: int = 0

    @model_validator(mode="after")
    def check_covariance(self):
        sigma = np.asarray(self.random_covariance, dtype=float)
        if sigma.shape != (3, 3):
            raise ValueError("random-effect covariance must be 3x3")
        if not np.allclose(sigma, sigma.T, atol=1e-10):
            raise ValueError("random-effect covariance must be symmetric")
        if np.linalg.eigvalsh(sigma).min() < -1e-9:
            raise ValueError("random-effect covariance must be positive semidefinite")
        return self

    @property
    def sigma_u(self) -> np.ndarray:
        return np.asarray(self.random_covariance, dtype=float)

    @property
    def beta(self) -> np.ndarray:
        return np.asarray(self.fixed_effects, dtype=float)


class TrajectoryParams(BaseModel):
    subject_id: str
    alpha: float
    beta: float
    gamma: float
    conditional_covariance: List[List[float]]
    n_visits: int = 0
    reliable: bool = False

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])

    @property
    def cond_var_trace(self) -> float:
        return float(np.trace(np.asarray(self.conditional_covariance)))

    def to_target_row(self) -> dict:
        return {"subject_id": self.subject_id, "alpha": self.alpha, "beta": self.beta,
                "gamma": self.gamma, "cond_var_trace": self.cond_var_trace, "reliable": self.reliable}


class TrajPrediction(BaseModel):
    subject_id: str | None = None
    means: List[float]
    aleatoric: List[float]
    epistemic: List[float]
    total: List[float]
    intervals: List[tuple[float, float]]

    @classmethod
    def from_components(cls, means, aleatoric, epistemic, subject_id: str | None = None):
        means = np.asarray(means, dtype=float)
        aleatoric = np.asarray(aleatoric, dtype=float)
        epistemic = np.asarray(epistemic, dtype=float)
        total = aleatoric + epistemic
        half_width = Z_95 * np.sqrt(total)
        intervals = [(float(lo), float(hi)) for lo, hi in zip(means - half_width, means + half_width)]
        return cls(subject_id=subject_id, means=means.tolist(), aleatoric=aleatoric.tolist(),
                   epistemic=epistemic.tolist(), total=total.tolist(), intervals=intervals)
