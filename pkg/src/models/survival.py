from pydantic import BaseModel, model_validator
from typing import List, Dict

import numpy as np

DEFAULT_HORIZONS = [2.0, 3.0, 5.0]


class BaselineHazard(BaseModel):
    times: List[float]
    cumulative_hazard: List[float]

    @model_validator(mode="after")
    def check_steps(self):
        if len(self.times) != len(self.cumulative_hazard):
            raise ValueError("times and cumulative hazard must have the same length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("event times must be strictly ascending")
        hazard = np.asarray(self.cumulative_hazard)
        if np.any(hazard < 0) or np.any(np.diff(hazard) < 0):
            raise ValueError("cumulative hazard must be non-negative and non-decreasing")
        return self

    def at(self, t) -> np.ndarray:
        """Right-continuous step evaluation, 0 before the first event time."""
        times = np.asarray(self.times)
        hazard = np.concatenate([[0.0], np.asarray(self.cumulative_hazard)])
        return hazard[np.searchsorted(times, np.asarray(t, dtype=float), side="right")]


class SurvivalCurve(BaseModel):
    risk_score: float
    hazard: BaselineHazard

    def survival_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise ValueError("survival is defined for t >= 0")
        return np.exp(-self.hazard.at(t) * np.exp(self.risk_score))

    def step_values(self) -> np.ndarray:
        return np.exp(-np.asarray(self.hazard.cumulative_hazard) * np.exp(self.risk_score))

    def median_survival(self) -> float | None:
        values = self.step_values()
        crossing = np.nonzero(values <= 0.5)[0]
        if len(crossing) == 0:
            return None
        return float(self.hazard.times[crossing[0]])

    def horizons(self, horizons: List[float] = DEFAULT_HORIZONS) -> Dict[str, float]:
        values = self.survival_at(horizons)
        return {f"S{horizon:g}yr": float(value) for horizon, value in zip(horizons, values)}
