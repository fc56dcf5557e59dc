from pydantic import BaseModel, Field, model_validator
from typing import List, Dict, Any

import numpy as np


class MetricReport(BaseModel):
    metric: str
    value: float | None
    n: int
    ci: tuple[float, float] | None = None
    stratum: str = "overall"
    flags: List[str] = []

    @model_validator(mode="after")
    def check_interval(self):
        if self.ci is not None and self.value is not None:
            lo, hi = self.ci
            if not lo <= self.value <= hi:
                raise ValueError(f"{self.metric}: interval {self.ci} does not contain {self.value}")
        return self


class KmCurve(BaseModel):
    times: List[float]
    survival: List[float]
    at_risk: List[int]
    events: List[int]

    @model_validator(mode="after")
    def check_curve(self):
        values = np.asarray(self.survival)
        if len(values) and (values[0] > 1.0 or np.any(np.diff(values) > 1e-15)):
            raise ValueError("Kaplan-Meier estimates must start at or below 1 and never increase")
        return self

    def at(self, t) -> np.ndarray:
        times = np.asarray(self.times)
        values = np.concatenate([[1.0], np.asarray(self.survival)])
        return values[np.searchsorted(times, np.asarray(t, dtype=float), side="right")]


class CvProtocol(BaseModel):
    folds: int = Field(default=5, ge=2)
    repeats: int = Field(default=5, ge=1)
    stratify_by: str = "event"
    seed: int = 0
    max_refolds: int = 20


class CvRow(BaseModel):
    repeat: int
    fold: int
    method: str
    c_index: float
    n_test: int
    events_test: int


class StatTestResult(BaseModel):
    statistic: float
    p_value: float
    df: int | None = None


class BootstrapResult(BaseModel):
    mean: float
    lo: float
    hi: float
    p_value: float


class StratumReport(BaseModel):
    stratum: str
    n: int
    metrics: Dict[str, float | None]
    deltas: Dict[str, float | None] = {}
    flags: List[str] = []


class ReportTable(BaseModel):
    name: str
    columns: List[str]
    rows: List[Dict[str, Any]]


class TertileSummary(BaseModel):
    cuts: tuple[float, float]
    counts: List[int]
    event_rates: List[float | None]
    overall: StatTestResult | None = None
    pairwise: Dict[str, StatTestResult | None] = {}
    assignments: List[int] = []
