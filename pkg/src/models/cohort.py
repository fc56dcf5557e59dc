from pydantic import BaseModel, Field, model_validator
from dataclasses import dataclass, field
from typing import Dict, List
from enum import Enum

import numpy as np

from models.participant import ParticipantRecord, Diagnosis, Sex
from models.trajectory import TrajectoryParams


class HazardLink(str, Enum):
    LINEAR="linear"
    NONLINEAR="nonlinear"


class CohortFilter(str, Enum):
    ALL="all"
    MCI_ONLY="mci-only"


class HazardWeights(BaseModel):
    """Log-risk weights on the z-scored true biomarkers.

    The linear link uses `ptau` and `inv_abeta42` only. The nonlinear link adds p-tau terms that switch at the
    Aβ42 cutoff; `ptau_amyloid_negative=0` leaves the single above-cutoff interaction.
    """
    ptau: float = 0.8
    inv_abeta42: float = 0.8
    ptau_amyloid_positive: float = 1.2
    ptau_amyloid_negative: float = -2.4


class GeneratorConfig(BaseModel):
    n_subjects: int = Field(default=2000, ge=1)
    n_centers: int = Field(default=8, ge=1)
    center_weights: List[float] | None = None
    site_shift_sd: Dict[str, float] = {"abeta42": 0.5, "ptau": 0.5, "ttau": 0.5}
    fixed_effects: List[float] = [1.5, 0.6, 0.05]
    random_covariance: List[List[float]] = [[1.0, 0.0, 0.0], [0.0, 0.25, 0.0], [0.0, 0.0, 0.01]]
    residual_variance: float = Field(default=0.25, ge=0.0)
    # shift of (alpha, beta, gamma) per unit of baseline pathology; zero it with Σ_u for a single population curve
    trajectory_link: List[float] = [1.2, 0.3, 0.02]
    hazard_link: HazardLink = HazardLink.NONLINEAR
    hazard_weights: HazardWeights = HazardWeights()
    baseline_hazard: float = Field(default=0.02, ge=0.0)
    censoring_rate: float = Field(default=0.15, ge=0.0)
    visit_interval_mean: float = Field(default=1.0, gt=0.0)
    visit_interval_sd: float = Field(default=0.15, ge=0.0)
    max_follow_up: float = Field(default=8.0, gt=0.0)
    missing_rate: Dict[str, float] = {"abeta42": 0.05, "ptau": 0.05, "ttau": 0.05}
    assay_mix: Dict[str, float] = {"ELISA": 0.6, "Luminex": 0.3, "Other": 0.1}
    mci_fraction: float = Field(default=0.75, ge=0.0, le=1.0)
    misaligned_rate: float = Field(default=0.02, ge=0.0, le=1.0)
    repeat_csf_rate: float = Field(default=0.08, ge=0.0, le=1.0)
    missing_demographics_rate: float = Field(default=0.01, ge=0.0, le=1.0)
    cdrsb_grid: float | None = 0.5
    age_mean: float = 71.4
    age_sd: float = 8.9
    seed: int = 0

    @model_validator(mode="after")
    def check_config(self):
        for name, rates in (("site_shift_sd", self.site_shift_sd), ("missing_rate", self.missing_rate)):
            if any(value < 0 for value in rates.values()):
                raise ValueError(f"{name} entries must be non-negative")
        if any(value < 0 for value in self.assay_mix.values()) or abs(sum(self.assay_mix.values()) - 1.0) > 1e-9:
            raise ValueError("assay mix proportions must be non-negative and sum to 1")
        if self.center_weights is not None:
            if len(self.center_weights) != self.n_centers or abs(sum(self.center_weights) - 1.0) > 1e-9:
                raise ValueError("center weights must have one entry per center and sum to 1")
        if len(self.fixed_effects) != 3 or len(self.trajectory_link) != 3:
            raise ValueError("fixed effects and trajectory link need one entry per alpha, beta and gamma")
        sigma = np.asarray(self.random_covariance)
        if sigma.shape != (3, 3) or np.linalg.eigvalsh((sigma + sigma.T) / 2).min() < -1e-12:
            raise ValueError("random covariance must be a 3x3 PSD matrix")
        if not np.isfinite(self.max_follow_up) and self.censoring_rate == 0 and self.baseline_hazard == 0:
            raise ValueError("follow-up never ends without censoring, events or a follow-up limit")
        return self


class SubjectTruth(BaseModel):
    subject_id: str
    center_id: str
    alpha: float
    beta: float
    gamma: float
    log_risk: float
    event_time: float | None = None
    censoring_time: float | None = None
    observed_time: float
    observed_event: int
    abeta42: float
    ptau: float
    ttau: float
    z_ptau: float
    z_inv_abeta42: float
    site_shift: Dict[str, float]
    assay_method: str
    amyloid_positive: bool


@dataclass
class CohortArrays:
    """Column view of a harmonized cohort used by training and evaluation."""
    ids: np.ndarray
    X: np.ndarray
    times: np.ndarray
    events: np.ndarray
    centers: np.ndarray
    age: np.ndarray
    female: np.ndarray
    education: np.ndarray
    mci_baseline: np.ndarray
    targets: np.ndarray = field(default=None)
    reliable: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.ids)
        if self.targets is None:
            self.targets = np.full((n, 3), np.nan)
        if self.reliable is None:
            self.reliable = np.zeros(n, dtype=bool)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "CohortArrays":
        index = np.asarray(index)
        return CohortArrays(ids=self.ids[index], X=self.X[index], times=self.times[index],
                            events=self.events[index], centers=self.centers[index], age=self.age[index],
                            female=self.female[index], education=self.education[index],
                            mci_baseline=self.mci_baseline[index], targets=self.targets[index],
                            reliable=self.reliable[index])

    def survival_mask(self, cohort_filter: CohortFilter = CohortFilter.MCI_ONLY) -> np.ndarray:
        # prevalent cases (event at baseline) carry no time-to-conversion information
        keep = self.times > 0
        if cohort_filter == CohortFilter.MCI_ONLY:
            keep &= self.mci_baseline
        return keep

    def survival_subset(self, cohort_filter: CohortFilter = CohortFilter.MCI_ONLY) -> "CohortArrays":
        return self.subset(np.nonzero(self.survival_mask(cohort_filter))[0])

    def trajectory_subset(self) -> "CohortArrays":
        return self.subset(np.nonzero(self.reliable)[0])

    @classmethod
    def from_records(cls, records: List[ParticipantRecord],
                     targets: Dict[str, TrajectoryParams] | None = None) -> "CohortArrays":
        missing = [record.subject_id for record in records if record.features is None]
        if missing:
            raise ValueError(f"{len(missing)} records are not harmonized, e.g. {missing[0]}")
        targets = targets or {}
        theta = np.full((len(records), 3), np.nan)
        reliable = np.zeros(len(records), dtype=bool)
        for index, record in enumerate(records):
            params = targets.get(record.subject_id)
            if params is not None:
                theta[index] = params.theta
                reliable[index] = params.reliable
        return cls(ids=np.array([record.subject_id for record in records]),
                   X=np.array([record.features.as_vector() for record in records], dtype=float),
                   times=np.array([record.event_time for record in records], dtype=float),
                   events=np.array([record.event for record in records], dtype=int),
                   centers=np.array([record.center_id for record in records]),
                   age=np.array([record.age for record in records], dtype=float),
                   female=np.array([record.sex == Sex.FEMALE for record in records]),
                   education=np.array([record.education for record in records], dtype=float),
                   mci_baseline=np.array([record.baseline_diagnosis == Diagnosis.MCI for record in records]),
                   targets=theta, reliable=reliable)
