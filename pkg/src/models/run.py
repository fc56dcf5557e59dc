from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import List
from enum import Enum

from config import app_config
from models.cohort import CohortFilter, GeneratorConfig
from models.harmonization import HarmonizationConfig


class Subcommand(str, Enum):
    GENERATE="generate"
    INTEGRATE="integrate"
    HARMONIZE="harmonize"
    FIT_TRAJECTORIES="fit-trajectories"
    TRAIN_TRAJ="train-traj"
    TRAIN_SURV="train-surv"
    PREDICT="predict"
    EVALUATE="evaluate"
    CV_COMPARE="cv-compare"
    LOCO="loco"
    FAIRNESS="fairness"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default_factory=lambda: app_config.DEFAULT_SEED)
    jobs: int = Field(default_factory=lambda: app_config.JOBS, ge=1)
    data_dir: str | None = None
    cohort_filter: CohortFilter = CohortFilter.MCI_ONLY
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    harmonization: HarmonizationConfig = Field(default_factory=HarmonizationConfig)

    # Trajectory extraction
    tau_percentile: float = Field(default=75.0, ge=0.0, le=100.0)
    n_min: int = Field(default=3, ge=1)

    # Trajectory network
    width: int = Field(default=128, ge=2)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    calibration_weight: float = Field(default=0.1, ge=0.0)
    traj_weight_decay: float = Field(default=1e-4, ge=0.0)
    mc_passes: int = Field(default_factory=lambda: app_config.MC_PASSES, ge=2)

    # Survival network
    surv_width: int = Field(default=128, ge=2)
    ranking_weight: float = Field(default=0.1, ge=0.0)
    surv_weight_decay: float = Field(default=1e-4, ge=0.0)
    margin: float = Field(default=0.1, gt=0.0)

    # Shared training settings
    patience: int = Field(default=15, ge=1)
    max_epochs: int = Field(default_factory=lambda: app_config.MAX_EPOCHS, ge=1)
    batch_size: int = Field(default_factory=lambda: app_config.BATCH_SIZE, ge=2)
    learning_rate: float = Field(default_factory=lambda: app_config.LEARNING_RATE, gt=0.0)

    # Validation protocol
    train_fraction: float = Field(default=0.722, gt=0.0, lt=1.0)
    val_fraction: float = Field(default=0.128, ge=0.0, lt=1.0)
    test_fraction: float = Field(default=0.150, gt=0.0, lt=1.0)
    folds: int = Field(default=5, ge=2)
    repeats: int = Field(default=5, ge=1)
    horizons: List[float] = Field(default=[2.0, 3.0, 5.0], min_length=1)
    calibration_horizon: float = Field(default=3.0, gt=0.0)
    min_center_n: int = Field(default=20, ge=1)
    loco_val_fraction: float = Field(default=0.15, gt=0.0, lt=1.0)
    bootstrap_resamples: int = Field(default=10000, ge=100)
    permutations: int = Field(default=1000, ge=1)

    @model_validator(mode="after")
    def check_protocol(self):
        if abs(self.train_fraction + self.val_fraction + self.test_fraction - 1.0) > 1e-6:
            raise ValueError("train, validation and test fractions must sum to 1")
        if any(horizon <= 0 for horizon in self.horizons):
            raise ValueError("horizons must be positive")
        return self


class Splits(BaseModel):
    seed: int
    train: List[str]
    val: List[str]
    test: List[str]

    @model_validator(mode="after")
    def check_disjoint(self):
        train, val, test = set(self.train), set(self.val), set(self.test)
        if train & val or train & test or val & test:
            raise ValueError("a subject is assigned to more than one split")
        return self
