from pydantic import BaseModel, Field, model_validator
from typing import Dict, List
from enum import Enum

from models.participant import AssayMethod, Biomarker


def default_factor_table() -> Dict[str, Dict[str, float]]:
    table = {biomarker.value: {method.value: 1.0 for method in AssayMethod} for biomarker in Biomarker}
    table[Biomarker.ABETA42.value][AssayMethod.LUMINEX.value] = 1.15
    return table


class HarmonizationFactors(BaseModel):
    factors: Dict[str, Dict[str, float]] = Field(default_factory=default_factor_table)

    @model_validator(mode="after")
    def check_factors(self):
        for biomarker, methods in self.factors.items():
            for method, factor in methods.items():
                if factor <= 0:
                    raise ValueError(f"factor for ({biomarker}, {method}) must be positive")
            if methods.get(AssayMethod.ELISA.value, 1.0) != 1.0:
                raise ValueError(f"ELISA is the reference method, its factor for {biomarker} must be 1.0")
        return self


class AtnThresholds(BaseModel):
    abeta42: float = 500.0
    ptau: float = 60.0
    ttau: float = 400.0


class FeatureSet(str, Enum):
    CORE="core"
    ABETA_RATIO="abeta42_40"


class ImputationMode(str, Enum):
    DETERMINISTIC="deterministic"
    STOCHASTIC="stochastic"


class HarmonizationConfig(BaseModel):
    factors: HarmonizationFactors = Field(default_factory=HarmonizationFactors)
    atn_thresholds: AtnThresholds = Field(default_factory=AtnThresholds)
    feature_set: FeatureSet = FeatureSet.CORE
    imputation_mode: ImputationMode = ImputationMode.DETERMINISTIC
    include_apoe: bool = False
    combat_covariates: List[str] = ["age", "sex"]
    min_imputation_group: int = 5


class CombatModel(BaseModel):
    site_location: Dict[str, float]
    site_scale: Dict[str, float]
    covariate_coefficients: List[float] = []
    covariate_means: List[float] = []
    pooled_mean: float
    pooled_scale: float = Field(gt=0.0)

    @model_validator(mode="after")
    def check_scales(self):
        if any(scale <= 0 for scale in self.site_scale.values()):
            raise ValueError("site scales must be positive")
        return self


class YeoJohnsonFit(BaseModel):
    lmbda: float
    mean: float
    sd: float = Field(gt=0.0)


class FeatureModel(BaseModel):
    transforms: Dict[str, YeoJohnsonFit]
    combat: Dict[str, CombatModel]
    ratio_names: List[str]
    baseline_mmse_fill: float
    baseline_cdrsb_fill: float


class SiteVariance(BaseModel):
    before: float
    after: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.after / self.before if self.before > 0 else 0.0


class HarmonizationReport(BaseModel):
    site_variance: Dict[str, SiteVariance] = {}
    atn_distribution: Dict[str, int] = {}
    imputed: Dict[str, int] = {}
    unknown_sites: List[str] = []
