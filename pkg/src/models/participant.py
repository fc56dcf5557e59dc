from pydantic import BaseModel, Field, field_validator, model_validator
from typing import List
from datetime import date
from enum import Enum


class AssayMethod(str, Enum):
    ELISA="ELISA"
    LUMINEX="Luminex"
    OTHER="Other"


class Diagnosis(str, Enum):
    NORMAL="normal"
    MCI="MCI"
    DEMENTIA="dementia"

    @property
    def severity(self) -> int:
        return {"normal": 0, "MCI": 1, "dementia": 2}[self.value]


class Sex(str, Enum):
    MALE="male"
    FEMALE="female"


class Biomarker(str, Enum):
    ABETA42="abeta42"
    PTAU="ptau"
    TTAU="ttau"


class RawCsfRow(BaseModel):
    subject_id: str
    abeta42: float | None = None
    ptau: float | None = None
    ttau: float | None = None
    abeta40: float | None = None
    abeta42_method: AssayMethod = AssayMethod.ELISA
    ptau_method: AssayMethod = AssayMethod.ELISA
    ttau_method: AssayMethod = AssayMethod.ELISA
    collection_year: int = Field(ge=1980, le=2100)
    collection_month: int = Field(ge=1, le=12)
    collection_day: int = Field(ge=1, le=31)

    @property
    def collection_date(self) -> date:
        return date(self.collection_year, self.collection_month, self.collection_day)

    def has_biomarker(self) -> bool:
        return any(value is not None for value in (self.abeta42, self.ptau, self.ttau))


class VisitRow(BaseModel):
    subject_id: str
    visit_number: int
    visit_date: date
    mmse: int | None = Field(default=None, ge=0, le=30)
    cdrsb: float | None = Field(default=None, ge=0.0, le=18.0)
    diagnosis: Diagnosis | None = None


class Demographics(BaseModel):
    subject_id: str
    sex: Sex | None = None
    birth_year: int | None = None
    education: float | None = None
    center_id: str | None = None
    apoe4_count: int | None = None

    def is_complete(self) -> bool:
        return None not in (self.sex, self.birth_year, self.education, self.center_id)


class RejectedRow(BaseModel):
    source: str
    subject_id: str | None = None
    row: int
    reason: str


class Exclusion(BaseModel):
    subject_id: str
    reason: str


class Visit(BaseModel):
    visit_number: int
    t: float = Field(ge=0.0)
    cdrsb: float | None = None
    mmse: int | None = None
    mmse_change: int | None = None
    diagnosis: Diagnosis | None = None
    progressed: bool = False


class BaselineBiomarkers(BaseModel):
    abeta42: float | None = None
    ptau: float | None = None
    ttau: float | None = None
    abeta40: float | None = None
    abeta42_method: AssayMethod = AssayMethod.ELISA
    ptau_method: AssayMethod = AssayMethod.ELISA
    ttau_method: AssayMethod = AssayMethod.ELISA
    collection_gap_days: int = 0


class AtnProfile(BaseModel):
    amyloid: bool
    tau: bool
    neurodegeneration: bool

    @property
    def label(self) -> str:
        flag = lambda value: "+" if value else "-"
        return f"A{flag(self.amyloid)}T{flag(self.tau)}N{flag(self.neurodegeneration)}"


class BaselineFeatures(BaseModel):
    abeta42: float
    ptau: float
    ttau: float
    ratio_1: float
    ratio_2: float
    age: float
    sex: int = Field(ge=0, le=1)
    education: float
    baseline_mmse: float
    baseline_cdrsb: float
    apoe4: float | None = None
    ratio_names: List[str] = ["ptau/abeta42", "ttau/ptau"]

    @field_validator("abeta42", "ptau", "ttau", "ratio_1", "ratio_2")
    @classmethod
    def check_z_bound(cls, value: float) -> float:
        if abs(value) > 10:
            raise ValueError(f"standardized value {value} outside the |z| <= 10 sanity bound")
        return value

    def as_vector(self) -> List[float]:
        vector = [self.abeta42, self.ptau, self.ttau, self.ratio_1, self.ratio_2,
                  self.age, float(self.sex), self.education, self.baseline_mmse, self.baseline_cdrsb]
        if self.apoe4 is not None:
            vector.append(self.apoe4)
        return vector


FEATURE_NAMES = ["abeta42", "ptau", "ttau", "ratio_1", "ratio_2",
                 "age", "sex", "education", "baseline_mmse", "baseline_cdrsb"]


class ParticipantRecord(BaseModel):
    subject_id: str
    center_id: str
    age: float
    sex: Sex
    education: float
    apoe4_count: int | None = None
    baseline_date: date
    baseline_diagnosis: Diagnosis | None = None
    biomarkers: BaselineBiomarkers
    visits: List[Visit]
    event_time: float = Field(ge=0.0)
    event: int = Field(ge=0, le=1)
    atn: AtnProfile | None = None
    features: BaselineFeatures | None = None

    @model_validator(mode="after")
    def check_visits(self):
        if len(self.visits) < 2:
            raise ValueError("a participant record needs at least two visits")
        times = [visit.t for visit in self.visits]
        if times[0] != 0.0 or any(later <= earlier for earlier, later in zip(times, times[1:])):
            raise ValueError("visit times must start at 0 and strictly increase")
        return self

    @property
    def baseline_mmse(self) -> int | None:
        return self.visits[0].mmse

    @property
    def baseline_cdrsb(self) -> float | None:
        return self.visits[0].cdrsb

    def trajectory_points(self) -> tuple[List[float], List[float]]:
        points = [(visit.t, visit.cdrsb) for visit in self.visits if visit.cdrsb is not None]
        return [t for t, _ in points], [y for _, y in points]


class SequenceWindow(BaseModel):
    subject_id: str
    start_visit: int
    states: List[tuple[float | None, float | None, float]]

    @model_validator(mode="after")
    def check_window(self):
        times = [state[2] for state in self.states]
        if any(later <= earlier for earlier, later in zip(times, times[1:])):
            raise ValueError("window times must strictly increase")
        return self
