import logging
logger = logging.getLogger(__name__)
import json
from dataclasses import dataclass, field
from datetime import date
from typing import Dict, List, Iterable

import numpy as np
import pandas as pd
from pydantic import ValidationError

from models.errors import SchemaError
from models.report import ReportTable
from models.participant import (RawCsfRow, VisitRow, Demographics, RejectedRow, Exclusion, Visit,
                                BaselineBiomarkers, ParticipantRecord, SequenceWindow,
                                AssayMethod, Diagnosis, Sex)

CSF_COLUMNS = ["NACCID", "CSFABETA", "CSFPTAU", "CSFTTAU", "CSFABMD", "CSFPTMD", "CSFTTMD",
               "CSFLPMO", "CSFLPDY", "CSFLPYR"]
VISIT_COLUMNS = ["NACCID", "NACCVNUM", "VISITMO", "VISITDAY", "VISITYR", "NACCMMSE", "CDRSUM", "NACCUDSD"]
DEMOGRAPHIC_COLUMNS = ["NACCID", "SEX", "BIRTHYR", "EDUC", "NACCADC"]
OPTIONAL_CSF_COLUMNS = ["CSFAB40"]
OPTIONAL_DEMOGRAPHIC_COLUMNS = ["NACCNE4S"]

# NACCUDSD: 1 normal, 2 impaired-not-MCI, 3 MCI, 4 dementia
DEFAULT_DIAGNOSIS_CODES = {1: Diagnosis.NORMAL, 2: Diagnosis.MCI, 3: Diagnosis.MCI, 4: Diagnosis.DEMENTIA}
ASSAY_CODES = {1: AssayMethod.ELISA, 2: AssayMethod.LUMINEX}
DAYS_PER_YEAR = 365.25
MISSING_DAY = 15

INVALID_DATE = "invalid date"
NO_BIOMARKER = "no valid biomarker"
ALIGNMENT = "alignment"
INSUFFICIENT_VISITS = "insufficient visits"
INCOMPLETE_DEMOGRAPHICS = "incomplete demographics"
UNKNOWN_ASSAY = "unknown assay method"
REPEATED_VISIT_NUMBER = "visit number not increasing"


@dataclass
class ParsedDataset:
    csf: List[RawCsfRow] = field(default_factory=list)
    visits: List[VisitRow] = field(default_factory=list)
    demographics: Dict[str, Demographics] = field(default_factory=dict)
    rejects: List[RejectedRow] = field(default_factory=list)


@dataclass
class IntegrationResult:
    records: List[ParticipantRecord] = field(default_factory=list)
    exclusions: List[Exclusion] = field(default_factory=list)


def missing_to_none(value, low: float = None, high: float = None):
    """NACC writes missing values as blanks or out-of-range sentinel codes (-4, 88, 99, ...)."""
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return None
    if isinstance(value, str):
        value = value.strip()
        if value == "":
            return None
        try:
            value = float(value)
        except ValueError:
            return None
    value = float(value)
    if (low is not None and value < low) or (high is not None and value > high):
        return None
    return value


def reconstruct_date(year, month, day) -> date:
    year, month, day = missing_to_none(year), missing_to_none(month), missing_to_none(day)
    if year is None or month is None:
        raise ValueError(INVALID_DATE)
    day = MISSING_DAY if day is None or day > 31 else day
    return date(int(year), int(month), int(day))


def parse_assay_method(value) -> AssayMethod:
    if isinstance(value, str) and value.strip() in {method.value for method in AssayMethod}:
        return AssayMethod(value.strip())
    code = missing_to_none(value)
    if code is None:
        if isinstance(value, str) and value.strip():
            raise ValueError(f"{UNKNOWN_ASSAY}: {value.strip()}")
        return AssayMethod.ELISA
    return ASSAY_CODES.get(int(code), AssayMethod.OTHER)


def parse_diagnosis(value, diagnosis_codes: Dict[int, Diagnosis]) -> Diagnosis | None:
    if isinstance(value, str) and value.strip() in {diagnosis.value for diagnosis in Diagnosis}:
        return Diagnosis(value.strip())
    code = missing_to_none(value)
    if code is None:
        return None
    return diagnosis_codes.get(int(code))


def parse_sex(value) -> Sex | None:
    if isinstance(value, str) and value.strip().lower() in {sex.value for sex in Sex}:
        return Sex(value.strip().lower())
    code = missing_to_none(value)
    return {1: Sex.MALE, 2: Sex.FEMALE}.get(int(code)) if code is not None else None


def read_table(path: str, required_columns: List[str]) -> pd.DataFrame:
    table = pd.read_csv(path, dtype={"NACCID": str, "NACCADC": str}, keep_default_na=True)
    for column in required_columns:
        if column not in table.columns:
            raise SchemaError(f"{path} is missing required column {column}")
    return table


def align_csf_to_visit(csf: RawCsfRow, visits: List[VisitRow], max_gap_days: int = 90) -> VisitRow | None:
    best, best_gap = None, None
    for visit in sorted(visits, key=lambda visit: (visit.visit_date, visit.visit_number)):
        gap = abs((visit.visit_date - csf.collection_date).days)
        if best_gap is None or gap < best_gap:
            best, best_gap = visit, gap
    if best is None or best_gap > max_gap_days:
        return None
    return best


def select_csf_measurement(rows: List[RawCsfRow], baseline_date: date) -> RawCsfRow:
    return min(rows, key=lambda row: (abs((row.collection_date - baseline_date).days), row.collection_date))


def build_sequences(record: ParticipantRecord, length: int = 5) -> List[SequenceWindow]:
    states = [(visit.mmse, visit.cdrsb, visit.t) for visit in record.visits]
    return [SequenceWindow(subject_id=record.subject_id,
                           start_visit=record.visits[start].visit_number,
                           states=states[start:start + length])
            for start in range(len(states) - length + 1)]


def age_at(collection: date, birth_year: int) -> float:
    # birth taken as mid-year
    return (collection - date(int(birth_year), 7, 1)).days / DAYS_PER_YEAR


class DataIntegrationService:

    def __init__(self,
                 max_gap_days: int = 90,
                 min_visits: int = 2,
                 diagnosis_codes: Dict[int, Diagnosis] = None) -> None:
        self.max_gap_days = max_gap_days
        self.min_visits = min_visits
        self.diagnosis_codes = diagnosis_codes or DEFAULT_DIAGNOSIS_CODES

    def parse_dataset(self, csf_path: str, visits_path: str, demographics_path: str) -> ParsedDataset:
        parsed = ParsedDataset()
        self.__parse_csf__(read_table(csf_path, CSF_COLUMNS), parsed)
        self.__parse_visits__(read_table(visits_path, VISIT_COLUMNS), parsed)
        self.__parse_demographics__(read_table(demographics_path, DEMOGRAPHIC_COLUMNS), parsed)
        logger.info(f"Parsed {len(parsed.csf)} CSF rows, {len(parsed.visits)} visits, "
                    f"{len(parsed.demographics)} demographic rows, {len(parsed.rejects)} rejects")
        return parsed

    def __reject__(self, parsed: ParsedDataset, source: str, subject_id: str | None, row: int, reason: str) -> None:
        parsed.rejects.append(RejectedRow(source=source, subject_id=subject_id, row=row, reason=reason))

    def __parse_csf__(self, table: pd.DataFrame, parsed: ParsedDataset) -> None:
        for row_number, row in enumerate(table.to_dict("records"), start=1):
            subject_id = row["NACCID"]
            if not isinstance(subject_id, str) or not subject_id.strip():
                self.__reject__(parsed, "csf", None, row_number, "missing subject id")
                continue
            try:
                collection = reconstruct_date(row["CSFLPYR"], row["CSFLPMO"], row["CSFLPDY"])
                if not 1980 <= collection.year <= 2100:
                    raise ValueError(INVALID_DATE)
            except ValueError:
                self.__reject__(parsed, "csf", subject_id, row_number, INVALID_DATE)
                continue
            try:
                methods = [parse_assay_method(row[column]) for column in ("CSFABMD", "CSFPTMD", "CSFTTMD")]
            except ValueError as err:
                self.__reject__(parsed, "csf", subject_id, row_number, str(err))
                continue
            try:
                parsed.csf.append(RawCsfRow(subject_id=subject_id.strip(),
                                            abeta42=missing_to_none(row["CSFABETA"], low=1e-9),
                                            ptau=missing_to_none(row["CSFPTAU"], low=1e-9),
                                            ttau=missing_to_none(row["CSFTTAU"], low=1e-9),
                                            abeta40=missing_to_none(row.get("CSFAB40"), low=1e-9),
                                            abeta42_method=methods[0], ptau_method=methods[1], ttau_method=methods[2],
                                            collection_year=collection.year,
                                            collection_month=collection.month,
                                            collection_day=collection.day))
            except ValidationError as err:
                self.__reject__(parsed, "csf", subject_id, row_number, f"invalid row: {err.errors()[0]['msg']}")

    def __parse_visits__(self, table: pd.DataFrame, parsed: ParsedDataset) -> None:
        candidates = []
        for row_number, row in enumerate(table.to_dict("records"), start=1):
            subject_id = row["NACCID"]
            if not isinstance(subject_id, str) or not subject_id.strip():
                self.__reject__(parsed, "visits", None, row_number, "missing subject id")
                continue
            try:
                visit_date = reconstruct_date(row["VISITYR"], row["VISITMO"], row["VISITDAY"])
            except ValueError:
                self.__reject__(parsed, "visits", subject_id, row_number, INVALID_DATE)
                continue
            visit_number = missing_to_none(row["NACCVNUM"], low=0)
            if visit_number is None:
                self.__reject__(parsed, "visits", subject_id, row_number, "missing visit number")
                continue
            mmse = missing_to_none(row["NACCMMSE"], low=0, high=30)
            try:
                visit = VisitRow(subject_id=subject_id.strip(), visit_number=int(visit_number), visit_date=visit_date,
                                 mmse=int(mmse) if mmse is not None else None,
                                 cdrsb=missing_to_none(row["CDRSUM"], low=0, high=18),
                                 diagnosis=parse_diagnosis(row["NACCUDSD"], self.diagnosis_codes))
                candidates.append((row_number, visit))
            except ValidationError as err:
                self.__reject__(parsed, "visits", subject_id, row_number, f"invalid row: {err.errors()[0]['msg']}")
        self.__check_visit_order__(candidates, parsed)

    def __check_visit_order__(self, candidates: List[tuple], parsed: ParsedDataset) -> None:
        """Visit numbers must increase with the visit date; rows breaking the order are rejected."""
        by_subject: Dict[str, List[tuple]] = {}
        for row_number, visit in candidates:
            by_subject.setdefault(visit.subject_id, []).append((row_number, visit))
        accepted = set()
        for subject_id, rows in by_subject.items():
            last_number = None
            for row_number, visit in sorted(rows, key=lambda item: (item[1].visit_date, item[1].visit_number)):
                if last_number is not None and visit.visit_number <= last_number:
                    self.__reject__(parsed, "visits", subject_id, row_number,
                                    f"{REPEATED_VISIT_NUMBER}: {visit.visit_number} after {last_number}")
                    continue
                last_number = visit.visit_number
                accepted.add(row_number)
        parsed.visits.extend(visit for row_number, visit in candidates if row_number in accepted)

    def __parse_demographics__(self, table: pd.DataFrame, parsed: ParsedDataset) -> None:
        for row_number, row in enumerate(table.to_dict("records"), start=1):
            subject_id = row["NACCID"]
            if not isinstance(subject_id, str) or not subject_id.strip():
                self.__reject__(parsed, "demographics", None, row_number, "missing subject id")
                continue
            birth_year = missing_to_none(row["BIRTHYR"], low=1880, high=2100)
            apoe = missing_to_none(row.get("NACCNE4S"), low=0, high=2)
            center = row["NACCADC"]
            demographics = Demographics(subject_id=subject_id.strip(), sex=parse_sex(row["SEX"]),
                                        birth_year=int(birth_year) if birth_year is not None else None,
                                        education=missing_to_none(row["EDUC"], low=0, high=36),
                                        center_id=center.strip() if isinstance(center, str) and center.strip() else None,
                                        apoe4_count=int(apoe) if apoe is not None else None)
            known = parsed.demographics.get(demographics.subject_id)
            if known is not None:
                if known != demographics:
                    self.__reject__(parsed, "demographics", subject_id, row_number, "conflicting demographics")
                continue
            parsed.demographics[demographics.subject_id] = demographics

    def integrate(self,
                  csf: List[RawCsfRow],
                  visits: List[VisitRow],
                  demographics: Dict[str, Demographics]) -> IntegrationResult:
        csf_by_subject: Dict[str, List[RawCsfRow]] = {}
        for row in csf:
            csf_by_subject.setdefault(row.subject_id, []).append(row)
        visits_by_subject: Dict[str, List[VisitRow]] = {}
        for visit in visits:
            visits_by_subject.setdefault(visit.subject_id, []).append(visit)

        result = IntegrationResult()
        subject_ids = sorted(set(csf_by_subject) | set(visits_by_subject) | set(demographics))
        for subject_id in subject_ids:
            outcome = self.integrate_subject(subject_id, csf_by_subject.get(subject_id, []),
                                             visits_by_subject.get(subject_id, []),
                                             demographics.get(subject_id))
            if isinstance(outcome, Exclusion):
                result.exclusions.append(outcome)
            else:
                result.records.append(outcome)
        logger.info(f"Integrated {len(result.records)} of {len(subject_ids)} subjects, "
                    f"{len(result.exclusions)} excluded")
        return result

    def integrate_subject(self,
                          subject_id: str,
                          csf_rows: List[RawCsfRow],
                          visit_rows: List[VisitRow],
                          demographics: Demographics | None) -> ParticipantRecord | Exclusion:
        valid_rows = [row for row in csf_rows if row.has_biomarker()]
        if not valid_rows:
            return Exclusion(subject_id=subject_id, reason=NO_BIOMARKER)
        visit_rows = self.__unique_visits__(subject_id, visit_rows)
        if len(visit_rows) < self.min_visits:
            return Exclusion(subject_id=subject_id, reason=INSUFFICIENT_VISITS)
        baseline_visit = visit_rows[0]
        selected = select_csf_measurement(valid_rows, baseline_visit.visit_date)
        if align_csf_to_visit(selected, visit_rows, self.max_gap_days) is None:
            return Exclusion(subject_id=subject_id, reason=ALIGNMENT)
        if demographics is None or not demographics.is_complete():
            return Exclusion(subject_id=subject_id, reason=INCOMPLETE_DEMOGRAPHICS)

        baseline_mmse = baseline_visit.mmse
        baseline_severity = baseline_visit.diagnosis.severity if baseline_visit.diagnosis else None
        record_visits = []
        for visit in visit_rows:
            progressed = (baseline_severity is not None and visit.diagnosis is not None
                          and visit.diagnosis.severity > baseline_severity)
            record_visits.append(Visit(visit_number=visit.visit_number,
                                       t=(visit.visit_date - baseline_visit.visit_date).days / DAYS_PER_YEAR,
                                       cdrsb=visit.cdrsb, mmse=visit.mmse,
                                       mmse_change=(visit.mmse - baseline_mmse
                                                    if visit.mmse is not None and baseline_mmse is not None else None),
                                       diagnosis=visit.diagnosis, progressed=progressed))
        conversion = next((visit for visit in record_visits if visit.diagnosis == Diagnosis.DEMENTIA), None)
        event_time, event = (conversion.t, 1) if conversion is not None else (record_visits[-1].t, 0)

        return ParticipantRecord(subject_id=subject_id, center_id=demographics.center_id,
                                 age=age_at(selected.collection_date, demographics.birth_year),
                                 sex=demographics.sex, education=demographics.education,
                                 apoe4_count=demographics.apoe4_count,
                                 baseline_date=baseline_visit.visit_date,
                                 baseline_diagnosis=baseline_visit.diagnosis,
                                 biomarkers=BaselineBiomarkers(abeta42=selected.abeta42, ptau=selected.ptau,
                                                               ttau=selected.ttau, abeta40=selected.abeta40,
                                                               abeta42_method=selected.abeta42_method,
                                                               ptau_method=selected.ptau_method,
                                                               ttau_method=selected.ttau_method,
                                                               collection_gap_days=(selected.collection_date
                                                                                    - baseline_visit.visit_date).days),
                                 visits=record_visits, event_time=event_time, event=event)

    def __unique_visits__(self, subject_id: str, visit_rows: List[VisitRow]) -> List[VisitRow]:
        unique = []
        for visit in sorted(visit_rows, key=lambda visit: (visit.visit_date, visit.visit_number)):
            if unique and visit.visit_date == unique[-1].visit_date:
                logger.warning(f"{subject_id}: visit {visit.visit_number} shares a date with "
                               f"visit {unique[-1].visit_number}, keeping the first")
                continue
            if unique and visit.visit_number <= unique[-1].visit_number:
                logger.warning(f"{subject_id}: visit {visit.visit_number} dated after visit "
                               f"{unique[-1].visit_number}, dropping it")
                continue
            unique.append(visit)
        return unique


def cohort_summary(records: List[ParticipantRecord], sequence_length: int = 5) -> ReportTable:
    visits = np.array([len(record.visits) for record in records], dtype=float)
    follow_up = np.array([record.visits[-1].t for record in records], dtype=float)
    ages = np.array([record.age for record in records], dtype=float)
    events = np.array([record.event for record in records], dtype=float)
    female = np.array([record.sex == Sex.FEMALE for record in records], dtype=float)
    diagnoses = [record.baseline_diagnosis for record in records]
    empty = len(records) == 0
    rows = [("participants", len(records)),
            ("centers", len({record.center_id for record in records})),
            ("visits_per_subject_mean", None if empty else float(visits.mean())),
            ("visits_per_subject_min", None if empty else int(visits.min())),
            ("visits_per_subject_max", None if empty else int(visits.max())),
            ("follow_up_years_mean", None if empty else float(follow_up.mean())),
            ("follow_up_years_median", None if empty else float(np.median(follow_up))),
            ("follow_up_years_min", None if empty else float(follow_up.min())),
            ("follow_up_years_max", None if empty else float(follow_up.max())),
            ("event_rate", None if empty else float(events.mean())),
            ("age_mean", None if empty else float(ages.mean())),
            ("age_sd", float(ages.std(ddof=1)) if len(ages) > 1 else None),
            ("female_pct", None if empty else float(100 * female.mean())),
            ("sequences", int(sum(max(0, len(record.visits) - sequence_length + 1) for record in records)))]
    for diagnosis in Diagnosis:
        rows.append((f"baseline_{diagnosis.value}_pct",
                     None if empty else 100.0 * sum(d == diagnosis for d in diagnoses) / len(records)))
    return ReportTable(name="cohort_summary", columns=["statistic", "value"],
                       rows=[{"statistic": name, "value": value} for name, value in rows])


def write_records(records: Iterable, path: str) -> None:
    with open(path, "w") as file:
        for record in records:
            file.write(record.model_dump_json() + "\n")


def read_records(path: str, model=ParticipantRecord) -> list:
    with open(path) as file:
        return [model.model_validate_json(line) for line in file if line.strip()]


def write_exclusions(exclusions: List[Exclusion], path: str) -> None:
    pd.DataFrame([{"NACCID": item.subject_id, "reason": item.reason} for item in exclusions],
                 columns=["NACCID", "reason"]).to_csv(path, index=False)


def write_rejects(rejects: List[RejectedRow], path: str) -> None:
    pd.DataFrame([{"source": item.source, "NACCID": item.subject_id, "row": item.row, "reason": item.reason}
                  for item in rejects], columns=["source", "NACCID", "row", "reason"]).to_csv(path, index=False)


def write_table(table: ReportTable, path: str) -> None:
    pd.DataFrame(table.rows, columns=table.columns).to_csv(path, index=False)


def write_json(payload: dict, path: str) -> None:
    with open(path, "w") as file:
        json.dump(payload, file, indent=2, sort_keys=True)
