import logging
logger = logging.getLogger(__name__)
import os
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Dict, List

import numpy as np
import pandas as pd

from dataio.service import CSF_COLUMNS, VISIT_COLUMNS, DEMOGRAPHIC_COLUMNS, DAYS_PER_YEAR, write_records
from evalstats.metric_service import c_index, concordance_with_truth, regression_metrics
from models.cohort import GeneratorConfig, SubjectTruth, HazardLink, HazardWeights
from models.errors import JoinError, UndefinedMetricError
from models.harmonization import HarmonizationFactors, AtnThresholds
from models.report import MetricReport

# latent-group medians on the ELISA scale (pg/mL) and log-scale spread
ABETA42_MEDIANS = (750.0, 380.0)
PTAU_MEDIANS = (45.0, 80.0)
TTAU_MEDIANS = (280.0, 550.0)
ABETA40_MEDIAN = 10000.0
# Aβ42 groups overlap around the cutoff
LOG_SD = {"abeta42": 0.3, "ptau": 0.25, "ttau": 0.25, "abeta40": 0.2}
TAU_GIVEN_AMYLOID = (0.2, 0.7)
NEURODEGENERATION_GIVEN_TAU = (0.2, 0.7)
APOE_GIVEN_AMYLOID = ([0.75, 0.22, 0.03], [0.4, 0.45, 0.15])
ASSAY_CODES = {"ELISA": 1, "Luminex": 2, "Other": 3}
DIAGNOSIS_CODES = {"normal": 1, "MCI": 3, "dementia": 4}
MARKERS = ["abeta42", "ptau", "ttau"]
FIRST_BASELINE = date(2005, 1, 1)


@dataclass
class SimulatedSubject:
    truth: SubjectTruth
    visit_times: List[float]
    cdrsb: List[float]
    baseline_diagnosis: str
    female: bool
    age: float
    education: int
    apoe4_count: int
    abeta40: float


@dataclass
class GeneratedCohort:
    csf: pd.DataFrame
    visits: pd.DataFrame
    demographics: pd.DataFrame
    truth: List[SubjectTruth] = field(default_factory=list)


def zscore(values: np.ndarray) -> np.ndarray:
    sd = values.std()
    return (values - values.mean()) / (sd if sd > 0 else 1.0)


def finite_or_none(value: float) -> float | None:
    return float(value) if np.isfinite(value) else None


def draw_event_times(log_risk, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverse-transform draw from an exponential baseline hazard scaled by exp(log_risk)."""
    log_risk = np.asarray(log_risk, dtype=float)
    if rate == 0:
        return np.full(log_risk.shape, np.inf)
    return -np.log(rng.random(log_risk.shape)) / (rate * np.exp(log_risk))


def hazard_log_risk(z_ptau: np.ndarray, z_inv_abeta42: np.ndarray, abeta42: np.ndarray,
                    link: HazardLink, weights: HazardWeights = None,
                    cutoff: float = AtnThresholds().abeta42) -> np.ndarray:
    """Centered log-risk. Under the nonlinear link the p-tau slope changes sign at the Aβ42 cutoff."""
    weights = weights or HazardWeights()
    risk = weights.ptau * z_ptau + weights.inv_abeta42 * z_inv_abeta42
    if link == HazardLink.NONLINEAR:
        positive = abeta42 < cutoff
        risk = (risk + weights.ptau_amyloid_positive * z_ptau * positive
                + weights.ptau_amyloid_negative * z_ptau * ~positive)
    return risk - risk.mean()


class CohortGenerator:

    def __init__(self,
                 config: GeneratorConfig = None,
                 factors: HarmonizationFactors = None) -> None:
        self.config = config or GeneratorConfig()
        self.factors = factors or HarmonizationFactors()

    def __biomarkers__(self, rng: np.random.Generator, n: int) -> Dict[str, np.ndarray]:
        amyloid = rng.random(n) < 0.5
        tau = rng.random(n) < np.where(amyloid, TAU_GIVEN_AMYLOID[1], TAU_GIVEN_AMYLOID[0])
        neuro = rng.random(n) < np.where(tau, NEURODEGENERATION_GIVEN_TAU[1], NEURODEGENERATION_GIVEN_TAU[0])
        lognormal = lambda medians, flag, name: np.exp(np.log(np.where(flag, medians[1], medians[0]))
                                                       + rng.normal(0.0, LOG_SD[name], n))
        return {"amyloid": amyloid,
                "abeta42": lognormal(ABETA42_MEDIANS, amyloid, "abeta42"),
                "ptau": lognormal(PTAU_MEDIANS, tau, "ptau"),
                "ttau": lognormal(TTAU_MEDIANS, neuro, "ttau"),
                "abeta40": np.exp(np.log(ABETA40_MEDIAN) + rng.normal(0.0, LOG_SD["abeta40"], n))}

    def __visits__(self, rng: np.random.Generator, event_time: float, end: float) -> tuple[List[float], int]:
        config = self.config
        times = [0.0]
        while True:
            step = max(0.25, rng.normal(config.visit_interval_mean, config.visit_interval_sd))
            if times[-1] + step > end:
                return times, 0
            times.append(times[-1] + step)
            if times[-1] >= event_time:
                return times, 1

    def simulate(self) -> List[SimulatedSubject]:
        config = self.config
        rng = np.random.default_rng(config.seed)
        n = config.n_subjects
        centers = rng.choice(config.n_centers, size=n, p=config.center_weights)
        shifts = {marker: rng.normal(0.0, config.site_shift_sd.get(marker, 0.0), config.n_centers)
                  for marker in MARKERS}
        markers = self.__biomarkers__(rng, n)
        z_ptau = zscore(np.log(markers["ptau"]))
        z_inv_abeta = zscore(-np.log(markers["abeta42"]))
        pathology = (z_ptau + z_inv_abeta + zscore(np.log(markers["ttau"]))) / 3.0
        log_risk = hazard_log_risk(z_ptau, z_inv_abeta, markers["abeta42"], config.hazard_link, config.hazard_weights)
        theta = (np.asarray(config.fixed_effects) + np.outer(pathology, config.trajectory_link)
                 + rng.multivariate_normal(np.zeros(3), np.asarray(config.random_covariance), size=n))

        age = np.clip(rng.normal(config.age_mean, config.age_sd, n), 50.0, 95.0)
        female = rng.random(n) < 0.55
        education = np.clip(np.rint(rng.normal(15.5, 3.0, n)), 6, 24).astype(int)
        mci = rng.random(n) < config.mci_fraction
        assay = rng.choice(list(config.assay_mix), size=n, p=list(config.assay_mix.values()))
        event_times = draw_event_times(log_risk, config.baseline_hazard, rng)
        censoring_times = (rng.exponential(1.0 / config.censoring_rate, n) if config.censoring_rate > 0
                           else np.full(n, np.inf))
        log_spread = {marker: np.log(markers[marker]).std() for marker in MARKERS}

        subjects = []
        for index in range(n):
            end = min(censoring_times[index], config.max_follow_up)
            times, observed_event = self.__visits__(rng, event_times[index], end)
            noise = rng.normal(0.0, np.sqrt(config.residual_variance), len(times))
            cdrsb = np.clip(np.vander(times, 3, increasing=True) @ theta[index] + noise, 0.0, 18.0)
            if config.cdrsb_grid:
                cdrsb = np.round(cdrsb / config.cdrsb_grid) * config.cdrsb_grid
            apoe = rng.choice(3, p=APOE_GIVEN_AMYLOID[int(markers["amyloid"][index])])
            truth = SubjectTruth(subject_id=f"NACC{index + 1:06d}", center_id=str(centers[index] + 1),
                                 alpha=theta[index, 0], beta=theta[index, 1], gamma=theta[index, 2],
                                 log_risk=log_risk[index], event_time=finite_or_none(event_times[index]),
                                 censoring_time=finite_or_none(censoring_times[index]), observed_time=times[-1],
                                 observed_event=observed_event,
                                 abeta42=markers["abeta42"][index], ptau=markers["ptau"][index],
                                 ttau=markers["ttau"][index], z_ptau=z_ptau[index],
                                 z_inv_abeta42=z_inv_abeta[index],
                                 site_shift={marker: float(shifts[marker][centers[index]] * log_spread[marker])
                                             for marker in MARKERS},
                                 assay_method=str(assay[index]), amyloid_positive=bool(markers["amyloid"][index]))
            subjects.append(SimulatedSubject(truth=truth, visit_times=times, cdrsb=cdrsb.tolist(),
                                             baseline_diagnosis="MCI" if mci[index] else "normal",
                                             female=bool(female[index]), age=float(age[index]),
                                             education=int(education[index]), apoe4_count=int(apoe),
                                             abeta40=float(markers["abeta40"][index])))
        logger.info(f"Simulated {n} subjects, {sum(s.truth.observed_event for s in subjects)} observed conversions")
        return subjects

    def __raw_value__(self, subject: SimulatedSubject, marker: str) -> float:
        truth = subject.truth
        shifted = getattr(truth, marker) * np.exp(truth.site_shift[marker])
        return round(shifted / self.factors.factors[marker][truth.assay_method], 2)

    def generate(self) -> GeneratedCohort:
        config = self.config
        subjects = self.simulate()
        rng = np.random.default_rng([config.seed, 1])
        csf_rows, visit_rows, demographic_rows = [], [], []
        for subject in subjects:
            truth = subject.truth
            baseline = FIRST_BASELINE + timedelta(days=int(rng.integers(0, 3650)))
            visit_dates = [baseline + timedelta(days=int(round(t * DAYS_PER_YEAR))) for t in subject.visit_times]
            for number, (visit_date, t, cdrsb) in enumerate(zip(visit_dates, subject.visit_times, subject.cdrsb), 1):
                converted = truth.event_time is not None and t >= truth.event_time
                diagnosis = "dementia" if converted else subject.baseline_diagnosis
                mmse = int(np.clip(np.rint(29.5 - 1.2 * cdrsb + rng.normal(0.0, 1.0)), 0, 30))
                visit_rows.append([truth.subject_id, number, visit_date.month, visit_date.day, visit_date.year,
                                   mmse, cdrsb, DIAGNOSIS_CODES[diagnosis]])

            misaligned = rng.random() < config.misaligned_rate
            offset = -int(rng.integers(120, 201)) if misaligned else int(rng.integers(-30, 31))
            values = {marker: (None if rng.random() < config.missing_rate.get(marker, 0.0)
                               else self.__raw_value__(subject, marker)) for marker in MARKERS}
            draws = [(baseline + timedelta(days=offset), values)]
            if not misaligned and len(visit_dates) > 1 and rng.random() < config.repeat_csf_rate:
                repeat = {marker: None if value is None else round(value * float(np.exp(rng.normal(0.0, 0.05))), 2)
                          for marker, value in values.items()}
                draws.append((visit_dates[1] + timedelta(days=int(rng.integers(-10, 11))), repeat))
            code = ASSAY_CODES[truth.assay_method]
            for collected, draw in draws:
                csf_rows.append([truth.subject_id, draw["abeta42"], draw["ptau"], draw["ttau"], code, code, code,
                                 collected.month, collected.day, collected.year, round(subject.abeta40, 2)])

            collection = draws[0][0]
            birth_year = (collection - timedelta(days=int(round(subject.age * DAYS_PER_YEAR)))).year
            education = None if rng.random() < config.missing_demographics_rate else subject.education
            demographic_rows.append([truth.subject_id, 2 if subject.female else 1, birth_year, education,
                                     truth.center_id, subject.apoe4_count])

        return GeneratedCohort(csf=pd.DataFrame(csf_rows, columns=CSF_COLUMNS + ["CSFAB40"]),
                               visits=pd.DataFrame(visit_rows, columns=VISIT_COLUMNS),
                               demographics=pd.DataFrame(demographic_rows, columns=DEMOGRAPHIC_COLUMNS + ["NACCNE4S"]),
                               truth=[subject.truth for subject in subjects])


def write_cohort(cohort: GeneratedCohort, directory: str) -> Dict[str, str]:
    os.makedirs(directory, exist_ok=True)
    paths = {name: os.path.join(directory, f"{name}.csv") for name in ("csf", "visits", "demographics")}
    for name, path in paths.items():
        getattr(cohort, name).to_csv(path, index=False)
    paths["ground_truth"] = os.path.join(directory, "ground_truth.jsonl")
    write_records(cohort.truth, paths["ground_truth"])
    logger.info(f"Wrote {len(cohort.truth)} subjects to {directory}")
    return paths


def oracle_metrics(truth: List[SubjectTruth], predictions: Dict[str, Dict[str, float]]) -> List[MetricReport]:
    """Score predictions against the generating parameters rather than their estimates.

    `predictions` maps subject id to any of alpha, beta, gamma and risk.
    """
    by_id = {item.subject_id: item for item in truth}
    unknown = sorted(set(predictions) - set(by_id))
    if unknown:
        raise JoinError(f"{len(unknown)} predicted subjects have no ground truth, e.g. {unknown[0]}")
    ids = sorted(predictions)
    reports = []
    for name in ("alpha", "beta", "gamma"):
        pairs = [(predictions[subject][name], getattr(by_id[subject], name)) for subject in ids
                 if name in predictions[subject]]
        if len(pairs) < 2:
            continue
        r2, rmse, _ = regression_metrics([p for p, _ in pairs], [t for _, t in pairs])
        reports.append(MetricReport(metric=f"r2_{name}_vs_truth", value=r2, n=len(pairs)))
        reports.append(MetricReport(metric=f"rmse_{name}_vs_truth", value=rmse, n=len(pairs)))
    scored = [subject for subject in ids if "risk" in predictions[subject]]
    if len(scored) >= 2:
        risk = np.array([predictions[subject]["risk"] for subject in scored])
        reports.append(MetricReport(metric="c_index_vs_true_risk", n=len(scored),
                                    value=concordance_with_truth(risk, [by_id[s].log_risk for s in scored])))
        try:
            value = c_index(risk, [by_id[s].observed_time for s in scored], [by_id[s].observed_event for s in scored])
        except UndefinedMetricError:
            value = None
        reports.append(MetricReport(metric="c_index_vs_outcomes", value=value, n=len(scored)))
    return reports


def theoretical_c_index(config: GeneratorConfig, n: int = 20000) -> float:
    """C-index of the true log-risk against simulated outcomes, a ceiling for any risk model."""
    simulated = CohortGenerator(config.model_copy(update={"n_subjects": n, "seed": config.seed + 1})).simulate()
    return c_index([s.truth.log_risk for s in simulated], [s.truth.observed_time for s in simulated],
                   [s.truth.observed_event for s in simulated])
