import logging
logger = logging.getLogger(__name__)
from itertools import product
from typing import Dict, List

import numpy as np
from scipy import stats

from models.errors import (ConfigurationError, DegenerateInputError, ImputationError,
                           InsufficientDataError, ParameterError, RankError)
from models.harmonization import (HarmonizationFactors, HarmonizationConfig, HarmonizationReport, AtnThresholds,
                                  CombatModel, YeoJohnsonFit, FeatureModel, FeatureSet, ImputationMode,
                                  SiteVariance)
from models.participant import ParticipantRecord, AtnProfile, BaselineFeatures, AssayMethod, Sex

MARKERS = ["abeta42", "ptau", "ttau"]
CORE_RATIOS = ["ptau/abeta42", "ttau/ptau"]
ABETA_RATIOS = ["ptau/abeta42", "abeta42/abeta40"]
YEO_JOHNSON_GRID = np.linspace(-3.0, 3.0, 601)
Z_BOUND = 10.0


def apply_assay_factor(value: float, biomarker: str, method: AssayMethod,
                       factors: HarmonizationFactors = None) -> float:
    factors = factors or HarmonizationFactors()
    if value is None or not value > 0:
        raise ParameterError(f"{biomarker} value must be positive, got {value}")
    try:
        factor = factors.factors[str(biomarker)][AssayMethod(method).value]
    except (KeyError, ValueError):
        raise ConfigurationError(f"no harmonization factor for ({biomarker}, {method})")
    return factor * value


def empirical_bayes_site_effects(standardized: np.ndarray, site_index: np.ndarray, gamma_hat: np.ndarray,
                                 delta_hat: np.ndarray, counts: np.ndarray, max_iterations: int = 1000,
                                 tolerance: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    gamma_bar = gamma_hat.mean()
    tau2 = gamma_hat.var(ddof=1)
    delta_mean, delta_var = delta_hat.mean(), delta_hat.var(ddof=1)
    shrink_scale = delta_var > 1e-12
    if shrink_scale:
        a_prior = (2 * delta_var + delta_mean ** 2) / delta_var
        b_prior = (delta_mean * delta_var + delta_mean ** 3) / delta_var
    gamma_star, delta_star = gamma_hat.copy(), delta_hat.copy()
    for _ in range(max_iterations):
        if tau2 > 1e-12:
            gamma_new = (counts * tau2 * gamma_hat + delta_star * gamma_bar) / (counts * tau2 + delta_star)
        else:
            gamma_new = np.full_like(gamma_hat, gamma_bar)
        if shrink_scale:
            squares = np.bincount(site_index, weights=(standardized - gamma_new[site_index]) ** 2,
                                  minlength=len(counts))
            delta_new = (b_prior + 0.5 * squares) / (counts / 2.0 + a_prior - 1.0)
        else:
            delta_new = delta_hat
        change = max(np.max(np.abs(gamma_new - gamma_star)), np.max(np.abs(delta_new - delta_star)))
        gamma_star, delta_star = gamma_new, delta_new
        if change < tolerance:
            break
    return gamma_star, delta_star


def combat_fit(values: np.ndarray, sites: np.ndarray, covariates: np.ndarray = None) -> CombatModel:
    """Location/scale batch model with empirical-Bayes shrinkage of the per-site parameters."""
    values = np.asarray(values, dtype=float)
    sites = np.asarray(sites).astype(str)
    n = len(values)
    covariates = np.zeros((n, 0)) if covariates is None else np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates[:, None]
    labels, site_index, counts = np.unique(sites, return_inverse=True, return_counts=True)
    if np.any(counts < 2):
        raise InsufficientDataError(f"sites {labels[counts < 2].tolist()} have fewer than 2 observations")
    if n <= covariates.shape[1] + len(labels):
        raise RankError(f"{n} observations cannot identify {len(labels)} sites and {covariates.shape[1]} covariates")
    covariate_means = covariates.mean(axis=0)
    centered = covariates - covariate_means
    design = np.hstack([np.eye(len(labels))[site_index], centered])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankError("covariate matrix is singular given the site indicators")
    coefficients = np.linalg.lstsq(design, values, rcond=None)[0]
    site_coefficients, beta = coefficients[:len(labels)], coefficients[len(labels):]
    grand_mean = float(counts @ site_coefficients / n)
    pooled_variance = np.mean((values - design @ coefficients) ** 2)
    if pooled_variance <= 0:
        raise DegenerateInputError("values have no residual variance")
    pooled_sd = float(np.sqrt(pooled_variance))

    standardized = (values - grand_mean - centered @ beta) / pooled_sd
    gamma_hat = np.bincount(site_index, weights=standardized) / counts
    delta_hat = np.bincount(site_index, weights=(standardized - gamma_hat[site_index]) ** 2) / counts
    if len(labels) > 1:
        gamma_star, delta_star = empirical_bayes_site_effects(standardized, site_index, gamma_hat, delta_hat, counts)
    else:
        gamma_star, delta_star = gamma_hat, delta_hat
    delta_star = np.maximum(delta_star, 1e-12)
    return CombatModel(site_location={label: float(grand_mean + pooled_sd * gamma)
                                      for label, gamma in zip(labels, gamma_star)},
                       site_scale={label: float(pooled_sd * np.sqrt(delta))
                                   for label, delta in zip(labels, delta_star)},
                       covariate_coefficients=beta.tolist(), covariate_means=covariate_means.tolist(),
                       pooled_mean=grand_mean, pooled_scale=pooled_sd)


def combat_apply(model: CombatModel, value, site, covariates=None):
    values = np.atleast_1d(np.asarray(value, dtype=float))
    site_labels = np.atleast_1d(np.asarray(site)).astype(str)
    if len(site_labels) == 1 and len(values) > 1:
        site_labels = np.repeat(site_labels, len(values))
    adjustment = np.zeros(len(values))
    if covariates is not None and len(model.covariate_coefficients):
        covariates = np.asarray(covariates, dtype=float).reshape(len(values), len(model.covariate_coefficients))
        adjustment = (covariates - np.asarray(model.covariate_means)) @ np.asarray(model.covariate_coefficients)
    unknown = sorted(set(site_labels) - set(model.site_location))
    for label in unknown:
        logger.warning(f"Site {label} was not seen when fitting ComBat, using pooled parameters")
    location = np.array([model.site_location.get(label, model.pooled_mean) for label in site_labels])
    scale = np.array([model.site_scale.get(label, model.pooled_scale) for label in site_labels])
    harmonized = (values - location - adjustment) / scale * model.pooled_scale + model.pooled_mean
    return float(harmonized[0]) if np.ndim(value) == 0 else harmonized


def imputation_scale(values: np.ndarray) -> np.ndarray:
    # Abeta42 enters through its reciprocal
    transformed = np.array(values, dtype=float, copy=True)
    transformed[..., 0] = 1.0 / transformed[..., 0]
    return transformed


def impute_biomarker(partial: tuple,
                     complete_cases: np.ndarray,
                     stochastic: bool = False,
                     rng: np.random.Generator = None) -> tuple[float, float, float]:
    """Fill missing markers of (abeta42, ptau, ttau) by regression on the available ones over complete cases."""
    observed = np.array([value is not None and not np.isnan(value) for value in partial])
    if not observed.any():
        raise ImputationError("all three biomarkers are missing")
    if observed.all():
        return tuple(float(value) for value in partial)
    complete_cases = np.asarray(complete_cases, dtype=float).reshape(-1, 3)
    if len(complete_cases) < 2:
        raise ImputationError(f"{len(complete_cases)} complete cases are too few to impute from")
    if stochastic and rng is None:
        raise ImputationError("stochastic imputation needs a random generator")
    cases = imputation_scale(complete_cases)
    subject = imputation_scale(np.array([value if value is not None else np.nan for value in partial]))
    design = np.column_stack([np.ones(len(cases)), cases[:, observed]])
    point = np.concatenate([[1.0], subject[observed]])
    completed = np.array([value if value is not None else np.nan for value in partial], dtype=float)
    for index in np.nonzero(~observed)[0]:
        coefficients = np.linalg.lstsq(design, cases[:, index], rcond=None)[0]
        prediction = point @ coefficients
        if stochastic:
            prediction += rng.choice(cases[:, index] - design @ coefficients)
        if prediction <= 0:
            prediction = 1.0 / np.median(complete_cases[:, index]) if index == 0 else np.median(complete_cases[:, index])
            logger.warning(f"Non-positive imputed {MARKERS[index]}, using the group median")
        completed[index] = 1.0 / prediction if index == 0 else prediction
    return tuple(float(value) for value in completed)


def atn_flags(values: np.ndarray, thresholds: AtnThresholds = None) -> np.ndarray:
    thresholds = thresholds or AtnThresholds()
    values = np.asarray(values, dtype=float).reshape(-1, 3)
    # Unknown markers compare False here; callers mask them separately
    return np.column_stack([values[:, 0] < thresholds.abeta42,
                            values[:, 1] > thresholds.ptau,
                            values[:, 2] > thresholds.ttau])


def classify_atn(abeta42: float, ptau: float, ttau: float, thresholds: AtnThresholds = None) -> AtnProfile:
    amyloid, tau, neurodegeneration = atn_flags([abeta42, ptau, ttau], thresholds)[0]
    return AtnProfile(amyloid=bool(amyloid), tau=bool(tau), neurodegeneration=bool(neurodegeneration))


def partial_atn_label(partial: tuple, thresholds: AtnThresholds = None) -> str:
    values = np.array([value if value is not None else np.nan for value in partial], dtype=float)
    flags = atn_flags(values, thresholds)[0]
    parts = []
    for letter, value, flag in zip("ATN", values, flags):
        parts.append(f"{letter}?" if np.isnan(value) else f"{letter}{'+' if flag else '-'}")
    return "".join(parts)


def atn_distribution(profiles: List[AtnProfile]) -> Dict[str, int]:
    counts = {AtnProfile(amyloid=a, tau=t, neurodegeneration=n).label: 0
              for a, t, n in product([True, False], repeat=3)}
    for profile in profiles:
        counts[profile.label] += 1
    return counts


def yeo_johnson(values: np.ndarray) -> tuple[np.ndarray, YeoJohnsonFit]:
    values = np.asarray(values, dtype=float)
    if len(values) < 10:
        raise InsufficientDataError(f"Yeo-Johnson needs at least 10 values, got {len(values)}")
    if np.ptp(values) == 0:
        raise DegenerateInputError("cannot transform a constant sample")
    likelihood = np.array([stats.yeojohnson_llf(lmbda, values) for lmbda in YEO_JOHNSON_GRID])
    lmbda = float(YEO_JOHNSON_GRID[np.nanargmax(likelihood)])
    transformed = stats.yeojohnson(values, lmbda=lmbda)
    sd = float(transformed.std(ddof=1))
    if not sd > 0:
        raise DegenerateInputError("transformed sample has zero variance")
    return transformed, YeoJohnsonFit(lmbda=lmbda, mean=float(transformed.mean()), sd=sd)


def standardize(values, fit: YeoJohnsonFit) -> np.ndarray:
    z = (stats.yeojohnson(np.atleast_1d(np.asarray(values, dtype=float)), lmbda=fit.lmbda) - fit.mean) / fit.sd
    clipped = np.clip(z, -Z_BOUND, Z_BOUND)
    if np.any(clipped != z):
        logger.warning(f"{int(np.sum(clipped != z))} standardized values clipped to |z| <= {Z_BOUND}")
    return clipped


def ratio_values(markers: Dict[str, float], ratio_names: List[str]) -> List[float]:
    ratios = []
    for name in ratio_names:
        numerator, denominator = name.split("/")
        ratios.append(markers[numerator] / markers[denominator])
    return ratios


def build_features(markers: Dict[str, float], record: ParticipantRecord, model: FeatureModel,
                   include_apoe: bool = False, apoe_fill: float = 0.0) -> BaselineFeatures:
    """Standardized biomarker and ratio fields plus demographics for one harmonized subject."""
    ratios = ratio_values(markers, model.ratio_names)
    fields = dict(zip(MARKERS, [markers[marker] for marker in MARKERS]))
    fields.update(dict(zip(model.ratio_names, ratios)))
    z = {name: float(standardize(value, model.transforms[name])[0]) for name, value in fields.items()}
    apoe = None
    if include_apoe:
        apoe = float(record.apoe4_count) if record.apoe4_count is not None else apoe_fill
    return BaselineFeatures(abeta42=z["abeta42"], ptau=z["ptau"], ttau=z["ttau"],
                            ratio_1=z[model.ratio_names[0]], ratio_2=z[model.ratio_names[1]],
                            age=record.age, sex=int(record.sex == Sex.FEMALE), education=record.education,
                            baseline_mmse=(float(record.baseline_mmse) if record.baseline_mmse is not None
                                           else model.baseline_mmse_fill),
                            baseline_cdrsb=(float(record.baseline_cdrsb) if record.baseline_cdrsb is not None
                                            else model.baseline_cdrsb_fill),
                            apoe4=apoe, ratio_names=model.ratio_names)


def between_site_variance(values: np.ndarray, sites: np.ndarray) -> float:
    labels = np.unique(sites)
    means = np.array([values[sites == label].mean() for label in labels if np.sum(sites == label) >= 2])
    return float(means.var()) if len(means) > 1 else 0.0


class HarmonizationService:

    def __init__(self,
                 config: HarmonizationConfig = None,
                 seed: int = 0) -> None:
        self.config = config or HarmonizationConfig()
        self.seed = seed

    @property
    def ratio_names(self) -> List[str]:
        return ABETA_RATIOS if self.config.feature_set == FeatureSet.ABETA_RATIO else CORE_RATIOS

    def __covariates__(self, records: List[ParticipantRecord]) -> np.ndarray:
        columns = {"age": lambda record: record.age,
                   "sex": lambda record: float(record.sex == Sex.FEMALE),
                   "education": lambda record: record.education}
        try:
            getters = [columns[name] for name in self.config.combat_covariates]
        except KeyError as err:
            raise ConfigurationError(f"unknown ComBat covariate {err}")
        return np.array([[getter(record) for getter in getters] for record in records], dtype=float).reshape(
            len(records), len(getters))

    def __assay_scaled__(self, records: List[ParticipantRecord], marker: str) -> np.ndarray:
        scaled = np.full(len(records), np.nan)
        for index, record in enumerate(records):
            value = getattr(record.biomarkers, marker)
            if value is None:
                continue
            if marker == "abeta40":
                # no published factor for Abeta40, raw values are kept
                scaled[index] = value
            else:
                scaled[index] = apply_assay_factor(value, marker, getattr(record.biomarkers, f"{marker}_method"),
                                                   self.config.factors)
        return scaled

    def __site_correct__(self, values: np.ndarray, sites: np.ndarray, covariates: np.ndarray,
                         marker: str, report: HarmonizationReport) -> tuple[np.ndarray, CombatModel]:
        observed = ~np.isnan(values)
        labels, counts = np.unique(sites[observed], return_counts=True)
        eligible = observed & np.isin(sites, labels[counts >= 2])
        logs = np.log(values[eligible])
        model = combat_fit(logs, sites[eligible], covariates[eligible])
        corrected = np.full(len(values), np.nan)
        corrected[observed] = np.exp(combat_apply(model, np.log(values[observed]), sites[observed],
                                                  covariates[observed]))
        report.unknown_sites = sorted(set(report.unknown_sites) | set(labels[counts < 2].tolist()))
        report.site_variance[marker] = SiteVariance(
            before=between_site_variance(np.log(values[observed]), sites[observed]),
            after=between_site_variance(np.log(corrected[observed]), sites[observed]))
        logger.info(f"ComBat {marker}: between-site variance {report.site_variance[marker].before:.4f} -> "
                    f"{report.site_variance[marker].after:.4f}")
        return corrected, model

    def __impute__(self, harmonized: np.ndarray, report: HarmonizationReport) -> np.ndarray:
        complete = ~np.isnan(harmonized).any(axis=1)
        if complete.sum() < 2:
            raise ImputationError(f"only {int(complete.sum())} subjects have all three biomarkers")
        cases = harmonized[complete]
        case_flags = atn_flags(cases, self.config.atn_thresholds)
        stochastic = self.config.imputation_mode == ImputationMode.STOCHASTIC
        rng = np.random.default_rng(self.seed)
        completed = harmonized.copy()
        report.imputed = {marker: int(np.isnan(harmonized[:, index]).sum()) for index, marker in enumerate(MARKERS)}
        for index in np.nonzero(~complete)[0]:
            row = harmonized[index]
            known = ~np.isnan(row)
            flags = atn_flags(np.where(known, row, 1.0), self.config.atn_thresholds)[0]
            group = np.all(case_flags[:, known] == flags[known], axis=1)
            partial = tuple(float(value) if present else None for value, present in zip(row, known))
            if group.sum() < self.config.min_imputation_group:
                logger.warning(f"Imputation group {partial_atn_label(partial, self.config.atn_thresholds)} has "
                               f"{int(group.sum())} complete cases, using all {len(cases)}")
                group = np.ones(len(cases), dtype=bool)
            completed[index] = impute_biomarker(partial, cases[group], stochastic=stochastic, rng=rng)
        return completed

    def fit_transform(self, records: List[ParticipantRecord]) -> tuple[List[ParticipantRecord], FeatureModel,
                                                                       HarmonizationReport]:
        if len(records) < 10:
            raise InsufficientDataError(f"harmonization needs at least 10 subjects, got {len(records)}")
        report = HarmonizationReport()
        sites = np.array([record.center_id for record in records]).astype(str)
        covariates = self.__covariates__(records)
        markers = MARKERS + (["abeta40"] if self.config.feature_set == FeatureSet.ABETA_RATIO else [])

        corrected, combat_models = {}, {}
        for marker in markers:
            scaled = self.__assay_scaled__(records, marker)
            if np.all(np.isnan(scaled)):
                raise ImputationError(f"no subject has a {marker} measurement")
            corrected[marker], combat_models[marker] = self.__site_correct__(scaled, sites, covariates,
                                                                             marker, report)
        completed = self.__impute__(np.column_stack([corrected[marker] for marker in MARKERS]), report)
        if "abeta40" in corrected and np.isnan(corrected["abeta40"]).any():
            fill = np.nanmedian(completed[:, 0] / corrected["abeta40"])
            missing = np.isnan(corrected["abeta40"])
            logger.warning(f"{int(missing.sum())} subjects lack Abeta40, filling the median Abeta42/40 ratio")
            corrected["abeta40"][missing] = completed[missing, 0] / fill

        subject_markers = []
        for index in range(len(records)):
            values = dict(zip(MARKERS, completed[index]))
            if "abeta40" in corrected:
                values["abeta40"] = corrected["abeta40"][index]
            subject_markers.append(values)
        fields = {marker: completed[:, index] for index, marker in enumerate(MARKERS)}
        ratios = np.array([ratio_values(values, self.ratio_names) for values in subject_markers])
        fields.update({name: ratios[:, index] for index, name in enumerate(self.ratio_names)})
        transforms = {name: yeo_johnson(values)[1] for name, values in fields.items()}

        mmse = [record.baseline_mmse for record in records if record.baseline_mmse is not None]
        cdrsb = [record.baseline_cdrsb for record in records if record.baseline_cdrsb is not None]
        missing_clinical = sum(record.baseline_mmse is None or record.baseline_cdrsb is None for record in records)
        if missing_clinical:
            logger.warning(f"{missing_clinical} subjects lack baseline MMSE or CDR-SB, filling the cohort median")
        model = FeatureModel(transforms=transforms, combat=combat_models, ratio_names=self.ratio_names,
                             baseline_mmse_fill=float(np.median(mmse)) if mmse else 30.0,
                             baseline_cdrsb_fill=float(np.median(cdrsb)) if cdrsb else 0.0)
        apoe = [record.apoe4_count for record in records if record.apoe4_count is not None]
        apoe_fill = float(np.median(apoe)) if apoe else 0.0

        harmonized_records = []
        for record, values in zip(records, subject_markers):
            atn = classify_atn(values["abeta42"], values["ptau"], values["ttau"], self.config.atn_thresholds)
            features = build_features(values, record, model, self.config.include_apoe, apoe_fill)
            harmonized_records.append(record.model_copy(update={"atn": atn, "features": features}))
        report.atn_distribution = atn_distribution([record.atn for record in harmonized_records])
        logger.info(f"Harmonized {len(harmonized_records)} subjects, imputed {report.imputed}")
        return harmonized_records, model, report
