import argparse
import json
import logging
logger = logging.getLogger(__name__)
import os
import sys
import traceback
from typing import Callable, Dict, List

import numpy as np
from pydantic import ValidationError

from config import app_config
from dataio.service import (DataIntegrationService, build_sequences, cohort_summary, read_records, write_records,
                            write_exclusions, write_rejects, write_table, write_json)
from evalstats.metric_service import km_fit
from evalstats.stats_service import tertile_stratify, TERTILE_LABELS
from evalstats.validation_service import (HoldoutPrediction, ModelFactory, repeated_cv, cv_summary, compare_methods,
                                          loco_harness, loco_summary, fairness_strata, stratified_split,
                                          stratified_holdout)
from harmonize.service import HarmonizationService
from mixedfx.service import MixedEffectsService, write_targets
from models.cohort import CohortArrays, CohortFilter, GeneratorConfig, HazardLink, SubjectTruth
from models.errors import DATA_ERRORS, USAGE_ERRORS, UsageError, ConfigurationError, InsufficientDataError, JoinError
from models.network import TrajNetCheckpoint, SurvNetCheckpoint, LinearCoxModel, TrainingHistory
from models.participant import FEATURE_NAMES
from models.report import CvProtocol, CvRow, MetricReport, ReportTable, StratumReport
from models.run import RunConfig, Splits, Subcommand
from repo.service import (RunRepoService, DATA, INTEGRATED, MODELS, PREDICTIONS, TABLES, CONFIG_FILE, METRICS_FILE,
                          SPLITS_FILE)
from survnet.service import (SurvivalNetworkService, SurvNetModel, LinearCoxBaseline, survival_metrics,
                             write_risk_scores, write_baseline_hazard, read_risk_scores)
from synthcohort.service import CohortGenerator, write_cohort, oracle_metrics, theoretical_c_index
from trajnet.service import (TrajectoryNetworkService, TrajNetModel, LinearTrajectoryBaseline, trajectory_metrics,
                             write_predictions, read_predictions)

GENERATOR_FLAGS = ("n_subjects", "n_centers", "hazard_link")
ORACLE_SIMULATION_N = 5000


class CommandParser(argparse.ArgumentParser):

    def error(self, message: str):
        raise UsageError(message)


def horizon_list(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated years, e.g. 2,3,5, got {text!r}")


def load_json_file(path: str) -> dict:
    try:
        with open(path) as file:
            return json.load(file)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigurationError(f"could not read {path}: {err}")


def resolve_config(arguments: Dict) -> RunConfig:
    """Defaults < --config file < explicit flags."""
    values = load_json_file(arguments.pop("config")) if "config" in arguments else {}
    if "harmonization_config" in arguments:
        values["harmonization"] = load_json_file(arguments.pop("harmonization_config"))
    generator = dict(values.get("generator", {}))
    for name in GENERATOR_FLAGS:
        if name in arguments:
            generator[name] = arguments.pop(name)
    if generator:
        values["generator"] = generator
    values.update(arguments)
    try:
        return RunConfig.model_validate(values)
    except ValidationError as err:
        problems = "; ".join(f"{'.'.join(str(part) for part in item['loc'])}: {item['msg']}" for item in err.errors())
        raise ConfigurationError(f"invalid run configuration: {problems}")


def feature_labels(dim: int) -> List[str]:
    return FEATURE_NAMES + ["apoe4"] if dim == len(FEATURE_NAMES) + 1 else FEATURE_NAMES[:dim]


def lookup(values: Dict[str, float], ids) -> np.ndarray:
    missing = [str(subject_id) for subject_id in ids if str(subject_id) not in values]
    if missing:
        raise JoinError(f"{len(missing)} subjects have no prediction, e.g. {missing[0]}")
    return np.array([values[str(subject_id)] for subject_id in ids], dtype=float)


def reports_table(name: str, reports: List[MetricReport]) -> ReportTable:
    return ReportTable(name=name, columns=["stratum", "metric", "value", "n", "flags"],
                       rows=[{"stratum": report.stratum, "metric": report.metric, "value": report.value,
                              "n": report.n, "flags": ";".join(report.flags)} for report in reports])


def strata_table(name: str, reports: List[StratumReport]) -> ReportTable:
    metrics = list(dict.fromkeys(metric for report in reports for metric in report.metrics))
    rows = []
    for report in reports:
        row = {"stratum": report.stratum, "n": report.n, "flags": ";".join(report.flags)}
        row.update({metric: report.metrics.get(metric) for metric in metrics})
        row.update({f"delta_{metric}": report.deltas.get(metric) for metric in metrics})
        rows.append(row)
    return ReportTable(name=name, columns=["stratum", "n"] + metrics + [f"delta_{metric}" for metric in metrics]
                       + ["flags"], rows=rows)


def history_table(name: str, history: TrainingHistory) -> ReportTable:
    return ReportTable(name=name, columns=["epoch", "train_loss", "val_loss"],
                       rows=[epoch.model_dump() for epoch in history.epochs])


def intercept_prediction(risk: np.ndarray, predictions) -> HoldoutPrediction:
    return HoldoutPrediction(risk=risk,
                             intercept_mean=np.array([prediction.means[0] for prediction in predictions]),
                             intercept_lo=np.array([prediction.intervals[0][0] for prediction in predictions]),
                             intercept_hi=np.array([prediction.intervals[0][1] for prediction in predictions]))


class PipelineCommandsV1:
    def __init__(self, prog: str = "trajrisk") -> None:
        self.prog = prog
        self.parser = self.__initialize_commands__()

    def __initialize_commands__(self) -> CommandParser:
        flags = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
        flags.add_argument("--run-dir", help=f"run directory shared by all stages (default: {app_config.RUN_DIRECTORY})")
        flags.add_argument("--config", help="JSON file with run settings; explicit flags win")
        flags.add_argument("--harmonization-config", help="JSON file with harmonization settings")
        flags.add_argument("--data-dir", help="directory holding csf.csv, visits.csv and demographics.csv")
        flags.add_argument("--seed", type=int, help="root seed, all randomness derives from it")
        flags.add_argument("--jobs", type=int, help="worker threads for repeated CV and LOCO")
        flags.add_argument("--cohort-filter", choices=[item.value for item in CohortFilter])
        flags.add_argument("--n", dest="n_subjects", type=int, help="subjects to generate")
        flags.add_argument("--n-centers", type=int, help="centers to generate")
        flags.add_argument("--hazard-link", choices=[item.value for item in HazardLink])
        flags.add_argument("--width", type=int, help="trajectory network hidden width")
        flags.add_argument("--surv-width", type=int, help="survival network hidden width")
        flags.add_argument("--dropout", type=float)
        flags.add_argument("--traj-weight-decay", type=float)
        flags.add_argument("--calibration-weight", type=float)
        flags.add_argument("--ranking-weight", type=float)
        flags.add_argument("--surv-weight-decay", type=float)
        flags.add_argument("--margin", type=float, help="ranking hinge margin")
        flags.add_argument("--mc-passes", type=int, help="Monte Carlo dropout passes")
        flags.add_argument("--patience", type=int)
        flags.add_argument("--max-epochs", type=int)
        flags.add_argument("--batch-size", type=int)
        flags.add_argument("--learning-rate", type=float)
        flags.add_argument("--tau-percentile", type=float, help="reliability threshold percentile")
        flags.add_argument("--n-min", type=int, help="minimum visits for a reliable trajectory")
        flags.add_argument("--folds", type=int)
        flags.add_argument("--repeats", type=int)
        flags.add_argument("--horizons", type=horizon_list, help="comma-separated years, e.g. 2,3,5")
        flags.add_argument("--min-center-n", type=int, help="smallest center held out in LOCO")
        flags.add_argument("--bootstrap-resamples", type=int)
        flags.add_argument("--permutations", type=int)

        parser = CommandParser(prog=self.prog, description="Biomarker trajectory and conversion-risk pipeline")
        commands = parser.add_subparsers(dest="subcommand", metavar="subcommand", required=True)
        handlers: Dict[Subcommand, tuple[Callable, str]] = {
            Subcommand.GENERATE: (self.generate, "simulate a synthetic cohort in NACC layout"),
            Subcommand.INTEGRATE: (self.integrate, "parse and link the CSF, visit and demographic tables"),
            Subcommand.HARMONIZE: (self.harmonize, "assay factors, ComBat, imputation and feature transforms"),
            Subcommand.FIT_TRAJECTORIES: (self.fit_trajectories, "split the cohort and extract trajectory targets"),
            Subcommand.TRAIN_TRAJ: (self.train_traj, "train the trajectory network"),
            Subcommand.TRAIN_SURV: (self.train_surv, "train the survival network and the linear Cox baseline"),
            Subcommand.PREDICT: (self.predict, "write trajectory and risk predictions for every subject"),
            Subcommand.EVALUATE: (self.evaluate, "score the held-out test split"),
            Subcommand.CV_COMPARE: (self.cv_compare, "repeated cross-validation and significance tests"),
            Subcommand.LOCO: (self.loco, "leave-one-center-out validation"),
            Subcommand.FAIRNESS: (self.fairness, "subgroup performance on the test split"),
        }
        for subcommand, (handler, description) in handlers.items():
            command = commands.add_parser(subcommand.value, parents=[flags], help=description)
            command.set_defaults(handler=handler)
        return parser

    def run(self, argv: List[str]) -> int:
        if not argv:
            self.parser.print_usage(sys.stderr)
            return 2
        try:
            arguments = vars(self.parser.parse_args(argv))
            subcommand = Subcommand(arguments.pop("subcommand"))
            handler = arguments.pop("handler")
            repo = RunRepoService(arguments.pop("run_dir", app_config.RUN_DIRECTORY))
            config = resolve_config(arguments)
            repo.update_json(CONFIG_FILE, {subcommand.value: config.model_dump(mode="json")})
            logger.info(f"Running {subcommand.value} in {repo.root} with seed {config.seed}")
            handler(repo, config)
            logger.info(f"Finished {subcommand.value}")
            return 0
        except SystemExit as err:
            return err.code if isinstance(err.code, int) else 0
        except USAGE_ERRORS as err:
            return self.__fail__(err, 2)
        except DATA_ERRORS as err:
            return self.__fail__(err, 1)
        except Exception as err:
            traceback.print_exc()
            return self.__fail__(err, 1)

    def __fail__(self, err: Exception, code: int) -> int:
        logger.error(f"{type(err).__name__}: {err}")
        sys.stderr.write(json.dumps({"error": type(err).__name__, "detail": str(err)}) + "\n")
        return code

    def __data_dir__(self, repo: RunRepoService, config: RunConfig) -> str:
        return config.data_dir or os.path.join(repo.root, DATA)

    def __trajectory_service__(self, config: RunConfig, seed: int = None) -> TrajectoryNetworkService:
        return TrajectoryNetworkService(width=config.width, dropout=config.dropout,
                                        weight_decay=config.traj_weight_decay,
                                        calibration_weight=config.calibration_weight, patience=config.patience,
                                        max_epochs=config.max_epochs, batch_size=config.batch_size,
                                        learning_rate=config.learning_rate, mc_passes=config.mc_passes,
                                        seed=config.seed if seed is None else seed)

    def __survival_service__(self, config: RunConfig, seed: int = None) -> SurvivalNetworkService:
        return SurvivalNetworkService(width=config.surv_width, margin=config.margin,
                                      ranking_weight=config.ranking_weight, weight_decay=config.surv_weight_decay,
                                      patience=config.patience, max_epochs=config.max_epochs,
                                      learning_rate=config.learning_rate, cohort_filter=config.cohort_filter,
                                      seed=config.seed if seed is None else seed)

    def generate(self, repo: RunRepoService, config: RunConfig) -> None:
        generator_config = config.generator.model_copy(update={"seed": config.seed})
        data_dir = self.__data_dir__(repo, config)
        write_cohort(CohortGenerator(generator_config).generate(), data_dir)
        write_json(generator_config.model_dump(mode="json"), os.path.join(data_dir, "generator.json"))

    def integrate(self, repo: RunRepoService, config: RunConfig) -> None:
        data_dir = self.__data_dir__(repo, config)
        service = DataIntegrationService()
        parsed = service.parse_dataset(os.path.join(data_dir, "csf.csv"), os.path.join(data_dir, "visits.csv"),
                                       os.path.join(data_dir, "demographics.csv"))
        result = service.integrate(parsed.csf, parsed.visits, parsed.demographics)
        write_records(result.records, repo.path(INTEGRATED, "records.jsonl"))
        write_records((window for record in result.records for window in build_sequences(record)),
                      repo.path(INTEGRATED, "sequences.jsonl"))
        write_exclusions(result.exclusions, repo.path(INTEGRATED, "exclusions.csv"))
        write_rejects(parsed.rejects, repo.path(INTEGRATED, "rejects.csv"))
        write_table(cohort_summary(result.records), repo.path(TABLES, "cohort_summary.csv"))
        if not result.records:
            raise InsufficientDataError(f"no participant passed integration, see {repo.path(INTEGRATED, 'exclusions.csv')}")

    def harmonize(self, repo: RunRepoService, config: RunConfig) -> None:
        records = read_records(repo.existing(INTEGRATED, "records.jsonl"))
        harmonized, feature_model, report = HarmonizationService(config.harmonization,
                                                                 seed=config.seed).fit_transform(records)
        write_records(harmonized, repo.path(INTEGRATED, "harmonized.jsonl"))
        repo.put_model(feature_model, MODELS, "feature_model.json")
        repo.put_model(report, MODELS, "harmonization_report.json")
        write_table(ReportTable(name="atn_distribution", columns=["profile", "count"],
                                rows=[{"profile": profile, "count": count}
                                      for profile, count in report.atn_distribution.items()]),
                    repo.path(TABLES, "atn_distribution.csv"))
        write_table(ReportTable(name="site_variance", columns=["biomarker", "before", "after", "reduction"],
                                rows=[{"biomarker": name, "before": item.before, "after": item.after,
                                       "reduction": item.reduction} for name, item in report.site_variance.items()]),
                    repo.path(TABLES, "site_variance.csv"))

    def fit_trajectories(self, repo: RunRepoService, config: RunConfig) -> None:
        records = read_records(repo.existing(INTEGRATED, "harmonized.jsonl"))
        train, val, test = stratified_split([record.event for record in records], config.train_fraction,
                                            config.val_fraction, config.test_fraction, config.seed)
        ids = [record.subject_id for record in records]
        splits = Splits(seed=config.seed, train=[ids[index] for index in train], val=[ids[index] for index in val],
                        test=[ids[index] for index in test])
        repo.put_model(splits, SPLITS_FILE)
        logger.info(f"Split {len(ids)} subjects into {len(train)} train, {len(val)} validation, {len(test)} test")

        # the mixed model only sees training subjects; every subject gets posterior estimates
        service = MixedEffectsService(tau_percentile=config.tau_percentile, n_min=config.n_min)
        model = service.fit([records[index] for index in train])
        params, tau_var = service.extract(records, model, train_ids=set(splits.train))
        write_records(params, repo.path(INTEGRATED, "targets.jsonl"))
        write_targets(params, repo.path(TABLES, "trajectory_targets.csv"))
        repo.put_model(model, MODELS, "mixed_model.json")
        rows = [{"term": name, "estimate": value, "se": se}
                for name, value, se in zip(("alpha", "beta", "gamma"), model.fixed_effects, model.fixed_effects_se)]
        rows += [{"term": f"var_{name}", "estimate": model.random_covariance[index][index], "se": None}
                 for index, name in enumerate(("alpha", "beta", "gamma"))]
        rows += [{"term": "residual_variance", "estimate": model.residual_variance, "se": None},
                 {"term": "tau_var", "estimate": tau_var, "se": None}]
        write_table(ReportTable(name="mixed_model", columns=["term", "estimate", "se"], rows=rows),
                    repo.path(TABLES, "mixed_model.csv"))

    def train_traj(self, repo: RunRepoService, config: RunConfig) -> None:
        train, val, _ = repo.split_cohort()
        model = self.__trajectory_service__(config).fit(train, val if len(val) else None)
        repo.put_model(model.to_checkpoint(), MODELS, "trajnet.json")
        write_table(history_table("trajnet_history", model.history), repo.path(TABLES, "trajnet_history.csv"))
        importance = model.attention_importance(model.input_scaler.transform(train.X))
        write_table(ReportTable(name="attention_importance", columns=["feature", "importance"],
                                rows=[{"feature": name, "importance": float(value)}
                                      for name, value in zip(feature_labels(len(importance)), importance)]),
                    repo.path(TABLES, "attention_importance.csv"))

    def train_surv(self, repo: RunRepoService, config: RunConfig) -> None:
        train, val, _ = repo.split_cohort()
        model = self.__survival_service__(config).fit(train, val if len(val) else None)
        repo.put_model(model.to_checkpoint(), MODELS, "survnet.json")
        write_table(history_table("survnet_history", model.history), repo.path(TABLES, "survnet_history.csv"))

        baseline = LinearCoxBaseline(config.cohort_filter).fit(train)
        repo.put_model(baseline.model, MODELS, "linear_cox.json")
        coefficients = baseline.model.coefficients
        write_table(ReportTable(name="linear_cox", columns=["feature", "coefficient", "se", "hazard_ratio"],
                                rows=[{"feature": name, "coefficient": beta, "se": se, "hazard_ratio": float(np.exp(beta))}
                                      for name, beta, se in zip(feature_labels(len(coefficients)), coefficients,
                                                                baseline.model.standard_errors)]),
                    repo.path(TABLES, "linear_cox.csv"))

    def predict(self, repo: RunRepoService, config: RunConfig) -> None:
        dataset = repo.cohort()
        train, _, _ = repo.split_cohort(dataset)

        trajectory_model = TrajNetModel.from_checkpoint(repo.get_model(TrajNetCheckpoint, MODELS, "trajnet.json"))
        write_predictions(self.__trajectory_service__(config).predict(trajectory_model, dataset),
                          repo.path(PREDICTIONS, "trajectory_predictions.csv"))
        # the linear baseline is cheap and deterministic, so it is refit rather than stored
        write_predictions(LinearTrajectoryBaseline().fit(train).predict(dataset),
                          repo.path(PREDICTIONS, "linear_trajectory_predictions.csv"))

        survival_model = SurvNetModel.from_checkpoint(repo.get_model(SurvNetCheckpoint, MODELS, "survnet.json"))
        write_risk_scores(dataset.ids, self.__survival_service__(config).curves(survival_model, dataset),
                          repo.path(PREDICTIONS, "risk_scores.csv"))
        write_baseline_hazard(survival_model.baseline_hazard, repo.path(PREDICTIONS, "baseline_hazard.csv"))
        baseline = LinearCoxBaseline(config.cohort_filter)
        baseline.model = repo.get_model(LinearCoxModel, MODELS, "linear_cox.json")
        write_risk_scores(dataset.ids, baseline.curves(dataset), repo.path(PREDICTIONS, "linear_risk_scores.csv"))
        logger.info(f"Wrote predictions for {len(dataset)} subjects")

    def evaluate(self, repo: RunRepoService, config: RunConfig) -> None:
        dataset = repo.cohort()
        train, val, test = repo.split_cohort(dataset)
        survival_test = test.survival_subset(config.cohort_filter)

        trajectory_reports = []
        for method, name in (("trajnet", "trajectory_predictions.csv"), ("linear", "linear_trajectory_predictions.csv")):
            trajectory_reports += trajectory_metrics(read_predictions(repo.existing(PREDICTIONS, name)), test, method)

        hazards = {"survnet": repo.get_model(SurvNetCheckpoint, MODELS, "survnet.json").baseline_hazard,
                   "linear_cox": repo.get_model(LinearCoxModel, MODELS, "linear_cox.json").baseline_hazard}
        risks = {"survnet": lookup(read_risk_scores(repo.existing(PREDICTIONS, "risk_scores.csv")), survival_test.ids),
                 "linear_cox": lookup(read_risk_scores(repo.existing(PREDICTIONS, "linear_risk_scores.csv")),
                                      survival_test.ids)}
        survival_reports = []
        for method, risk in risks.items():
            survival_reports += survival_metrics(risk, hazards[method], survival_test, method, config.horizons)

        write_table(reports_table("trajectory_metrics", trajectory_reports), repo.path(TABLES, "trajectory_metrics.csv"))
        write_table(reports_table("survival_metrics", survival_reports), repo.path(TABLES, "survival_metrics.csv"))
        repo.update_json(METRICS_FILE, {
            "run": {"seed": config.seed, "cohort_filter": config.cohort_filter.value, "horizons": config.horizons,
                    "n_subjects": len(dataset), "n_train": len(train), "n_val": len(val), "n_test": len(test),
                    "n_test_survival": len(survival_test), "events_test_survival": int(survival_test.events.sum())},
            "trajectory": [report.model_dump() for report in trajectory_reports],
            "survival": [report.model_dump() for report in survival_reports],
            "tertiles": self.__tertiles__(repo, risks["survnet"], survival_test),
            "oracle": self.__oracle__(repo, config, test),
        })

    def __tertiles__(self, repo: RunRepoService, risk: np.ndarray, dataset: CohortArrays) -> Dict | None:
        try:
            summary = tertile_stratify(risk, dataset.times, dataset.events)
        except InsufficientDataError as err:
            logger.warning(f"Tertile stratification skipped: {err}")
            return None
        assignments = np.asarray(summary.assignments)
        km_rows = []
        for tertile, label in enumerate(TERTILE_LABELS):
            members = assignments == tertile
            if not members.any():
                continue
            curve = km_fit(dataset.times[members], dataset.events[members])
            km_rows += [{"tertile": label, "time": t, "survival": s, "at_risk": n, "events": d}
                        for t, s, n, d in zip(curve.times, curve.survival, curve.at_risk, curve.events)]
        write_table(ReportTable(name="km_tertiles", columns=["tertile", "time", "survival", "at_risk", "events"],
                                rows=km_rows), repo.path(TABLES, "km_tertiles.csv"))
        write_table(ReportTable(name="risk_distribution", columns=["subject_id", "psi", "tertile"],
                                rows=[{"subject_id": str(subject_id), "psi": float(value),
                                       "tertile": TERTILE_LABELS[group]}
                                      for subject_id, value, group in zip(dataset.ids, risk, assignments)]),
                    repo.path(TABLES, "risk_distribution.csv"))
        low, high = summary.event_rates[0], summary.event_rates[2]
        section = summary.model_dump(exclude={"assignments"})
        section["high_low_event_ratio"] = high / low if low and high is not None else None
        return section

    def __oracle__(self, repo: RunRepoService, config: RunConfig, test: CohortArrays) -> Dict | None:
        data_dir = self.__data_dir__(repo, config)
        truth_path = os.path.join(data_dir, "ground_truth.jsonl")
        if not os.path.exists(truth_path):
            return None
        trajectories = {prediction.subject_id: prediction
                        for prediction in read_predictions(repo.existing(PREDICTIONS, "trajectory_predictions.csv"))}
        risks = read_risk_scores(repo.existing(PREDICTIONS, "risk_scores.csv"))
        predicted = {}
        for subject_id in map(str, test.ids):
            means = trajectories[subject_id].means
            predicted[subject_id] = {"alpha": means[0], "beta": means[1], "gamma": means[2], "risk": risks[subject_id]}
        section = {"reports": [report.model_dump()
                               for report in oracle_metrics(read_records(truth_path, SubjectTruth), predicted)],
                   "theoretical_c_index": None}
        generator_path = os.path.join(data_dir, "generator.json")
        if os.path.exists(generator_path):
            generator_config = GeneratorConfig.model_validate(load_json_file(generator_path))
            section["theoretical_c_index"] = theoretical_c_index(generator_config, n=ORACLE_SIMULATION_N)
        return section

    def __survnet_factory__(self, config: RunConfig) -> ModelFactory:
        def factory(train: CohortArrays, test: CohortArrays, seed: int) -> HoldoutPrediction:
            service = self.__survival_service__(config, seed)
            return HoldoutPrediction(risk=service.risk(service.fit(train), test))
        return factory

    def __linear_cox_factory__(self, config: RunConfig) -> ModelFactory:
        def factory(train: CohortArrays, test: CohortArrays, seed: int) -> HoldoutPrediction:
            return HoldoutPrediction(risk=LinearCoxBaseline(config.cohort_filter).fit(train).risk(test))
        return factory

    def __loco_factory__(self, config: RunConfig) -> ModelFactory:
        def factory(train: CohortArrays, test: CohortArrays, seed: int) -> HoldoutPrediction:
            fit_index, val_index = stratified_holdout(np.arange(len(train)), train.events,
                                                      config.loco_val_fraction, seed)
            fit, val = train.subset(fit_index), train.subset(val_index)
            trajectory_service = self.__trajectory_service__(config, seed)
            predictions = trajectory_service.predict(trajectory_service.fit(fit, val), test)
            survival_service = self.__survival_service__(config, seed)
            return intercept_prediction(survival_service.risk(survival_service.fit(fit, val), test), predictions)
        return factory

    def cv_compare(self, repo: RunRepoService, config: RunConfig) -> None:
        dataset = repo.cohort().survival_subset(config.cohort_filter)
        protocol = CvProtocol(folds=config.folds, repeats=config.repeats, seed=config.seed)
        rows = repeated_cv(dataset, protocol, {"survnet": self.__survnet_factory__(config),
                                               "linear_cox": self.__linear_cox_factory__(config)}, config.jobs)
        summary = cv_summary(rows)
        significance, multiple_testing = compare_methods(rows, "survnet", config.bootstrap_resamples,
                                                         config.permutations, config.seed)
        write_table(ReportTable(name="cv_rows", columns=list(CvRow.model_fields),
                                rows=[row.model_dump() for row in rows]), repo.path(TABLES, "cv_rows.csv"))
        for table in (summary, significance, multiple_testing):
            write_table(table, repo.path(TABLES, f"{table.name}.csv"))
        repo.update_json(METRICS_FILE, {"cv": {"protocol": protocol.model_dump(), "summary": summary.rows,
                                               "significance": significance.rows,
                                               "multiple_testing": multiple_testing.rows}})

    def loco(self, repo: RunRepoService, config: RunConfig) -> None:
        reports = loco_harness(repo.cohort(), self.__loco_factory__(config), config.min_center_n,
                               config.cohort_filter, config.calibration_horizon, config.seed, config.jobs)
        tables = loco_summary(reports)
        write_table(strata_table("loco_centers", reports), repo.path(TABLES, "loco_centers.csv"))
        for name, table in tables.items():
            write_table(table, repo.path(TABLES, f"{name}.csv"))
        section = {"centers": [report.model_dump() for report in reports]}
        section.update({name: table.rows for name, table in tables.items()})
        repo.update_json(METRICS_FILE, {"loco": section})

    def fairness(self, repo: RunRepoService, config: RunConfig) -> None:
        _, _, test = repo.split_cohort()
        trajectories = {prediction.subject_id: prediction
                        for prediction in read_predictions(repo.existing(PREDICTIONS, "trajectory_predictions.csv"))}
        missing = [str(subject_id) for subject_id in test.ids if str(subject_id) not in trajectories]
        if missing:
            raise JoinError(f"{len(missing)} test subjects have no trajectory prediction, e.g. {missing[0]}")
        risk = lookup(read_risk_scores(repo.existing(PREDICTIONS, "risk_scores.csv")), test.ids)
        prediction = intercept_prediction(risk, [trajectories[str(subject_id)] for subject_id in test.ids])
        reports, demographics = fairness_strata(test, prediction, config.cohort_filter, config.calibration_horizon)
        write_table(strata_table("fairness_strata", reports), repo.path(TABLES, "fairness_strata.csv"))
        write_table(demographics, repo.path(TABLES, "fairness_demographics.csv"))
        repo.update_json(METRICS_FILE, {"fairness": {"strata": [report.model_dump() for report in reports],
                                                     "demographics": demographics.rows}})
