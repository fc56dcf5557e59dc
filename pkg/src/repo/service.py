import json
import logging
logger = logging.getLogger(__name__)
import os
from typing import Dict, List, Type, TypeVar

import numpy as np
from pydantic import BaseModel

from dataio.service import read_records, write_json
from mixedfx.service import targets_by_subject
from models.cohort import CohortArrays
from models.errors import JoinError
from models.run import Splits
from models.trajectory import TrajectoryParams

DATA = "data"
INTEGRATED = "integrated"
MODELS = "models"
PREDICTIONS = "predictions"
TABLES = "tables"
CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.json"
SPLITS_FILE = "splits.json"

Model = TypeVar("Model", bound=BaseModel)


def select_subjects(dataset: CohortArrays, ids: List[str]) -> CohortArrays:
    position = {str(subject_id): index for index, subject_id in enumerate(dataset.ids)}
    missing = [subject_id for subject_id in ids if subject_id not in position]
    if missing:
        raise JoinError(f"{len(missing)} split subjects are not in the cohort, e.g. {missing[0]}")
    return dataset.subset(np.array([position[subject_id] for subject_id in ids], dtype=int))


class RunRepoService:
    """File layout of a run directory. Stages only exchange data through these files."""

    def __init__(self, root: str) -> None:
        self.root = root
        os.makedirs(root, exist_ok=True)

    def path(self, *parts: str) -> str:
        path = os.path.join(self.root, *parts)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    def exists(self, *parts: str) -> bool:
        return os.path.exists(os.path.join(self.root, *parts))

    def existing(self, *parts: str) -> str:
        path = os.path.join(self.root, *parts)
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path} does not exist, run the stage that writes it first")
        return path

    def put_model(self, model: BaseModel, *parts: str) -> str:
        path = self.path(*parts)
        with open(path, "w") as file:
            file.write(model.model_dump_json(indent=2))
        logger.debug(f"Wrote {type(model).__name__} to {path}")
        return path

    def get_model(self, model_type: Type[Model], *parts: str) -> Model:
        with open(self.existing(*parts)) as file:
            return model_type.model_validate_json(file.read())

    def update_json(self, name: str, sections: Dict) -> str:
        """Replaces the given top-level sections, keeping those written by other subcommands."""
        path = self.path(name)
        payload = {}
        if os.path.exists(path):
            with open(path) as file:
                payload = json.load(file)
        payload.update(sections)
        write_json(payload, path)
        return path

    def cohort(self) -> CohortArrays:
        records = read_records(self.existing(INTEGRATED, "harmonized.jsonl"))
        params = read_records(self.existing(INTEGRATED, "targets.jsonl"), TrajectoryParams)
        return CohortArrays.from_records(records, targets_by_subject(params))

    def split_cohort(self, dataset: CohortArrays = None) -> tuple[CohortArrays, CohortArrays, CohortArrays]:
        dataset = self.cohort() if dataset is None else dataset
        splits = self.get_model(Splits, SPLITS_FILE)
        return (select_subjects(dataset, splits.train), select_subjects(dataset, splits.val),
                select_subjects(dataset, splits.test))
