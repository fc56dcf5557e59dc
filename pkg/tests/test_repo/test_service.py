import json

import numpy as np
import pytest

from models.cohort import CohortArrays
from models.errors import JoinError
from models.run import Splits
from repo.service import RunRepoService, select_subjects, METRICS_FILE


def small_arrays(n=5):
    return CohortArrays(ids=np.array([f"S{index}" for index in range(n)]), X=np.arange(2 * n, dtype=float).reshape(n, 2),
                        times=np.ones(n), events=np.zeros(n, dtype=int), centers=np.array(["1"] * n),
                        age=np.full(n, 70.0), female=np.zeros(n, dtype=bool), education=np.full(n, 12.0),
                        mci_baseline=np.ones(n, dtype=bool))


def test_select_subjects_follows_requested_order():
    # RUN
    selected = select_subjects(small_arrays(), ["S3", "S0"])

    # ASSERT
    assert selected.ids.tolist() == ["S3", "S0"]
    np.testing.assert_array_equal(selected.X[:, 0], [6.0, 0.0])


def test_select_subjects_empty_and_unknown():
    assert len(select_subjects(small_arrays(), [])) == 0
    with pytest.raises(JoinError):
        select_subjects(small_arrays(), ["S9"])


def test_update_json_keeps_other_sections(tmp_path):
    # SETUP
    repo = RunRepoService(str(tmp_path))

    # RUN
    repo.update_json(METRICS_FILE, {"cv": {"mean": 0.7}})
    repo.update_json(METRICS_FILE, {"run": {"seed": 1}})
    repo.update_json(METRICS_FILE, {"cv": {"mean": 0.8}})

    # ASSERT
    with open(tmp_path / METRICS_FILE) as file:
        assert json.load(file) == {"cv": {"mean": 0.8}, "run": {"seed": 1}}


def test_model_round_trip(tmp_path):
    # SETUP
    repo = RunRepoService(str(tmp_path))
    splits = Splits(seed=2, train=["a", "b"], val=["c"], test=["d"])

    # RUN
    repo.put_model(splits, "nested", "splits.json")

    # ASSERT
    assert repo.get_model(Splits, "nested", "splits.json") == splits


def test_existing_reports_missing_stage(tmp_path):
    repo = RunRepoService(str(tmp_path))
    assert not repo.exists("models", "trajnet.json")
    with pytest.raises(FileNotFoundError):
        repo.existing("models", "trajnet.json")


def test_splits_must_be_disjoint():
    with pytest.raises(ValueError):
        Splits(seed=0, train=["a", "b"], val=["b"], test=[])
