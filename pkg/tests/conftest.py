import logging
logger = logging.getLogger(__name__)
import sys, os
import pytest

sys.path.append(f"{os.getcwd()}/src")

from models.cohort import GeneratorConfig, CohortArrays
from dataio.service import DataIntegrationService
from harmonize.service import HarmonizationService
from mixedfx.service import MixedEffectsService, targets_by_subject
from synthcohort.service import CohortGenerator, write_cohort


@pytest.fixture(scope="session")
def generator_config_fixture():
    # strong site shifts so harmonization has something to remove
    return GeneratorConfig(n_subjects=400, n_centers=6, seed=11,
                           site_shift_sd={"abeta42": 1.0, "ptau": 1.0, "ttau": 1.0})


@pytest.fixture(scope="session")
def generated_cohort_fixture(generator_config_fixture, tmp_path_factory):
    cohort = CohortGenerator(generator_config_fixture).generate()
    paths = write_cohort(cohort, str(tmp_path_factory.mktemp("cohort")))
    return cohort, paths


@pytest.fixture(scope="session")
def generated_dataset_fixture(generated_cohort_fixture):
    _, paths = generated_cohort_fixture
    return DataIntegrationService().parse_dataset(paths["csf"], paths["visits"], paths["demographics"])


@pytest.fixture(scope="session")
def integrated_records_fixture(generated_dataset_fixture):
    parsed = generated_dataset_fixture
    return DataIntegrationService().integrate(parsed.csf, parsed.visits, parsed.demographics).records


@pytest.fixture(scope="session")
def harmonized_cohort_fixture(integrated_records_fixture):
    return HarmonizationService().fit_transform(integrated_records_fixture)


@pytest.fixture(scope="session")
def cohort_arrays_fixture(harmonized_cohort_fixture):
    records, _, _ = harmonized_cohort_fixture
    service = MixedEffectsService()
    params, _ = service.extract(records, service.fit(records))
    return CohortArrays.from_records(records, targets_by_subject(params))


@pytest.fixture(scope="session")
def harmonized_arrays_factory_fixture(tmp_path_factory):
    """Generate, write, parse, integrate and harmonize a cohort for a given generator config."""
    def build(config: GeneratorConfig, with_targets: bool = False) -> CohortArrays:
        cohort = CohortGenerator(config).generate()
        paths = write_cohort(cohort, str(tmp_path_factory.mktemp(f"cohort_{config.seed}")))
        integration = DataIntegrationService()
        parsed = integration.parse_dataset(paths["csf"], paths["visits"], paths["demographics"])
        records, _, _ = HarmonizationService().fit_transform(
            integration.integrate(parsed.csf, parsed.visits, parsed.demographics).records)
        if not with_targets:
            return CohortArrays.from_records(records)
        service = MixedEffectsService()
        params, _ = service.extract(records, service.fit(records))
        return CohortArrays.from_records(records, targets_by_subject(params))
    return build
