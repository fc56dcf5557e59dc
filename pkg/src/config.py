import os
import logging
logging.basicConfig(format='%(asctime)s.%(msecs)05d | %(levelname)s | %(filename)s:%(lineno)d | %(message)s' , datefmt='%FY%T')

class ApplicationConfiguration:

    LOG_LEVEL: str = "INFO"

    # Run Configuration values
    RUN_DIRECTORY: str = "runs/default"
    DEFAULT_SEED: int = 2024
    JOBS: int = 1

    # Mixed Model Parameters
    MAX_REML_ITERATIONS: int = 500
    REML_TOLERANCE: float = 1e-8

    # Network Training Parameters
    MAX_EPOCHS: int = 200
    BATCH_SIZE: int = 64
    LEARNING_RATE: float = 1e-3
    MC_PASSES: int = 50

    def __init__(self) -> None:
        self.logger = logging.getLogger()
        self.logger.setLevel(logging.INFO)

        self.extract_env_variables()
        self.logger.setLevel(self.LOG_LEVEL.upper())

    def extract_env_variables(self):
        for attr, attr_type in self.__annotations__.items():
            try:
                self.__setattr__(attr, (attr_type)(os.environ[attr]))
            except KeyError:
                self.logger.debug(f"Couldn't find {attr} in environment. Run with default value")
            except ValueError as err:
                self.logger.warning(f"Bad value for {attr} in environment, keeping default. {err}")

app_config = ApplicationConfiguration()
