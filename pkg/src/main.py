import sys
from typing import List

from config import app_config
from commands.pipeline import PipelineCommandsV1


def main(argv: List[str] = None) -> int:
    return PipelineCommandsV1(prog="trajrisk").run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    app_config.logger.debug(f"Command line: {sys.argv[1:]}")
    sys.exit(main())
