import sys

from app import run_cli
from utils.logger import setup_logger


def main(argv=None) -> int:
    """
    Entry point of the r2rlab command line.
    """
    return run_cli(argv, setup_logging=setup_logger)


if __name__ == "__main__":
    sys.exit(main())
