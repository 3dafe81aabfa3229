import logging
from logging.handlers import RotatingFileHandler
import os
import sys


def default_log_dir() -> str:
    return os.getenv('R2R_LOG_DIR') or os.path.join(os.path.expanduser('~'), '.r2rlab', 'logs')


def setup_logger(level: str = "INFO", log_dir: str | None = None):
    """
    Configures the root logger for the entire application.
    It logs to a rotating file and to stderr; stdout is kept for result tables.
    """
    log_dir = log_dir or default_log_dir()
    logger = logging.getLogger()
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    # Prevent adding duplicate handlers if this function is called multiple times
    if not logger.handlers:
        try:
            os.makedirs(log_dir, exist_ok=True)
            file_handler = RotatingFileHandler(
                os.path.join(log_dir, 'r2rlab.log'), maxBytes=1024*1024, backupCount=5
            )
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)
        except OSError as e:
            # Read-only home directories still get console logging
            print(f"Could not open log directory {log_dir}: {e}", file=sys.stderr)

        stream_handler = logging.StreamHandler(sys.stderr)
        stream_handler.setFormatter(formatter)
        logger.addHandler(stream_handler)

    logging.debug(f"Logger initialized at {level.upper()} level.")
