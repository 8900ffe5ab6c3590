import logging
import sys
from typing import Optional

from src.constants import LOG_LEVEL

LOGGER_NAME = 'MultiID'

# Model and HTTP libraries that log every download or request at INFO
THIRD_PARTY_LOGGERS = ('urllib3', 'PIL', 'diffusers', 'transformers', 'huggingface_hub')


def setup_logging(level: Optional[str] = None) -> logging.Logger:
    """
    Configure the application logger.

    Messages go to stdout with a timestamp. Third-party loggers are held at
    WARNING or above so model loading does not drown the run output.
    Calling it twice does not duplicate the console handler.

    Args:
        level: Level name overriding LOG_LEVEL (for example from ``--log-level``)

    Returns:
        logging.Logger: The ``MultiID`` logger
    """
    logger = logging.getLogger(LOGGER_NAME)

    match (level or LOG_LEVEL).upper():
        case 'DEBUG':
            logger.setLevel(logging.DEBUG)
        case 'INFO':
            logger.setLevel(logging.INFO)
        case 'WARNING':
            logger.setLevel(logging.WARNING)
        case 'ERROR':
            logger.setLevel(logging.ERROR)
        case 'CRITICAL':
            logger.setLevel(logging.CRITICAL)
        case _:
            logger.setLevel(logging.INFO)

    for name in THIRD_PARTY_LOGGERS:
        logging.getLogger(name).setLevel(max(logger.level, logging.WARNING))

    if any(getattr(h, '_multiid_console', False) for h in logger.handlers):
        return logger

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
    console_handler._multiid_console = True
    logger.addHandler(console_handler)

    return logger
