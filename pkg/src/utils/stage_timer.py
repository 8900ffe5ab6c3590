import logging
from contextlib import contextmanager
from time import perf_counter
from typing import Dict, Iterator, Optional


@contextmanager
def timed_stage(name: str, timings: Optional[Dict[str, float]] = None) -> Iterator[None]:
    """
    Log and time one pipeline stage.

    Args:
        name: Stage name used in log lines and as the timings key
        timings: Optional dict receiving the elapsed seconds under ``name``
            (accumulated when the stage runs more than once)
    """
    start_time = perf_counter()
    logger = logging.getLogger('MultiID')
    logger.debug("Stage started: %s", name)

    try:
        yield
    except Exception as e:
        process_time = perf_counter() - start_time
        logger.error("Stage failed: %s - Error: %s - Time: %.2fs",
                     name, str(e), process_time, exc_info=True)
        raise

    process_time = perf_counter() - start_time
    if timings is not None:
        timings[name] = timings.get(name, 0.0) + process_time
    logger.debug("Stage completed: %s - Time: %.2fs", name, process_time)
