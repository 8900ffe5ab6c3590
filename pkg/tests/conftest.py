import json
import logging
from pathlib import Path

import pytest

from src.utils.images import save_image
from src.utils.logging_config import LOGGER_NAME
from tests.helpers import noise_image


@pytest.fixture
def request_file(tmp_path: Path) -> Path:
    """A two-identity generation request with its reference images beside it."""
    save_image(noise_image(10), tmp_path / "left.png")
    save_image(noise_image(11), tmp_path / "right.png")
    document = {
        'global_prompt': "two friends in a park",
        'ids': [
            {'image': "left.png", 'local_prompt': "standing", 'box': {'x0': 0.0, 'y0': 0.0, 'x1': 0.5, 'y1': 1.0}},
            {'image': "right.png", 'box': {'x0': 0.5, 'y0': 0.0, 'x1': 1.0, 'y1': 1.0}},
        ],
    }
    path = tmp_path / "request.json"
    path.write_text(json.dumps(document), encoding='utf-8')
    return path


@pytest.fixture(autouse=True)
def detach_console_logging():
    """main() attaches a console handler bound to the captured stdout of the test that calls it."""
    yield
    logger = logging.getLogger(LOGGER_NAME)
    for handler in [h for h in logger.handlers if getattr(h, '_multiid_console', False)]:
        logger.removeHandler(handler)
