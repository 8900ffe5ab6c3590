import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict

from jsonschema import Draft202012Validator

from src.classes.backends import BackendBundle
from src.classes.errors import ConfigurationError, ValidationError
from src.classes.run_config import RunConfig
from src.constants import SCHEMA_DIR

logger = logging.getLogger('MultiID')


def build_backends(config: RunConfig, generation: bool = True, evaluation: bool = False) -> BackendBundle:
    """
    Instantiate the adapters selected by ``config['backend']``.

    Raises:
        ConfigurationError: If the backend is unknown or its packages are missing
    """
    match config['backend']:
        case "toy":
            from src.classes.toy_backend import build_toy_backends
            logger.info("Using the toy backend")
            return build_toy_backends()
        case "diffusers":
            from src.classes.model_adapters import build_diffusers_backends
            logger.info("Loading diffusers adapters (generation=%s, evaluation=%s)", generation, evaluation)
            return build_diffusers_backends(config['models'], generation=generation, evaluation=evaluation)
        case other:
            raise ConfigurationError(f"unknown backend {other!r}")


def read_json_document(path: Path, schema_name: str) -> Dict[str, Any]:
    """
    Parse a JSON file and validate it against ``schemas/<schema_name>``.

    Raises:
        ValidationError: E_FILE_MISSING, E_JSON or E_SCHEMA
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"file not found: {path}", "E_FILE_MISSING")
    try:
        document = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path} line {e.lineno}: {e.msg}", "E_JSON") from e
    with open(SCHEMA_DIR / schema_name, encoding='utf-8') as f:
        validator = Draft202012Validator(json.load(f))
    errors = sorted(validator.iter_errors(document), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        details = "; ".join(f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors)
        raise ValidationError(f"{path}: {details}", "E_SCHEMA")
    return document


def write_json(data: Any, path: Path) -> Path:
    """Write ``data`` as sorted-key, indented UTF-8 JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding='utf-8')
    return path


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
