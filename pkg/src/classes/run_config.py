import copy
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Union

from jsonschema import Draft202012Validator

from src.classes.errors import ConfigurationError
from src.classes.bench_builder import digest
from src.classes.pipeline import PipelineOptions
from src.constants import DEFAULT_CATEGORIES, SCHEMA_DIR

logger = logging.getLogger('MultiID')

DEFAULTS: Dict[str, Any] = {
    'backend': "toy",
    'seed': 0,
    'steps': 50,
    'guidance_scale': 7.5,
    'beta_start': 0.00085,
    'beta_end': 0.012,
    'depth_control': {'enabled': True, 'strength': 1.0, 'realign_boxes': False},
    'id_cross_attention': True,
    'extended_self_attention': True,
    'region_isolation': False,
    'inversion_conditioning': "null",
    'cache_layer_stride': 1,
    'output_dir': "outputs",
    'benchmark_path': None,
    'concurrency': 4,
    'images_per_sample': 4,
    'categories': list(DEFAULT_CATEGORIES),
    'bench': {
        'interactions': 40,
        'prompts_per_interaction': 10,
        'max_retries': 3,
        'workdir': "bench",
        'reference_pool': None,
        'name': "IDBench",
    },
    'models': {},
}


@lru_cache(maxsize=None)
def _validator() -> Draft202012Validator:
    with open(SCHEMA_DIR / 'run_config.schema.json', encoding='utf-8') as f:
        return Draft202012Validator(json.load(f))


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and key != 'models':
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass(frozen=True)
class RunConfig:
    """
    Effective run configuration: the config file merged over the defaults.

    Attributes:
        values: Every key of the configuration, validated
    """
    values: Dict[str, Any]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        """
        Raises:
            ConfigurationError: On unknown keys or out-of-range values
        """
        if not isinstance(data, dict):
            raise ConfigurationError("run config must be a JSON object")
        errors = sorted(_validator().iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
        if errors:
            details = "; ".join(f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors)
            raise ConfigurationError(f"invalid run config: {details}")
        values = _merge(DEFAULTS, data)
        if values['beta_start'] >= values['beta_end']:
            raise ConfigurationError(f"beta_start {values['beta_start']} must be below beta_end {values['beta_end']}")
        return cls(values)

    @classmethod
    def load(cls, path: Optional[Union[str, Path]]) -> 'RunConfig':
        if path is None:
            return cls.from_dict({})
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except FileNotFoundError as e:
            raise ConfigurationError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from e
        logger.debug("Loaded config %s", path)
        return cls.from_dict(data)

    def with_overrides(self, **overrides) -> 'RunConfig':
        """New config with ``overrides`` applied; None values are ignored."""
        patch = {k: v for k, v in overrides.items() if v is not None}
        if not patch:
            return self
        return RunConfig.from_dict(_merge(self.values, patch))

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def digest(self) -> str:
        return digest(self.values)

    def pipeline_options(self) -> PipelineOptions:
        v = self.values
        return PipelineOptions(
            id_cross_attention=v['id_cross_attention'],
            extended_self_attention=v['extended_self_attention'],
            region_isolation=v['region_isolation'],
            inversion_conditioning=v['inversion_conditioning'],
            cache_layer_stride=v['cache_layer_stride'],
            beta_start=v['beta_start'],
            beta_end=v['beta_end'],
            realign_boxes=v['depth_control']['realign_boxes'],
        )
