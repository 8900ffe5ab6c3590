import asyncio
import json
import logging
from pathlib import Path
from typing import List, Optional

from src.classes.bench_builder import BenchmarkBuilder, BuildResult, BuildSettings, ReferenceEntry
from src.classes.benchmark import ValidationIssue, validate_benchmark
from src.classes.errors import BenchmarkValidationError, ConfigurationError, ValidationError
from src.classes.run_config import RunConfig
from src.classes.service_clients import HttpDetectorClient, HttpLLMClient, HttpTextToImageClient, HttpVLMClient

logger = logging.getLogger('MultiID')


def load_reference_pool(path: Path) -> List[ReferenceEntry]:
    """
    Read a reference pool file: a JSON list of ``{image, category_label}``.

    Image paths are resolved against the pool file's directory.

    Raises:
        ConfigurationError: If the file is missing or malformed
        ValidationError: If a listed image does not exist
    """
    path = Path(path)
    try:
        entries = json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError as e:
        raise ConfigurationError(f"reference pool not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"reference pool {path} is not valid JSON: {e}") from e
    if not isinstance(entries, list) or not entries:
        raise ConfigurationError(f"reference pool {path} must be a non-empty JSON list")

    pool = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or not {'image', 'category_label'} <= entry.keys():
            raise ConfigurationError(f"reference pool entry {i} needs 'image' and 'category_label'")
        image = (path.parent / entry['image']).resolve()
        if not image.is_file():
            raise ValidationError(f"reference image {entry['image']!r} does not exist", "E_IMAGE_MISSING")
        pool.append(ReferenceEntry(str(image), entry['category_label']))
    logger.info("Loaded %d reference images from %s", len(pool), path)
    return pool


def build_settings(config: RunConfig) -> BuildSettings:
    bench = config['bench']
    return BuildSettings(
        interactions=bench['interactions'],
        prompts_per_interaction=bench['prompts_per_interaction'],
        max_retries=bench['max_retries'],
        concurrency=config['concurrency'],
        seed=config['seed'],
        categories=tuple(config['categories']),
        name=bench['name'],
    )


def cmd_bench_build(config: RunConfig, workdir: Optional[Path] = None, llm_client=None, t2i_client=None,
                    vlm_client=None, detector_client=None) -> BuildResult:
    """
    Build the benchmark under ``workdir`` (default ``config['bench']['workdir']``).

    Clients default to the HTTP clients configured from the environment.

    Raises:
        ConfigurationError: If no reference pool is configured
        StageError: If a construction stage cannot complete
    """
    pool_path = config['bench']['reference_pool']
    if pool_path is None:
        raise ConfigurationError("bench.reference_pool must name the reference pool file")
    workdir = Path(workdir or config['bench']['workdir'])
    builder = BenchmarkBuilder(
        workdir,
        llm_client or HttpLLMClient(),
        t2i_client or HttpTextToImageClient(),
        vlm_client or HttpVLMClient(),
        detector_client or HttpDetectorClient(),
        load_reference_pool(Path(pool_path)),
        build_settings(config),
    )
    result = asyncio.run(builder.run())
    logger.info("Benchmark written to %s (review report %s)", result.benchmark_path, result.review_path)
    return result


def cmd_bench_validate(config: RunConfig, path: Optional[Path] = None, check_images: bool = True) -> List[ValidationIssue]:
    """
    Validate a benchmark document and print every issue.

    Raises:
        ConfigurationError: If no path is given or configured
        BenchmarkValidationError: If any issue is found
    """
    path = path or config['benchmark_path']
    if path is None:
        raise ConfigurationError("no benchmark given: pass a path or set benchmark_path")
    issues = validate_benchmark(Path(path), check_images=check_images, categories=config['categories'])
    for issue in issues:
        print(issue)
    if issues:
        raise BenchmarkValidationError(issues)
    print(f"{path}: valid")
    return issues
