"""
Score a directory of generated images against a benchmark.

Images are expected as ``<sample_id>_<k>.png`` for k in [0, images_per_sample).
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Tuple

from src.classes.backends import BackendBundle
from src.classes.benchmark import BenchmarkSample, load_benchmark
from src.classes.errors import ConfigurationError, ValidationError
from src.classes.metrics import MetricReport, SampleMetrics, aggregate, evaluate_sample, format_table, write_report
from src.classes.run_config import RunConfig
from src.commands.common import build_backends
from src.utils.images import load_image

logger = logging.getLogger('MultiID')


def image_name(sample_id: str, k: int) -> str:
    return f"{sample_id}_{k}.png"


def _jobs(samples: List[BenchmarkSample], images_dir: Path, images_per_sample: int) -> List[Tuple[BenchmarkSample, Path]]:
    jobs, missing = [], []
    for sample in samples:
        for k in range(images_per_sample):
            path = images_dir / image_name(sample.sample_id, k)
            if path.is_file():
                jobs.append((sample, path))
            else:
                missing.append(path.name)
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise ValidationError(f"{len(missing)} generated image(s) missing in {images_dir}: {shown}",
                              "E_IMAGE_MISSING")
    return jobs


def cmd_eval(config: RunConfig, images_dir: Path, benchmark_path: Optional[Path] = None,
             out_dir: Optional[Path] = None, backends: Optional[BackendBundle] = None) -> MetricReport:
    """
    Evaluate ``images_per_sample`` images for every benchmark sample.

    Args:
        config: Effective run configuration
        images_dir: Directory holding the generated images
        benchmark_path: Benchmark document, defaults to ``config['benchmark_path']``
        out_dir: Report directory, defaults to ``config['output_dir']``
        backends: Prebuilt adapters; built from the config when None

    Returns:
        MetricReport carrying the config digest

    Raises:
        ConfigurationError: If no benchmark path is configured
        ValidationError: If the benchmark is invalid or an image is missing
    """
    benchmark_path = benchmark_path or config['benchmark_path']
    if benchmark_path is None:
        raise ConfigurationError("no benchmark given: pass --benchmark or set benchmark_path")
    benchmark_path = Path(benchmark_path)
    images_dir = Path(images_dir)
    out_dir = Path(out_dir or config['output_dir'])
    images_per_sample = config['images_per_sample']

    samples = load_benchmark(benchmark_path, categories=config['categories'])
    jobs = _jobs(samples, images_dir, images_per_sample)
    if backends is None:
        backends = build_backends(config, generation=False, evaluation=True)
    backends.require(*BackendBundle.EVALUATION)

    references = {record.reference_image: load_image(benchmark_path.parent / record.reference_image)
                  for sample in samples for record in sample.ids}

    def score(job: Tuple[BenchmarkSample, Path]) -> SampleMetrics:
        sample, path = job
        refs = [references[record.reference_image] for record in sample.ids]
        return evaluate_sample(load_image(path), sample, refs, backends, image_name=path.name)

    workers = config['concurrency']
    if workers > 1 and all(backends.concurrency_safe(name) for name in BackendBundle.EVALUATION):
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_image = list(pool.map(score, jobs))
    else:
        per_image = [score(job) for job in jobs]

    report = aggregate(per_image, images_per_sample)
    report.config_digest = config.digest()
    write_report(report, out_dir)
    logger.info("Evaluated %d images over %d samples (coverage %.2f)",
                report.image_count, report.sample_count, report.coverage)
    print(format_table(report))
    return report
