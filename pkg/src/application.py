import argparse
import logging
import os
import platform
import sys
from pathlib import Path
from typing import List, Optional

from src.classes.errors import AdapterError, ConfigurationError, ShapeError, StageError, ValidationError
from src.classes.run_config import RunConfig
from src.utils.logging_config import setup_logging

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ADAPTER = 3
EXIT_CONFIG = 4


def _on_off(value: str) -> bool:
    match value.lower():
        case "on":
            return True
        case "off":
            return False
        case _:
            raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    common.add_argument("--backend", choices=("toy", "diffusers"))
    common.add_argument("--steps", type=int)
    common.add_argument("--depth-control", type=_on_off, metavar="on|off")
    common.add_argument("--images-per-sample", type=int)
    common.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"), type=str.upper,
                        help="overrides LOG_LEVEL")

    parser = argparse.ArgumentParser(prog="python -m src.application",
                                     description="Training-free multi-identity image generation and evaluation")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", parents=[common], help="generate an image from a request file")
    generate.add_argument("request", type=Path)

    evaluate = commands.add_parser("eval", parents=[common], help="score generated images against a benchmark")
    evaluate.add_argument("images", type=Path, help="directory of <sample_id>_<k>.png images")
    evaluate.add_argument("--benchmark", type=Path)

    bench = commands.add_parser("bench", help="build or validate a benchmark")
    bench_commands = bench.add_subparsers(dest="bench_command", required=True)
    build = bench_commands.add_parser("build", parents=[common], help="run the construction stages")
    build.add_argument("--workdir", type=Path)
    validate = bench_commands.add_parser("validate", parents=[common], help="validate a benchmark document")
    validate.add_argument("benchmark", type=Path, nargs="?")
    validate.add_argument("--skip-images", action="store_true", help="do not check reference image files")

    invert = commands.add_parser("invert", parents=[common], help="DDIM-invert an image")
    invert.add_argument("image", type=Path)
    invert.add_argument("--prompt", default="", help="inversion conditioning text")
    return parser


def effective_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config)
    depth = None
    if args.depth_control is not None:
        depth = {'enabled': args.depth_control}
    return config.with_overrides(
        seed=args.seed,
        backend=args.backend,
        steps=args.steps,
        images_per_sample=args.images_per_sample,
        depth_control=depth,
        output_dir=str(args.out) if args.out is not None else None,
    )


def run(args: argparse.Namespace) -> None:
    config = effective_config(args)
    logger = logging.getLogger('MultiID')
    logger.info("Config digest %s", config.digest())

    match args.command:
        case "generate":
            from src.commands.generate import cmd_generate
            cmd_generate(config, args.request)
        case "eval":
            from src.commands.evaluate import cmd_eval
            cmd_eval(config, args.images, args.benchmark)
        case "bench":
            from src.commands.bench import cmd_bench_build, cmd_bench_validate
            if args.bench_command == "build":
                cmd_bench_build(config, args.workdir)
            else:
                cmd_bench_validate(config, args.benchmark, check_images=not args.skip_images)
        case "invert":
            from src.commands.invert import cmd_invert
            cmd_invert(config, args.image, prompt=args.prompt)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse ``argv``, run the command and map failures to exit codes.

    Returns:
        0 on success, 2 on validation failures, 3 on adapter or stage
        failures, 4 on configuration errors
    """
    args = build_parser().parse_args(argv)
    logger = setup_logging(getattr(args, "log_level", None))
    logger.debug("System information: Python %s, OS: %s", sys.version.split()[0], platform.platform())
    logger.debug("Working directory: %s", os.getcwd())

    try:
        run(args)
    except ConfigurationError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except (ValidationError, ShapeError) as e:
        logger.error("Validation failed: %s", e)
        return EXIT_VALIDATION
    except (AdapterError, StageError) as e:
        logger.error("%s failed: %s", type(e).__name__, e, exc_info=True)
        return EXIT_ADAPTER
    except KeyboardInterrupt:
        logger.info("Received interrupt, stopping")
        return 130
    return EXIT_OK


if __name__ == "__main__":
    try:
        sys.exit(main())
    except Exception as e:
        logging.error("Fatal error %s", e, exc_info=True)
        sys.exit(1)
