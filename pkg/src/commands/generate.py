"""
Generate one multi-identity image from a request file.

Outputs in the run directory:
    image.png      the generated image
    manifest.json  seed, config and request digests, image checksum
    timings.json   seconds per pipeline stage (varies between runs)
"""
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from src.classes.backends import BackendBundle
from src.classes.bench_builder import digest
from src.classes.masks import BBox, rasterize_mask
from src.classes.pipeline import Background, DepthControl, GenerationRequest, IDReference, MultiIdPipeline
from src.classes.run_config import RunConfig
from src.commands.common import build_backends, file_sha256, read_json_document, write_json
from src.utils.images import load_image, resize, save_image

logger = logging.getLogger('MultiID')


def _load_pixels(base_dir: Path, relative: str, shape) -> Any:
    image = load_image(base_dir / relative)
    if image.shape[:2] != tuple(shape[:2]):
        image = resize(image, shape[:2])
    return image


def request_from_document(document: Dict[str, Any], base_dir: Path, config: RunConfig,
                          backends: BackendBundle) -> GenerationRequest:
    """
    Build a GenerationRequest from a parsed request document and the run configuration.

    Image paths are resolved against ``base_dir`` and resized to the codec
    resolution.

    Raises:
        ValidationError: If an image is missing or a box is invalid
    """
    shape = backends.image_codec.image_shape

    ids = [IDReference(image=_load_pixels(base_dir, entry['image'], shape),
                       local_prompt=entry.get('local_prompt', ""),
                       box=BBox.from_dict(entry['box']),
                       identity_index=i)
           for i, entry in enumerate(document['ids'])]

    background = None
    if 'background' in document:
        entry = document['background']
        mask = None
        if 'foreground_box' in entry:
            _, h, w = backends.denoiser.latent_shape
            mask = rasterize_mask(BBox.from_dict(entry['foreground_box']), h, w)
        background = Background(_load_pixels(base_dir, entry['image'], shape), mask)

    depth = config['depth_control']
    return GenerationRequest(
        global_prompt=document['global_prompt'],
        ids=ids,
        seed=config['seed'],
        steps=config['steps'],
        guidance_scale=config['guidance_scale'],
        depth_control=DepthControl(depth['enabled'], depth['strength']),
        background=background,
    )


def cmd_generate(config: RunConfig, request_path: Path, out_dir: Optional[Path] = None,
                 backends: Optional[BackendBundle] = None) -> Dict[str, Any]:
    """
    Run the pipeline for one request and write the image, manifest and timings.

    Args:
        config: Effective run configuration
        request_path: Generation request JSON
        out_dir: Output directory, defaults to ``config['output_dir']``
        backends: Prebuilt adapters; built from the config when None

    Returns:
        The manifest written to ``manifest.json``
    """
    out_dir = Path(out_dir or config['output_dir'])
    if backends is None:
        backends = build_backends(config, generation=True)
    request_path = Path(request_path)
    document = read_json_document(request_path, 'generation_request.schema.json')
    request = request_from_document(document, request_path.parent, config, backends)
    pipeline = MultiIdPipeline(backends, config.pipeline_options())

    image = pipeline.generate(request)

    image_path = save_image(image, out_dir / "image.png")
    write_json({k: round(v, 6) for k, v in pipeline.timings.items()}, out_dir / "timings.json")
    manifest = {
        'backend': config['backend'],
        'config_digest': config.digest(),
        'request_digest': digest(document),
        'seed': request.seed,
        'steps': request.steps,
        'identities': len(request.ids),
        'image': image_path.name,
        'image_sha256': file_sha256(image_path),
        'timings': "timings.json",
    }
    write_json(manifest, out_dir / "manifest.json")
    logger.info("Wrote %s and manifest to %s", image_path.name, out_dir)
    return manifest
