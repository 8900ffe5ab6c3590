import logging
from collections import Counter
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from src.classes.backends import BackendBundle
from src.classes.ddim import DDIMSchedule, ddim_invert
from src.classes.errors import AdapterError
from src.classes.run_config import RunConfig
from src.commands.common import build_backends, file_sha256, write_json
from src.utils.images import load_image, resize

logger = logging.getLogger('MultiID')


def cmd_invert(config: RunConfig, image_path: Path, out_dir: Optional[Path] = None,
               prompt: str = "", backends: Optional[BackendBundle] = None) -> Dict[str, Any]:
    """
    DDIM-invert one image and write ``inverted.npy`` with ``inversion.json``.

    The summary lists the cached feature blocks per self-attention site.

    Args:
        config: Effective run configuration
        image_path: Image to invert
        out_dir: Output directory, defaults to ``config['output_dir']``
        prompt: Inversion conditioning; empty uses the null embedding
        backends: Prebuilt adapters; built from the config when None
    """
    out_dir = Path(out_dir or config['output_dir'])
    if backends is None:
        backends = build_backends(config, generation=True)
    backends.require('denoiser', 'text_encoder', 'image_codec')
    options = config.pipeline_options()
    schedule = DDIMSchedule.scaled_linear(config['steps'], options.beta_start, options.beta_end)

    image = load_image(image_path)
    shape = backends.image_codec.image_shape
    if image.shape[:2] != tuple(shape[:2]):
        image = resize(image, shape[:2])
    try:
        latent = np.asarray(backends.image_codec.encode(image), dtype=np.float64)
        conditioning = (backends.text_encoder.encode_text(prompt) if prompt
                        else backends.text_encoder.null_tokens())
    except Exception as e:
        raise AdapterError("inversion", e) from e

    inverted, cache = ddim_invert(latent, schedule, backends.denoiser, conditioning,
                                  layer_stride=options.cache_layer_stride)

    latent_path = out_dir / "inverted.npy"
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(latent_path, inverted.latent)
    per_site = Counter(entry.layer_id for entry in cache)
    summary = {
        'config_digest': config.digest(),
        'image': str(image_path),
        'steps': schedule.steps,
        'latent': latent_path.name,
        'latent_sha256': file_sha256(latent_path),
        'cached_blocks': len(cache),
        'blocks_per_site': dict(sorted(per_site.items())),
    }
    write_json(summary, out_dir / "inversion.json")
    logger.info("Inverted %s: %d cached blocks over %d steps", image_path, len(cache), schedule.steps)
    return summary
