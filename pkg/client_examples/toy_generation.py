from pathlib import Path

import numpy as np

from src.classes.masks import BBox
from src.classes.pipeline import DepthControl, GenerationRequest, IDReference, MultiIdPipeline, PipelineOptions
from src.classes.toy_backend import build_toy_backends
from src.utils.images import save_image

if __name__ == "__main__":
    out_dir = Path("outputs/toy_example")

    rng = np.random.default_rng(0)
    left, right = rng.uniform(0.0, 1.0, (2, 32, 32, 3))

    request = GenerationRequest(
        global_prompt="two friends sharing an umbrella in the rain",
        ids=[
            IDReference(left, "holding the umbrella", BBox(0.0, 0.1, 0.5, 1.0), 0),
            IDReference(right, "laughing", BBox(0.5, 0.1, 1.0, 1.0), 1),
        ],
        seed=7,
        steps=20,
        guidance_scale=7.5,
        depth_control=DepthControl(enabled=True, strength=0.8),
    )

    pipeline = MultiIdPipeline(build_toy_backends(), PipelineOptions(region_isolation=True))
    image = pipeline.generate(request)

    print(save_image(image, out_dir / "image.png"))
    for stage, seconds in pipeline.timings.items():
        print(f"{stage:>14}: {seconds:.3f}s")
