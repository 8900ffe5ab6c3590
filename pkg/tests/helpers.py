import numpy as np

from src.classes.masks import BBox
from src.classes.pipeline import IDReference


def solid_image(rgb, size=32) -> np.ndarray:
    return np.broadcast_to(np.asarray(rgb, dtype=np.float64), (size, size, 3)).copy()


def noise_image(seed: int, size=32) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, (size, size, 3))


def two_references(second_seed: int = 11):
    return [
        IDReference(noise_image(10), "standing on the left", BBox(0.0, 0.0, 0.5, 1.0), 0),
        IDReference(noise_image(second_seed), "waving on the right", BBox(0.5, 0.0, 1.0, 1.0), 1),
    ]
