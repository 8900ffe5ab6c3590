"""
Deterministic numpy stand-ins for every model contract.

All weights come from fixed seeds, nothing touches the network or disk, and
every adapter is safe to call from several threads at once.
"""
import hashlib
import logging
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from src.classes.attention import ProjectionSet, real_array
from src.classes.backends import AttentionSite, BackendBundle
from src.classes.errors import ShapeError, ValidationError
from src.classes.masks import BBox
from src.utils.images import as_rgb, resize

logger = logging.getLogger('MultiID')

MODEL_DIM = 4
LATENT_SHAPE = (4, 8, 8)
IMAGE_SHAPE = (32, 32, 3)
ID_ROWS = 2


def _with_spectral_norm(matrix: np.ndarray, target: float) -> np.ndarray:
    return matrix * (target / np.linalg.norm(matrix, 2))


def _unit(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 0 else vector


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.clip(np.dot(_unit(a), _unit(b)), -1.0, 1.0))


def _nonempty_image(image, what: str) -> np.ndarray:
    array = np.asarray(image)
    if array.size == 0:
        raise ValidationError(f"{what} needs a non-empty image", "E_EMPTY_INPUT")
    return as_rgb(image)


class ToyDenoiser:
    """
    A two-block attention network over a 4x8x8 latent.

    Each block adds hooked self-attention, adds hooked cross-attention, applies
    a fixed linear map and adds the optional control residual. The prediction is
    ``gain * h W_out + bias + (timestep / 1000) * temb``.

    Attributes:
        gain: Scale of the latent-dependent part of eps
        bias_scale: Scale of the constant eps offset
        time_scale: Scale of the timestep embedding
    """
    latent_shape: Tuple[int, int, int] = LATENT_SHAPE
    model_dim: int = MODEL_DIM
    concurrency_safe: bool = True

    def __init__(self, gain: float = 1e-5, bias_scale: float = 0.1, time_scale: float = 0.1,
                 heads: int = 2, blocks: int = 2, seed: int = 0):
        if blocks < 1:
            raise ValidationError(f"blocks must be at least 1, got {blocks}", "E_INVALID")
        self.gain = gain
        self.heads = heads
        rng = np.random.default_rng(seed)
        grid = LATENT_SHAPE[1:]

        def projections() -> ProjectionSet:
            return ProjectionSet(*[_with_spectral_norm(rng.standard_normal((MODEL_DIM, MODEL_DIM)), 0.5)
                                   for _ in range(3)])

        self._sites: List[AttentionSite] = []
        self._blocks = []
        for b in range(blocks):
            self_site = AttentionSite(f"block{b}.self", "self", grid, heads)
            cross_site = AttentionSite(f"block{b}.cross", "cross", grid, heads)
            self._sites += [self_site, cross_site]
            self._blocks.append((self_site, projections(), cross_site, projections(),
                                 _with_spectral_norm(rng.standard_normal((MODEL_DIM, MODEL_DIM)), 0.5)))
        self._w_out = _with_spectral_norm(rng.standard_normal((MODEL_DIM, MODEL_DIM)), 0.5)
        self._bias = bias_scale * rng.standard_normal(LATENT_SHAPE)
        self._temb = time_scale * rng.standard_normal(LATENT_SHAPE)

    def attention_sites(self) -> List[AttentionSite]:
        return list(self._sites)

    def predict(self, latent: np.ndarray, timestep: int, conditioning: Any, hooks: Any,
                control: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
        """
        Predict the noise in ``latent`` at model timestep ``timestep``.

        Raises:
            ShapeError: If the latent or the control residuals have the wrong shape
        """
        latent = real_array(latent, "latent")
        if latent.shape != LATENT_SHAPE:
            raise ShapeError(f"toy denoiser expects a latent of shape {LATENT_SHAPE}, got {latent.shape}")
        if control is not None and len(control) != len(self._blocks):
            raise ShapeError(f"{len(control)} control residuals for {len(self._blocks)} blocks")

        channels = LATENT_SHAPE[0]
        h = latent.reshape(channels, -1).T
        for b, (self_site, p_self, cross_site, p_cross, w_block) in enumerate(self._blocks):
            h = h + hooks.self_attention(self_site, h, p_self)
            h = h + hooks.cross_attention(cross_site, h, conditioning, p_cross)
            h = h @ w_block
            if control is not None:
                residual = np.asarray(control[b], dtype=np.float64)
                if residual.shape != h.shape:
                    raise ShapeError(f"control residual {b} has shape {residual.shape}, expected {h.shape}")
                h = h + residual
        out = (self.gain * (h @ self._w_out)).T.reshape(LATENT_SHAPE)
        return out + self._bias + (timestep / 1000.0) * self._temb


class ToyTextEncoder:
    """
    One hashed row per character, salted with the character position.

    Attributes:
        placeholder: Character whose positions are reported as identity
            placeholders, None to always use the append policy
    """
    concurrency_safe = True

    def __init__(self, placeholder: Optional[str] = None):
        self.placeholder = placeholder

    def encode_text(self, text: str) -> np.ndarray:
        if not text:
            raise ValidationError("text encoder needs a non-empty prompt", "E_EMPTY_INPUT")
        rows = []
        for i, ch in enumerate(text):
            digest = hashlib.sha256(f"{i}:{ch}".encode('utf-8')).digest()
            rows.append(np.frombuffer(digest[:2 * MODEL_DIM], dtype='<u2') / 65535.0 * 2.0 - 1.0)
        return np.array(rows, dtype=np.float64)

    def placeholder_positions(self, text: str) -> List[int]:
        if self.placeholder is None:
            return []
        return [i for i, ch in enumerate(text) if ch == self.placeholder]

    def null_tokens(self) -> np.ndarray:
        return np.zeros((1, MODEL_DIM))


class ToyIdEncoder:
    """Two tanh rows from a fixed projection of the image pooled to 8x8."""
    concurrency_safe = True

    def __init__(self, seed: int = 1):
        rng = np.random.default_rng(seed)
        self._projection = rng.standard_normal((8 * 8 * 3, ID_ROWS * MODEL_DIM)) / np.sqrt(8 * 8 * 3)

    def encode_id(self, image: np.ndarray) -> np.ndarray:
        pooled = resize(_nonempty_image(image, "id encoder"), (8, 8)).reshape(-1)
        return np.tanh(pooled @ self._projection).reshape(ID_ROWS, MODEL_DIM)


class ToyImageCodec:
    """32x32 RGB to a 4x8x8 latent by 4x4 average pooling and a fixed colour map."""
    image_shape: Tuple[int, int, int] = IMAGE_SHAPE
    concurrency_safe = True

    _COLOUR_MAP = np.array([[1.0, 0.0, 0.0, 0.5],
                            [0.0, 1.0, 0.0, 0.5],
                            [0.0, 0.0, 1.0, 0.5]])

    def encode(self, image: np.ndarray) -> np.ndarray:
        array = _nonempty_image(image, "image codec")
        if array.shape != IMAGE_SHAPE:
            array = resize(array, IMAGE_SHAPE[:2])
        pooled = array.reshape(8, 4, 8, 4, 3).mean(axis=(1, 3))
        return ((pooled * 2.0 - 1.0) @ self._COLOUR_MAP).transpose(2, 0, 1)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = real_array(latent, "latent")
        if latent.shape != LATENT_SHAPE:
            raise ShapeError(f"toy codec expects a latent of shape {LATENT_SHAPE}, got {latent.shape}")
        colours = latent.transpose(1, 2, 0) @ np.linalg.pinv(self._COLOUR_MAP)
        pixels = np.clip((colours + 1.0) / 2.0, 0.0, 1.0)
        return np.repeat(np.repeat(pixels, 4, axis=0), 4, axis=1)


class ToyDepthEstimator:
    """Darker pixels are nearer."""
    concurrency_safe = True

    def estimate(self, image: np.ndarray) -> np.ndarray:
        return 1.0 - _nonempty_image(image, "depth estimator").mean(axis=2)


class ToyInitialImageGenerator:
    """Smooth random image seeded by the prompt text and the request seed."""
    concurrency_safe = True

    def generate(self, prompt: str, seed: int) -> np.ndarray:
        salt = int.from_bytes(hashlib.sha256(prompt.encode('utf-8')).digest()[:8], 'little')
        rng = np.random.default_rng([salt, seed])
        return resize(rng.random((4, 4, 3)), IMAGE_SHAPE[:2])


class ToySpatialControl:
    """Per-block residuals from the depth map pooled to the latent grid."""
    concurrency_safe = True

    def __init__(self, blocks: int = 2, scale: float = 0.1, seed: int = 2):
        rng = np.random.default_rng(seed)
        self._rows = scale * rng.standard_normal((blocks, 1, MODEL_DIM))

    def residuals(self, latent: np.ndarray, timestep: int, depth_map: np.ndarray) -> List[np.ndarray]:
        depth = np.asarray(depth_map, dtype=np.float32)
        if depth.ndim != 2:
            raise ShapeError(f"depth map must be 2-D, got shape {depth.shape}")
        h, w = LATENT_SHAPE[1:]
        pooled = np.asarray(Image.fromarray(depth).resize((w, h), Image.BILINEAR), dtype=np.float64)
        tokens = pooled.reshape(-1, 1)
        return [tokens @ row for row in self._rows]


class ToyPersonDetector:
    """Bright column runs become full-height person boxes, trimmed to their bright rows."""
    concurrency_safe = True

    def __init__(self, threshold: float = 0.5):
        self.threshold = threshold

    def detect(self, image: np.ndarray) -> List[BBox]:
        luminance = _nonempty_image(image, "person detector").mean(axis=2)
        h, w = luminance.shape
        active = luminance.mean(axis=0) > self.threshold
        boxes = []
        c = 0
        while c < w:
            if not active[c]:
                c += 1
                continue
            start = c
            while c < w and active[c]:
                c += 1
            rows = np.flatnonzero(luminance[:, start:c].mean(axis=1) > self.threshold)
            y0, y1 = (rows[0], rows[-1] + 1) if rows.size else (0, h)
            boxes.append(BBox(start / w, y0 / h, c / w, y1 / h))
        return boxes


class ToyFaceEmbedder:
    """Flat images have no face; anything else embeds its 4x4 grey layout."""
    concurrency_safe = True

    def embed_face(self, image: np.ndarray) -> Optional[np.ndarray]:
        array = _nonempty_image(image, "face embedder")
        if array.std() < 1e-6:
            return None
        grey = resize(array, (4, 4)).mean(axis=2).reshape(-1)
        return _unit(grey - grey.mean())


class ToyImageEmbedder:
    concurrency_safe = True

    def __init__(self, seed: int = 3, dim: int = 32):
        rng = np.random.default_rng(seed)
        self._projection = rng.standard_normal((8 * 8 * 3, dim))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        pooled = resize(_nonempty_image(image, "image embedder"), (8, 8)).reshape(-1)
        return _unit(pooled @ self._projection)


class ToyTextImageScorer:
    """Cosine between a projected text hash and a projected image pooling."""
    concurrency_safe = True

    def __init__(self, seed: int = 4, dim: int = 32):
        rng = np.random.default_rng(seed)
        self._text = ToyTextEncoder()
        self._image = ToyImageEmbedder(seed + 100, dim)
        self._projection = rng.standard_normal((MODEL_DIM, dim))

    def score(self, image: np.ndarray, text: str) -> float:
        text_vector = self._text.encode_text(text).mean(axis=0) @ self._projection
        return _cosine(self._image.embed_image(image), text_vector)


def build_toy_backends(**denoiser_options) -> BackendBundle:
    """Every adapter of the toy backend, keyword arguments go to ToyDenoiser."""
    return BackendBundle(
        denoiser=ToyDenoiser(**denoiser_options),
        text_encoder=ToyTextEncoder(),
        id_encoder=ToyIdEncoder(),
        image_codec=ToyImageCodec(),
        depth_estimator=ToyDepthEstimator(),
        spatial_control=ToySpatialControl(),
        initial_image_generator=ToyInitialImageGenerator(),
        person_detector=ToyPersonDetector(),
        face_embedder=ToyFaceEmbedder(),
        image_embedder=ToyImageEmbedder(),
        text_image_scorer=ToyTextImageScorer(),
        preference_scorer=ToyTextImageScorer(seed=5),
    )
