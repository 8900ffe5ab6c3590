"""
Pluggable model contracts and the attention hooks the pipeline installs.

A denoiser exposes its attention sites and calls ``hooks.self_attention`` and
``hooks.cross_attention`` at each of them; swapping the hooks object is the
only way the pipeline changes attention behaviour.
"""
import logging
from dataclasses import dataclass, fields
from typing import Any, Collection, List, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np

from src.classes.attention import (
    BlockSet,
    FeatureCacheEntry,
    ProjectionSet,
    extended_self_attention,
    masked_cross_attention,
    plain_attention,
)
from src.classes.errors import ConfigurationError
from src.classes.masks import BBox, MaskBank

logger = logging.getLogger('MultiID')


@dataclass(frozen=True)
class AttentionSite:
    """
    One attention layer inside a denoiser.

    Attributes:
        layer_id: Stable identifier, also the feature cache key
        kind: "self" or "cross"
        grid: Latent token grid (h, w) the layer operates on
        heads: Number of attention heads
    """
    layer_id: str
    kind: str
    grid: Tuple[int, int]
    heads: int = 1


@runtime_checkable
class Denoiser(Protocol):
    latent_shape: Tuple[int, int, int]
    model_dim: int
    concurrency_safe: bool

    def attention_sites(self) -> List[AttentionSite]: ...

    def predict(self, latent: np.ndarray, timestep: int, conditioning: Any, hooks: Any,
                control: Optional[Sequence[np.ndarray]] = None) -> np.ndarray: ...


class TextEncoder(Protocol):
    def encode_text(self, text: str) -> np.ndarray: ...

    def placeholder_positions(self, text: str) -> List[int]: ...

    def null_tokens(self) -> np.ndarray: ...


class IdEncoder(Protocol):
    def encode_id(self, image: np.ndarray) -> np.ndarray: ...


class ImageCodec(Protocol):
    image_shape: Tuple[int, int, int]

    def encode(self, image: np.ndarray) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> np.ndarray: ...


class DepthEstimator(Protocol):
    def estimate(self, image: np.ndarray) -> np.ndarray: ...


class SpatialControl(Protocol):
    def residuals(self, latent: np.ndarray, timestep: int, depth_map: np.ndarray) -> List[np.ndarray]: ...


class InitialImageGenerator(Protocol):
    def generate(self, prompt: str, seed: int) -> np.ndarray: ...


class PersonDetector(Protocol):
    def detect(self, image: np.ndarray) -> List[BBox]: ...


class FaceEmbedder(Protocol):
    def embed_face(self, image: np.ndarray) -> Optional[np.ndarray]: ...


class ImageEmbedder(Protocol):
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...


class TextImageScorer(Protocol):
    def score(self, image: np.ndarray, text: str) -> float: ...


@dataclass
class BackendBundle:
    """
    Every adapter a run may need. Generation needs the first four members;
    evaluation needs the detector, embedders and scorers.
    """
    denoiser: Optional[Denoiser] = None
    text_encoder: Optional[TextEncoder] = None
    id_encoder: Optional[IdEncoder] = None
    image_codec: Optional[ImageCodec] = None
    depth_estimator: Optional[DepthEstimator] = None
    spatial_control: Optional[SpatialControl] = None
    initial_image_generator: Optional[InitialImageGenerator] = None
    person_detector: Optional[PersonDetector] = None
    face_embedder: Optional[FaceEmbedder] = None
    image_embedder: Optional[ImageEmbedder] = None
    text_image_scorer: Optional[TextImageScorer] = None
    preference_scorer: Optional[TextImageScorer] = None

    GENERATION = ('denoiser', 'text_encoder', 'id_encoder', 'image_codec')
    EVALUATION = ('person_detector', 'face_embedder', 'image_embedder', 'text_image_scorer', 'preference_scorer')

    def require(self, *names: str) -> None:
        """
        Raises:
            ConfigurationError: Naming every absent member
        """
        known = {f.name for f in fields(self)}
        unknown = [n for n in names if n not in known]
        if unknown:
            raise ConfigurationError(f"unknown backend members: {unknown}")
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ConfigurationError(f"backend bundle is missing: {', '.join(missing)}")

    def concurrency_safe(self, name: str) -> bool:
        return bool(getattr(getattr(self, name), 'concurrency_safe', False))


class PlainAttentionHooks:
    """Unmodified attention: self-attention over the latent, cross-attention over all tokens."""

    def self_attention(self, site: AttentionSite, x: np.ndarray, p: ProjectionSet) -> np.ndarray:
        return plain_attention(x, x, p, site.heads)

    def cross_attention(self, site: AttentionSite, x: np.ndarray, conditioning: Any,
                        p: ProjectionSet) -> np.ndarray:
        context = conditioning.tokens() if isinstance(conditioning, BlockSet) else conditioning
        return plain_attention(x, context, p, site.heads)


class FeatureRecordingHooks(PlainAttentionHooks):
    """
    Plain attention that stores every self-attention input it sees.

    Attributes:
        cache: FeatureCache receiving the entries
        owner_id: Identity stamped on each entry
        timestep_index: Schedule position of the current denoiser call
        layers: Site ids to record, None for all
    """

    def __init__(self, cache, owner_id: int, timestep_index: int, layers: Optional[Collection[str]] = None):
        self.cache = cache
        self.owner_id = owner_id
        self.timestep_index = timestep_index
        self.layers = layers

    def self_attention(self, site: AttentionSite, x: np.ndarray, p: ProjectionSet) -> np.ndarray:
        if self.layers is None or site.layer_id in self.layers:
            self.cache.add(FeatureCacheEntry(site.layer_id, self.timestep_index, np.array(x), self.owner_id))
        return super().self_attention(site, x, p)


class MultiIdAttentionHooks(PlainAttentionHooks):
    """
    Masked cross-attention and extended self-attention for one denoiser call.

    Attributes:
        mask_bank: Identity boxes and their rasterized masks
        timestep_index: Schedule position used to look up cached features
        cache: Reference features, None when extended self-attention is off
        mask_cross: Gate local blocks by their boxes (off attends them everywhere)
        isolate_regions: Restrict latent self-attention to equal box coverage
    """

    def __init__(self, mask_bank: MaskBank, timestep_index: int, cache=None,
                 mask_cross: bool = True, isolate_regions: bool = False):
        self.mask_bank = mask_bank
        self.timestep_index = timestep_index
        self.cache = cache
        self.mask_cross = mask_cross
        self.isolate_regions = isolate_regions

    def self_attention(self, site: AttentionSite, x: np.ndarray, p: ProjectionSet) -> np.ndarray:
        h, w = site.grid
        entries = self.cache.entries_for(site.layer_id, self.timestep_index) if self.cache is not None else []
        if not entries and not self.isolate_regions:
            return super().self_attention(site, x, p)
        masks = {i: self.mask_bank.mask(i, h, w) for i in self.mask_bank.identities}
        region_masks = list(masks.values()) if self.isolate_regions else None
        return extended_self_attention(x, entries, masks, p, site.heads, region_masks=region_masks)

    def cross_attention(self, site: AttentionSite, x: np.ndarray, conditioning: Any,
                        p: ProjectionSet) -> np.ndarray:
        if not isinstance(conditioning, BlockSet) or not self.mask_cross:
            return super().cross_attention(site, x, conditioning, p)
        h, w = site.grid
        gated = conditioning.with_gates({i: self.mask_bank.mask(i, h, w) for i in self.mask_bank.identities})
        return masked_cross_attention(x, gated, p, site.heads)
