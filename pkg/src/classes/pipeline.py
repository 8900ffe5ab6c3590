"""
Multi-identity generation: per-identity inversion with feature caching, the
guided DDIM loop with masked attention installed, depth-guided control and
background-preserving repaint.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from src.classes.attention import GLOBAL, BlockSet, EmbeddingBlock, Gate, fuse_id_embedding, local, real_array
from src.classes.backends import BackendBundle, MultiIdAttentionHooks
from src.classes.ddim import DDIMSchedule, Direction, FeatureCache, LatentState, ddim_invert, ddim_step, forward_noise
from src.classes.errors import AdapterError, ConfigurationError, ShapeError, ValidationError
from src.classes.masks import BBox, MaskBank, SpatialMask
from src.classes.metrics import greedy_match
from src.utils.stage_timer import timed_stage

logger = logging.getLogger('MultiID')

StepCallback = Callable[[LatentState, Optional[np.ndarray]], None]


@dataclass(frozen=True, eq=False)
class IDReference:
    """
    One identity to place in the image.

    Attributes:
        image: Reference pixels (H, W, 3) in [0, 1]
        local_prompt: Pose/appearance text for this identity, may be empty
        box: Region the identity occupies
        identity_index: Stable index of the identity within the request
    """
    image: np.ndarray
    local_prompt: str
    box: BBox
    identity_index: int


@dataclass(frozen=True)
class DepthControl:
    enabled: bool = False
    strength: float = 1.0


@dataclass(frozen=True, eq=False)
class Background:
    """
    Background to preserve outside the foreground.

    Attributes:
        image: Background pixels
        foreground_mask: Latent-grid mask of the regenerated area; None uses
            the union of the identity boxes
    """
    image: np.ndarray
    foreground_mask: Optional[SpatialMask] = None


@dataclass(frozen=True, eq=False)
class GenerationRequest:
    global_prompt: str
    ids: Sequence[IDReference]
    seed: int = 0
    steps: int = 50
    guidance_scale: float = 1.0
    depth_control: DepthControl = DepthControl()
    background: Optional[Background] = None

    def __post_init__(self):
        ids = tuple(self.ids)
        if not ids:
            raise ValidationError("a generation request needs at least one identity", "E_NO_IDS")
        if not self.global_prompt:
            raise ValidationError("the global prompt must not be empty", "E_EMPTY_FIELD")
        indices = [ref.identity_index for ref in ids]
        if len(set(indices)) != len(indices):
            raise ValidationError(f"identity indices repeat: {indices}", "E_DUPLICATE_ID")
        if self.steps < 1:
            raise ValidationError(f"steps must be at least 1, got {self.steps}", "E_SCHEDULE")
        object.__setattr__(self, 'ids', ids)

    def combined_prompt(self) -> str:
        """Global prompt followed by every non-empty local prompt, joined by '; '."""
        return "; ".join([self.global_prompt] + [ref.local_prompt for ref in self.ids if ref.local_prompt])

    def boxes(self) -> Dict[int, BBox]:
        return {ref.identity_index: ref.box for ref in self.ids}


@dataclass(frozen=True)
class PipelineOptions:
    """
    Switches for the three components and the inversion settings.

    Attributes:
        id_cross_attention: Gate identity blocks by their boxes
        extended_self_attention: Attend to inverted reference features
        region_isolation: Restrict latent self-attention to equal box coverage
        inversion_conditioning: "null" or "local"
        cache_layer_stride: Cache every k-th self-attention site
        beta_start, beta_end: Scaled-linear training betas of the schedule
        realign_boxes: Move boxes onto persons detected in the initial image
    """
    id_cross_attention: bool = True
    extended_self_attention: bool = True
    region_isolation: bool = False
    inversion_conditioning: str = "null"
    cache_layer_stride: int = 1
    beta_start: float = 0.00085
    beta_end: float = 0.012
    realign_boxes: bool = False

    def __post_init__(self):
        if self.inversion_conditioning not in ("null", "local"):
            raise ConfigurationError(f"inversion_conditioning must be 'null' or 'local', "
                                     f"got {self.inversion_conditioning!r}")
        if self.cache_layer_stride < 1:
            raise ConfigurationError(f"cache_layer_stride must be at least 1, got {self.cache_layer_stride}")


def _binary_grid(mask: Union[SpatialMask, np.ndarray]) -> np.ndarray:
    if isinstance(mask, SpatialMask):
        return mask.values
    values = real_array(mask, "foreground mask")
    if values.ndim != 2 or not np.all((values == 0.0) | (values == 1.0)):
        raise ValidationError("foreground mask must be a 2-D 0/1 grid", "E_MASK_NOT_BINARY")
    return values


def repaint_blend(pred: LatentState, background_x0: np.ndarray, fg_mask: Union[SpatialMask, np.ndarray],
                  noise: np.ndarray, s: DDIMSchedule) -> LatentState:
    """
    Keep the prediction inside the foreground and the forward-noised background outside.

    Args:
        pred: Latent after a DENOISE step
        background_x0: Clean background latent
        fg_mask: Foreground grid, a SpatialMask or a raw 0/1 array (may be all zeros)
        noise: This step's noise draw, shaped like the latent
        s: DDIM schedule

    Returns:
        LatentState at the same position

    Raises:
        ShapeError: If the mask grid or the background does not match the latent
    """
    grid = _binary_grid(fg_mask)
    background_x0 = real_array(background_x0, "background latent")
    if background_x0.shape != pred.latent.shape:
        raise ShapeError(f"background latent {background_x0.shape} does not match latent {pred.latent.shape}")
    if grid.shape != pred.latent.shape[-2:]:
        raise ShapeError(f"foreground mask {grid.shape} does not match latent grid {pred.latent.shape[-2:]}")
    background = forward_noise(background_x0, pred.timestep_index, noise, s)
    return LatentState(np.where(grid > 0, pred.latent, background), pred.timestep_index)


def render_initial_image(req: GenerationRequest, initial_image_gen) -> np.ndarray:
    prompt = req.combined_prompt()
    logger.debug("Rendering initial image for prompt: %s", prompt)
    try:
        return np.asarray(initial_image_gen.generate(prompt, req.seed), dtype=np.float64)
    except Exception as e:
        raise AdapterError("initial-image", e) from e


def estimate_depth(image: np.ndarray, depth_estimator, resolution: Tuple[int, int]) -> np.ndarray:
    """
    Depth map of ``image`` resized to ``resolution`` and min-max normalized to [0, 1].

    A constant depth map normalizes to all zeros.
    """
    try:
        depth = np.asarray(depth_estimator.estimate(image), dtype=np.float64)
    except Exception as e:
        raise AdapterError("depth", e) from e
    if depth.ndim == 3:
        depth = depth.mean(axis=2)
    if depth.ndim != 2 or depth.size == 0 or not np.all(np.isfinite(depth)):
        raise AdapterError("depth", ValueError(f"depth estimator returned an unusable map of shape {depth.shape}"))

    h, w = resolution
    span = depth.max() - depth.min()
    if span == 0:
        return np.zeros((h, w))
    unit = ((depth - depth.min()) / span).astype(np.float32)
    resized = np.asarray(Image.fromarray(unit).resize((w, h), Image.BILINEAR), dtype=np.float64)
    span = resized.max() - resized.min()
    if span <= 0:
        return np.zeros((h, w))
    return (resized - resized.min()) / span


def prepare_depth_control(req: GenerationRequest, initial_image_gen, depth_estimator,
                          resolution: Tuple[int, int]) -> np.ndarray:
    """
    Render an initial image from the combined prompt and extract its depth map.

    Args:
        req: Request with depth control enabled
        initial_image_gen: InitialImageGenerator adapter
        depth_estimator: DepthEstimator adapter
        resolution: Generation resolution (height, width)

    Returns:
        np.ndarray: Depth map in [0, 1] shaped ``resolution``

    Raises:
        ConfigurationError: If depth control is disabled on the request
        AdapterError: With stage "initial-image" or "depth"
    """
    if not req.depth_control.enabled:
        raise ConfigurationError("depth control is disabled for this request")
    return estimate_depth(render_initial_image(req, initial_image_gen), depth_estimator, resolution)


def realign_boxes(boxes: Dict[int, BBox], detected: Sequence[BBox]) -> Dict[int, BBox]:
    """Replace each request box by the detected box it overlaps best, matched greedily on IoU."""
    if not detected or not boxes:
        return dict(boxes)
    identities = sorted(boxes)
    iou = np.array([[d.iou(boxes[i]) for i in identities] for d in detected])
    realigned = dict(boxes)
    for d, col in greedy_match(iou).pairs:
        if iou[d, col] > 0:
            realigned[identities[col]] = detected[d]
    return realigned


class MultiIdPipeline:
    """
    Generates one image per ``generate`` call from a GenerationRequest.

    Attributes:
        backends: Adapters used for the run
        options: Component switches
        timings: Seconds spent per stage in the last run
        final_latent: Pre-decode latent of the last run
        caches: Merged reference feature cache of the last run
    """

    def __init__(self, backends: BackendBundle, options: PipelineOptions = PipelineOptions()):
        backends.require(*BackendBundle.GENERATION)
        self.backends = backends
        self.options = options
        self.timings: Dict[str, float] = {}
        self.final_latent: Optional[np.ndarray] = None
        self.caches: Optional[FeatureCache] = None

    def _encode_text(self, text: str, identity: Optional[int] = None) -> np.ndarray:
        try:
            return np.asarray(self.backends.text_encoder.encode_text(text), dtype=np.float64)
        except Exception as e:
            raise AdapterError("text-encoding", e, identity=identity) from e

    def _null_tokens(self) -> np.ndarray:
        try:
            return np.asarray(self.backends.text_encoder.null_tokens(), dtype=np.float64)
        except Exception as e:
            raise AdapterError("text-encoding", e) from e

    def _encode_latent(self, image: np.ndarray, stage: str, identity: Optional[int] = None) -> np.ndarray:
        try:
            return np.asarray(self.backends.image_codec.encode(image), dtype=np.float64)
        except Exception as e:
            raise AdapterError(stage, e, identity=identity) from e

    def encode_conditioning(self, req: GenerationRequest) -> Tuple[BlockSet, BlockSet]:
        """
        Conditional and unconditional block sets.

        Local blocks start with ALL_ONES gates; hooks regate them per site.
        """
        blocks = [EmbeddingBlock(self._encode_text(req.global_prompt), Gate.ALL_ONES, GLOBAL)]
        dim = blocks[0].tokens.shape[1]
        for ref in req.ids:
            i = ref.identity_index
            try:
                id_embedding = self.backends.id_encoder.encode_id(ref.image)
            except Exception as e:
                raise AdapterError("id-encoding", e, identity=i) from e
            if ref.local_prompt:
                text = self._encode_text(ref.local_prompt, i)
                positions = self.backends.text_encoder.placeholder_positions(ref.local_prompt)
            else:
                text, positions = np.zeros((0, dim)), []
            blocks.append(EmbeddingBlock(fuse_id_embedding(text, id_embedding, positions), Gate.ALL_ONES, local(i)))
        null = BlockSet([EmbeddingBlock(self._null_tokens(), Gate.ALL_ONES, GLOBAL)])
        return BlockSet(blocks), null

    def _inversion_conditioning(self, ref: IDReference) -> np.ndarray:
        if self.options.inversion_conditioning == "local" and ref.local_prompt:
            return self._encode_text(ref.local_prompt, ref.identity_index)
        return self._null_tokens()

    def invert_references(self, req: GenerationRequest, s: DDIMSchedule) -> FeatureCache:
        """
        DDIM-invert every reference and merge their feature caches.

        Inversions run concurrently when the denoiser declares itself safe for it.
        """
        denoiser = self.backends.denoiser

        def invert(ref: IDReference) -> FeatureCache:
            latent = self._encode_latent(ref.image, "inversion", ref.identity_index)
            _, cache = ddim_invert(latent, s, denoiser, self._inversion_conditioning(ref),
                                   owner_id=ref.identity_index, layer_stride=self.options.cache_layer_stride)
            return cache

        if getattr(denoiser, 'concurrency_safe', False) and len(req.ids) > 1:
            with ThreadPoolExecutor(max_workers=len(req.ids)) as pool:
                caches = list(pool.map(invert, req.ids))
        else:
            caches = [invert(ref) for ref in req.ids]

        merged = FeatureCache()
        for cache in caches:
            merged.merge(cache)
        logger.info("Cached %d reference feature blocks for %d identities", len(merged), len(req.ids))
        return merged

    def _depth_map(self, req: GenerationRequest, boxes: Dict[int, BBox]) -> Tuple[np.ndarray, Dict[int, BBox]]:
        self.backends.require('initial_image_generator', 'depth_estimator', 'spatial_control')
        image = render_initial_image(req, self.backends.initial_image_generator)
        if self.options.realign_boxes and self.backends.person_detector is not None:
            try:
                detected = self.backends.person_detector.detect(image)
            except Exception as e:
                raise AdapterError("box-realignment", e) from e
            boxes = realign_boxes(boxes, detected)
            logger.debug("Realigned boxes: %s", boxes)
        depth = estimate_depth(image, self.backends.depth_estimator, tuple(self.backends.image_codec.image_shape[:2]))
        return depth, boxes

    def _hooks(self, bank: MaskBank, t: int, caches: Optional[FeatureCache]) -> MultiIdAttentionHooks:
        return MultiIdAttentionHooks(
            bank, t,
            cache=caches if self.options.extended_self_attention else None,
            mask_cross=self.options.id_cross_attention,
            isolate_regions=self.options.region_isolation,
        )

    def _predict(self, latent, timestep, conditioning, hooks, control, t) -> np.ndarray:
        try:
            return np.asarray(self.backends.denoiser.predict(latent, timestep, conditioning, hooks, control),
                              dtype=np.float64)
        except Exception as e:
            raise AdapterError("denoising", e, step=t) from e

    def _guided_eps(self, state: LatentState, s: DDIMSchedule, cond: BlockSet, null: BlockSet,
                    hooks, control, guidance_scale: float) -> np.ndarray:
        t = state.timestep_index
        timestep = s.model_timestep(t)
        eps_cond = self._predict(state.latent, timestep, cond, hooks, control, t)
        if guidance_scale == 1.0:
            return eps_cond
        eps_uncond = self._predict(state.latent, timestep, null, hooks, control, t)
        return eps_uncond + guidance_scale * (eps_cond - eps_uncond)

    def generate(self, req: GenerationRequest, callback: Optional[StepCallback] = None) -> np.ndarray:
        """
        Generate an image for ``req``.

        Args:
            req: The request
            callback: Called after every DDIM step with the new state and the
                step's repaint noise (None without a background)

        Returns:
            np.ndarray: Decoded image

        Raises:
            AdapterError: On any adapter failure, with stage, step and identity
        """
        timings: Dict[str, float] = {}
        self.timings = timings
        denoiser = self.backends.denoiser
        s = DDIMSchedule.scaled_linear(req.steps, self.options.beta_start, self.options.beta_end)
        rng = np.random.default_rng(req.seed)
        logger.info("Generating %d identities over %d steps (seed %d)", len(req.ids), req.steps, req.seed)

        with timed_stage("conditioning", timings):
            cond, null = self.encode_conditioning(req)

        boxes = req.boxes()
        depth = None
        if req.depth_control.enabled:
            with timed_stage("depth-control", timings):
                depth, boxes = self._depth_map(req, boxes)

        with timed_stage("masks", timings):
            bank = MaskBank(boxes)
            for site in denoiser.attention_sites():
                bank.masks(*site.grid)

        caches = None
        if self.options.extended_self_attention:
            with timed_stage("inversion", timings):
                caches = self.invert_references(req, s)
        self.caches = caches

        background_x0 = fg_grid = None
        if req.background is not None:
            with timed_stage("background", timings):
                background_x0 = self._encode_latent(req.background.image, "background")
                fg_grid = self._foreground(req.background, bank, denoiser.latent_shape[-2:])

        with timed_stage("denoising", timings):
            state = LatentState(rng.standard_normal(denoiser.latent_shape), s.steps)
            while state.timestep_index > 0:
                t = state.timestep_index
                control = None
                if depth is not None:
                    try:
                        residuals = self.backends.spatial_control.residuals(state.latent, s.model_timestep(t), depth)
                    except Exception as e:
                        raise AdapterError("spatial-control", e, step=t) from e
                    control = [req.depth_control.strength * np.asarray(r, dtype=np.float64) for r in residuals]
                eps = self._guided_eps(state, s, cond, null, self._hooks(bank, t, caches), control,
                                       req.guidance_scale)
                state = ddim_step(state, eps, s, Direction.DENOISE)
                noise = None
                if background_x0 is not None:
                    noise = rng.standard_normal(state.latent.shape)
                    state = repaint_blend(state, background_x0, fg_grid, noise, s)
                if callback is not None:
                    callback(state, noise)

        self.final_latent = state.latent
        with timed_stage("decode", timings):
            try:
                image = np.asarray(self.backends.image_codec.decode(state.latent), dtype=np.float64)
            except Exception as e:
                raise AdapterError("decode", e) from e
        logger.info("Generation finished in %.2fs", sum(timings.values()))
        return image

    @staticmethod
    def _foreground(background: Background, bank: MaskBank, grid: Tuple[int, int]) -> np.ndarray:
        if background.foreground_mask is not None:
            return _binary_grid(background.foreground_mask)
        union = np.zeros(tuple(grid))
        for mask in bank.masks(*grid):
            union = np.maximum(union, mask.values)
        return union
