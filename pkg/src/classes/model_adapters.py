"""
Thin wrappers exposing pretrained models through the backend contracts.

Heavy packages (torch, diffusers, transformers, facenet-pytorch, hpsv2) are
imported on first use; install them from requirements-models.txt.
"""
import logging
import re
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from src.classes.attention import BlockSet, EmbeddingBlock, ProjectionSet
from src.classes.backends import AttentionSite, BackendBundle
from src.classes.errors import ConfigurationError
from src.classes.masks import BBox
from src.utils.images import as_rgb, to_uint8

logger = logging.getLogger('MultiID')

MODEL_DEFAULTS = {
    'base': "runwayml/stable-diffusion-v1-5",
    'controlnet': "lllyasviel/sd-controlnet-depth",
    'initial_image': "black-forest-labs/FLUX.1-dev",
    'depth': "Intel/dpt-large",
    'detector': "IDEA-Research/grounding-dino-base",
    'clip': "openai/clip-vit-large-patch14",
}


def _torch():
    try:
        import torch
    except ImportError as e:
        raise ConfigurationError("the diffusers backend needs torch; install requirements-models.txt") from e
    return torch


def _device(torch) -> str:
    return "cuda" if torch.cuda.is_available() else "cpu"


def _to_pil(image) -> Image.Image:
    return Image.fromarray(to_uint8(image))


def _numpy(tensor) -> np.ndarray:
    return tensor.detach().float().cpu().numpy().astype(np.float64)


class _HookedAttnProcessor:
    """Routes one diffusers attention module through the installed hooks."""

    def __init__(self, site: AttentionSite, denoiser: 'DiffusersDenoiser'):
        self.site = site
        self.denoiser = denoiser

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, **kwargs):
        torch = _torch()
        hooks, conditioning = self.denoiser._active
        w_q, w_k, w_v = (_numpy(layer.weight).T for layer in (attn.to_q, attn.to_k, attn.to_v))
        outputs = []
        for x_t in hidden_states:
            x = _numpy(x_t)
            if self.site.kind == "self":
                out = hooks.self_attention(self.site, x, ProjectionSet(w_q, w_k, w_v))
            else:
                # Query and context widths differ: embed both in one zero-padded space.
                c_x, c_ctx = w_q.shape[0], w_k.shape[0]
                p = ProjectionSet(np.vstack([w_q, np.zeros((c_ctx, w_q.shape[1]))]),
                                  np.vstack([np.zeros((c_x, w_k.shape[1])), w_k]),
                                  np.vstack([np.zeros((c_x, w_v.shape[1])), w_v]))
                padded_x = np.hstack([x, np.zeros((x.shape[0], c_ctx))])
                out = hooks.cross_attention(self.site, padded_x, _pad_conditioning(conditioning, c_x), p)
            outputs.append(torch.from_numpy(out).to(hidden_states.dtype))
        out = torch.stack(outputs).to(hidden_states.device)
        return attn.to_out[1](attn.to_out[0](out))


def _pad_conditioning(conditioning, width: int):
    if isinstance(conditioning, BlockSet):
        return BlockSet([EmbeddingBlock(np.hstack([np.zeros((b.tokens.shape[0], width)), b.tokens]), b.gate, b.label)
                         for b in conditioning.blocks])
    tokens = np.asarray(conditioning, dtype=np.float64)
    return np.hstack([np.zeros((tokens.shape[0], width)), tokens])


class DiffusersDenoiser:
    """
    A Stable Diffusion UNet whose attention modules call the installed hooks.

    Attention runs in float64 numpy, so this adapter is meant for smoke runs
    and small resolutions rather than throughput.
    """
    concurrency_safe = False

    def __init__(self, model_id: str = MODEL_DEFAULTS['base'], resolution: int = 512):
        torch = _torch()
        from diffusers import UNet2DConditionModel
        self.device = _device(torch)
        self.unet = UNet2DConditionModel.from_pretrained(model_id, subfolder="unet").to(self.device).eval()
        latent = resolution // 8
        self.latent_shape: Tuple[int, int, int] = (self.unet.config.in_channels, latent, latent)
        self.model_dim: int = self.unet.config.cross_attention_dim
        self._active: Tuple[Any, Any] = (None, None)
        self._sites = self._catalog(latent)
        self.unet.set_attn_processor({name: _HookedAttnProcessor(site, self) for name, site in self._sites.items()})

    def _catalog(self, latent: int) -> Dict[str, AttentionSite]:
        depth = len(self.unet.config.block_out_channels)
        modules = dict(self.unet.named_modules())
        sites = {}
        for name in self.unet.attn_processors:
            match = re.match(r"(down_blocks|up_blocks)\.(\d+)", name)
            if match is None:
                level = depth - 1
            elif match.group(1) == "down_blocks":
                level = int(match.group(2))
            else:
                level = depth - 1 - int(match.group(2))
            grid = latent // (2 ** level)
            module = modules[name.rsplit('.processor', 1)[0]]
            kind = "self" if ".attn1" in name else "cross"
            sites[name] = AttentionSite(name.rsplit('.processor', 1)[0], kind, (grid, grid), module.heads)
        return sites

    def attention_sites(self) -> List[AttentionSite]:
        return list(self._sites.values())

    def predict(self, latent: np.ndarray, timestep: int, conditioning: Any, hooks: Any,
                control: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
        torch = _torch()
        tokens = conditioning.tokens() if isinstance(conditioning, BlockSet) else np.asarray(conditioning)
        self._active = (hooks, conditioning)
        try:
            with torch.no_grad():
                kwargs = {}
                if control is not None:
                    residuals = [torch.from_numpy(np.asarray(r)).float().to(self.device) for r in control]
                    kwargs = {'down_block_additional_residuals': residuals[:-1],
                              'mid_block_additional_residual': residuals[-1]}
                eps = self.unet(torch.from_numpy(latent[None]).float().to(self.device), timestep,
                                encoder_hidden_states=torch.from_numpy(tokens[None]).float().to(self.device),
                                **kwargs).sample
        finally:
            self._active = (None, None)
        return _numpy(eps[0])


class DiffusersImageCodec:
    concurrency_safe = False

    def __init__(self, model_id: str = MODEL_DEFAULTS['base'], resolution: int = 512):
        torch = _torch()
        from diffusers import AutoencoderKL
        self.device = _device(torch)
        self.vae = AutoencoderKL.from_pretrained(model_id, subfolder="vae").to(self.device).eval()
        self.image_shape = (resolution, resolution, 3)

    def encode(self, image: np.ndarray) -> np.ndarray:
        torch = _torch()
        pixels = np.asarray(_to_pil(image).resize(self.image_shape[1::-1]), dtype=np.float32) / 127.5 - 1.0
        with torch.no_grad():
            dist = self.vae.encode(torch.from_numpy(pixels).permute(2, 0, 1)[None].to(self.device)).latent_dist
        return _numpy(dist.mean[0] * self.vae.config.scaling_factor)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        torch = _torch()
        with torch.no_grad():
            scaled = torch.from_numpy(latent[None] / self.vae.config.scaling_factor).float().to(self.device)
            image = self.vae.decode(scaled).sample[0]
        return np.clip((_numpy(image).transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0)


class ClipTextEncoder:
    """CLIP text encoder; ``trigger`` marks identity placeholder tokens."""
    concurrency_safe = False

    def __init__(self, model_id: str = MODEL_DEFAULTS['base'], trigger: str = "img"):
        torch = _torch()
        from transformers import CLIPTextModel, CLIPTokenizer
        self.device = _device(torch)
        self.tokenizer = CLIPTokenizer.from_pretrained(model_id, subfolder="tokenizer")
        self.model = CLIPTextModel.from_pretrained(model_id, subfolder="text_encoder").to(self.device).eval()
        self.trigger = trigger

    def _ids(self, text: str):
        return self.tokenizer(text, padding="max_length", max_length=self.tokenizer.model_max_length,
                              truncation=True, return_tensors="pt").input_ids

    def encode_text(self, text: str) -> np.ndarray:
        torch = _torch()
        with torch.no_grad():
            return _numpy(self.model(self._ids(text).to(self.device))[0][0])

    def placeholder_positions(self, text: str) -> List[int]:
        trigger_ids = set(self.tokenizer(self.trigger, add_special_tokens=False).input_ids)
        return [i for i, token in enumerate(self._ids(text)[0].tolist()) if token in trigger_ids]

    def null_tokens(self) -> np.ndarray:
        return self.encode_text("")


class ClipIdEncoder:
    """Projected CLIP image embedding as a single identity row."""
    concurrency_safe = False

    def __init__(self, model_id: str = MODEL_DEFAULTS['clip']):
        torch = _torch()
        from transformers import CLIPImageProcessor, CLIPVisionModelWithProjection
        self.device = _device(torch)
        self.processor = CLIPImageProcessor.from_pretrained(model_id)
        self.model = CLIPVisionModelWithProjection.from_pretrained(model_id).to(self.device).eval()

    def encode_id(self, image: np.ndarray) -> np.ndarray:
        torch = _torch()
        inputs = self.processor(images=_to_pil(image), return_tensors="pt").to(self.device)
        with torch.no_grad():
            return _numpy(self.model(**inputs).image_embeds)


class TransformersDepthEstimator:
    concurrency_safe = False

    def __init__(self, model_id: str = MODEL_DEFAULTS['depth']):
        from transformers import pipeline
        self.pipe = pipeline("depth-estimation", model=model_id)

    def estimate(self, image: np.ndarray) -> np.ndarray:
        return np.squeeze(_numpy(self.pipe(_to_pil(image))['predicted_depth']))


class ControlNetSpatialControl:
    """Depth ControlNet residuals for the UNet down and mid blocks."""
    concurrency_safe = False

    def __init__(self, model_id: str = MODEL_DEFAULTS['controlnet'], text_encoder: Optional[ClipTextEncoder] = None):
        torch = _torch()
        from diffusers import ControlNetModel
        self.device = _device(torch)
        self.model = ControlNetModel.from_pretrained(model_id).to(self.device).eval()
        self.context = text_encoder.null_tokens() if text_encoder is not None else None

    def residuals(self, latent: np.ndarray, timestep: int, depth_map: np.ndarray) -> List[np.ndarray]:
        torch = _torch()
        h, w = latent.shape[-2] * 8, latent.shape[-1] * 8
        depth = np.asarray(Image.fromarray(np.asarray(depth_map, dtype=np.float32)).resize((w, h)))
        cond = torch.from_numpy(np.repeat(depth[None, None], 3, axis=1)).float().to(self.device)
        context = self.context if self.context is not None else np.zeros((77, self.model.config.cross_attention_dim))
        with torch.no_grad():
            down, mid = self.model(torch.from_numpy(latent[None]).float().to(self.device), timestep,
                                   encoder_hidden_states=torch.from_numpy(context[None]).float().to(self.device),
                                   controlnet_cond=cond, return_dict=False)
        return [_numpy(r[0]) for r in down] + [_numpy(mid[0])]


class DiffusersInitialImageGenerator:
    concurrency_safe = False

    def __init__(self, model_id: str = MODEL_DEFAULTS['initial_image'], resolution: int = 512):
        torch = _torch()
        from diffusers import AutoPipelineForText2Image
        self.device = _device(torch)
        self.pipe = AutoPipelineForText2Image.from_pretrained(model_id).to(self.device)
        self.resolution = resolution

    def generate(self, prompt: str, seed: int) -> np.ndarray:
        torch = _torch()
        generator = torch.Generator(device="cpu").manual_seed(seed)
        image = self.pipe(prompt, height=self.resolution, width=self.resolution, generator=generator).images[0]
        return as_rgb(image)


class GroundingPersonDetector:
    concurrency_safe = False

    def __init__(self, model_id: str = MODEL_DEFAULTS['detector'], threshold: float = 0.35):
        from transformers import pipeline
        self.pipe = pipeline("zero-shot-object-detection", model=model_id)
        self.threshold = threshold

    def detect(self, image: np.ndarray) -> List[BBox]:
        pil = _to_pil(image)
        w, h = pil.size
        boxes = []
        for found in self.pipe(pil, candidate_labels=["person"]):
            if found['score'] < self.threshold:
                continue
            b = found['box']
            boxes.append(BBox(max(0.0, b['xmin'] / w), max(0.0, b['ymin'] / h),
                              min(1.0, b['xmax'] / w), min(1.0, b['ymax'] / h)))
        return boxes


class FacenetFaceEmbedder:
    concurrency_safe = False

    def __init__(self):
        from facenet_pytorch import MTCNN, InceptionResnetV1
        self.detector = MTCNN(image_size=160)
        self.model = InceptionResnetV1(pretrained='vggface2').eval()

    def embed_face(self, image: np.ndarray) -> Optional[np.ndarray]:
        torch = _torch()
        face = self.detector(_to_pil(image))
        if face is None:
            return None
        with torch.no_grad():
            return _numpy(self.model(face[None])[0])


class ClipScorer:
    """CLIP image embeddings and image-text cosine."""
    concurrency_safe = False

    def __init__(self, model_id: str = MODEL_DEFAULTS['clip']):
        torch = _torch()
        from transformers import CLIPModel, CLIPProcessor
        self.device = _device(torch)
        self.processor = CLIPProcessor.from_pretrained(model_id)
        self.model = CLIPModel.from_pretrained(model_id).to(self.device).eval()

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        torch = _torch()
        inputs = self.processor(images=_to_pil(image), return_tensors="pt").to(self.device)
        with torch.no_grad():
            return _numpy(self.model.get_image_features(**inputs)[0])

    def score(self, image: np.ndarray, text: str) -> float:
        torch = _torch()
        inputs = self.processor(text=[text], return_tensors="pt", padding=True, truncation=True).to(self.device)
        with torch.no_grad():
            text_vector = _numpy(self.model.get_text_features(**inputs)[0])
        image_vector = self.embed_image(image)
        return float(np.dot(image_vector, text_vector) / (np.linalg.norm(image_vector) * np.linalg.norm(text_vector)))


class HpsPreferenceScorer:
    """Human preference score; the hpsv2 package owns its preprocessing."""
    concurrency_safe = False

    def __init__(self, version: str = "v2.1"):
        import hpsv2
        self._hpsv2 = hpsv2
        self.version = version

    def score(self, image: np.ndarray, text: str) -> float:
        return float(self._hpsv2.score(_to_pil(image), text, hps_version=self.version)[0])


def build_diffusers_backends(models: Dict[str, str], generation: bool = True,
                             evaluation: bool = False) -> BackendBundle:
    """Real-model bundle with the requested adapter groups. ``models`` overrides MODEL_DEFAULTS by role."""
    unknown = set(models) - set(MODEL_DEFAULTS)
    if unknown:
        raise ConfigurationError(f"unknown model roles: {sorted(unknown)}")
    ids = {**MODEL_DEFAULTS, **models}
    logger.info("Loading diffusers backend: %s", ids)
    bundle = BackendBundle()
    if generation:
        text_encoder = ClipTextEncoder(ids['base'])
        bundle.denoiser = DiffusersDenoiser(ids['base'])
        bundle.text_encoder = text_encoder
        bundle.id_encoder = ClipIdEncoder(ids['clip'])
        bundle.image_codec = DiffusersImageCodec(ids['base'])
        bundle.depth_estimator = TransformersDepthEstimator(ids['depth'])
        bundle.spatial_control = ControlNetSpatialControl(ids['controlnet'], text_encoder)
        bundle.initial_image_generator = DiffusersInitialImageGenerator(ids['initial_image'])
    if evaluation:
        clip = ClipScorer(ids['clip'])
        bundle.person_detector = GroundingPersonDetector(ids['detector'])
        bundle.face_embedder = FacenetFaceEmbedder()
        bundle.image_embedder = clip
        bundle.text_image_scorer = clip
        bundle.preference_scorer = HpsPreferenceScorer()
    return bundle
