import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.classes.attention import FeatureCacheEntry, real_array
from src.classes.backends import FeatureRecordingHooks, PlainAttentionHooks
from src.classes.errors import AdapterError, ConfigurationError, ScheduleError, ShapeError, ValidationError

logger = logging.getLogger('MultiID')


@dataclass(frozen=True, eq=False)
class DDIMSchedule:
    """
    Cumulative noise levels of a deterministic DDIM sampler.

    Attributes:
        alpha_bars: Array of length S + 1 with 1 = a_0 > a_1 > ... > a_S > 0
        timestep_indices: Model timestep at every schedule position (length S + 1,
            position 0 is the clean sample)
    """
    alpha_bars: np.ndarray
    timestep_indices: Tuple[int, ...]

    def __post_init__(self):
        alpha_bars = real_array(self.alpha_bars, "alpha_bars").reshape(-1)
        if alpha_bars.size < 2 or alpha_bars[0] != 1.0:
            raise ValidationError("alpha_bars must start at exactly 1 and hold at least one step", "E_SCHEDULE")
        if not np.all(np.diff(alpha_bars) < 0) or alpha_bars[-1] <= 0:
            raise ValidationError("alpha_bars must strictly decrease and stay positive", "E_SCHEDULE")
        indices = tuple(int(t) for t in self.timestep_indices)
        if len(indices) != alpha_bars.size:
            raise ValidationError(f"{len(indices)} timestep indices for {alpha_bars.size} schedule positions",
                                  "E_SCHEDULE")
        alpha_bars.setflags(write=False)
        object.__setattr__(self, 'alpha_bars', alpha_bars)
        object.__setattr__(self, 'timestep_indices', indices)

    @property
    def steps(self) -> int:
        return self.alpha_bars.size - 1

    def model_timestep(self, index: int) -> int:
        self.check_index(index)
        return self.timestep_indices[index]

    def check_index(self, index: int) -> None:
        if not 0 <= index <= self.steps:
            raise ScheduleError(f"timestep index {index} outside schedule range [0, {self.steps}]")

    @classmethod
    def scaled_linear(cls, steps: int, beta_start: float = 0.00085, beta_end: float = 0.012,
                      train_steps: int = 1000) -> 'DDIMSchedule':
        """
        Subsample the scaled-linear training schedule to ``steps`` positions.

        Args:
            steps: Number of DDIM steps S (>= 1)
            beta_start: First training beta
            beta_end: Last training beta
            train_steps: Length of the training schedule
        """
        if steps < 1 or steps > train_steps:
            raise ValidationError(f"steps must lie in [1, {train_steps}], got {steps}", "E_SCHEDULE")
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, train_steps) ** 2
        train_alpha_bars = np.cumprod(1.0 - betas)
        timesteps = [round(k * train_steps / steps) - 1 for k in range(1, steps + 1)]
        alpha_bars = np.concatenate([[1.0], train_alpha_bars[timesteps]])
        return cls(alpha_bars, tuple([0] + timesteps))


@dataclass(frozen=True, eq=False)
class LatentState:
    """
    A latent at a schedule position.

    Attributes:
        latent: Array shaped (C, H_lat, W_lat)
        timestep_index: Schedule position in [0, S]
    """
    latent: np.ndarray
    timestep_index: int

    def __post_init__(self):
        object.__setattr__(self, 'latent', real_array(self.latent, "latent"))


class Direction(Enum):
    DENOISE = "denoise"
    INVERT = "invert"


class FeatureCache:
    """
    Cached self-attention inputs keyed by (owner_id, layer_id, timestep_index).

    Entries for different identities live side by side; each key holds at
    most one entry.
    """

    def __init__(self, entries: Sequence[FeatureCacheEntry] = ()):
        self._entries: Dict[Tuple[int, str, int], FeatureCacheEntry] = {}
        for entry in entries:
            self.add(entry)

    def add(self, entry: FeatureCacheEntry) -> None:
        key = (entry.owner_id, entry.layer_id, entry.timestep_index)
        if key in self._entries:
            raise ConfigurationError(f"feature cache already holds an entry for {key}")
        self._entries[key] = entry

    def merge(self, other: 'FeatureCache') -> 'FeatureCache':
        for entry in other:
            self.add(entry)
        return self

    def entries_for(self, layer_id: str, timestep_index: int) -> List[FeatureCacheEntry]:
        """Entries of every identity at one site and position, ordered by owner."""
        found = [e for (o, l, t), e in self._entries.items() if l == layer_id and t == timestep_index]
        return sorted(found, key=lambda e: e.owner_id)

    def owners(self) -> List[int]:
        return sorted({o for (o, _, _) in self._entries})

    def keys(self) -> List[Tuple[int, str, int]]:
        return sorted(self._entries)

    def __iter__(self) -> Iterator[FeatureCacheEntry]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)


def forward_noise(x0: np.ndarray, t: int, noise: np.ndarray, s: DDIMSchedule) -> np.ndarray:
    """
    Noise a clean latent to position ``t``: sqrt(a_t) x0 + sqrt(1 - a_t) noise.

    Raises:
        ScheduleError: If ``t`` lies outside the schedule
        ShapeError: If ``noise`` and ``x0`` differ in shape
    """
    s.check_index(t)
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {noise.shape} does not match latent shape {x0.shape}")
    alpha_bar = s.alpha_bars[t]
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * noise


def ddim_step(state: LatentState, eps: np.ndarray, s: DDIMSchedule, direction: Direction) -> LatentState:
    """
    One deterministic (eta = 0) DDIM update.

    DENOISE moves t -> t - 1; INVERT moves t -> t + 1 with the same algebra.

    Raises:
        ScheduleError: If the step would leave the schedule
        ShapeError: If ``eps`` does not match the latent
    """
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != state.latent.shape:
        raise ShapeError(f"eps shape {eps.shape} does not match latent shape {state.latent.shape}")
    t = state.timestep_index
    s.check_index(t)
    target = t - 1 if direction is Direction.DENOISE else t + 1
    if not 0 <= target <= s.steps:
        raise ScheduleError(f"cannot {direction.value} from timestep index {t}: schedule has {s.steps} steps")

    alpha_src, alpha_dst = s.alpha_bars[t], s.alpha_bars[target]
    x0_hat = (state.latent - np.sqrt(1.0 - alpha_src) * eps) / np.sqrt(alpha_src)
    latent = np.sqrt(alpha_dst) * x0_hat + np.sqrt(1.0 - alpha_dst) * eps
    return LatentState(latent, target)


def ddim_sample(state: LatentState, s: DDIMSchedule, denoiser, conditioning: Any, hooks,
                stage: str = "sample", identity: Optional[int] = None) -> LatentState:
    """
    Run DENOISE steps from ``state`` down to position 0.

    ``hooks`` is either a hooks object or a callable taking the timestep index
    and returning one, so recorders can be bound per step.
    """
    while state.timestep_index > 0:
        t = state.timestep_index
        step_hooks = hooks(t) if callable(hooks) else hooks
        try:
            eps = denoiser.predict(state.latent, s.model_timestep(t), conditioning, step_hooks)
        except Exception as e:
            raise AdapterError(stage, e, step=t, identity=identity) from e
        state = ddim_step(state, eps, s, Direction.DENOISE)
    return state


def ddim_invert(image_latent: np.ndarray, s: DDIMSchedule, denoiser, conditioning: Any,
                owner_id: int = 0, layer_stride: int = 1) -> Tuple[LatentState, 'FeatureCache']:
    """
    Invert a clean latent and cache self-attention inputs during replay.

    The inversion walks 0 -> S, evaluating the denoiser at the destination
    timestep. A DENOISE replay from the inverted latent then records the input
    features of every self-attention site (every ``layer_stride``-th site) at
    every position S..1.

    Args:
        image_latent: Clean latent of the reference image
        s: DDIM schedule
        denoiser: Backend satisfying the denoiser contract
        conditioning: Conditioning used for both passes
        owner_id: Identity index stamped on the cache entries
        layer_stride: Keep every k-th self-attention site

    Returns:
        Tuple of the inverted LatentState at position S and its FeatureCache

    Raises:
        AdapterError: If the denoiser fails, with step and identity context
    """
    if layer_stride < 1:
        raise ConfigurationError(f"layer_stride must be at least 1, got {layer_stride}")
    plain = PlainAttentionHooks()
    state = LatentState(image_latent, 0)
    while state.timestep_index < s.steps:
        t_next = state.timestep_index + 1
        try:
            eps = denoiser.predict(state.latent, s.model_timestep(t_next), conditioning, plain)
        except Exception as e:
            raise AdapterError("inversion", e, step=t_next, identity=owner_id) from e
        state = ddim_step(state, eps, s, Direction.INVERT)
    inverted = state

    cache = FeatureCache()
    self_sites = [site.layer_id for site in denoiser.attention_sites() if site.kind == "self"]
    recorded = set(self_sites[::layer_stride])
    ddim_sample(inverted, s, denoiser, conditioning,
                lambda t: FeatureRecordingHooks(cache, owner_id, t, recorded),
                stage="inversion-replay", identity=owner_id)
    logger.debug("Inverted identity %d: %d cached feature blocks", owner_id, len(cache))
    return inverted, cache
