"""
Attention variants used for multi-identity customization.

Every function here is pure: it reads its arguments, allocates its result and
touches no shared state, so any backend may call it concurrently.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.classes.errors import ConfigurationError, FullyMaskedRowError, ShapeError, ValidationError
from src.classes.masks import SpatialMask, region_signatures
from src.constants import NEG_LARGE

logger = logging.getLogger('MultiID')


def real_array(data, name: str = "array") -> np.ndarray:
    """
    Convert ``data`` to a finite float64 array.

    Raises:
        ValidationError: If any element is NaN or infinite
    """
    array = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise ValidationError(f"{name} contains NaN or infinite values", "E_NON_FINITE")
    return array


def _require_matrix(array: np.ndarray, name: str) -> None:
    if array.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {array.shape}")


@dataclass(frozen=True, eq=False)
class ProjectionSet:
    """
    Query, key and value projections of one attention layer.

    Attributes:
        w_q, w_k, w_v: Matrices shaped (model_dim, head_dim * heads)
    """
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        for name in ('w_q', 'w_k', 'w_v'):
            matrix = real_array(getattr(self, name), name)
            _require_matrix(matrix, name)
            object.__setattr__(self, name, matrix)
        dims = {self.w_q.shape[0], self.w_k.shape[0], self.w_v.shape[0]}
        if len(dims) != 1:
            raise ShapeError(f"projection input dimensions differ: "
                             f"{self.w_q.shape}, {self.w_k.shape}, {self.w_v.shape}")
        if self.w_q.shape[1] != self.w_k.shape[1]:
            raise ShapeError(f"query and key projections disagree: {self.w_q.shape} vs {self.w_k.shape}")

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def inner_dim(self) -> int:
        return self.w_v.shape[1]


class Gate(Enum):
    ALL_ONES = "all_ones"


@dataclass(frozen=True)
class BlockLabel:
    """Either the global prompt block or the local block of one identity."""
    kind: str
    identity: Optional[int] = None

    @property
    def is_global(self) -> bool:
        return self.kind == "global"

    def __str__(self) -> str:
        return "GLOBAL" if self.is_global else f"LOCAL({self.identity})"


GLOBAL = BlockLabel("global")


def local(identity: int) -> BlockLabel:
    return BlockLabel("local", identity)


@dataclass(frozen=True, eq=False)
class EmbeddingBlock:
    """
    A labeled run of key/value tokens and the spatial gate restricting it.

    Attributes:
        tokens: Array shaped (T_i, model_dim)
        gate: SpatialMask or Gate.ALL_ONES
        label: GLOBAL or local(i)
    """
    tokens: np.ndarray
    gate: Union[SpatialMask, Gate]
    label: BlockLabel

    def __post_init__(self):
        tokens = real_array(self.tokens, f"{self.label} tokens")
        _require_matrix(tokens, f"{self.label} tokens")
        object.__setattr__(self, 'tokens', tokens)
        if self.label.is_global and self.gate is not Gate.ALL_ONES:
            raise ConfigurationError("the GLOBAL block must use the ALL_ONES gate")


class BlockSet:
    """
    The concatenation P = [P^g, P^l_1, ..., P^l_N] with one gate per block.

    Attributes:
        blocks: Blocks in key order, GLOBAL first
    """

    def __init__(self, blocks: Sequence[EmbeddingBlock]):
        blocks = list(blocks)
        globals_ = [b for b in blocks if b.label.is_global]
        if len(globals_) != 1:
            raise ConfigurationError(f"a block set needs exactly one GLOBAL block, got {len(globals_)}")
        dims = {b.tokens.shape[1] for b in blocks}
        if len(dims) != 1:
            raise ShapeError(f"block token dimensions differ: {sorted(dims)}")
        self.blocks: List[EmbeddingBlock] = globals_ + [b for b in blocks if not b.label.is_global]

    @property
    def model_dim(self) -> int:
        return self.blocks[0].tokens.shape[1]

    def tokens(self) -> np.ndarray:
        return np.concatenate([b.tokens for b in self.blocks], axis=0)

    def local_blocks(self) -> List[EmbeddingBlock]:
        return self.blocks[1:]

    def with_gates(self, gates: Mapping[int, Union[SpatialMask, Gate]]) -> 'BlockSet':
        """Copy of this set with local gates replaced by identity."""
        replaced = [self.blocks[0]]
        for block in self.local_blocks():
            gate = gates.get(block.label.identity, block.gate)
            replaced.append(EmbeddingBlock(block.tokens, gate, block.label))
        return BlockSet(replaced)

    def __len__(self) -> int:
        return len(self.blocks)


@dataclass(frozen=True, eq=False)
class FeatureCacheEntry:
    """
    Self-attention input features of a reference image at one layer and timestep.

    Attributes:
        layer_id: Attention site identifier
        timestep_index: Schedule position the features were captured at
        features: Array shaped (T_ref, model_dim)
        owner_id: Identity index of the reference
    """
    layer_id: str
    timestep_index: int
    features: np.ndarray
    owner_id: int

    def __post_init__(self):
        features = real_array(self.features, "cached features")
        _require_matrix(features, "cached features")
        object.__setattr__(self, 'features', features)


def gate_log(gate: Union[SpatialMask, Gate, np.ndarray], n_queries: int) -> np.ndarray:
    """
    log(gate) per query, with log(0) mapped to NEG_LARGE.

    Raw 0/1 arrays are accepted as well, including all-zero gates that hide a
    block from every query.
    """
    if gate is Gate.ALL_ONES:
        return np.zeros(n_queries)
    if isinstance(gate, SpatialMask):
        flat = gate.flat()
    else:
        flat = real_array(gate, "gate").reshape(-1)
        if not np.all((flat == 0.0) | (flat == 1.0)):
            raise ValidationError("gate entries must be 0 or 1", "E_MASK_NOT_BINARY")
    if flat.size != n_queries:
        raise ShapeError(f"gate has {flat.size} cells but the latent has {n_queries} tokens")
    return np.where(flat > 0, 0.0, NEG_LARGE)


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(T, heads * d) -> (heads, T, d)."""
    if heads < 1 or x.shape[1] % heads:
        raise ShapeError(f"cannot split width {x.shape[1]} into {heads} heads")
    return x.reshape(x.shape[0], heads, -1).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(heads, T, d) -> (T, heads * d)."""
    return x.transpose(1, 0, 2).reshape(x.shape[1], -1)


def project_qkv(x: np.ndarray, p: ProjectionSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Project features into queries, keys and values.

    Args:
        x: Features shaped (T, model_dim)
        p: Projection matrices

    Returns:
        Tuple of q, k, v each shaped (T, head_dim * heads)

    Raises:
        ShapeError: If ``x`` does not match the projection input dimension
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.model_dim:
        raise ShapeError(f"features of shape {x.shape} do not fit projections of shape {p.w_q.shape}")
    return x @ p.w_q, x @ p.w_k, x @ p.w_v


def attention_weights(q: np.ndarray, k: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """
    Row-stochastic attention map softmax(q k^T / sqrt(d) + bias).

    Raises:
        ShapeError: If the bias does not cover (T_q, T_k)
        FullyMaskedRowError: If a row has every key at NEG_LARGE or below
    """
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ShapeError(f"query shape {q.shape} does not match key shape {k.shape}")
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (q.shape[0], k.shape[0]):
        raise ShapeError(f"bias shape {bias.shape} does not match scores shape {(q.shape[0], k.shape[0])}")
    visible = bias > NEG_LARGE
    blocked_rows = np.flatnonzero(~visible.any(axis=1))
    if blocked_rows.size:
        raise FullyMaskedRowError(int(blocked_rows[0]))

    scores = q @ k.T / np.sqrt(q.shape[1]) + bias
    scores = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    return weights / weights.sum(axis=1, keepdims=True)


def biased_softmax_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """
    Single-head attention with an additive bias: softmax(q k^T / sqrt(d) + bias) v.

    Args:
        q: Queries (T_q, d)
        k: Keys (T_k, d)
        v: Values (T_k, d_v)
        bias: Additive bias (T_q, T_k); entries at NEG_LARGE exclude a key

    Returns:
        np.ndarray: Attention output (T_q, d_v)
    """
    if v.ndim != 2 or v.shape[0] != k.shape[0]:
        raise ShapeError(f"value shape {v.shape} does not match key shape {k.shape}")
    return attention_weights(q, k, bias) @ v


def _multi_head(q: np.ndarray, k: np.ndarray, v: np.ndarray, bias: np.ndarray, heads: int) -> np.ndarray:
    if heads == 1:
        return biased_softmax_attention(q, k, v, bias)
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    out = np.stack([biased_softmax_attention(qh[i], kh[i], vh[i], bias) for i in range(heads)])
    return merge_heads(out)


def plain_attention(x: np.ndarray, context: np.ndarray, p: ProjectionSet, heads: int = 1) -> np.ndarray:
    """Unbiased attention of ``x`` over ``context`` (self-attention when they coincide)."""
    q, _, _ = project_qkv(x, p)
    _, k, v = project_qkv(context, p)
    return _multi_head(q, k, v, np.zeros((q.shape[0], k.shape[0])), heads)


def masked_cross_attention(x: np.ndarray, blocks: BlockSet, p: ProjectionSet, heads: int = 1) -> np.ndarray:
    """
    ID-decoupled cross-attention.

    Keys and values come from every block's tokens; a query only sees a local
    block where that block's gate is 1. The GLOBAL block is visible everywhere.

    Args:
        x: Latent features (T, model_dim)
        blocks: Global and per-identity token blocks
        p: Cross-attention projections
        heads: Number of attention heads

    Returns:
        np.ndarray: Output shaped (T, inner_dim)

    Raises:
        ShapeError: If a gate grid does not cover the T latent tokens
    """
    q, _, _ = project_qkv(x, p)
    _, k, v = project_qkv(blocks.tokens(), p)
    n_queries = q.shape[0]
    bias = np.concatenate(
        [np.repeat(gate_log(b.gate, n_queries)[:, None], b.tokens.shape[0], axis=1) for b in blocks.blocks],
        axis=1,
    )
    return _multi_head(q, k, v, bias, heads)


def _aligned_masks(caches: Sequence[FeatureCacheEntry],
                   masks: Union[Sequence[SpatialMask], Mapping[int, SpatialMask]]) -> List[SpatialMask]:
    owners = [c.owner_id for c in caches]
    if len(set(owners)) != len(owners):
        raise ConfigurationError(f"cache owners repeat: {owners}")
    if isinstance(masks, Mapping):
        missing = [o for o in owners if o not in masks]
        if missing:
            raise ConfigurationError(f"no mask for cache owners {missing}")
        return [masks[o] for o in owners]
    masks = list(masks)
    if len(masks) != len(caches):
        raise ConfigurationError(f"{len(caches)} cache entries but {len(masks)} masks")
    return masks


def isolated_self_bias(masks: Sequence[SpatialMask]) -> np.ndarray:
    """Self block bias letting a token see only tokens with the same box coverage."""
    labels = region_signatures(masks)
    return np.where(labels[:, None] == labels[None, :], 0.0, NEG_LARGE)


def extended_self_attention(x: np.ndarray, caches: Sequence[FeatureCacheEntry],
                            masks: Union[Sequence[SpatialMask], Mapping[int, SpatialMask]],
                            p: ProjectionSet, heads: int = 1,
                            region_masks: Optional[Sequence[SpatialMask]] = None) -> np.ndarray:
    """
    Self-attention over [X, X_1, ..., X_N] with cached reference features.

    Args:
        x: Latent features (T, model_dim)
        caches: One cache entry per identity for this layer and timestep
        masks: Gates aligned with ``caches`` by position, or keyed by owner_id
        p: Self-attention projections
        heads: Number of attention heads
        region_masks: When given, a query only sees latent keys covered by
            exactly the same subset of these masks

    Returns:
        np.ndarray: Output shaped (T, inner_dim)

    Raises:
        ConfigurationError: If caches and masks are misaligned
    """
    caches = list(caches)
    aligned = _aligned_masks(caches, masks)
    for entry in caches:
        if entry.features.shape[1] != p.model_dim:
            raise ShapeError(f"cached features of shape {entry.features.shape} do not fit "
                             f"projections of shape {p.w_k.shape}")

    q, k_self, v_self = project_qkv(x, p)
    n_queries = q.shape[0]
    if region_masks:
        self_bias = isolated_self_bias(region_masks)
        if self_bias.shape != (n_queries, n_queries):
            raise ShapeError(f"region masks cover {self_bias.shape[0]} tokens but the latent has {n_queries}")
    else:
        self_bias = np.zeros((n_queries, n_queries))

    keys, values, biases = [k_self], [v_self], [self_bias]
    for entry, mask in zip(caches, aligned):
        _, k_ref, v_ref = project_qkv(entry.features, p)
        keys.append(k_ref)
        values.append(v_ref)
        biases.append(np.repeat(gate_log(mask, n_queries)[:, None], k_ref.shape[0], axis=1))

    return _multi_head(q, np.concatenate(keys), np.concatenate(values), np.concatenate(biases, axis=1), heads)


def fuse_id_embedding(text_tokens: np.ndarray, id_embedding: np.ndarray,
                      placeholder_positions: Sequence[int] = ()) -> np.ndarray:
    """
    Fuse an identity embedding into a local prompt embedding.

    With placeholder positions the identity rows replace those text rows in
    order; without them the identity rows are appended after the text.

    Args:
        text_tokens: Local prompt embedding (T_text, model_dim), may be empty
        id_embedding: Identity embedding (T_e, model_dim)
        placeholder_positions: Text rows to replace

    Returns:
        np.ndarray: Fused local block

    Raises:
        ConfigurationError: If the placeholder count differs from T_e
    """
    text_tokens = real_array(text_tokens, "text tokens")
    id_embedding = real_array(id_embedding, "id embedding")
    _require_matrix(id_embedding, "id embedding")
    if text_tokens.size == 0:
        text_tokens = text_tokens.reshape(0, id_embedding.shape[1])
    _require_matrix(text_tokens, "text tokens")
    if text_tokens.shape[1] != id_embedding.shape[1]:
        raise ShapeError(f"text tokens {text_tokens.shape} and id embedding {id_embedding.shape} differ in width")

    positions = list(placeholder_positions)
    if not positions:
        return np.concatenate([text_tokens, id_embedding], axis=0)
    if len(positions) != id_embedding.shape[0]:
        raise ConfigurationError(f"{len(positions)} placeholder positions for "
                                 f"{id_embedding.shape[0]} id embedding rows")
    if len(set(positions)) != len(positions) or not all(0 <= i < text_tokens.shape[0] for i in positions):
        raise ConfigurationError(f"placeholder positions {positions} are repeated or out of range")
    fused = text_tokens.copy()
    fused[positions] = id_embedding
    return fused
