import math
import time

import numpy as np
import pytest

from src.classes.attention import (
    GLOBAL,
    BlockSet,
    EmbeddingBlock,
    FeatureCacheEntry,
    Gate,
    ProjectionSet,
    attention_weights,
    biased_softmax_attention,
    extended_self_attention,
    fuse_id_embedding,
    gate_log,
    local,
    masked_cross_attention,
    merge_heads,
    plain_attention,
    project_qkv,
    split_heads,
)
from src.classes.errors import ConfigurationError, FullyMaskedRowError, ShapeError
from src.classes.masks import SpatialMask
from src.constants import NEG_LARGE


def _oracle(q, k, v, visible, heads=1):
    """Exponentiate-and-normalize over visible keys, one query and head at a time."""
    d = q.shape[1] // heads
    dv = v.shape[1] // heads
    out = np.zeros((q.shape[0], v.shape[1]))
    for h in range(heads):
        qh, kh, vh = q[:, h * d:(h + 1) * d], k[:, h * d:(h + 1) * d], v[:, h * dv:(h + 1) * dv]
        for i in range(q.shape[0]):
            keys = [j for j in range(k.shape[0]) if visible[i, j]]
            scores = np.array([qh[i] @ kh[j] / math.sqrt(d) for j in keys])
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            out[i, h * dv:(h + 1) * dv] = sum(w * vh[j] for w, j in zip(weights, keys))
    return out


def _projections(rng, d):
    return ProjectionSet(*(rng.standard_normal((d, d)) for _ in range(3)))


def _gate_values(rng, n):
    values = rng.integers(0, 2, n).astype(float)
    if not values.any():
        values[rng.integers(n)] = 1.0
    return values


def _cross_instance(rng, min_locals=0, min_queries=1):
    n_q = int(rng.integers(min_queries, 9))
    d = int(rng.choice([2, 4, 6]))
    blocks = [EmbeddingBlock(rng.standard_normal((int(rng.integers(1, 4)), d)), Gate.ALL_ONES, GLOBAL)]
    for i in range(int(rng.integers(min_locals, 4))):
        gate = SpatialMask(_gate_values(rng, n_q).reshape(1, n_q))
        blocks.append(EmbeddingBlock(rng.standard_normal((int(rng.integers(1, 4)), d)), gate, local(i)))
    return rng.standard_normal((n_q, d)), BlockSet(blocks), _projections(rng, d)


def _cross_visible(blocks, n_q):
    columns = []
    for block in blocks.blocks:
        gate = np.ones(n_q) if block.gate is Gate.ALL_ONES else block.gate.flat()
        columns.append(np.repeat(gate[:, None] > 0, block.tokens.shape[0], axis=1))
    return np.concatenate(columns, axis=1)


def _self_instance(rng, min_queries=1):
    n_q = int(rng.integers(min_queries, 9))
    d = int(rng.choice([2, 4, 6]))
    caches, masks = [], {}
    for owner in range(int(rng.integers(0, 3))):
        caches.append(FeatureCacheEntry("site", 0, rng.standard_normal((int(rng.integers(1, 3)), d)), owner))
        masks[owner] = SpatialMask(_gate_values(rng, n_q).reshape(1, n_q))
    return rng.standard_normal((n_q, d)), caches, masks, _projections(rng, d)


def test_attention_matches_independent_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    for n in range(500):
        heads = 2 if n % 5 == 0 else 1

        x, blocks, p = _cross_instance(rng)
        q, _, _ = project_qkv(x, p)
        _, k, v = project_qkv(blocks.tokens(), p)
        expected = _oracle(q, k, v, _cross_visible(blocks, x.shape[0]), heads)
        np.testing.assert_allclose(masked_cross_attention(x, blocks, p, heads), expected, atol=1e-6, rtol=0)

        x, caches, masks, p = _self_instance(rng)
        q, k, v = project_qkv(x, p)
        visible = [np.ones((x.shape[0], x.shape[0]), dtype=bool)]
        for entry in caches:
            _, k_ref, v_ref = project_qkv(entry.features, p)
            k, v = np.concatenate([k, k_ref]), np.concatenate([v, v_ref])
            visible.append(np.repeat(masks[entry.owner_id].flat()[:, None] > 0, k_ref.shape[0], axis=1))
        expected = _oracle(q, k, v, np.concatenate(visible, axis=1), heads)
        np.testing.assert_allclose(extended_self_attention(x, caches, masks, p, heads), expected,
                                   atol=1e-6, rtol=0)
    assert time.perf_counter() - start < 10.0


def test_all_ones_gates_reduce_to_unmasked_attention():
    rng = np.random.default_rng(1)
    for _ in range(50):
        x, blocks, p = _cross_instance(rng, min_locals=1)
        n_q = x.shape[0]
        opened = blocks.with_gates({b.label.identity: Gate.ALL_ONES for b in blocks.local_blocks()})
        full = blocks.with_gates({b.label.identity: SpatialMask.full(1, n_q) for b in blocks.local_blocks()})
        expected = plain_attention(x, blocks.tokens(), p)
        np.testing.assert_allclose(masked_cross_attention(x, opened, p), expected, atol=1e-6, rtol=0)
        np.testing.assert_allclose(masked_cross_attention(x, full, p), expected, atol=1e-6, rtol=0)


def test_empty_caches_reduce_to_plain_self_attention():
    rng = np.random.default_rng(2)
    for _ in range(50):
        x, _, _, p = _self_instance(rng)
        np.testing.assert_allclose(extended_self_attention(x, [], {}, p), plain_attention(x, x, p),
                                   atol=1e-9, rtol=0)


def test_global_only_block_set_reduces_to_plain_cross_attention():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x, blocks, p = _cross_instance(rng)
        only_global = BlockSet([blocks.blocks[0]])
        np.testing.assert_allclose(masked_cross_attention(x, only_global, p),
                                   plain_attention(x, blocks.blocks[0].tokens, p), atol=1e-6, rtol=0)


def test_all_zero_cache_gate_excludes_the_cache():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 4))
    p = _projections(rng, 4)
    cache = FeatureCacheEntry("site", 0, rng.standard_normal((3, 4)), 0)
    out = extended_self_attention(x, [cache], {0: np.zeros(6)}, p)
    np.testing.assert_allclose(out, plain_attention(x, x, p), atol=1e-9, rtol=0)


def test_blocked_tokens_never_reach_a_query():
    rng = np.random.default_rng(5)
    for _ in range(100):
        x, blocks, p = _cross_instance(rng, min_locals=1, min_queries=2)
        n_q = x.shape[0]
        target = int(rng.integers(len(blocks.local_blocks())))
        query = int(rng.integers(n_q))
        gate = np.ones(n_q)
        gate[query] = 0.0
        block = blocks.local_blocks()[target]
        blocks = blocks.with_gates({block.label.identity: SpatialMask(gate.reshape(1, n_q))})

        perturbed = [b if b.label != block.label else
                     EmbeddingBlock(b.tokens + 10.0 * rng.standard_normal(b.tokens.shape), b.gate, b.label)
                     for b in blocks.blocks]
        before = masked_cross_attention(x, blocks, p)
        after = masked_cross_attention(x, BlockSet(perturbed), p)
        assert np.max(np.abs(before[query] - after[query])) <= 1e-9


def test_gated_caches_never_reach_a_query():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n_q, d = int(rng.integers(2, 9)), 4
        x, p = rng.standard_normal((n_q, d)), _projections(rng, d)
        query = int(rng.integers(n_q))
        gate = np.ones(n_q)
        gate[query] = 0.0
        masks = {0: SpatialMask(gate.reshape(1, n_q)), 1: SpatialMask.full(1, n_q)}
        caches = [FeatureCacheEntry("site", 0, rng.standard_normal((2, d)), owner) for owner in (0, 1)]
        moved = [FeatureCacheEntry("site", 0, caches[0].features + 10.0 * rng.standard_normal((2, d)), 0),
                 caches[1]]
        before = extended_self_attention(x, caches, masks, p)
        after = extended_self_attention(x, moved, masks, p)
        assert np.max(np.abs(before[query] - after[query])) <= 1e-9


def test_opening_a_gate_leaves_other_queries_unchanged():
    rng = np.random.default_rng(7)
    x, p = rng.standard_normal((6, 4)), _projections(rng, 4)
    gate = np.array([1.0, 0.0, 1.0, 0.0, 1.0, 1.0])
    opened = gate.copy()
    opened[1] = 1.0
    global_block = EmbeddingBlock(rng.standard_normal((2, 4)), Gate.ALL_ONES, GLOBAL)
    tokens = rng.standard_normal((3, 4))
    closed_out = masked_cross_attention(x, BlockSet([global_block,
                                                     EmbeddingBlock(tokens, SpatialMask(gate[None]), local(0))]), p)
    open_out = masked_cross_attention(x, BlockSet([global_block,
                                                   EmbeddingBlock(tokens, SpatialMask(opened[None]), local(0))]), p)
    others = [i for i in range(6) if i != 1]
    np.testing.assert_allclose(open_out[others], closed_out[others], atol=1e-12, rtol=0)
    assert not np.allclose(open_out[1], closed_out[1])


def test_region_isolation_hides_latent_tokens_from_other_regions():
    rng = np.random.default_rng(8)
    x, p = rng.standard_normal((8, 4)), _projections(rng, 4)
    box = SpatialMask(np.array([[1, 1, 1, 1, 0, 0, 0, 0]], dtype=float))
    out = extended_self_attention(x, [], {}, p, region_masks=[box])
    moved = x.copy()
    moved[4:] += 10.0 * rng.standard_normal((4, 4))
    out_moved = extended_self_attention(moved, [], {}, p, region_masks=[box])
    np.testing.assert_allclose(out_moved[:4], out[:4], atol=1e-12, rtol=0)
    np.testing.assert_allclose(out[:4], plain_attention(x[:4], x[:4], p), atol=1e-9, rtol=0)


def test_attention_rows_are_stochastic():
    rng = np.random.default_rng(9)
    q, k = rng.standard_normal((5, 3)), rng.standard_normal((7, 3))
    bias = np.where(rng.uniform(size=(5, 7)) < 0.3, NEG_LARGE, 0.0)
    bias[:, 0] = 0.0
    weights = attention_weights(q, k, bias)
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(weights[bias <= NEG_LARGE] == 0.0)


def test_fully_masked_row_is_reported():
    q, k = np.ones((3, 2)), np.ones((4, 2))
    bias = np.zeros((3, 4))
    bias[2] = NEG_LARGE
    with pytest.raises(FullyMaskedRowError) as excinfo:
        attention_weights(q, k, bias)
    assert excinfo.value.query_index == 2


def test_zero_features_project_to_zero():
    p = _projections(np.random.default_rng(10), 4)
    for part in project_qkv(np.zeros((5, 4)), p):
        assert np.array_equal(part, np.zeros((5, 4)))


def test_gate_must_cover_every_query():
    with pytest.raises(ShapeError):
        gate_log(SpatialMask(np.ones((2, 2))), 5)


def test_heads_split_and_merge():
    x = np.arange(24, dtype=float).reshape(4, 6)
    heads = split_heads(x, 2)
    assert heads.shape == (2, 4, 3)
    assert np.array_equal(heads[1], x[:, 3:])
    assert np.array_equal(merge_heads(heads), x)
    with pytest.raises(ShapeError):
        split_heads(x, 4)


def test_block_set_needs_exactly_one_global_block():
    tokens = np.ones((2, 3))
    with pytest.raises(ConfigurationError):
        BlockSet([EmbeddingBlock(tokens, Gate.ALL_ONES, local(0))])
    with pytest.raises(ConfigurationError):
        BlockSet([EmbeddingBlock(tokens, Gate.ALL_ONES, GLOBAL), EmbeddingBlock(tokens, Gate.ALL_ONES, GLOBAL)])
    with pytest.raises(ConfigurationError):
        EmbeddingBlock(tokens, SpatialMask(np.ones((1, 2))), GLOBAL)


def test_fusion_appends_without_placeholders():
    text, ids = np.arange(12.0).reshape(3, 4), -np.ones((2, 4))
    fused = fuse_id_embedding(text, ids)
    assert fused.shape == (5, 4)
    assert np.array_equal(fused[:3], text)
    assert np.array_equal(fused[3:], ids)


def test_fusion_replaces_placeholder_rows():
    text, ids = np.arange(12.0).reshape(3, 4), -np.ones((1, 4))
    fused = fuse_id_embedding(text, ids, [1])
    assert np.array_equal(fused[1], ids[0])
    assert np.array_equal(fused[[0, 2]], text[[0, 2]])
    with pytest.raises(ConfigurationError):
        fuse_id_embedding(text, np.ones((2, 4)), [1])


def test_fused_block_attends_like_manual_concatenation():
    rng = np.random.default_rng(11)
    x, p = rng.standard_normal((4, 4)), _projections(rng, 4)
    text, ids = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    gate = SpatialMask(np.array([[1.0, 0.0, 1.0, 0.0]]))
    global_block = EmbeddingBlock(rng.standard_normal((1, 4)), Gate.ALL_ONES, GLOBAL)
    fused = BlockSet([global_block, EmbeddingBlock(fuse_id_embedding(text, ids), gate, local(0))])
    manual = BlockSet([global_block, EmbeddingBlock(np.concatenate([text, ids]), gate, local(0))])
    assert np.array_equal(masked_cross_attention(x, fused, p), masked_cross_attention(x, manual, p))


def test_bias_at_neg_large_drops_the_key():
    rng = np.random.default_rng(7)
    q, k, v = rng.standard_normal((1, 4)), rng.standard_normal((2, 4)), rng.standard_normal((2, 3))
    out = biased_softmax_attention(q, k, v, np.array([[0.0, NEG_LARGE]]))
    np.testing.assert_allclose(out, v[:1], atol=1e-12)
    with pytest.raises(ShapeError):
        biased_softmax_attention(q, k, v[:1], np.zeros((1, 2)))
