import numpy as np
import pytest

from src.classes.backends import BackendBundle, Denoiser, MultiIdAttentionHooks, PlainAttentionHooks
from src.classes.errors import ConfigurationError, ShapeError, ValidationError
from src.classes.masks import BBox, MaskBank
from src.classes.toy_backend import (
    ID_ROWS,
    IMAGE_SHAPE,
    LATENT_SHAPE,
    MODEL_DIM,
    ToyDenoiser,
    ToyFaceEmbedder,
    ToyIdEncoder,
    ToyImageCodec,
    ToyPersonDetector,
    ToyTextEncoder,
    build_toy_backends,
)
from tests.helpers import noise_image, solid_image


class _RecordingHooks(PlainAttentionHooks):
    def __init__(self):
        self.calls = []

    def self_attention(self, site, x, p):
        self.calls.append(site.layer_id)
        return super().self_attention(site, x, p)

    def cross_attention(self, site, x, conditioning, p):
        self.calls.append(site.layer_id)
        return super().cross_attention(site, x, conditioning, p)


class _ZeroHooks:
    def self_attention(self, site, x, p):
        return np.zeros_like(x)

    def cross_attention(self, site, x, conditioning, p):
        return np.zeros_like(x)


def test_denoiser_satisfies_the_contract():
    denoiser = ToyDenoiser()
    assert isinstance(denoiser, Denoiser)
    assert denoiser.latent_shape == LATENT_SHAPE
    sites = denoiser.attention_sites()
    assert [s.layer_id for s in sites] == ["block0.self", "block0.cross", "block1.self", "block1.cross"]
    assert all(s.grid == LATENT_SHAPE[1:] for s in sites)


def test_every_site_goes_through_the_installed_hooks():
    hooks = _RecordingHooks()
    ToyDenoiser().predict(np.zeros(LATENT_SHAPE), 10, ToyTextEncoder().encode_text("hi"), hooks)
    assert hooks.calls == ["block0.self", "block0.cross", "block1.self", "block1.cross"]


def test_substituted_hooks_change_the_prediction():
    denoiser = ToyDenoiser(gain=1.0)
    latent = np.random.default_rng(0).standard_normal(LATENT_SHAPE)
    tokens = ToyTextEncoder().encode_text("a cat")
    plain = denoiser.predict(latent, 500, tokens, PlainAttentionHooks())
    zeroed = denoiser.predict(latent, 500, tokens, _ZeroHooks())
    assert not np.allclose(plain, zeroed)
    assert np.array_equal(plain, denoiser.predict(latent, 500, tokens, PlainAttentionHooks()))


def test_zero_input_predicts_the_bias_term_only():
    zeros, null = np.zeros(LATENT_SHAPE), ToyTextEncoder().null_tokens()
    weak = ToyDenoiser(gain=1e-5).predict(zeros, 0, null, PlainAttentionHooks())
    strong = ToyDenoiser(gain=1.0).predict(zeros, 0, null, PlainAttentionHooks())
    assert np.array_equal(weak, strong)
    assert np.any(weak != 0.0)


def test_multi_id_hooks_without_identities_match_plain_attention():
    denoiser = ToyDenoiser(gain=1.0)
    latent = np.random.default_rng(1).standard_normal(LATENT_SHAPE)
    tokens = ToyTextEncoder().encode_text("a dog")
    hooks = MultiIdAttentionHooks(MaskBank({}), 3)
    np.testing.assert_allclose(denoiser.predict(latent, 100, tokens, hooks),
                               denoiser.predict(latent, 100, tokens, PlainAttentionHooks()), atol=1e-12)


def test_denoiser_rejects_wrong_shapes():
    denoiser = ToyDenoiser()
    with pytest.raises(ShapeError):
        denoiser.predict(np.zeros((4, 4, 4)), 0, ToyTextEncoder().null_tokens(), PlainAttentionHooks())
    with pytest.raises(ShapeError):
        denoiser.predict(np.zeros(LATENT_SHAPE), 0, ToyTextEncoder().null_tokens(), PlainAttentionHooks(),
                         control=[np.zeros((64, MODEL_DIM))])


def test_text_encoder_is_deterministic_and_rejects_empty_text():
    encoder = ToyTextEncoder()
    tokens = encoder.encode_text("abc")
    assert tokens.shape == (3, MODEL_DIM)
    assert np.array_equal(tokens, ToyTextEncoder().encode_text("abc"))
    assert np.all(np.abs(tokens) <= 1.0)
    with pytest.raises(ValidationError) as excinfo:
        encoder.encode_text("")
    assert excinfo.value.code == "E_EMPTY_INPUT"
    assert ToyTextEncoder(placeholder="#").placeholder_positions("a # b #") == [2, 6]


def test_codec_round_trips_block_constant_images():
    codec = ToyImageCodec()
    image = np.repeat(np.repeat(np.random.default_rng(2).uniform(size=(8, 8, 3)), 4, axis=0), 4, axis=1)
    latent = codec.encode(image)
    assert latent.shape == LATENT_SHAPE
    np.testing.assert_allclose(codec.decode(latent), image, atol=1e-9)
    assert codec.encode(noise_image(3, size=64)).shape == LATENT_SHAPE


def test_person_detector_finds_bright_columns():
    image = np.zeros(IMAGE_SHAPE)
    image[4:28, 2:10] = 1.0
    image[:, 20:30] = 1.0
    boxes = ToyPersonDetector().detect(image)
    assert boxes == [BBox(2 / 32, 4 / 32, 10 / 32, 28 / 32), BBox(20 / 32, 0.0, 30 / 32, 1.0)]
    assert ToyPersonDetector().detect(np.zeros(IMAGE_SHAPE)) == []


def test_face_embedder_skips_flat_images():
    embedder = ToyFaceEmbedder()
    assert embedder.embed_face(solid_image([0.3, 0.3, 0.3])) is None
    assert np.linalg.norm(embedder.embed_face(noise_image(4))) == pytest.approx(1.0)


def test_bundle_reports_missing_adapters():
    with pytest.raises(ConfigurationError) as excinfo:
        BackendBundle(denoiser=ToyDenoiser()).require(*BackendBundle.GENERATION)
    assert "text_encoder" in str(excinfo.value)
    bundle = build_toy_backends()
    bundle.require(*BackendBundle.GENERATION, *BackendBundle.EVALUATION)
    assert bundle.concurrency_safe('denoiser')


def test_id_encoder_rows_depend_on_the_image():
    encoder = ToyIdEncoder()
    first = encoder.encode_id(noise_image(1))
    assert first.shape == (ID_ROWS, MODEL_DIM)
    assert np.array_equal(first, ToyIdEncoder().encode_id(noise_image(1)))
    assert not np.allclose(first, encoder.encode_id(noise_image(2)))
