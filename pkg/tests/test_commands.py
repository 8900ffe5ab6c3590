import json

import numpy as np
import pytest

from src.application import EXIT_CONFIG, EXIT_OK, EXIT_VALIDATION, main
from src.classes.backends import BackendBundle
from src.classes.benchmark import BenchmarkSample, IdentityRecord, dumps_benchmark, save_benchmark
from src.classes.errors import BenchmarkValidationError, ConfigurationError, ValidationError
from src.classes.masks import BBox
from src.classes.run_config import RunConfig
from src.commands.bench import cmd_bench_build, cmd_bench_validate, load_reference_pool
from src.commands.common import build_backends
from src.commands.evaluate import cmd_eval
from src.commands.generate import cmd_generate
from src.commands.invert import cmd_invert
from src.utils.images import save_image
from tests.helpers import noise_image, solid_image

# Grey levels of the generated images, as 8-bit values so PNG storage is exact
GREYS = {"s0000": (51, 102, 153, 204), "s0001": (0, 255, 51, 102)}


class _MeanScorer:
    def score(self, image, text):
        return float(np.mean(image))


class _ConstantScorer:
    def score(self, image, text):
        return 0.3


class _BrightDetector:
    def detect(self, image):
        return [BBox(0.0, 0.0, 1.0, 1.0)] if np.mean(image) > 0.5 else []


class _MeanColourEmbedder:
    def embed_image(self, image):
        return np.asarray(image).reshape(-1, 3).mean(axis=0)


class _NoFaces:
    def embed_face(self, image):
        return None


def _evaluation_backends():
    return BackendBundle(person_detector=_BrightDetector(), face_embedder=_NoFaces(),
                         image_embedder=_MeanColourEmbedder(), text_image_scorer=_MeanScorer(),
                         preference_scorer=_ConstantScorer())


def _benchmark(folder):
    save_image(solid_image((0.5, 0.5, 0.5)), folder / "refs" / "man.png")
    samples = [BenchmarkSample(sample_id, "A portrait of 2 people, chatting", "chat", (
        IdentityRecord("man", "refs/man.png", "sitting", "sitting grey jumper", BBox(0.0, 0.0, 1.0, 1.0)),
    )) for sample_id in GREYS]
    return save_benchmark(samples, folder / "bench.json")


def test_generate_twice_gives_identical_outputs(request_file, tmp_path):
    config = RunConfig.from_dict({'steps': 3, 'seed': 9})
    first = cmd_generate(config, request_file, tmp_path / "a")
    second = cmd_generate(config, request_file, tmp_path / "b")

    assert first == second
    assert (tmp_path / "a" / "image.png").read_bytes() == (tmp_path / "b" / "image.png").read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    assert (first['seed'], first['steps'], first['identities']) == (9, 3, 2)
    timings = json.loads((tmp_path / "a" / "timings.json").read_text(encoding='utf-8'))
    assert "denoising" in timings


def test_generate_with_a_background(request_file, tmp_path):
    save_image(noise_image(30), request_file.parent / "scene.png")
    document = json.loads(request_file.read_text(encoding='utf-8'))
    document['background'] = {'image': "scene.png",
                              'foreground_box': {'x0': 0.25, 'y0': 0.0, 'x1': 0.75, 'y1': 1.0}}
    request_file.write_text(json.dumps(document), encoding='utf-8')

    manifest = cmd_generate(RunConfig.from_dict({'steps': 2}), request_file, tmp_path / "out")
    assert (tmp_path / "out" / manifest['image']).is_file()


def test_request_with_a_missing_image_is_rejected(request_file, tmp_path):
    (request_file.parent / "right.png").unlink()
    with pytest.raises(ValidationError) as excinfo:
        cmd_generate(RunConfig.from_dict({'steps': 2}), request_file, tmp_path / "out")
    assert excinfo.value.code == "E_IMAGE_MISSING"


def test_eval_averages_match_hand_computed_means(tmp_path, capsys):
    benchmark = _benchmark(tmp_path)
    images = tmp_path / "images"
    for sample_id, greys in GREYS.items():
        for k, grey in enumerate(greys):
            save_image(solid_image((grey / 255.0,) * 3), images / f"{sample_id}_{k}.png")

    config = RunConfig.from_dict({'concurrency': 1, 'images_per_sample': 4})
    report = cmd_eval(config, images, benchmark, tmp_path / "report", backends=_evaluation_backends())

    assert report.clip_t_global == pytest.approx(45.0)
    assert report.hpsv2 == pytest.approx(30.0)
    # Only the 0.6, 0.8 and 1.0 images hold a detected person
    assert report.coverage == pytest.approx(3 / 8)
    assert report.body == pytest.approx(100.0)
    assert report.full_local == pytest.approx(80.0)
    assert report.pose == pytest.approx(80.0)
    assert report.face is None
    assert (report.sample_count, report.image_count) == (2, 8)
    assert report.config_digest == config.digest()
    assert (tmp_path / "report" / "report.csv").is_file()
    assert "CLIP-T" in capsys.readouterr().out


def test_eval_reports_missing_images(tmp_path):
    benchmark = _benchmark(tmp_path)
    (tmp_path / "images").mkdir()
    with pytest.raises(ValidationError) as excinfo:
        cmd_eval(RunConfig.from_dict({}), tmp_path / "images", benchmark, tmp_path / "report",
                 backends=_evaluation_backends())
    assert excinfo.value.code == "E_IMAGE_MISSING"


def test_eval_needs_a_benchmark(tmp_path):
    with pytest.raises(ConfigurationError):
        cmd_eval(RunConfig.from_dict({}), tmp_path, backends=_evaluation_backends())


def test_invert_writes_the_latent_and_cache_summary(tmp_path):
    save_image(noise_image(5), tmp_path / "photo.png")
    summary = cmd_invert(RunConfig.from_dict({'steps': 4}), tmp_path / "photo.png", tmp_path / "out")
    assert summary['cached_blocks'] == 8
    assert summary['blocks_per_site'] == {"block0.self": 4, "block1.self": 4}
    assert np.load(tmp_path / "out" / "inverted.npy").shape == (4, 8, 8)


def test_reference_pool_paths_resolve_beside_the_file(tmp_path):
    save_image(solid_image((0.1, 0.2, 0.3)), tmp_path / "pool" / "a.png")
    pool_file = tmp_path / "pool.json"
    pool_file.write_text(json.dumps([{'image': "pool/a.png", 'category_label': "girl"}]), encoding='utf-8')
    pool = load_reference_pool(pool_file)
    assert pool[0].image == str((tmp_path / "pool" / "a.png").resolve())

    pool_file.write_text(json.dumps([{'image': "pool/b.png", 'category_label': "girl"}]), encoding='utf-8')
    with pytest.raises(ValidationError):
        load_reference_pool(pool_file)
    pool_file.write_text("[]", encoding='utf-8')
    with pytest.raises(ConfigurationError):
        load_reference_pool(pool_file)


def test_bench_build_needs_a_reference_pool(tmp_path):
    with pytest.raises(ConfigurationError):
        cmd_bench_build(RunConfig.from_dict({}), tmp_path)


def test_cli_validate_names_the_missing_field(tmp_path, capsys):
    document = json.loads(dumps_benchmark([BenchmarkSample("s0000", "two people", "hug", (
        IdentityRecord("man", "refs/man.png", "hugging", "hugging in a coat", BBox(0.0, 0.0, 0.5, 1.0)),
    ))]))
    del document['samples'][0]['ids'][0]['posture_description']
    path = tmp_path / "bench.json"
    path.write_text(json.dumps(document, indent=2), encoding='utf-8')

    assert main(["bench", "validate", str(path), "--skip-images"]) == EXIT_VALIDATION
    assert "E_MISSING_FIELD" in capsys.readouterr().out


def test_cli_accepts_a_valid_benchmark(tmp_path):
    assert main(["bench", "validate", str(_benchmark(tmp_path))]) == EXIT_OK


def test_cli_rejects_unknown_config_keys(request_file, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({'colour': "blue"}), encoding='utf-8')
    assert main(["generate", str(request_file), "--config", str(config)]) == EXIT_CONFIG


def test_cli_generate_honours_overrides(request_file, tmp_path):
    out = tmp_path / "run"
    assert main(["generate", str(request_file), "--steps", "2", "--seed", "4",
                 "--depth-control", "off", "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text(encoding='utf-8'))
    assert (manifest['seed'], manifest['steps']) == (4, 2)


def test_cli_reports_schema_errors_in_requests(tmp_path):
    path = tmp_path / "request.json"
    path.write_text(json.dumps({'global_prompt': "two people", 'ids': []}), encoding='utf-8')
    assert main(["generate", str(path), "--steps", "2", "--out", str(tmp_path / "run")]) == EXIT_VALIDATION


def test_unknown_model_roles_are_a_configuration_error():
    config = RunConfig.from_dict({'backend': "diffusers", 'models': {'unet': "some/checkpoint"}})
    with pytest.raises(ConfigurationError):
        build_backends(config)


def test_bench_validate_uses_the_configured_path_and_categories(tmp_path, capsys):
    benchmark = _benchmark(tmp_path)
    assert cmd_bench_validate(RunConfig.from_dict({'benchmark_path': str(benchmark)})) == []
    assert "valid" in capsys.readouterr().out

    with pytest.raises(BenchmarkValidationError) as excinfo:
        cmd_bench_validate(RunConfig.from_dict({'categories': ["woman"]}), benchmark)
    assert {issue.code for issue in excinfo.value.issues} == {"E_UNKNOWN_CATEGORY"}

    with pytest.raises(ConfigurationError):
        cmd_bench_validate(RunConfig.from_dict({}))
