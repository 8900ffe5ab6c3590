import asyncio
import csv
import json
import re

import pytest
from PIL import Image

from src.classes.bench_builder import (
    ANNOTATION_PROMPT,
    CONCEPTS_PROMPT,
    INTERACTIONS_PROMPT,
    BenchmarkBuilder,
    BuildSettings,
    ReferenceEntry,
    RetryPolicy,
    Stage,
    Transcript,
    annotate,
    detect_concepts,
    expand_prompts,
    extract_concepts,
    filter_human_concepts,
    generate_templates,
    nominate_interactions,
    parse_concepts,
    parse_list,
    split_sections,
    structure_samples,
    template_prompt,
)
from src.classes.benchmark import load_benchmark
from src.classes.errors import StageError
from src.classes.masks import BBox
from src.constants import TEMPLATE_PREFIX

NO_WAIT = RetryPolicy(attempts=3, backoff=0.0)

PEOPLE = ("man", "woman", "boy", "girl")


class StubLLM:
    def __init__(self):
        self.calls = 0

    def complete(self, prompt):
        self.calls += 1
        if prompt == INTERACTIONS_PROMPT:
            return "\n".join(f"{k + 1}. interaction {k}" for k in range(60))
        match = re.search(r"generate (\d+) prompts about two '(.+)' people", prompt)
        n, interaction = int(match.group(1)), match.group(2)
        return "\n".join(f"- two people doing {interaction}, take {k}" for k in range(n))


class StubT2I:
    def generate(self, prompt, seed, out_path):
        out_path.parent.mkdir(parents=True, exist_ok=True)
        Image.new('RGB', (32, 32), (seed % 256, 40, 90)).save(out_path, format='PNG')
        return out_path


class StubVLM:
    def ask(self, prompt, image_path=None):
        if prompt == CONCEPTS_PROMPT:
            return "Man, woman, bench, tree."
        if prompt.startswith("Question:"):
            concept = prompt.rsplit('word "', 1)[1].split('"', 1)[0]
            return "Yes." if concept in PEOPLE else "No."
        if prompt == ANNOTATION_PROMPT:
            return f"State: standing beside a friend. Appearance: wearing the {image_path.stem} outfit"
        raise AssertionError(f"unexpected prompt {prompt!r}")


class StubDetector:
    BOXES = {"man": [0.02, 0.05, 0.48, 1.0], "woman": [0.52, 0.1, 0.97, 0.98]}

    def detect(self, image_path, concept):
        return [{'box': self.BOXES[concept], 'score': 0.9}]


class OfflineClient:
    """Every call fails, so a run can only succeed from checkpoints."""

    def __getattr__(self, name):
        def fail(*args):
            raise AssertionError(f"client call {name} after the stages were checkpointed")
        return fail


def _pool(tmp_path):
    folder = tmp_path / "pool"
    folder.mkdir()
    pool = []
    for label in ("man", "woman"):
        for k in range(3):
            path = folder / f"{label}_{k}.png"
            Image.new('RGB', (16, 16), (k * 60, 10, 10)).save(path, format='PNG')
            pool.append(ReferenceEntry(str(path), label))
    return pool


def _builder(workdir, pool, settings, llm=None, t2i=None, vlm=None, detector=None):
    return BenchmarkBuilder(workdir, llm or StubLLM(), t2i or StubT2I(), vlm or StubVLM(),
                            detector or StubDetector(), pool, settings)


def test_full_build_yields_four_hundred_templated_samples(tmp_path):
    settings = BuildSettings(concurrency=8, retry=NO_WAIT)
    result = asyncio.run(_builder(tmp_path / "work", _pool(tmp_path), settings).run())

    assert len(result.samples) == 400
    assert result.flagged == []
    assert all(s.global_prompt.startswith(TEMPLATE_PREFIX) for s in result.samples)
    assert len({s.sample_id for s in result.samples}) == 400
    assert len({s.interaction_tag for s in result.samples}) == 40
    for sample in result.samples:
        assert [r.category_label for r in sample.ids] == ["man", "woman"]
        for record in sample.ids:
            assert record.full_description.startswith("standing beside a friend. wearing the ")

    assert load_benchmark(result.benchmark_path) == result.samples
    assert [r.stage for r in result.records] == [s.value for s in Stage]


def test_rerun_resumes_from_checkpoints(tmp_path):
    settings = BuildSettings(interactions=3, prompts_per_interaction=2, retry=NO_WAIT)
    pool = _pool(tmp_path)
    first = asyncio.run(_builder(tmp_path / "work", pool, settings).run())

    offline = OfflineClient()
    second = asyncio.run(_builder(tmp_path / "work", pool, settings, offline, offline, offline, offline).run())
    assert second.samples == first.samples
    assert [r.output_digest for r in second.records] == [r.output_digest for r in first.records]


def test_stage_outputs_and_transcripts_are_written(tmp_path):
    settings = BuildSettings(interactions=2, prompts_per_interaction=2, retry=NO_WAIT)
    result = asyncio.run(_builder(tmp_path / "work", _pool(tmp_path), settings).run())
    work = tmp_path / "work"
    for stage in ("interactions", "prompts", "templates", "concepts", "detection", "annotation"):
        assert (work / "checkpoints" / f"{stage}.json").is_file()
        assert (work / "transcripts" / f"{stage}.jsonl").is_file()
    stages = json.loads((work / "stages.json").read_text(encoding='utf-8'))
    assert [s['stage'] for s in stages] == [s.value for s in Stage]

    with open(result.review_path, newline='', encoding='utf-8') as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2 * 2 * 2
    assert all(row['flag'] == "" for row in rows)


def test_missing_category_in_the_pool_flags_the_sample(tmp_path):
    pool = [entry for entry in _pool(tmp_path) if entry.category_label == "man"]
    settings = BuildSettings(interactions=1, prompts_per_interaction=2, retry=NO_WAIT)
    result = asyncio.run(_builder(tmp_path / "work", pool, settings).run())
    assert result.samples == []
    assert [reason for _, reason in result.flagged] == ["no compatible reference for category 'woman'"] * 2


def test_parse_list_strips_numbering_and_quotes():
    assert parse_list('1. Hug\n2) High five\n\n- "Dance"\n  * \'Bow\'') == ["Hug", "High five", "Dance", "Bow"]


def test_nomination_asks_again_for_missing_items():
    class ShortLLM:
        answers = ["1. hug\n2. Hug\n3. dance", "1. dance\n2. wave\n3. bow"]

        def complete(self, prompt):
            return self.answers.pop(0)

    transcript = Transcript(Stage.INTERACTIONS)
    assert nominate_interactions(ShortLLM(), 3, transcript=transcript, retry=NO_WAIT) == ["hug", "dance", "wave"]
    assert [e.get('attempt') for e in transcript.entries()] == [None, 0, 1]


def test_nomination_gives_up_after_its_retries():
    class RepeatingLLM:
        def complete(self, prompt):
            return "1. hug\n2. hug"

    with pytest.raises(StageError) as excinfo:
        nominate_interactions(RepeatingLLM(), 2, max_retries=1, retry=NO_WAIT)
    assert excinfo.value.stage == "interactions"
    assert excinfo.value.transcript == "1. hug\n2. hug"


def test_retry_policy_recovers_from_transient_failures():
    failures = [RuntimeError("timeout"), RuntimeError("timeout")]

    def flaky():
        if failures:
            raise failures.pop()
        return "ok"

    assert NO_WAIT.call(Stage.PROMPTS, flaky) == "ok"

    def broken():
        raise RuntimeError("service down")

    with pytest.raises(StageError) as excinfo:
        NO_WAIT.call(Stage.TEMPLATES, broken)
    assert excinfo.value.stage == "templates"


def test_template_prefix_is_applied_once():
    templated = template_prompt("two friends hugging")
    assert templated == f"{TEMPLATE_PREFIX}, two friends hugging"
    assert template_prompt(templated) == templated


def test_parse_concepts_normalizes_and_caps():
    assert parse_concepts('"Man, woman, tree, man."') == (["man", "woman", "tree"], [])
    concepts, warnings = parse_concepts(", ".join(f"thing{k}" for k in range(12)))
    assert len(concepts) == 10
    assert len(warnings) == 1


def test_only_person_concepts_survive_the_filter():
    assert filter_human_concepts(StubVLM(), ["bench", "woman", "tree", "boy"], retry=NO_WAIT) == ["woman", "boy"]


def test_detections_are_clamped_and_cropped(tmp_path):
    class SkewedDetector:
        def detect(self, image_path, concept):
            return [{'box': [0.6, -0.1, 0.2, 1.2], 'score': 0.5}] if concept == "man" else []

    template = tmp_path / "template_0000.png"
    Image.new('RGB', (40, 20), (200, 10, 10)).save(template, format='PNG')
    found = detect_concepts(SkewedDetector(), template, ["man", "woman"], retry=NO_WAIT)
    assert len(found) == 1
    assert found[0]['box'] == BBox(0.2, 0.0, 0.6, 1.0).to_dict()
    with Image.open(found[0]['crop_path']) as crop:
        assert crop.size == (16, 20)


def test_split_sections_reads_both_headers():
    sections = split_sections("**State**: running fast. **Appearance**: red shirt")
    assert sections == {'state': "running fast.", 'appearance': "red shirt"}
    with pytest.raises(StageError) as excinfo:
        split_sections("State: running fast.")
    assert excinfo.value.stage == "annotation"


def test_structure_uses_each_reference_once_per_sample(tmp_path):
    pool = [ReferenceEntry(f"man_{k}.png", "man", f"look {k}") for k in range(2)]
    persons = [{'concept': "man", 'box': BBox(0.0, 0.0, 0.5, 1.0).to_dict(), 'posture_description': "sitting"},
               {'concept': "man", 'box': BBox(0.5, 0.0, 1.0, 1.0).to_dict(), 'posture_description': "running"}]
    outputs = [{'sample_id': "s0000", 'global_prompt': "p", 'interaction_tag': "race", 'persons': persons},
               {'sample_id': "s0001", 'global_prompt': "p", 'interaction_tag': "race", 'persons': []}]
    result = structure_samples(outputs, pool, seed=3)
    assert len(result.samples) == 1
    references = [r.reference_image for r in result.samples[0].ids]
    assert sorted(references) == ["man_0.png", "man_1.png"]
    assert result.samples[0].ids[1].full_description.startswith("running look ")
    assert result.flagged == [("s0001", "no person detected")]
    assert structure_samples(outputs, pool, seed=3).samples == result.samples


def test_expand_prompts_returns_the_requested_count():
    prompts = expand_prompts(StubLLM(), "high five", 4, retry=NO_WAIT)
    assert prompts == [f"two people doing high five, take {k}" for k in range(4)]


def test_templates_are_numbered_in_prompt_order(tmp_path):
    paths = generate_templates(StubT2I(), ["one", "two"], tmp_path / "templates", seed=5, retry=NO_WAIT)
    assert [p.name for p in paths] == ["template_0000.png", "template_0001.png"]
    with Image.open(paths[1]) as image:
        assert image.getpixel((0, 0)) == (6, 40, 90)


class _SilentVLM:
    def ask(self, prompt, image_path=None):
        return " . "


def test_extract_concepts_and_its_empty_response(tmp_path):
    assert extract_concepts(StubVLM(), tmp_path / "t.png", retry=NO_WAIT) == ["man", "woman", "bench", "tree"]
    with pytest.raises(StageError) as excinfo:
        extract_concepts(_SilentVLM(), tmp_path / "t.png", retry=NO_WAIT)
    assert excinfo.value.stage == "concepts"
    assert excinfo.value.transcript == " . "


def test_annotate_splits_state_and_appearance(tmp_path):
    annotation = annotate(StubVLM(), tmp_path / "crop_1.png", retry=NO_WAIT)
    assert annotation == {'state': "standing beside a friend.", 'appearance': "wearing the crop_1 outfit"}
