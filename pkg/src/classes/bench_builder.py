"""
Benchmark construction: interaction nomination, prompt expansion, template
rendering, concept extraction, detection, annotation and sample structuring
over pluggable service clients.
"""
import asyncio
import csv
import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from PIL import Image

from src.classes.benchmark import BenchmarkSample, IdentityRecord, save_benchmark
from src.classes.errors import StageError, ValidationError
from src.classes.masks import BBox
from src.constants import CLIENT_ATTEMPTS, CLIENT_BACKOFF_SECONDS, DEFAULT_CATEGORIES, TEMPLATE_PREFIX

logger = logging.getLogger('MultiID')

INTERACTIONS_PROMPT = "Please help me generate interactions between two people, such as 'Back-to-back stand'"

PROMPTS_TEMPLATE = ("Please generate {n} prompts about two '{interaction}' people, "
                    "which will be used as conditions for text-to-image generation")

CONCEPTS_PROMPT = (
    "Please list the types of objects or concepts in this image. Each concept only needs to be listed once, "
    "and the essential components in the image should be listed as much as possible. Examine the provided "
    "image and identify the main components within it. Please extract a list of relevant nouns, ensuring the "
    "focus is on people and the most significant elements present in the image. Aim to identify no more than "
    "ten objects or individuals. Ensure that the selected nouns accurately represent the key components, such "
    "as: Individuals (e.g., 'man', 'woman', 'child'), Main objects (e.g., 'car', 'tree', 'building'). Return "
    "the list in a concise format. Focus on significant elements like people (without details on clothing, "
    "accessories, or expressions), and main objects or concepts of the environment. Exclude any minor details "
    "that are not central to the composition. Please separate each concept with a comma, e.g.: "
    "\"table, man, apple\". Try not to exceed ten concepts."
)

PERSON_QUESTION = ('Question: "Does this word "man" correspond to a category of people?" Answer: Yes. '
                   'Question: "Does this word "%s" correspond to a category of people?" Answer: ')

ANNOTATION_PROMPT = (
    "This is an image of a person. Please describe this image in detail. Generate detailed descriptions, "
    "organize your observations into two distinct sections: 'State' and 'Appearance'. 'State': Describe the "
    "actions, expressions, and poses of any individuals in the image, as well as the positions, angles, and "
    "conditions of objects. 'Consider aspects such as: Actions or motions (e.g., 'running', 'sitting'), Facial "
    "expressions (e.g., 'smiling', 'frowning'), Postures (e.g., 'standing upright', 'slouched'), Object status "
    "(e.g., 'broken', 'new') and orientation (e.g., 'tilted', 'upright'). 'Appearance': Detail the physical "
    "characteristics of individuals and objects, including: Human features (e.g., 'hair color', 'gender', "
    "'age'), Clothing details (e.g., 'color', 'style', 'fit'), Object characteristics (e.g., 'color', "
    "'texture', 'size'). Provide a comprehensive description with two parts of the 'State' and 'Appearance' of "
    "the mentioned concept in the image. Both parts should not be longer than 50 words. Please provide only the "
    "descriptions directly, the description should be as detailed as possible"
)

MAX_CONCEPTS = 10

_NUMBERING = re.compile(r"^\s*(?:\(?\d+[.):]|[-*•])\s*")
_SECTION_HEADER = re.compile(r"[\"'*#\s]*\b(state|appearance)\b[\"'*]*\s*:", re.IGNORECASE)


class Stage(Enum):
    INTERACTIONS = "interactions"
    PROMPTS = "prompts"
    TEMPLATES = "templates"
    CONCEPTS = "concepts"
    DETECTION = "detection"
    ANNOTATION = "annotation"
    STRUCTURE = "structure"


def digest(value: Any) -> str:
    """SHA-256 of the canonical (sorted-key) JSON encoding of ``value``."""
    canonical = json.dumps(value, sort_keys=True, ensure_ascii=False, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


@dataclass(frozen=True)
class PipelineStageRecord:
    stage: str
    input_digest: str
    output_digest: str
    transcript: Optional[str] = None


class Transcript:
    """
    Thread-safe buffer of client exchanges for one stage.

    Entries are written sorted by key so concurrent fan-out still produces a
    stable file.
    """

    def __init__(self, stage: Stage):
        self.stage = stage
        self._entries: List[Tuple[str, int, Dict[str, Any]]] = []
        self._lock = threading.Lock()

    def record(self, key: str, **entry) -> None:
        with self._lock:
            self._entries.append((key, len(self._entries), {'stage': self.stage.value, 'key': key, **entry}))

    def entries(self) -> List[Dict[str, Any]]:
        with self._lock:
            ordered = sorted(self._entries, key=lambda e: (e[0], e[1]))
        return [entry for _, _, entry in ordered]

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            for entry in self.entries():
                f.write(json.dumps(entry, ensure_ascii=False) + "\n")
        return path


def _record(transcript: Optional[Transcript], key: str, **entry) -> None:
    if transcript is not None:
        transcript.record(key, **entry)


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff: ``attempts`` tries, waiting ``backoff``, 2 * ``backoff``, ... between them."""
    attempts: int = CLIENT_ATTEMPTS
    backoff: float = CLIENT_BACKOFF_SECONDS

    def call(self, stage: Stage, fn: Callable, *args):
        """
        Raises:
            StageError: After the last failed attempt
        """
        delay = self.backoff
        for attempt in range(1, self.attempts + 1):
            try:
                return fn(*args)
            except Exception as e:
                if attempt == self.attempts:
                    logger.error("Stage %s: client failed after %d attempts: %s",
                                 stage.value, self.attempts, e, exc_info=True)
                    raise StageError(stage.value, f"client failed after {self.attempts} attempts: {e}") from e
                logger.warning("Stage %s: attempt %d/%d failed (%s), retrying in %.1fs",
                               stage.value, attempt, self.attempts, e, delay)
                time.sleep(delay)
                delay *= 2


def parse_list(response: str) -> List[str]:
    """One item per line, list numbering and surrounding quotes removed."""
    items = []
    for line in response.splitlines():
        item = _NUMBERING.sub("", line).strip().strip('"\'').strip()
        if item:
            items.append(item)
    return items


def _collect_distinct(stage: Stage, client_call: Callable[[], str], count: int, max_retries: int,
                      transcript: Optional[Transcript], key: str) -> List[str]:
    if count < 1:
        raise ValidationError(f"count must be at least 1, got {count}", "E_INVALID")
    found: List[str] = []
    seen = set()
    response = ""
    for attempt in range(max_retries + 1):
        response = client_call()
        _record(transcript, key, attempt=attempt, response=response)
        for item in parse_list(response):
            if item.casefold() not in seen:
                seen.add(item.casefold())
                found.append(item)
        if len(found) >= count:
            return found[:count]
        logger.info("Stage %s: %d of %d distinct items after attempt %d", stage.value, len(found), count, attempt + 1)
    raise StageError(stage.value, f"only {len(found)} distinct items of {count} after {max_retries + 1} requests",
                     transcript=response)


def nominate_interactions(llm_client, count: int, max_retries: int = 3, transcript: Optional[Transcript] = None,
                          retry: RetryPolicy = RetryPolicy()) -> List[str]:
    """
    Ask the language model for ``count`` distinct two-person interactions.

    Duplicates are dropped; a short answer triggers another request, up to
    ``max_retries`` extra requests.

    Raises:
        StageError: If the client keeps failing or never yields enough distinct phrases
    """
    _record(transcript, "interactions", prompt=INTERACTIONS_PROMPT)
    return _collect_distinct(Stage.INTERACTIONS,
                             lambda: retry.call(Stage.INTERACTIONS, llm_client.complete, INTERACTIONS_PROMPT),
                             count, max_retries, transcript, "interactions")


def expand_prompts(llm_client, interaction: str, n: int, max_retries: int = 3,
                   transcript: Optional[Transcript] = None, retry: RetryPolicy = RetryPolicy()) -> List[str]:
    """``n`` distinct text-to-image prompts for one interaction."""
    prompt = PROMPTS_TEMPLATE.format(n=n, interaction=interaction)
    key = f"prompts:{interaction}"
    _record(transcript, key, prompt=prompt)
    return _collect_distinct(Stage.PROMPTS, lambda: retry.call(Stage.PROMPTS, llm_client.complete, prompt),
                             n, max_retries, transcript, key)


def template_prompt(prompt: str) -> str:
    """Prefix a prompt with the two-person portrait prefix, once."""
    if prompt.startswith(TEMPLATE_PREFIX):
        return prompt
    return f"{TEMPLATE_PREFIX}, {prompt}"


def generate_template(t2i_client, prompt: str, out_path: Path, seed: int,
                      retry: RetryPolicy = RetryPolicy()) -> Path:
    return Path(retry.call(Stage.TEMPLATES, t2i_client.generate, template_prompt(prompt), seed, Path(out_path)))


def generate_templates(t2i_client, prompts: Sequence[str], out_dir: Path, seed: int = 0,
                       retry: RetryPolicy = RetryPolicy()) -> List[Path]:
    """Render one template image per prompt as ``template_0000.png``, ``template_0001.png``, ..."""
    out_dir = Path(out_dir)
    return [generate_template(t2i_client, p, out_dir / f"template_{k:04d}.png", seed + k, retry)
            for k, p in enumerate(prompts)]


def parse_concepts(response: str) -> Tuple[List[str], List[str]]:
    """
    Split a comma-separated concept list.

    Returns:
        Tuple of the normalized concepts (at most ten) and warning messages
    """
    concepts, warnings = [], []
    for raw in response.strip().strip('"\'').split(','):
        concept = raw.strip().strip('"\'').strip().rstrip('.').strip().lower()
        if concept and concept not in concepts:
            concepts.append(concept)
    if len(concepts) > MAX_CONCEPTS:
        warnings.append(f"{len(concepts)} concepts returned, keeping the first {MAX_CONCEPTS}")
        concepts = concepts[:MAX_CONCEPTS]
    return concepts, warnings


def extract_concepts(vlm_client, image_path: Path, transcript: Optional[Transcript] = None,
                     retry: RetryPolicy = RetryPolicy()) -> List[str]:
    """
    Raises:
        StageError: If the response holds no concept, with the raw response attached
    """
    key = f"concepts:{Path(image_path).name}"
    response = retry.call(Stage.CONCEPTS, vlm_client.ask, CONCEPTS_PROMPT, Path(image_path))
    _record(transcript, key, response=response)
    concepts, warnings = parse_concepts(response)
    for warning in warnings:
        logger.warning("Stage concepts (%s): %s", image_path, warning)
        _record(transcript, key, warning=warning)
    if not concepts:
        raise StageError(Stage.CONCEPTS.value, f"no concept could be parsed for {image_path}", transcript=response)
    return concepts


def filter_human_concepts(vlm_client, concepts: Sequence[str], transcript: Optional[Transcript] = None,
                          retry: RetryPolicy = RetryPolicy()) -> List[str]:
    """Concepts the model calls a category of people, in input order."""
    kept = []
    for concept in concepts:
        question = PERSON_QUESTION % concept
        answer = retry.call(Stage.CONCEPTS, vlm_client.ask, question)
        _record(transcript, f"person:{concept}", prompt=question, response=answer)
        if answer.strip().strip('"\'.').lower().startswith('yes'):
            kept.append(concept)
    return kept


def _normalized_box(raw) -> BBox:
    x0, y0, x1, y1 = (min(max(float(v), 0.0), 1.0) for v in raw)
    return BBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))


def detect_concepts(detector_client, image_path: Path, concepts: Sequence[str],
                    transcript: Optional[Transcript] = None, retry: RetryPolicy = RetryPolicy()) -> List[Dict[str, Any]]:
    """
    Detect every concept, write each crop beside the template image.

    Returns:
        One ``{concept, box, crop_path, score}`` per detection; a concept with
        no detection is recorded in the transcript and skipped
    """
    image_path = Path(image_path)
    found = []
    with Image.open(image_path) as template:
        template = template.convert('RGB')
        w, h = template.size
        for concept in concepts:
            detections = retry.call(Stage.DETECTION, detector_client.detect, image_path, concept)
            key = f"detection:{image_path.name}:{concept}"
            _record(transcript, key, detections=detections)
            if not detections:
                logger.info("No detection for %r in %s", concept, image_path.name)
                _record(transcript, key, missing=True)
                continue
            for j, detection in enumerate(detections):
                box = _normalized_box(detection['box'])
                crop_path = image_path.with_name(f"{image_path.stem}_{re.sub(r'[^a-z0-9]+', '-', concept)}_{j}.png")
                pixels = (int(box.x0 * w), int(box.y0 * h), max(int(box.x1 * w), int(box.x0 * w) + 1),
                          max(int(box.y1 * h), int(box.y0 * h) + 1))
                template.crop(pixels).save(crop_path, format='PNG')
                found.append({'concept': concept, 'box': box.to_dict(), 'crop_path': str(crop_path),
                              'score': float(detection.get('score', 1.0))})
    return found


def split_sections(response: str) -> Dict[str, str]:
    """
    Split a State/Appearance answer at its section headers.

    Raises:
        StageError: If either section is missing or empty
    """
    headers = list(_SECTION_HEADER.finditer(response))
    sections: Dict[str, str] = {}
    for k, match in enumerate(headers):
        end = headers[k + 1].start() if k + 1 < len(headers) else len(response)
        name = match.group(1).lower()
        text = response[match.end():end].strip().strip('"\'').strip()
        if text and name not in sections:
            sections[name] = text
    missing = [name for name in ('state', 'appearance') if name not in sections]
    if missing:
        raise StageError(Stage.ANNOTATION.value, f"annotation lacks section(s): {', '.join(missing)}",
                         transcript=response)
    return sections


def annotate(vlm_client, image_path: Path, transcript: Optional[Transcript] = None,
             retry: RetryPolicy = RetryPolicy()) -> Dict[str, str]:
    """``{"state": ..., "appearance": ...}`` for a crop or a reference image."""
    response = retry.call(Stage.ANNOTATION, vlm_client.ask, ANNOTATION_PROMPT, Path(image_path))
    _record(transcript, f"annotation:{Path(image_path).name}", response=response)
    return split_sections(response)


@dataclass(frozen=True)
class ReferenceEntry:
    """
    A reference identity image.

    Attributes:
        image: Path of the image
        category_label: Category such as "man" or "girl"
        appearance_description: Appearance part of its annotation
    """
    image: str
    category_label: str
    appearance_description: str = ""


@dataclass
class StructureResult:
    samples: List[BenchmarkSample]
    flagged: List[Tuple[str, str]]
    review_rows: List[Dict[str, Any]]


def structure_samples(stage_outputs: Sequence[Dict[str, Any]], reference_pool: Sequence[ReferenceEntry],
                      seed: int, categories: Sequence[str] = DEFAULT_CATEGORIES,
                      image_root: Optional[Path] = None) -> StructureResult:
    """
    Assign category-compatible references to every detected person.

    Each template becomes one sample. A reference is drawn at random (seeded)
    among pool entries with the person's category, without reuse inside a
    sample. Templates where any person has no compatible reference, or that
    hold no person at all, are flagged instead of emitted.

    Args:
        stage_outputs: ``{sample_id, global_prompt, interaction_tag, persons}``
            per template, each person ``{concept, box, posture_description}``
        reference_pool: Annotated reference images
        seed: Seed of the assignment
        categories: Closed category vocabulary
        image_root: Reference paths are stored relative to this directory

    Returns:
        StructureResult with samples, flagged (sample_id, reason) pairs and
        the rows of the manual review report
    """
    rng = random.Random(seed)
    samples, flagged, review = [], [], []

    def stored_path(image: str) -> str:
        if image_root is None:
            return image
        return Path(os.path.relpath(image, image_root)).as_posix()

    for output in stage_outputs:
        sample_id = output['sample_id']
        persons = output['persons']
        reason = None if persons else "no person detected"
        records, used = [], set()
        for person in persons:
            label = person['concept']
            if label not in categories:
                reason = f"category {label!r} is outside the vocabulary"
                break
            candidates = [r for r in reference_pool if r.category_label == label and r.image not in used]
            if not candidates:
                reason = f"no compatible reference for category {label!r}"
                break
            reference = rng.choice(candidates)
            used.add(reference.image)
            records.append(IdentityRecord(
                category_label=label,
                reference_image=stored_path(reference.image),
                posture_description=person['posture_description'],
                full_description=f"{person['posture_description']} {reference.appearance_description}".strip(),
                box=BBox.from_dict(person['box']),
            ))

        for k, record in enumerate(records):
            review.append({'sample_id': sample_id, 'identity': k, 'category_label': record.category_label,
                           'reference_image': record.reference_image,
                           'posture_description': record.posture_description,
                           'full_description': record.full_description, 'flag': reason or ""})
        if reason is not None:
            logger.warning("Sample %s flagged: %s", sample_id, reason)
            flagged.append((sample_id, reason))
            if not records:
                review.append({'sample_id': sample_id, 'identity': "", 'category_label': "", 'reference_image': "",
                               'posture_description': "", 'full_description': "", 'flag': reason})
            continue
        samples.append(BenchmarkSample(sample_id, output['global_prompt'], output['interaction_tag'], tuple(records)))
    return StructureResult(samples, flagged, review)


REVIEW_COLUMNS = ('sample_id', 'identity', 'category_label', 'reference_image',
                  'posture_description', 'full_description', 'flag')


def write_review_report(rows: Sequence[Dict[str, Any]], path: Path) -> Path:
    """CSV listing every description for the manual check."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=REVIEW_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path


@dataclass
class BuildSettings:
    """
    Attributes:
        interactions: Interactions to nominate
        prompts_per_interaction: Prompts per interaction
        max_retries: Extra requests when an answer is short on distinct items
        concurrency: Concurrent client calls within a stage
        seed: Seed for template rendering and reference assignment
        categories: Closed category vocabulary
        name: Benchmark name stored in the document
    """
    interactions: int = 40
    prompts_per_interaction: int = 10
    max_retries: int = 3
    concurrency: int = 4
    seed: int = 0
    categories: Sequence[str] = DEFAULT_CATEGORIES
    name: str = "IDBench"
    retry: RetryPolicy = field(default_factory=RetryPolicy)


@dataclass
class BuildResult:
    benchmark_path: Path
    review_path: Path
    samples: List[BenchmarkSample]
    flagged: List[Tuple[str, str]]
    records: List[PipelineStageRecord]


class BenchmarkBuilder:
    """
    Runs the construction stages in order, fanning client calls out within a
    stage and checkpointing every stage output under ``workdir/checkpoints``.

    A rerun loads finished stages from their checkpoints instead of calling
    the clients again.
    """

    def __init__(self, workdir: Path, llm_client, t2i_client, vlm_client, detector_client,
                 reference_pool: Sequence[ReferenceEntry], settings: BuildSettings = BuildSettings()):
        self.workdir = Path(workdir)
        self.llm = llm_client
        self.t2i = t2i_client
        self.vlm = vlm_client
        self.detector = detector_client
        self.reference_pool = list(reference_pool)
        self.settings = settings
        self.records: List[PipelineStageRecord] = []
        self._semaphore: Optional[asyncio.Semaphore] = None
        self._checkpoint_lock: Optional[asyncio.Lock] = None

    def _checkpoint_path(self, stage: Stage) -> Path:
        return self.workdir / "checkpoints" / f"{stage.value}.json"

    async def _fan_out(self, fn: Callable, items: Sequence) -> List:
        async def one(item):
            async with self._semaphore:
                return await asyncio.to_thread(fn, item)
        return list(await asyncio.gather(*(one(item) for item in items)))

    async def _stage(self, stage: Stage, inputs: Any, compute: Callable) -> Any:
        """Load ``stage`` from its checkpoint or compute it, then record and checkpoint it."""
        checkpoint = self._checkpoint_path(stage)
        transcript_path = self.workdir / "transcripts" / f"{stage.value}.jsonl"
        input_digest = digest(inputs)
        if checkpoint.is_file():
            saved = json.loads(checkpoint.read_text(encoding='utf-8'))
            if saved.get('input_digest') == input_digest:
                logger.info("Stage %s: resumed from checkpoint", stage.value)
                outputs = saved['outputs']
                self.records.append(PipelineStageRecord(stage.value, input_digest, digest(outputs),
                                                        saved.get('transcript')))
                return outputs
            logger.info("Stage %s: inputs changed, recomputing", stage.value)

        logger.info("Stage %s: started", stage.value)
        transcript = Transcript(stage)
        outputs = await compute(transcript)
        transcript.write(transcript_path)
        record = PipelineStageRecord(stage.value, input_digest, digest(outputs), str(transcript_path))
        self.records.append(record)
        async with self._checkpoint_lock:
            checkpoint.parent.mkdir(parents=True, exist_ok=True)
            checkpoint.write_text(json.dumps({'input_digest': input_digest, 'outputs': outputs,
                                              'transcript': record.transcript}, indent=2, ensure_ascii=False),
                                  encoding='utf-8')
        logger.info("Stage %s: finished", stage.value)
        return outputs

    async def run(self) -> BuildResult:
        """
        Build, validate and write the benchmark and its review report.

        Raises:
            StageError: If a stage cannot complete
            BenchmarkValidationError: If a structured sample fails validation
        """
        cfg = self.settings
        retry = cfg.retry
        self._semaphore = asyncio.Semaphore(max(1, cfg.concurrency))
        self._checkpoint_lock = asyncio.Lock()
        self.records = []
        templates_dir = self.workdir / "templates"

        async def interactions_stage(transcript):
            return await asyncio.to_thread(nominate_interactions, self.llm, cfg.interactions,
                                           cfg.max_retries, transcript, retry)
        interactions = await self._stage(Stage.INTERACTIONS, {'count': cfg.interactions}, interactions_stage)

        async def prompts_stage(transcript):
            expanded = await self._fan_out(
                lambda i: expand_prompts(self.llm, i, cfg.prompts_per_interaction, cfg.max_retries, transcript, retry),
                interactions)
            return [{'interaction': interaction, 'prompt': prompt}
                    for interaction, prompts in zip(interactions, expanded) for prompt in prompts]
        prompts = await self._stage(Stage.PROMPTS, {'interactions': interactions,
                                                    'n': cfg.prompts_per_interaction}, prompts_stage)

        async def templates_stage(transcript):
            def render(k):
                path = generate_template(self.t2i, prompts[k]['prompt'], templates_dir / f"template_{k:04d}.png",
                                         cfg.seed + k, retry)
                transcript.record(f"template:{k:04d}", prompt=template_prompt(prompts[k]['prompt']), image=str(path))
                return {'sample_id': f"s{k:04d}", 'global_prompt': template_prompt(prompts[k]['prompt']),
                        'interaction_tag': prompts[k]['interaction'], 'template': str(path)}
            return await self._fan_out(render, range(len(prompts)))
        templates = await self._stage(Stage.TEMPLATES, {'prompts': prompts, 'seed': cfg.seed}, templates_stage)

        async def concepts_stage(transcript):
            def human_concepts(template):
                concepts = extract_concepts(self.vlm, Path(template['template']), transcript, retry)
                return filter_human_concepts(self.vlm, concepts, transcript, retry)
            return await self._fan_out(human_concepts, templates)
        concepts = await self._stage(Stage.CONCEPTS, {'templates': templates}, concepts_stage)

        async def detection_stage(transcript):
            return await self._fan_out(
                lambda k: detect_concepts(self.detector, Path(templates[k]['template']), concepts[k], transcript, retry),
                range(len(templates)))
        detections = await self._stage(Stage.DETECTION, {'templates': templates, 'concepts': concepts},
                                       detection_stage)

        pool_images = [r.image for r in self.reference_pool]

        async def annotation_stage(transcript):
            crops = [d['crop_path'] for per_template in detections for d in per_template]
            crop_notes = await self._fan_out(lambda p: annotate(self.vlm, Path(p), transcript, retry), crops)
            reference_notes = await self._fan_out(lambda p: annotate(self.vlm, Path(p), transcript, retry),
                                                  pool_images)
            return {'postures': {p: note['state'] for p, note in zip(crops, crop_notes)},
                    'appearances': {p: note['appearance'] for p, note in zip(pool_images, reference_notes)}}
        notes = await self._stage(Stage.ANNOTATION, {'detections': detections, 'references': pool_images},
                                  annotation_stage)

        annotated_pool = [ReferenceEntry(r.image, r.category_label, notes['appearances'][r.image])
                          for r in self.reference_pool]
        stage_outputs = [{**t, 'persons': [{'concept': d['concept'], 'box': d['box'],
                                            'posture_description': notes['postures'][d['crop_path']]}
                                           for d in per_template]}
                         for t, per_template in zip(templates, detections)]
        result = structure_samples(stage_outputs, annotated_pool, cfg.seed, cfg.categories, self.workdir)

        benchmark_path = save_benchmark(result.samples, self.workdir / f"{cfg.name}.json", cfg.name,
                                        categories=cfg.categories)
        review_path = write_review_report(result.review_rows, self.workdir / "review.csv")
        structure = {'samples': [s.to_dict() for s in result.samples], 'flagged': result.flagged}
        self.records.append(PipelineStageRecord(Stage.STRUCTURE.value, digest(stage_outputs), digest(structure),
                                                str(review_path)))
        (self.workdir / "stages.json").write_text(
            json.dumps([asdict(r) for r in self.records], indent=2) + "\n", encoding='utf-8')
        logger.info("Benchmark built: %d samples, %d flagged", len(result.samples), len(result.flagged))
        return BuildResult(benchmark_path, review_path, result.samples, result.flagged, self.records)
