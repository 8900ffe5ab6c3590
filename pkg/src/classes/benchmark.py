"""
Benchmark document: sample types, JSON persistence and validation with
line-precise, coded issues.
"""
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple, Union

from jsonschema import Draft202012Validator

from src.classes.errors import BenchmarkValidationError, ValidationError
from src.classes.masks import BBox
from src.constants import SCHEMA_DIR

logger = logging.getLogger('MultiID')

FORMAT_VERSION = 1

PathLike = Union[str, Path]


@dataclass(frozen=True)
class IdentityRecord:
    category_label: str
    reference_image: str
    posture_description: str
    full_description: str
    box: BBox

    def to_dict(self) -> Dict[str, Any]:
        return {
            'category_label': self.category_label,
            'reference_image': self.reference_image,
            'posture_description': self.posture_description,
            'full_description': self.full_description,
            'box': self.box.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'IdentityRecord':
        return cls(data['category_label'], data['reference_image'], data['posture_description'],
                   data['full_description'], BBox.from_dict(data['box']))


@dataclass(frozen=True)
class BenchmarkSample:
    """
    One benchmark record.

    Attributes:
        sample_id: Unique id within the document
        global_prompt: Whole-image prompt
        interaction_tag: Interaction the prompt was expanded from
        ids: Per-identity records, at least one
    """
    sample_id: str
    global_prompt: str
    interaction_tag: str
    ids: Tuple[IdentityRecord, ...]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'sample_id': self.sample_id,
            'global_prompt': self.global_prompt,
            'interaction_tag': self.interaction_tag,
            'ids': [record.to_dict() for record in self.ids],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BenchmarkSample':
        return cls(data['sample_id'], data['global_prompt'], data['interaction_tag'],
                   tuple(IdentityRecord.from_dict(r) for r in data['ids']))


@dataclass(frozen=True)
class ValidationIssue:
    """
    Attributes:
        code: Stable error code, one per invariant
        message: Human-readable description
        line: 1-based line in the document, None when unknown
        location: JSON path such as ``samples[3].ids[0].box``
    """
    code: str
    message: str
    line: Optional[int] = None
    location: str = ""

    def __str__(self) -> str:
        where = f"line {self.line}" if self.line is not None else "unknown line"
        suffix = f" at {self.location}" if self.location else ""
        return f"{self.code} ({where}{suffix}): {self.message}"


@lru_cache(maxsize=None)
def _validator() -> Draft202012Validator:
    with open(SCHEMA_DIR / 'benchmark.schema.json', encoding='utf-8') as f:
        return Draft202012Validator(json.load(f))


_decoder = json.JSONDecoder()


def _skip_ws(text: str, pos: int) -> int:
    while pos < len(text) and text[pos] in ' \t\r\n':
        pos += 1
    return pos


def _skip_comma(text: str, pos: int) -> int:
    pos = _skip_ws(text, pos)
    if pos < len(text) and text[pos] == ',':
        pos = _skip_ws(text, pos + 1)
    return pos


def _locate(text: str, path: Sequence[Union[str, int]]) -> int:
    """Offset of the value at ``path``, or of the deepest enclosing value found."""
    pos = _skip_ws(text, 0)
    try:
        for key in path:
            if isinstance(key, int) and text[pos] == '[':
                cursor = _skip_ws(text, pos + 1)
                for _ in range(key):
                    _, cursor = _decoder.raw_decode(text, cursor)
                    cursor = _skip_comma(text, cursor)
                if text[cursor] == ']':
                    return pos
                pos = cursor
            elif isinstance(key, str) and text[pos] == '{':
                cursor = _skip_ws(text, pos + 1)
                while text[cursor] != '}':
                    name, cursor = _decoder.raw_decode(text, cursor)
                    cursor = _skip_ws(text, _skip_ws(text, cursor) + 1)
                    if name == key:
                        break
                    _, cursor = _decoder.raw_decode(text, cursor)
                    cursor = _skip_comma(text, cursor)
                else:
                    return pos
                pos = cursor
            else:
                return pos
    except (IndexError, ValueError):
        pass
    return pos


def _line(text: str, path: Sequence[Union[str, int]]) -> int:
    return text.count('\n', 0, _locate(text, path)) + 1


def _format_path(path: Sequence[Union[str, int]]) -> str:
    out = ""
    for key in path:
        out += f"[{key}]" if isinstance(key, int) else (f".{key}" if out else key)
    return out


def _schema_code(error) -> str:
    path = list(error.absolute_path)
    match error.validator:
        case 'required':
            return "E_MISSING_FIELD"
        case 'additionalProperties':
            return "E_UNKNOWN_KEY"
        case 'minItems' if path and path[-1] == 'ids':
            return "E_EMPTY_IDS"
        case 'minLength':
            return "E_EMPTY_FIELD"
        case _ if 'box' in path:
            return "E_INVALID_BOX"
        case _:
            return "E_SCHEMA"


def _schema_issues(text: str, document: Any) -> Tuple[List[ValidationIssue], Set[int]]:
    issues, broken = [], set()
    for error in sorted(_validator().iter_errors(document), key=lambda e: list(map(str, e.absolute_path))):
        path = list(error.absolute_path)
        if len(path) >= 2 and path[0] == 'samples' and isinstance(path[1], int):
            broken.add(path[1])
        if error.validator == 'additionalProperties' and isinstance(error.instance, dict):
            allowed = set(error.schema.get('properties', {}))
            for extra in sorted(set(error.instance) - allowed):
                issues.append(ValidationIssue("E_UNKNOWN_KEY", f"unknown key {extra!r}",
                                              _line(text, path + [extra]), _format_path(path + [extra])))
            continue
        issues.append(ValidationIssue(_schema_code(error), error.message, _line(text, path), _format_path(path)))
    return issues, broken


def _semantic_issues(text: str, samples: List[Dict[str, Any]], skip: Set[int], base_dir: Optional[Path],
                     categories: Optional[Sequence[str]]) -> List[ValidationIssue]:
    issues = []
    seen: Dict[str, int] = {}

    def issue(code: str, message: str, path: List[Union[str, int]]):
        issues.append(ValidationIssue(code, message, _line(text, path), _format_path(path)))

    for s, sample in enumerate(samples):
        if s in skip:
            continue
        where = ['samples', s]
        sample_id = sample['sample_id']
        if sample_id in seen:
            issue("E_DUPLICATE_ID", f"sample_id {sample_id!r} already used by samples[{seen[sample_id]}]",
                  where + ['sample_id'])
        seen.setdefault(sample_id, s)
        for key in ('sample_id', 'global_prompt', 'interaction_tag'):
            if not sample[key].strip():
                issue("E_EMPTY_FIELD", f"{key} is blank", where + [key])

        for i, record in enumerate(sample['ids']):
            at = where + ['ids', i]
            for key in ('category_label', 'reference_image', 'posture_description', 'full_description'):
                if not record[key].strip():
                    issue("E_EMPTY_FIELD", f"{key} is blank", at + [key])
            box = record['box']
            if box['x0'] > box['x1'] or box['y0'] > box['y1']:
                issue("E_INVALID_BOX", f"box corners are inverted: {box}", at + ['box'])
            posture, full = record['posture_description'].strip(), record['full_description'].strip()
            if posture and (posture not in full or not full.replace(posture, "", 1).strip()):
                issue("E_DESCRIPTION_MISMATCH",
                      "full_description must contain the posture description plus an appearance description",
                      at + ['full_description'])
            if categories is not None and record['category_label'] not in categories:
                issue("E_UNKNOWN_CATEGORY", f"category {record['category_label']!r} is not one of {list(categories)}",
                      at + ['category_label'])
            if base_dir is not None and record['reference_image'].strip():
                if not (base_dir / record['reference_image']).is_file():
                    issue("E_IMAGE_MISSING", f"reference image {record['reference_image']!r} does not exist",
                          at + ['reference_image'])
    return issues


def validate_text(text: str, base_dir: Optional[PathLike] = None,
                  categories: Optional[Sequence[str]] = None) -> List[ValidationIssue]:
    """
    Validate a benchmark document.

    Args:
        text: Document text
        base_dir: Directory reference images are resolved against; None skips
            the existence check
        categories: Allowed category labels; None accepts any

    Returns:
        List of issues, empty when the document is valid
    """
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        return [ValidationIssue("E_JSON", e.msg, e.lineno)]
    issues, broken = _schema_issues(text, document)
    samples = document.get('samples') if isinstance(document, dict) else None
    if isinstance(samples, list):
        base = Path(base_dir) if base_dir is not None else None
        issues += _semantic_issues(text, samples, broken | {i for i, s in enumerate(samples)
                                                             if not isinstance(s, dict)}, base, categories)
    return issues


def validate_benchmark(path: PathLike, check_images: bool = True,
                       categories: Optional[Sequence[str]] = None) -> List[ValidationIssue]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"benchmark file not found: {path}", "E_FILE_MISSING")
    issues = validate_text(path.read_text(encoding='utf-8'), path.parent if check_images else None, categories)
    for item in issues:
        logger.warning("%s: %s", path, item)
    return issues


def load_benchmark(path: PathLike, check_images: bool = True,
                   categories: Optional[Sequence[str]] = None) -> List[BenchmarkSample]:
    """
    Load and validate a benchmark document.

    Raises:
        BenchmarkValidationError: Carrying every issue found
    """
    path = Path(path)
    issues = validate_benchmark(path, check_images, categories)
    if issues:
        raise BenchmarkValidationError(issues)
    document = json.loads(path.read_text(encoding='utf-8'))
    samples = [BenchmarkSample.from_dict(s) for s in document['samples']]
    logger.info("Loaded %d benchmark samples from %s", len(samples), path)
    return samples


def dumps_benchmark(samples: Sequence[BenchmarkSample], name: str = "IDBench") -> str:
    document = {
        'version': FORMAT_VERSION,
        'name': name,
        'samples': [sample.to_dict() for sample in samples],
    }
    return json.dumps(document, indent=2, ensure_ascii=False) + "\n"


def save_benchmark(samples: Sequence[BenchmarkSample], path: PathLike, name: str = "IDBench",
                   check_images: bool = True, categories: Optional[Sequence[str]] = None) -> Path:
    """
    Validate and write a benchmark document as UTF-8 JSON.

    Raises:
        BenchmarkValidationError: If any sample is invalid; nothing is written
    """
    path = Path(path)
    text = dumps_benchmark(samples, name)
    issues = validate_text(text, path.parent if check_images else None, categories)
    if issues:
        raise BenchmarkValidationError(issues)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding='utf-8')
    logger.info("Wrote %d benchmark samples to %s", len(samples), path)
    return path
