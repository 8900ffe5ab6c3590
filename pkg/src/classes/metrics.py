"""
Evaluation protocol: person detection, greedy crop-to-reference matching and
the six reported alignment scores.
"""
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.classes.errors import AdapterError, ShapeError, ValidationError
from src.utils.images import crop

logger = logging.getLogger('MultiID')

TABLE_COLUMNS = ("CLIP-T", "HPSv2", "Body", "Face", "Full", "Pose")


@dataclass(frozen=True)
class MatchResult:
    """
    Attributes:
        pairs: (crop_index, ref_index) in selection order
        unmatched_crops: Crop indices left without a reference
        unmatched_refs: Reference indices left without a crop
    """
    pairs: List[Tuple[int, int]]
    unmatched_crops: List[int]
    unmatched_refs: List[int]


def _similarity_matrix(sim) -> np.ndarray:
    values = np.asarray(sim, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
        raise ShapeError(f"similarity matrix must be 2-D with both extents >= 1, got shape {values.shape}")
    if np.isnan(values).any():
        raise ValidationError("similarity matrix contains NaN", "E_NAN_SIMILARITY")
    return values


def greedy_match(sim) -> MatchResult:
    """
    Greedily pair crops (rows) with references (columns).

    Repeatedly takes the largest entry whose row and column are both still
    free. Ties go to the smallest crop index, then the smallest reference index.

    Args:
        sim: Similarity matrix shaped (n_crops, n_refs)

    Returns:
        MatchResult with min(n_crops, n_refs) pairs

    Raises:
        ValidationError: If ``sim`` contains NaN
    """
    values = _similarity_matrix(sim)
    n_crops, n_refs = values.shape
    order = sorted(((-values[r, c], r, c) for r in range(n_crops) for c in range(n_refs)))
    used_rows, used_cols = set(), set()
    pairs = []
    for _, r, c in order:
        if r in used_rows or c in used_cols:
            continue
        pairs.append((r, c))
        used_rows.add(r)
        used_cols.add(c)
        if len(pairs) == min(n_crops, n_refs):
            break
    return MatchResult(
        pairs=pairs,
        unmatched_crops=[r for r in range(n_crops) if r not in used_rows],
        unmatched_refs=[c for c in range(n_refs) if c not in used_cols],
    )


def cosine_matrix(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> np.ndarray:
    """Cosines between unit-normalized rows, clamped to [-1, 1]."""
    def normalized(rows):
        matrix = np.asarray([np.asarray(r, dtype=np.float64).reshape(-1) for r in rows])
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        return matrix / np.where(norms > 0, norms, 1.0)
    return np.clip(normalized(a) @ normalized(b).T, -1.0, 1.0)


def _percent(value: float, low: float = 0.0) -> float:
    return float(np.clip(100.0 * value, low, 100.0))


@dataclass
class SampleMetrics:
    """
    Scores of one generated image, percentages.

    Local scores stay None when no person was detected.

    Attributes:
        face_sum: Sum of face cosines over pairs where both faces were found
        face_pairs: Number of such pairs
    """
    sample_id: str
    image_name: str
    clip_t: float
    hpsv2: float
    body: Optional[float] = None
    face: Optional[float] = None
    full: Optional[float] = None
    pose: Optional[float] = None
    persons_detected: int = 0
    matched_pairs: int = 0
    face_sum: float = 0.0
    face_pairs: int = 0


def _call(stage: str, fn, *args):
    try:
        return fn(*args)
    except Exception as e:
        raise AdapterError(stage, e) from e


def evaluate_sample(image: np.ndarray, sample, references: Sequence[np.ndarray], backends,
                    image_name: str = "") -> SampleMetrics:
    """
    Score one generated image against its benchmark sample.

    Args:
        image: Generated image (H, W, 3)
        sample: BenchmarkSample the image was generated for
        references: Reference images aligned with ``sample.ids``
        backends: BackendBundle with the evaluation adapters
        image_name: Label stored with the metrics

    Returns:
        SampleMetrics for the image

    Raises:
        AdapterError: If an evaluation adapter fails
    """
    backends.require(*backends.EVALUATION)
    if len(references) != len(sample.ids):
        raise ShapeError(f"{len(references)} reference images for {len(sample.ids)} identities")

    metrics = SampleMetrics(
        sample_id=sample.sample_id,
        image_name=image_name,
        clip_t=_percent(_call("clip-t", backends.text_image_scorer.score, image, sample.global_prompt)),
        hpsv2=_percent(_call("hpsv2", backends.preference_scorer.score, image, sample.global_prompt)),
    )

    boxes = _call("person-detection", backends.person_detector.detect, image)
    metrics.persons_detected = len(boxes)
    if not boxes:
        logger.info("No person detected in %s (sample %s)", image_name or "image", sample.sample_id)
        return metrics

    crops = [crop(image, box) for box in boxes]
    crop_embeddings = [_call("image-embedding", backends.image_embedder.embed_image, c) for c in crops]
    ref_embeddings = [_call("image-embedding", backends.image_embedder.embed_image, r) for r in references]
    sim = cosine_matrix(crop_embeddings, ref_embeddings)
    match = greedy_match(sim)

    body, full, pose, faces = [], [], [], []
    for c, r in match.pairs:
        identity = sample.ids[r]
        body.append(_percent(sim[c, r]))
        full.append(_percent(_call("full", backends.text_image_scorer.score, crops[c], identity.full_description)))
        pose.append(_percent(_call("pose", backends.text_image_scorer.score, crops[c], identity.posture_description)))
        crop_face = _call("face", backends.face_embedder.embed_face, crops[c])
        ref_face = _call("face", backends.face_embedder.embed_face, references[r])
        if crop_face is not None and ref_face is not None:
            faces.append(float(100.0 * cosine_matrix([crop_face], [ref_face])[0, 0]))

    metrics.matched_pairs = len(match.pairs)
    metrics.body = float(np.mean(body))
    metrics.full = float(np.mean(full))
    metrics.pose = float(np.mean(pose))
    if faces:
        metrics.face = float(np.mean(faces))
        metrics.face_sum = float(np.sum(faces))
        metrics.face_pairs = len(faces)
    return metrics


@dataclass
class MetricReport:
    """
    Averages over generated images, in percent.

    ``face`` is pooled over matched faces; ``face_per_image`` averages the
    per-image face means instead. ``coverage`` is the share of images with at
    least one detected person.
    """
    clip_t_global: Optional[float]
    hpsv2: Optional[float]
    body: Optional[float]
    face: Optional[float]
    full_local: Optional[float]
    pose: Optional[float]
    sample_count: int
    image_count: int
    images_per_sample: int
    coverage: float
    face_pairs: int = 0
    face_images: int = 0
    face_per_image: Optional[float] = None
    config_digest: Optional[str] = None
    per_image: List[SampleMetrics] = field(default_factory=list, repr=False)

    def table_row(self) -> Dict[str, Optional[float]]:
        return dict(zip(TABLE_COLUMNS, (self.clip_t_global, self.hpsv2, self.body,
                                        self.face, self.full_local, self.pose)))

    def summary(self) -> Dict:
        data = asdict(self)
        data.pop('per_image')
        return data


def _mean(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def aggregate(reports: Sequence[SampleMetrics], images_per_sample: int = 4) -> MetricReport:
    """
    Average per-image metrics; missing local scores are skipped per metric.

    Raises:
        ValidationError: If ``reports`` is empty
    """
    reports = list(reports)
    if not reports:
        raise ValidationError("cannot aggregate an empty set of reports", "E_EMPTY_REPORT")
    face_pairs = sum(r.face_pairs for r in reports)
    face_images = [r.face for r in reports if r.face is not None]
    return MetricReport(
        clip_t_global=_mean([r.clip_t for r in reports]),
        hpsv2=_mean([r.hpsv2 for r in reports]),
        body=_mean([r.body for r in reports]),
        face=sum(r.face_sum for r in reports) / face_pairs if face_pairs else None,
        full_local=_mean([r.full for r in reports]),
        pose=_mean([r.pose for r in reports]),
        sample_count=len({r.sample_id for r in reports}),
        image_count=len(reports),
        images_per_sample=images_per_sample,
        coverage=sum(1 for r in reports if r.persons_detected) / len(reports),
        face_pairs=face_pairs,
        face_images=len(face_images),
        face_per_image=_mean(face_images),
        per_image=reports,
    )


def format_table(report: MetricReport) -> str:
    """Aligned two-line table with the report columns."""
    row = report.table_row()
    cells = ["-" if v is None else f"{v:.1f}" for v in row.values()]
    widths = [max(len(name), len(cell)) for name, cell in zip(TABLE_COLUMNS, cells)]
    header = "  ".join(name.rjust(w) for name, w in zip(TABLE_COLUMNS, widths))
    values = "  ".join(cell.rjust(w) for cell, w in zip(cells, widths))
    return f"{header}\n{values}"


def write_report(report: MetricReport, out_dir) -> Tuple[Path, Path]:
    """
    Write ``report.csv`` (one row per image plus a mean row) and ``report.json``.

    Returns:
        Tuple of the CSV and JSON paths
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / "report.csv", out_dir / "report.json"

    def fmt(value):
        return "" if value is None else repr(float(value))

    with open(csv_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "image", *TABLE_COLUMNS])
        for m in report.per_image:
            writer.writerow([m.sample_id, m.image_name,
                             *(fmt(v) for v in (m.clip_t, m.hpsv2, m.body, m.face, m.full, m.pose))])
        writer.writerow(["mean", "", *(fmt(v) for v in report.table_row().values())])

    document = {
        'columns': report.table_row(),
        'summary': report.summary(),
        'images': [asdict(m) for m in report.per_image],
    }
    json_path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding='utf-8')
    logger.info("Wrote evaluation report to %s and %s", csv_path, json_path)
    return csv_path, json_path
