"""Dataset curation scoring and streaming filtering over annotated records.

Each record carries pixel-space boxes with per-box confidences. The quality
score is

    total = 100 * (C/N - lambda_a * P_A - lambda_o * P_O)

with C the confidence sum, P_A the mean box-to-image area ratio, and P_O
the pairwise-overlap penalty. P_O divides the sum of IoU over unordered
pairs by N*(N-1) — the ordered-pair count, which halves the mean pairwise
IoU. That normalization is deliberate and load-bearing (the worked totals
below depend on it); pass pair_count_norm=True to divide by the unordered
pair count N*(N-1)/2 instead. P_O is 0 for single-instance records, where
the sum is vacuous. Records scoring >= 60 (default threshold) are
classified high-quality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

DEFAULT_LAMBDA_A = 0.3
DEFAULT_LAMBDA_O = 0.7
DEFAULT_THRESHOLD = 60.0

COMPLEXITY_SIMPLE = "simple"       # 1-3 elements
COMPLEXITY_MODERATE = "moderate"   # 4-7 elements
COMPLEXITY_COMPLEX = "complex"     # 8+ elements


@dataclass(frozen=True)
class AnnotatedBox:
    caption: str
    x1: float
    y1: float
    x2: float
    y2: float
    confidence: float = 1.0
    confidence_defaulted: bool = False

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    width: float
    height: float
    global_caption: str
    instances: tuple[AnnotatedBox, ...]

    @property
    def n(self) -> int:
        return len(self.instances)


@dataclass(frozen=True)
class ScoreReport:
    image_id: str
    n: int
    confidence_sum: float
    area_penalty: float
    overlap_penalty: float
    lambda_a: float
    lambda_o: float
    total: float
    high_quality: bool
    complexity: str

    def recompute_total(self) -> float:
        return total_from_components(self.confidence_sum, self.n,
                                     self.area_penalty, self.overlap_penalty,
                                     self.lambda_a, self.lambda_o)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "n": self.n,
            "confidence_sum": self.confidence_sum,
            "area_penalty": self.area_penalty,
            "overlap_penalty": self.overlap_penalty,
            "total": self.total,
            "high_quality": self.high_quality,
            "complexity": self.complexity,
        }


def total_from_components(confidence_sum: float, n: int, area_penalty: float,
                          overlap_penalty: float,
                          lambda_a: float = DEFAULT_LAMBDA_A,
                          lambda_o: float = DEFAULT_LAMBDA_O) -> float:
    return 100.0 * (confidence_sum / n - lambda_a * area_penalty - lambda_o * overlap_penalty)


def _pixel_iou(a: AnnotatedBox, b: AnnotatedBox) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union


def validate_record(rec: AnnotationRecord) -> None:
    if rec.width < 1 or rec.height < 1:
        raise ValueError(f"{rec.image_id}: image extents must be >= 1")
    if rec.n == 0:
        raise ValueError(f"{rec.image_id}: record has zero instances (C/N undefined)")
    for k, box in enumerate(rec.instances):
        if not (0.0 <= box.x1 < box.x2 <= rec.width and 0.0 <= box.y1 < box.y2 <= rec.height):
            raise ValueError(f"{rec.image_id}: instance {k} box out of bounds or zero-area")
        if not (0.0 < box.confidence <= 1.0):
            raise ValueError(f"{rec.image_id}: instance {k} confidence outside (0,1]")


def score_components(rec: AnnotationRecord, pair_count_norm: bool = False
                     ) -> tuple[float, float, float]:
    """(C, P_A, P_O) for a validated record."""
    n = rec.n
    c = sum(b.confidence for b in rec.instances)
    a_total = rec.width * rec.height
    p_a = sum(b.area() / a_total for b in rec.instances) / n
    if n == 1:
        p_o = 0.0
    else:
        pair_sum = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                pair_sum += _pixel_iou(rec.instances[i], rec.instances[j])
        denom = (n * (n - 1) / 2) if pair_count_norm else n * (n - 1)
        p_o = pair_sum / denom
    return c, p_a, p_o


def classify_complexity(n: int) -> str:
    if n < 1:
        raise ValueError("complexity undefined for empty records")
    if n <= 3:
        return COMPLEXITY_SIMPLE
    if n <= 7:
        return COMPLEXITY_MODERATE
    return COMPLEXITY_COMPLEX


def score_record(rec: AnnotationRecord, lambda_a: float = DEFAULT_LAMBDA_A,
                 lambda_o: float = DEFAULT_LAMBDA_O,
                 threshold: float = DEFAULT_THRESHOLD,
                 pair_count_norm: bool = False) -> ScoreReport:
    validate_record(rec)
    c, p_a, p_o = score_components(rec, pair_count_norm=pair_count_norm)
    total = total_from_components(c, rec.n, p_a, p_o, lambda_a, lambda_o)
    return ScoreReport(
        image_id=rec.image_id,
        n=rec.n,
        confidence_sum=c,
        area_penalty=p_a,
        overlap_penalty=p_o,
        lambda_a=lambda_a,
        lambda_o=lambda_o,
        total=total,
        high_quality=total >= threshold,
        complexity=classify_complexity(rec.n),
    )


# --- JSON-lines ingestion ---------------------------------------------------

def record_from_dict(d: dict) -> AnnotationRecord:
    boxes = []
    for item in d.get("instances", []):
        coords = item["bbox"]
        if len(coords) != 4:
            raise ValueError("bbox must have 4 pixel coordinates")
        conf = item.get("confidence")
        boxes.append(AnnotatedBox(
            caption=str(item.get("caption", "")),
            x1=float(coords[0]), y1=float(coords[1]),
            x2=float(coords[2]), y2=float(coords[3]),
            confidence=1.0 if conf is None else float(conf),
            confidence_defaulted=conf is None,
        ))
    return AnnotationRecord(
        image_id=str(d.get("image_id", "")),
        width=float(d["width"]),
        height=float(d["height"]),
        global_caption=str(d.get("global_caption", "")),
        instances=tuple(boxes),
    )


@dataclass
class FilterStats:
    kept: int = 0
    rejected: int = 0
    malformed: int = 0
    defaulted_confidence: int = 0

    def __post_init__(self):
        self.by_complexity: dict[str, int] = {
            COMPLEXITY_SIMPLE: 0, COMPLEXITY_MODERATE: 0, COMPLEXITY_COMPLEX: 0}
        self.histogram: dict[int, int] = {}
        self.rejection_reasons: dict[str, int] = {}

    def to_dict(self) -> dict:
        return {
            "kept": self.kept,
            "rejected": self.rejected,
            "malformed": self.malformed,
            "defaulted_confidence": self.defaulted_confidence,
            "by_complexity": dict(self.by_complexity),
            "score_histogram_bin5": {str(k): v for k, v in sorted(self.histogram.items())},
            "rejection_reasons": dict(sorted(self.rejection_reasons.items())),
        }


def filter_stream(lines: Iterable[str], threshold: float = DEFAULT_THRESHOLD,
                  lambda_a: float = DEFAULT_LAMBDA_A,
                  lambda_o: float = DEFAULT_LAMBDA_O,
                  pair_count_norm: bool = False,
                  stats: FilterStats | None = None
                  ) -> Iterator[tuple[str, str, ScoreReport | None]]:
    """Stream (verdict, line, report) triples over JSON-lines input.

    verdict is "kept", "rejected" (scored below threshold) or "malformed"
    (unparseable / invalid record, report None). One record in flight at a
    time; a bad line never aborts the stream.
    """
    if stats is None:
        stats = FilterStats()
    for raw in lines:
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        try:
            rec = record_from_dict(json.loads(line))
            report = score_record(rec, lambda_a=lambda_a, lambda_o=lambda_o,
                                  threshold=threshold,
                                  pair_count_norm=pair_count_norm)
        except (ValueError, KeyError, TypeError) as exc:
            stats.malformed += 1
            reason = f"malformed: {exc}"
            stats.rejection_reasons["malformed"] = stats.rejection_reasons.get("malformed", 0) + 1
            yield ("malformed", json.dumps({"line": line, "reason": reason}), None)
            continue
        stats.defaulted_confidence += sum(b.confidence_defaulted for b in rec.instances)
        stats.by_complexity[report.complexity] += 1
        bin5 = int(report.total // 5) * 5
        stats.histogram[bin5] = stats.histogram.get(bin5, 0) + 1
        if report.high_quality:
            stats.kept += 1
            yield ("kept", line, report)
        else:
            stats.rejected += 1
            stats.rejection_reasons["low_score"] = stats.rejection_reasons.get("low_score", 0) + 1
            yield ("rejected", line, report)


def run_filter(lines: Iterable[str], kept_sink: Callable[[str], None],
               rejected_sink: Callable[[str], None],
               threshold: float = DEFAULT_THRESHOLD,
               lambda_a: float = DEFAULT_LAMBDA_A,
               lambda_o: float = DEFAULT_LAMBDA_O,
               pair_count_norm: bool = False) -> FilterStats:
    """Drive filter_stream into two line sinks, returning the stats."""
    stats = FilterStats()
    for verdict, line, _report in filter_stream(
            lines, threshold=threshold, lambda_a=lambda_a, lambda_o=lambda_o,
            pair_count_norm=pair_count_norm, stats=stats):
        if verdict == "kept":
            kept_sink(line)
        else:
            rejected_sink(line)
    return stats
