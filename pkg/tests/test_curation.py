import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from migkit.curation import (AnnotatedBox, AnnotationRecord, FilterStats,
                             classify_complexity, filter_stream,
                             record_from_dict, run_filter, score_components,
                             score_record, total_from_components)


class TestWorkedRecords:
    def test_totals_exact(self, worked_records):
        rec1, rec2, rec3 = worked_records
        assert abs(score_record(rec1).total - 97.0) < 1e-9
        assert abs(score_record(rec2).total - 78.75) < 1e-9
        assert abs(score_record(rec3).total - 14.5) < 1e-9

    def test_components(self, worked_records):
        _, rec2, _ = worked_records
        c, p_a, p_o = score_components(rec2)
        assert c == pytest.approx(1.7, abs=1e-12)
        assert p_a == pytest.approx(0.15, abs=1e-12)
        assert p_o == pytest.approx(0.025, abs=1e-12)

    def test_threshold_partition(self, worked_records):
        verdicts = [score_record(r).high_quality for r in worked_records]
        assert verdicts == [True, True, False]

    def test_pair_count_normalization_flag(self, worked_records):
        _, rec2, _ = worked_records
        literal = score_record(rec2).overlap_penalty
        paired = score_record(rec2, pair_count_norm=True).overlap_penalty
        assert paired == pytest.approx(2 * literal, rel=1e-12)

    def test_recomputability(self, worked_records):
        for rec in worked_records:
            rep = score_record(rec)
            assert rep.recompute_total() == rep.total


class TestValidation:
    def test_zero_instances_rejected(self):
        rec = AnnotationRecord("bad", 10, 10, "", instances=())
        with pytest.raises(ValueError, match="zero instances"):
            score_record(rec)

    def test_zero_area_box_rejected(self):
        rec = AnnotationRecord("bad", 10, 10, "", instances=(
            AnnotatedBox("a", 2, 2, 2, 8),))
        with pytest.raises(ValueError, match="out of bounds or zero-area"):
            score_record(rec)

    def test_out_of_bounds_rejected(self):
        rec = AnnotationRecord("bad", 10, 10, "", instances=(
            AnnotatedBox("a", 0, 0, 12, 5),))
        with pytest.raises(ValueError):
            score_record(rec)

    def test_confidence_range(self):
        rec = AnnotationRecord("bad", 10, 10, "", instances=(
            AnnotatedBox("a", 0, 0, 5, 5, confidence=1.5),))
        with pytest.raises(ValueError, match="confidence"):
            score_record(rec)


class TestComplexity:
    def test_boundaries(self):
        assert classify_complexity(1) == "simple"
        assert classify_complexity(3) == "simple"
        assert classify_complexity(4) == "moderate"
        assert classify_complexity(5) == "moderate"
        assert classify_complexity(7) == "moderate"
        assert classify_complexity(8) == "complex"
        assert classify_complexity(30) == "complex"

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            classify_complexity(0)


def _random_record(rng, k):
    n = int(rng.integers(1, 10))
    w, h = 128.0, 96.0
    boxes = []
    for i in range(n):
        x1 = float(rng.uniform(0, w - 8)); y1 = float(rng.uniform(0, h - 8))
        x2 = float(rng.uniform(x1 + 4, w)); y2 = float(rng.uniform(y1 + 4, h))
        boxes.append(AnnotatedBox(f"c{i}", x1, y1, x2, y2,
                                  confidence=float(rng.uniform(0.05, 1.0))))
    return AnnotationRecord(f"r{k}", w, h, "", instances=tuple(boxes))


class TestMonotonicityAndInvariance:
    def test_formula_monotonicity_10k(self):
        rng = np.random.default_rng(5)
        for _ in range(10_000):
            n = int(rng.integers(1, 10))
            c = float(rng.uniform(0.01, 1.0) * n)
            p_a = float(rng.uniform(0, 1))
            p_o = float(rng.uniform(0, 0.5))
            t = total_from_components(c, n, p_a, p_o)
            assert total_from_components(c + 0.01, n, p_a, p_o) > t
            assert total_from_components(c, n, p_a + 0.01, p_o) <= t
            assert total_from_components(c, n, p_a, p_o + 0.01) <= t

    def test_record_level_confidence_monotonicity(self):
        rng = np.random.default_rng(6)
        for k in range(300):
            rec = _random_record(rng, k)
            i = int(rng.integers(0, rec.n))
            boxes = list(rec.instances)
            if boxes[i].confidence > 0.9:
                continue
            bumped = AnnotatedBox(boxes[i].caption, boxes[i].x1, boxes[i].y1,
                                  boxes[i].x2, boxes[i].y2,
                                  confidence=boxes[i].confidence + 0.05)
            boxes[i] = bumped
            rec2 = AnnotationRecord(rec.image_id, rec.width, rec.height, "",
                                    tuple(boxes))
            assert score_record(rec2).total > score_record(rec).total

    def test_scale_invariance_10k(self):
        rng = np.random.default_rng(7)
        for k in range(10_000):
            rec = _random_record(rng, k)
            rep = score_record(rec)
            scale = float(2 ** int(rng.integers(1, 5)))  # powers of two: exact
            scaled = AnnotationRecord(
                rec.image_id, rec.width * scale, rec.height * scale, "",
                tuple(AnnotatedBox(b.caption, b.x1 * scale, b.y1 * scale,
                                   b.x2 * scale, b.y2 * scale, b.confidence)
                      for b in rec.instances))
            rep2 = score_record(scaled)
            assert rep2.area_penalty == rep.area_penalty
            assert rep2.overlap_penalty == rep.overlap_penalty
            assert rep2.total == rep.total

    @settings(max_examples=200, deadline=None)
    @given(st.floats(10, 500), st.floats(10, 500), st.floats(0.05, 1.0))
    def test_single_box_matches_closed_form(self, w, h, conf):
        box = AnnotatedBox("a", 0, 0, w / 2, h / 2, confidence=conf)
        rec = AnnotationRecord("x", w, h, "", (box,))
        rep = score_record(rec)
        assert rep.total == pytest.approx(100 * (conf - 0.3 * 0.25), abs=1e-9)
        assert rep.overlap_penalty == 0.0


class TestFilterStream:
    def test_worked_partition(self, worked_record_lines):
        kept, rejected = [], []
        stats = run_filter(worked_record_lines, kept.append, rejected.append)
        assert stats.kept == 2 and stats.rejected == 1
        assert len(kept) == 2 and len(rejected) == 1

    def test_empty_input(self):
        kept, rejected = [], []
        stats = run_filter([], kept.append, rejected.append)
        assert stats.kept == stats.rejected == stats.malformed == 0
        assert not kept and not rejected

    def test_malformed_routed_not_fatal(self, worked_record_lines):
        lines = [worked_record_lines[0], "{not json", worked_record_lines[2],
                 '{"image_id": "x", "width": 10, "height": 10, "instances": []}']
        out = list(filter_stream(lines))
        kinds = [k for k, _, _ in out]
        assert kinds == ["kept", "malformed", "rejected", "malformed"]

    def test_deterministic_partitions(self, rng):
        recs = []
        gen = np.random.default_rng(3)
        for k in range(10_000):
            rec = _random_record(gen, k)
            recs.append(json.dumps({
                "image_id": rec.image_id, "width": rec.width, "height": rec.height,
                "instances": [{"caption": b.caption,
                               "bbox": [b.x1, b.y1, b.x2, b.y2],
                               "confidence": b.confidence} for b in rec.instances],
            }))
        r1 = [(k, l) for k, l, _ in filter_stream(recs)]
        r2 = [(k, l) for k, l, _ in filter_stream(recs)]
        assert r1 == r2

    def test_stats_shape(self, worked_record_lines):
        stats = FilterStats()
        list(filter_stream(worked_record_lines + ['{"width": 1'], stats=stats))
        d = stats.to_dict()
        assert d["kept"] == 2 and d["rejected"] == 1 and d["malformed"] == 1
        assert d["by_complexity"]["simple"] == 3
        assert d["rejection_reasons"]["low_score"] == 1
        assert sum(d["score_histogram_bin5"].values()) == 3

    def test_defaulted_confidence_counted(self):
        line = json.dumps({"image_id": "d", "width": 10, "height": 10,
                           "instances": [{"caption": "a", "bbox": [0, 0, 5, 5]}]})
        stats = FilterStats()
        list(filter_stream([line], stats=stats))
        assert stats.defaulted_confidence == 1

    def test_record_from_dict_roundtrip(self, worked_record_lines):
        rec = record_from_dict(json.loads(worked_record_lines[1]))
        assert rec.n == 2
        assert rec.instances[0].confidence == 0.9
