import numpy as np
import pytest

from migkit.curation import AnnotatedBox, AnnotationRecord
from migkit.layout import BBox, InstanceSpec, Layout
from migkit.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_instance_layout():
    return Layout(
        global_caption="a scene with 2 shapes",
        instances=(
            InstanceSpec("red square", BBox(0.1, 0.15, 0.5, 0.6)),
            InstanceSpec("blue circle", BBox(0.55, 0.5, 0.9, 0.85)),
        ),
    )


# The three worked scoring records. Boxes are constructed so the component
# values (confidences, area ratios, pairwise IoU) come out exactly as the
# arithmetic below states:
#   1) N=1, c=1.0, A1/AT=0.1            -> total 97.0   (high)
#   2) N=2, c=(0.9,0.8), ratios (0.2,0.1), IoU 1400&700 boxes overlap 100
#      -> C/N=0.85, P_A=0.15, P_O=0.05/2 -> total 78.75 (high)
#   3) N=2, c=(0.5,0.4), ratios (0.6,0.5), IoU 220/550=0.4
#      -> total 100*(0.45-0.165-0.14) = 14.5            (low)
@pytest.fixture
def worked_records():
    rec1 = AnnotationRecord(
        image_id="worked-1", width=100, height=100, global_caption="one box",
        instances=(AnnotatedBox("a", 0, 0, 25, 40, confidence=1.0),),
    )
    rec2 = AnnotationRecord(
        image_id="worked-2", width=100, height=70, global_caption="two boxes",
        instances=(
            AnnotatedBox("a", 0, 0, 35, 40, confidence=0.9),    # area 1400, ratio 0.2
            AnnotatedBox("b", 30, 0, 65, 20, confidence=0.8),   # area 700, ratio 0.1, inter 100
        ),
    )
    rec3 = AnnotationRecord(
        image_id="worked-3", width=35, height=20, global_caption="two big boxes",
        instances=(
            AnnotatedBox("a", 0, 0, 21, 20, confidence=0.5),      # area 420, ratio 0.6
            AnnotatedBox("b", 10, 0, 27.5, 20, confidence=0.4),   # area 350, ratio 0.5, inter 220
        ),
    )
    return rec1, rec2, rec3


@pytest.fixture
def worked_record_lines(worked_records):
    import json
    lines = []
    for rec in worked_records:
        lines.append(json.dumps({
            "image_id": rec.image_id,
            "width": rec.width,
            "height": rec.height,
            "global_caption": rec.global_caption,
            "instances": [
                {"caption": b.caption, "bbox": [b.x1, b.y1, b.x2, b.y2],
                 "confidence": b.confidence}
                for b in rec.instances
            ],
        }))
    return lines
