"""Bounding boxes, instances, layouts, and the layout-token text format.

Coordinates are normalized reals in [0,1], origin top-left, x rightward, y
downward. Boxes are half-open [x1,x2) x [y1,y2) for rasterization; the 1.0
boundary is treated as closed. Zero-area boxes are invalid and rejected
rather than clamped, so upstream planner errors surface instead of being
masked.

Text format, one block per layout:

    <layout><scap>TEXT</scap><bbox>x1,y1,x2,y2</bbox>...</layout>

with at least one (scap, bbox) pair, whitespace between tags ignored, and
TEXT any non-empty run of characters not containing '<'. The serializer is
canonical: coordinates rendered with exactly 3 decimals, no whitespace, so
parse(serialize(L)) == L once coordinates are quantized to 3 decimals.
The format carries instances only; global captions travel in the JSON
record ({"global_caption": ..., "instances": [{"caption", "bbox"}]}).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

# parse error codes, stable across releases; the CLI maps these to exit 2
E_SYNTAX = "E_SYNTAX"
E_COORD_COUNT = "E_COORD_COUNT"
E_BBOX = "E_BBOX"
E_EMPTY_LAYOUT = "E_EMPTY_LAYOUT"
E_EMPTY_CAPTION = "E_EMPTY_CAPTION"
E_TOO_MANY = "E_TOO_MANY"


class LayoutParseError(ValueError):
    """Parse failure with a stable code and the byte offset of the fault."""

    def __init__(self, code: str, message: str, offset: int):
        super().__init__(f"{code} at byte {offset}: {message}")
        self.code = code
        self.offset = offset
        self.reason = message


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def quantized(self, decimals: int = 3) -> "BBox":
        return BBox(*(float(f"{v:.{decimals}f}") for v in self.as_list()))


@dataclass(frozen=True)
class BoxVerdict:
    ok: bool
    reason: str = ""


def validate_bbox(b: BBox) -> BoxVerdict:
    """Check the box invariants, reporting the first violated constraint."""
    checks = (
        (b.x1 >= 0.0, "x1 < 0"),
        (b.y1 >= 0.0, "y1 < 0"),
        (b.x2 <= 1.0, "x2 > 1"),
        (b.y2 <= 1.0, "y2 > 1"),
        (b.x1 < b.x2, "x1 >= x2 (zero or negative width)"),
        (b.y1 < b.y2, "y1 >= y2 (zero or negative height)"),
    )
    for ok, reason in checks:
        if not ok:
            return BoxVerdict(False, reason)
    return BoxVerdict(True)


def bbox_iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two valid boxes."""
    for box in (a, b):
        v = validate_bbox(box)
        if not v.ok:
            raise ValueError(f"invalid bbox {box}: {v.reason}")
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union


@dataclass(frozen=True)
class InstanceSpec:
    """One instance: sub-caption plus box. Padding slots have caption == ""
    and bbox == None (the degenerate zero-bbox flag)."""

    caption: str
    bbox: BBox | None
    confidence: float = 1.0

    @property
    def is_padding(self) -> bool:
        return self.bbox is None


PADDING_INSTANCE = InstanceSpec(caption="", bbox=None)


@dataclass(frozen=True)
class Layout:
    global_caption: str = ""
    instances: tuple[InstanceSpec, ...] = ()
    n_max: int = 10

    @property
    def active(self) -> tuple[InstanceSpec, ...]:
        return tuple(i for i in self.instances if not i.is_padding)

    @property
    def active_count(self) -> int:
        return len(self.active)

    def padded(self) -> "Layout":
        """Pad with inactive slots up to n_max; active instances first."""
        act = self.active
        if len(act) > self.n_max:
            raise ValueError(f"{len(act)} instances exceed n_max={self.n_max}")
        pads = (PADDING_INSTANCE,) * (self.n_max - len(act))
        return replace(self, instances=act + pads)

    def quantized(self, decimals: int = 3) -> "Layout":
        inst = tuple(
            i if i.is_padding else replace(i, bbox=i.bbox.quantized(decimals))
            for i in self.instances
        )
        return replace(self, instances=inst)


def layout_validity_score(layout: Layout) -> float:
    """Fraction of instances with a valid box and non-empty caption.

    An empty layout scores 0.0 by convention (vacuously nothing is valid).
    """
    inst = layout.instances
    if not inst:
        return 0.0
    good = 0
    for i in inst:
        if i.is_padding:
            continue
        if i.caption and validate_bbox(i.bbox).ok:
            good += 1
    return good / len(inst)


# --- text format ----------------------------------------------------------

def _byte_offset(s: str, char_index: int) -> int:
    return len(s[:char_index].encode("utf-8"))


def _expect(s: str, pos: int, token: str) -> int:
    while pos < len(s) and s[pos].isspace():
        pos += 1
    if not s.startswith(token, pos):
        raise LayoutParseError(E_SYNTAX, f"expected {token!r}", _byte_offset(s, pos))
    return pos + len(token)


def parse_layout_text(s: str, n_max: int = 10) -> Layout:
    """Parse one <layout> block into a Layout (global_caption empty).

    Errors carry stable codes: E_SYNTAX with the byte offset of the fault,
    E_COORD_COUNT for a bbox without exactly 4 numbers, E_BBOX naming the
    instance whose box violates the invariants, E_EMPTY_LAYOUT /
    E_EMPTY_CAPTION / E_TOO_MANY for structural violations.
    """
    pos = _expect(s, 0, "<layout>")
    instances: list[InstanceSpec] = []
    while True:
        probe = pos
        while probe < len(s) and s[probe].isspace():
            probe += 1
        if s.startswith("</layout>", probe):
            pos = probe + len("</layout>")
            break
        if probe >= len(s):
            raise LayoutParseError(E_SYNTAX, "unterminated layout block",
                                   _byte_offset(s, probe))
        pos = _expect(s, pos, "<scap>")
        cap_start = pos
        end = s.find("<", pos)
        if end < 0:
            raise LayoutParseError(E_SYNTAX, "unterminated <scap>", _byte_offset(s, pos))
        caption = s[cap_start:end]
        pos = _expect(s, end, "</scap>")
        if not caption:
            raise LayoutParseError(E_EMPTY_CAPTION,
                                   f"instance {len(instances)} has empty caption",
                                   _byte_offset(s, cap_start))
        pos = _expect(s, pos, "<bbox>")
        num_start = pos
        end = s.find("<", pos)
        if end < 0:
            raise LayoutParseError(E_SYNTAX, "unterminated <bbox>", _byte_offset(s, pos))
        body = s[num_start:end]
        parts = [p.strip() for p in body.split(",")]
        if len(parts) != 4:
            raise LayoutParseError(E_COORD_COUNT,
                                   f"instance {len(instances)}: expected 4 coordinates, got {len(parts)}",
                                   _byte_offset(s, num_start))
        try:
            coords = [float(p) for p in parts]
        except ValueError:
            raise LayoutParseError(E_SYNTAX,
                                   f"instance {len(instances)}: malformed number in bbox",
                                   _byte_offset(s, num_start)) from None
        pos = _expect(s, end, "</bbox>")
        box = BBox(*coords)
        verdict = validate_bbox(box)
        if not verdict.ok:
            raise LayoutParseError(E_BBOX,
                                   f"instance {len(instances)}: {verdict.reason}",
                                   _byte_offset(s, num_start))
        instances.append(InstanceSpec(caption=caption, bbox=box))
        if len(instances) > n_max:
            raise LayoutParseError(E_TOO_MANY,
                                   f"more than n_max={n_max} instances",
                                   _byte_offset(s, num_start))
    if not instances:
        raise LayoutParseError(E_EMPTY_LAYOUT, "layout has zero instances",
                               _byte_offset(s, 0))
    tail = s[pos:]
    if tail.strip():
        raise LayoutParseError(E_SYNTAX, "trailing content after </layout>",
                               _byte_offset(s, pos))
    return Layout(global_caption="", instances=tuple(instances), n_max=n_max)


def serialize_layout(layout: Layout) -> str:
    """Canonical text form: 3-decimal coordinates, stored instance order."""
    act = layout.active
    if not act:
        raise ValueError("cannot serialize an empty layout")
    parts = ["<layout>"]
    for inst in act:
        b = inst.bbox
        parts.append(f"<scap>{inst.caption}</scap>"
                     f"<bbox>{b.x1:.3f},{b.y1:.3f},{b.x2:.3f},{b.y2:.3f}</bbox>")
    parts.append("</layout>")
    return "".join(parts)


# --- JSON record ----------------------------------------------------------

def layout_to_record(layout: Layout) -> dict:
    return {
        "global_caption": layout.global_caption,
        "instances": [
            {"caption": i.caption, "bbox": i.bbox.as_list()} for i in layout.active
        ],
    }


def layout_from_record(rec: dict, n_max: int = 10) -> Layout:
    instances = []
    for k, item in enumerate(rec.get("instances", [])):
        coords = item["bbox"]
        if len(coords) != 4:
            raise ValueError(f"instance {k}: bbox must have 4 coordinates")
        box = BBox(*(float(c) for c in coords))
        verdict = validate_bbox(box)
        if not verdict.ok:
            raise ValueError(f"instance {k}: {verdict.reason}")
        conf = float(item.get("confidence", 1.0))
        instances.append(InstanceSpec(caption=str(item["caption"]), bbox=box,
                                      confidence=conf))
    return Layout(global_caption=str(rec.get("global_caption", "")),
                  instances=tuple(instances), n_max=n_max)


def layout_to_json(layout: Layout) -> str:
    return json.dumps(layout_to_record(layout), ensure_ascii=False)


def layout_from_json(text: str, n_max: int = 10) -> Layout:
    return layout_from_record(json.loads(text), n_max=n_max)
