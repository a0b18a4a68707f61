import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from migkit.layout import (BBox, E_BBOX, E_COORD_COUNT, E_EMPTY_CAPTION,
                           E_EMPTY_LAYOUT, E_SYNTAX, E_TOO_MANY, InstanceSpec,
                           Layout, LayoutParseError, bbox_iou,
                           layout_from_json, layout_to_json,
                           layout_validity_score, parse_layout_text,
                           serialize_layout, validate_bbox)


class TestValidateBBox:
    def test_interior_box(self):
        assert validate_bbox(BBox(0.1, 0.1, 0.9, 0.9)).ok

    def test_zero_width(self):
        v = validate_bbox(BBox(0.5, 0.1, 0.5, 0.9))
        assert not v.ok
        assert "x1 >= x2" in v.reason

    def test_out_of_bounds(self):
        v = validate_bbox(BBox(-0.1, 0, 0.5, 0.5))
        assert not v.ok
        assert "x1 < 0" in v.reason

    def test_full_box_valid(self):
        assert validate_bbox(BBox(0, 0, 1, 1)).ok


class TestIoU:
    def test_identity(self):
        b = BBox(0, 0, 0.5, 0.5)
        assert bbox_iou(b, b) == 1.0

    def test_hand_geometry(self):
        # intersection 0.25 x 0.25 = 0.0625; union 0.4375
        a = BBox(0, 0, 0.5, 0.5)
        b = BBox(0.25, 0.25, 0.75, 0.75)
        assert bbox_iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-12)

    def test_disjoint(self):
        assert bbox_iou(BBox(0, 0, 0.4, 0.4), BBox(0.6, 0.6, 1, 1)) == 0.0

    def test_invalid_rejected(self):
        with pytest.raises(ValueError):
            bbox_iou(BBox(0, 0, 0, 1), BBox(0, 0, 1, 1))

    def test_symmetry_and_bounds_10k_pairs(self):
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            x = np.sort(rng.uniform(0, 1, 4))
            a = BBox(x[0], x[1], x[2] + 1e-3, x[3] + 1e-3)
            if not validate_bbox(a).ok:
                continue
            y = np.sort(rng.uniform(0, 1, 4))
            b = BBox(y[0], y[1], min(y[2] + 1e-3, 1.0), min(y[3] + 1e-3, 1.0))
            if not validate_bbox(b).ok:
                continue
            ab, ba = bbox_iou(a, b), bbox_iou(b, a)
            assert ab == ba
            hi = min(a.area(), b.area()) / max(a.area(), b.area())
            assert 0.0 <= ab <= hi + 1e-12


def grid_coord():
    # coordinates already on the 3-decimal grid, so quantization is identity
    return st.integers(0, 1000).map(lambda k: k / 1000.0)


@st.composite
def valid_layouts(draw):
    n = draw(st.integers(1, 10))
    instances = []
    for _ in range(n):
        x1 = draw(st.integers(0, 997)) / 1000.0
        y1 = draw(st.integers(0, 997)) / 1000.0
        x2 = draw(st.integers(int(x1 * 1000) + 2, 1000)) / 1000.0
        y2 = draw(st.integers(int(y1 * 1000) + 2, 1000)) / 1000.0
        caption = draw(st.text(
            alphabet=st.characters(blacklist_characters="<", blacklist_categories=("Cs",)),
            min_size=1, max_size=20))
        instances.append(InstanceSpec(caption=caption, bbox=BBox(x1, y1, x2, y2)))
    return Layout(instances=tuple(instances))


class TestParser:
    def test_grammar_direct(self):
        s = "<layout><scap>red square</scap><bbox>0.100,0.100,0.400,0.400</bbox></layout>"
        lay = parse_layout_text(s)
        assert lay.active_count == 1
        inst = lay.instances[0]
        assert inst.caption == "red square"
        assert inst.bbox == BBox(0.1, 0.1, 0.4, 0.4)

    def test_empty_layout(self):
        with pytest.raises(LayoutParseError) as ei:
            parse_layout_text("<layout></layout>")
        assert ei.value.code == E_EMPTY_LAYOUT

    def test_whitespace_between_tokens(self):
        s = """<layout>
            <scap>red square</scap>
            <bbox> 0.1, 0.1, 0.4, 0.4 </bbox>
        </layout>"""
        assert parse_layout_text(s).active_count == 1

    def test_syntax_error_reports_byte_offset(self):
        s = "<layout><scap>x</scap><bbox>0.1,0.1,0.4,0.4</bbox>"
        with pytest.raises(LayoutParseError) as ei:
            parse_layout_text(s)
        assert ei.value.code == E_SYNTAX
        assert ei.value.offset == len(s.encode())

    def test_byte_offset_with_multibyte_caption(self):
        s = "<layout><scap>café</scap><bbox>0.1,0.1</bbox></layout>"
        with pytest.raises(LayoutParseError) as ei:
            parse_layout_text(s)
        assert ei.value.code == E_COORD_COUNT
        assert ei.value.offset == s.encode().index(b"0.1,0.1")

    def test_coordinate_count(self):
        s = "<layout><scap>x</scap><bbox>0.1,0.2,0.3</bbox></layout>"
        with pytest.raises(LayoutParseError) as ei:
            parse_layout_text(s)
        assert ei.value.code == E_COORD_COUNT

    def test_invalid_bbox_names_instance(self):
        s = ("<layout><scap>a</scap><bbox>0.1,0.1,0.4,0.4</bbox>"
             "<scap>b</scap><bbox>0.5,0.5,0.2,0.9</bbox></layout>")
        with pytest.raises(LayoutParseError) as ei:
            parse_layout_text(s)
        assert ei.value.code == E_BBOX
        assert "instance 1" in ei.value.reason

    def test_empty_caption(self):
        s = "<layout><scap></scap><bbox>0.1,0.1,0.4,0.4</bbox></layout>"
        with pytest.raises(LayoutParseError) as ei:
            parse_layout_text(s)
        assert ei.value.code == E_EMPTY_CAPTION

    def test_too_many_instances(self):
        item = "<scap>x</scap><bbox>0.1,0.1,0.4,0.4</bbox>"
        s = "<layout>" + item * 11 + "</layout>"
        with pytest.raises(LayoutParseError) as ei:
            parse_layout_text(s)
        assert ei.value.code == E_TOO_MANY

    def test_trailing_garbage(self):
        s = "<layout><scap>x</scap><bbox>0.1,0.1,0.4,0.4</bbox></layout>junk"
        with pytest.raises(LayoutParseError) as ei:
            parse_layout_text(s)
        assert ei.value.code == E_SYNTAX


class TestSerializer:
    def test_single_instance_canonical(self):
        lay = Layout(instances=(InstanceSpec("red square", BBox(0.1, 0.1, 0.4, 0.4)),))
        expect = "<layout><scap>red square</scap><bbox>0.100,0.100,0.400,0.400</bbox></layout>"
        assert serialize_layout(lay) == expect

    def test_quantization_rule(self):
        lay = Layout(instances=(InstanceSpec("x", BBox(0.12345, 0.2, 0.5, 0.9)),))
        assert "<bbox>0.123,0.200,0.500,0.900</bbox>" in serialize_layout(lay)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            serialize_layout(Layout())

    @settings(max_examples=200, deadline=None)
    @given(valid_layouts())
    def test_roundtrip_property(self, lay):
        back = parse_layout_text(serialize_layout(lay))
        assert back.active == lay.quantized().active

    def test_roundtrip_1000_random_layouts(self, rng):
        # deterministic bulk harness complementing the hypothesis property
        count = 0
        k = 0
        while count < 1000:
            sub = rng.split(f"layout/{k}")
            k += 1
            n = int(sub.integers(1, 11))
            inst = []
            for j in range(n):
                x1 = int(sub.integers(0, 998)) / 1000
                y1 = int(sub.integers(0, 998)) / 1000
                x2 = int(sub.integers(int(x1 * 1000) + 2, 1001)) / 1000
                y2 = int(sub.integers(int(y1 * 1000) + 2, 1001)) / 1000
                inst.append(InstanceSpec(f"shape {j}", BBox(x1, y1, x2, y2)))
            lay = Layout(instances=tuple(inst))
            assert parse_layout_text(serialize_layout(lay)).active == lay.active
            count += 1

    def test_canonical_injective_on_quantized(self, rng):
        seen = {}
        for k in range(500):
            sub = rng.split(f"inj/{k}")
            x1 = int(sub.integers(0, 500)) / 1000
            y1 = int(sub.integers(0, 500)) / 1000
            lay = Layout(instances=(InstanceSpec("a", BBox(x1, y1, x1 + 0.25, y1 + 0.25)),))
            s = serialize_layout(lay)
            if s in seen:
                assert seen[s].active == lay.active
            seen[s] = lay


class TestValidityScore:
    def test_all_valid(self):
        lay = Layout(instances=tuple(
            InstanceSpec(f"s{i}", BBox(0.1, 0.1, 0.4, 0.4)) for i in range(4)))
        assert layout_validity_score(lay) == 1.0

    def test_half_valid(self):
        lay = Layout(instances=(
            InstanceSpec("ok", BBox(0.1, 0.1, 0.4, 0.4)),
            InstanceSpec("", BBox(0.5, 0.5, 0.9, 0.9)),
        ))
        assert layout_validity_score(lay) == 0.5

    def test_empty_layout_zero(self):
        assert layout_validity_score(Layout()) == 0.0


class TestPaddingAndJson:
    def test_padded_layout(self, two_instance_layout):
        p = two_instance_layout.padded()
        assert len(p.instances) == 10
        assert p.active_count == 2
        assert all(i.is_padding for i in p.instances[2:])

    def test_too_many_for_n_max(self):
        inst = tuple(InstanceSpec(f"{i}", BBox(0.1, 0.1, 0.2, 0.2)) for i in range(5))
        with pytest.raises(ValueError):
            Layout(instances=inst, n_max=3).padded()

    def test_json_roundtrip(self, two_instance_layout):
        back = layout_from_json(layout_to_json(two_instance_layout))
        assert back.global_caption == two_instance_layout.global_caption
        assert back.active == two_instance_layout.active
