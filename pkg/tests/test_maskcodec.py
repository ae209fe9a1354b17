import math

import numpy as np
import pytest
import shapely
import shapely.geometry as sg
from hypothesis import given, settings
from hypothesis import strategies as st

from drivepercept.geometry import GridSpec, InvalidBoxError, OrientedBox, wrap_angle
from drivepercept.maskcodec import DecodeError, DetectionMask, decode_mask, encode_boxes, nms, rotated_iou


def shapely_iou(a, b):
    pa, pb = sg.Polygon(a.corners()), sg.Polygon(b.corners())
    return pa.intersection(pb).area / pa.union(pb).area


def box_st(extent=8.0):
    return st.builds(
        OrientedBox.make,
        st.floats(-extent, extent),
        st.floats(-extent, extent),
        st.floats(-math.pi, math.pi),
        st.floats(0.5, 6.0),
        st.floats(0.5, 6.0),
    )


def rigid(box, dx, dy, rot):
    c, s = math.cos(rot), math.sin(rot)
    return OrientedBox(c * box.cx - s * box.cy + dx, s * box.cx + c * box.cy + dy, wrap_angle(box.heading + rot), box.length, box.width)


class TestRotatedIou:
    def test_identity(self):
        b = OrientedBox(1.0, -2.0, 0.7, 4.5, 1.9)
        assert rotated_iou(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        assert rotated_iou(OrientedBox(0, 0, 0, 2, 2), OrientedBox(100, 0, 0, 2, 2)) == 0.0

    def test_half_overlap_closed_form(self):
        # intersection 1 x 2 = 2, union 4 + 4 - 2 = 6
        assert rotated_iou(OrientedBox(0, 0, 0, 2, 2), OrientedBox(1, 0, 0, 2, 2)) == pytest.approx(1 / 3, abs=1e-9)

    def test_half_overlap_monte_carlo(self, rng):
        a, b = OrientedBox(0, 0, 0, 2, 2), OrientedBox(1, 0, 0, 2, 2)
        pts = rng.uniform([-1, -1], [2, 1], size=(1_000_000, 2))
        ina = (np.abs(pts[:, 0]) <= 1) & (np.abs(pts[:, 1]) <= 1)
        inb = (np.abs(pts[:, 0] - 1) <= 1) & (np.abs(pts[:, 1]) <= 1)
        mc = (ina & inb).sum() / (ina | inb).sum()
        assert rotated_iou(a, b) == pytest.approx(mc, abs=3e-3)

    @settings(max_examples=200, deadline=None)
    @given(box_st(3.0), box_st(3.0))
    def test_matches_shapely(self, a, b):
        assert rotated_iou(a, b) == pytest.approx(shapely_iou(a, b), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(box_st(3.0), box_st(3.0), st.floats(-50, 50), st.floats(-50, 50), st.floats(-math.pi, math.pi))
    def test_symmetric_and_rigid_invariant(self, a, b, dx, dy, rot):
        iou = rotated_iou(a, b)
        assert iou == pytest.approx(rotated_iou(b, a), abs=1e-12)
        assert rotated_iou(rigid(a, dx, dy, rot), rigid(b, dx, dy, rot)) == pytest.approx(iou, abs=1e-9)
        assert 0.0 <= iou <= 1.0


class TestNms:
    def test_single(self):
        b = OrientedBox(0, 0, 0, 4, 2, 0.7)
        assert nms([b], 0.1) == [b]

    def test_duplicates(self):
        a, b = OrientedBox(0, 0, 0, 4, 2, 0.8), OrientedBox(0, 0, 0, 4, 2, 0.9)
        assert nms([a, b], 0.1) == [b]

    def test_three_boxes_against_pairwise_oracle(self):
        b1 = OrientedBox(0, 0, 0, 3, 2, 0.9)
        b2 = OrientedBox(1, 0, 0, 3, 2, 0.8)  # overlap 2x2 = 4, union 8 -> IoU 0.5
        b3 = OrientedBox(20, 0, 0, 3, 2, 0.7)
        boxes = [b1, b2, b3]
        iou = np.array([[shapely_iou(p, q) for q in boxes] for p in boxes])
        assert iou[0, 1] == pytest.approx(0.5)
        keep = []
        for k in np.argsort([-b.score for b in boxes]):
            if all(iou[k, j] <= 0.3 for j in keep):
                keep.append(k)
        assert nms(boxes, 0.3) == [boxes[k] for k in keep] == [b1, b3]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(box_st(6.0), min_size=0, max_size=12), st.floats(0.05, 0.9))
    def test_antichain(self, boxes, th):
        boxes = [b.with_score((k + 1) / 13) for k, b in enumerate(boxes)]
        kept = nms(boxes, th)
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert rotated_iou(kept[i], kept[j]) <= th
        # every dropped box overlaps some kept box with a higher score
        for b in boxes:
            if b not in kept:
                assert any(k.score >= b.score and rotated_iou(k, b) > th for k in kept)


class TestEncode:
    def test_empty(self, grid64):
        m = encode_boxes([], grid64)
        assert m.cls.shape == (64, 64, 1) and m.reg.shape == (64, 64, 6)
        assert not m.cls.any() and not m.reg.any()

    def test_single_cell_vertical(self, grid64):
        # a 0.4 x 0.3 box on the centre of cell (10, 20) covers only that centre
        cx, cy = grid64.cell_centers()[10, 20]
        m = encode_boxes([OrientedBox(cx, cy, math.pi / 2, 0.4, 0.3)], grid64)
        assert m.cls.sum() == 1 and m.cls[10, 20, 0] == 1
        np.testing.assert_allclose(m.reg[10, 20, :2], [0.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(m.reg[10, 20, 2:4], [0.0, 0.0], atol=1e-15)

    def test_4x2_count_by_enumeration(self, grid64):
        cx, cy = grid64.cell_centers()[30, 30]
        m = encode_boxes([OrientedBox(cx, cy, 0.0, 4.0, 2.0)], grid64)
        count = 0
        for i in range(64):
            for j in range(64):
                x = (32 - i - 0.5) * 0.5
                y = (32 - j - 0.5) * 0.5
                count += abs(x - cx) <= 2.0 and abs(y - cy) <= 1.0
        assert m.cls.sum() == count == 9 * 5

    @settings(max_examples=40, deadline=None)
    @given(st.lists(box_st(15.0), max_size=5))
    def test_cls_matches_shapely_rasterisation(self, boxes):
        grid = GridSpec(64, 0.5)
        m = encode_boxes(boxes, grid)
        centers = shapely.points(grid.cell_centers().reshape(-1, 2))
        expect = np.zeros(len(centers), dtype=bool)
        edge = np.zeros(len(centers), dtype=bool)
        for b in boxes:
            poly = sg.Polygon(b.corners())
            expect |= shapely.covers(poly, centers)
            # cells within 1e-7 of an edge may go either way
            edge |= shapely.distance(poly.exterior, centers) < 1e-7
        got = m.cls.reshape(-1) > 0
        np.testing.assert_array_equal(got[~edge], expect[~edge])

    def test_overlap_nearest_center(self, grid64):
        a = OrientedBox(0.25, 0.25, 0.0, 4.0, 2.0)
        b = OrientedBox(1.25, 0.25, 0.0, 4.0, 2.0)
        m = encode_boxes([a, b], grid64)
        r, c, _ = grid64.cell_of(np.array([[0.75, 0.25], [1.75, 0.25], [-0.25, 0.25]]))
        # (0.75, .25) is equidistant: the lower index wins
        np.testing.assert_allclose(m.reg[r, c, 2], [0.25 - 0.75, 1.25 - 1.75, 0.25 + 0.25])

    def test_invalid_box(self, grid64):
        class Bad:
            cx = cy = heading = 0.0
            length, width = 1.0, 0.0

        with pytest.raises(InvalidBoxError):
            encode_boxes([Bad()], grid64)


class TestDecode:
    def test_all_zero(self, grid64):
        assert decode_mask(encode_boxes([], grid64)) == []

    def test_round_trip_single(self, grid64):
        b = OrientedBox(3.3, -5.1, 0.7, 4.5, 1.9)
        out = decode_mask(encode_boxes([b], grid64), 0.5, 0.1)
        assert len(out) == 1
        d = out[0]
        assert math.hypot(d.cx - b.cx, d.cy - b.cy) < 0.5
        assert abs(wrap_angle(d.heading - b.heading)) < 1e-6
        assert d.length == pytest.approx(b.length, abs=1e-9) and d.width == pytest.approx(b.width, abs=1e-9)

    def test_duplicate_cells_suppressed(self, grid64):
        cls = np.zeros((64, 64, 1))
        reg = np.zeros((64, 64, 6))
        centers = grid64.cell_centers()
        for r, c in [(5, 5), (5, 6)]:
            cls[r, c] = 0.9
            reg[r, c] = [1, 0, 2.0 - centers[r, c, 0], 1.0 - centers[r, c, 1], math.log(2), math.log(4)]
        assert len(decode_mask(DetectionMask(cls, reg, grid64))) == 1

    def test_non_finite_names_cell(self, grid64):
        cls = np.zeros((64, 64, 1))
        reg = np.zeros((64, 64, 6))
        cls[7, 9] = 0.8
        reg[7, 9, 3] = np.nan
        with pytest.raises(DecodeError, match=r"\(7, 9\)"):
            decode_mask(DetectionMask(cls, reg, grid64))

    def test_sorted_and_threshold(self, grid64):
        boxes = [OrientedBox(-8, -8, 0, 4, 2), OrientedBox(8, 8, 1.0, 4, 2)]
        m = encode_boxes(boxes, grid64)
        cls = m.cls * 0.6
        r, c, _ = grid64.cell_of(np.array([[8.25, 8.25]]))
        cls[r, c] = 0.95
        out = decode_mask(DetectionMask(cls, m.reg, grid64), 0.5, 0.1)
        assert [round(b.score, 2) for b in out] == [0.95, 0.6]
        assert decode_mask(DetectionMask(cls, m.reg, grid64), 0.99) == []
