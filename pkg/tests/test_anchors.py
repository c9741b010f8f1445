import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdssd.anchors import (AnchorSet, Box, FeatureMapSpec, anchor_set_from_dict, clip_boxes,
                           compute_aspect_ratio_bins, expected_anchor_count, generate_default_boxes,
                           iou, iou_matrix)


def raster_iou(a: Box, b: Box, res: int = 1000) -> float:
    grid = (np.arange(res) + 0.5) / res

    def mask(box):
        x0, y0, x1, y1 = box.corners()
        return ((grid >= y0) & (grid < y1))[:, None] & ((grid >= x0) & (grid < x1))[None, :]

    ma, mb = mask(a), mask(b)
    return (ma & mb).sum() / (ma | mb).sum()


def scalar_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw, ih = max(0.0, min(ax1, bx1) - max(ax0, bx0)), max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def random_boxes(rng, n):
    return np.column_stack([rng.uniform(0, 1, (n, 2)), rng.uniform(0.01, 0.6, (n, 2))])


box_st = st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 1), st.floats(0.01, 1))


class TestBox:
    def test_corners_roundtrip(self):
        b = Box(0.3, 0.4, 0.2, 0.1)
        c = Box.from_corners(*b.corners())
        np.testing.assert_allclose(c, b, atol=1e-15)

    def test_clip_only_outside(self):
        inside = Box(0.5, 0.5, 0.2, 0.2)
        assert inside.clipped() is inside
        out = Box(0.9, 0.5, 0.4, 0.2).clipped()
        np.testing.assert_allclose(out.corners(), (0.7, 0.4, 1.0, 0.6), atol=1e-12)

    def test_clip_boxes_keeps_inside_rows_exact(self):
        b = np.array([[0.1 + 1e-17, 0.3, 0.1, 0.1], [0.0, 0.5, 0.5, 0.5]])
        c = clip_boxes(b)
        assert np.array_equal(c[0], b[0])
        np.testing.assert_allclose(c[1], [0.125, 0.5, 0.25, 0.5])


class TestIoU:
    def test_identical(self):
        assert iou(Box(0.5, 0.5, 0.3, 0.2), Box(0.5, 0.5, 0.3, 0.2)) == pytest.approx(1.0)

    def test_disjoint(self):
        assert iou(Box(0.2, 0.2, 0.1, 0.1), Box(0.8, 0.8, 0.1, 0.1)) == 0.0

    def test_one_seventh(self):
        a, b = Box(0.25, 0.25, 0.5, 0.5), Box(0.5, 0.5, 0.5, 0.5)
        assert raster_iou(a, b) == pytest.approx(1 / 7, abs=1e-3)
        assert iou(a, b) == pytest.approx(1 / 7, abs=1e-12)

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(0)
        a, b = random_boxes(rng, 30), random_boxes(rng, 20)
        m = iou_matrix(a, b)
        for i in range(30):
            for j in range(20):
                assert abs(m[i, j] - scalar_iou(a[i], b[j])) < 1e-12

    @given(box_st, box_st)
    @settings(max_examples=200, deadline=None)
    def test_properties(self, a, b):
        ab, ba = iou(Box(*a), Box(*b)), iou(Box(*b), Box(*a))
        assert ab == pytest.approx(ba, abs=1e-12)
        assert 0.0 <= ab <= 1.0 + 1e-12
        assert iou(Box(*a), Box(*a)) == pytest.approx(1.0)


class TestAspectRatioBins:
    def test_two_bins(self):
        boxes = [Box(0.5, 0.5, 0.1, 0.2), Box(0.5, 0.5, 0.1, 0.2), Box(0.5, 0.5, 0.2, 0.2),
                 Box(0.5, 0.5, 0.4, 0.2)]
        assert compute_aspect_ratio_bins(boxes, 2) == pytest.approx([0.5, 1.5])

    def test_constant(self):
        boxes = [Box(0.5, 0.5, 0.3, 0.3)] * 7
        assert compute_aspect_ratio_bins(boxes, 4) == pytest.approx([1.0] * 4)

    def test_uniform_quantile_means(self):
        rng = np.random.default_rng(3)
        r = rng.uniform(0.5, 2.0, 1000)
        boxes = np.column_stack([np.full(1000, 0.5), np.full(1000, 0.5), 0.2 * r, np.full(1000, 0.2)])
        got = compute_aspect_ratio_bins(boxes, 4)
        # direct oracle: sort, cut into four equal counts, average
        s = np.sort(r)
        oracle = [s[i * 250:(i + 1) * 250].mean() for i in range(4)]
        np.testing.assert_allclose(got, oracle, rtol=1e-12)
        np.testing.assert_allclose(got, [0.6875, 1.0625, 1.4375, 1.8125], atol=0.05)

    def test_errors(self):
        with pytest.raises(ValueError):
            compute_aspect_ratio_bins([Box(0.5, 0.5, 0.1, 0.1)], 2)
        with pytest.raises(ValueError):
            compute_aspect_ratio_bins([Box(0.5, 0.5, 0.1, 0.0)], 1)

    @given(st.lists(st.floats(0.1, 10), min_size=1, max_size=60), st.integers(1, 6))
    @settings(max_examples=100, deadline=None)
    def test_sorted_and_bounded(self, ratios, B):
        if B > len(ratios):
            return
        boxes = np.column_stack([np.full(len(ratios), 0.5), np.full(len(ratios), 0.5),
                                 np.array(ratios) * 0.05, np.full(len(ratios), 0.05)])
        means = compute_aspect_ratio_bins(boxes, B)
        assert means == sorted(means)
        chunks = np.array_split(np.sort(boxes[:, 2] / boxes[:, 3]), B)
        for m, c in zip(means, chunks):
            assert c.min() - 1e-12 <= m <= c.max() + 1e-12


class TestDefaultBoxes:
    def test_full_image_box(self):
        a = generate_default_boxes([FeatureMapSpec(1, 1, 1, 1, 1.0)], [1.0])
        np.testing.assert_allclose(a.boxes, [[0.5, 0.5, 1.0, 1.0]])

    def test_count_126(self):
        layout = [FeatureMapSpec(i, s, s, 6, 0.2 * i) for i, s in ((1, 4), (2, 2), (3, 1))]
        a = generate_default_boxes(layout, [0.5, 0.75, 1.0, 1.5, 2.0, 3.0])
        assert len(a) == 126 == expected_anchor_count(layout)

    def test_ratio_four(self):
        a = generate_default_boxes([FeatureMapSpec(1, 1, 1, 1, 0.5)], [4.0], clip=False)
        np.testing.assert_allclose(a.boxes[0, 2:], [1.0, 0.25])

    def test_order_layer_row_col_ratio(self):
        layout = [FeatureMapSpec(1, 2, 3, 2, 0.2), FeatureMapSpec(2, 1, 1, 2, 0.4)]
        a = generate_default_boxes(layout, [1.0, 2.0], clip=False)
        b = a.boxes
        # first layer: row 0 col 0 ratio 0, ratio 1, then row 0 col 1
        np.testing.assert_allclose(b[0, :2], [1 / 6, 0.25])
        np.testing.assert_allclose(b[1, :2], [1 / 6, 0.25])
        assert b[1, 2] > b[0, 2]
        np.testing.assert_allclose(b[2, :2], [0.5, 0.25])
        np.testing.assert_allclose(b[6, :2], [1 / 6, 0.75])
        assert a.layer_slice(1) == slice(12, 14)

    def test_box_pool_grid(self):
        spec = FeatureMapSpec(3, 10, 10, 2, 0.3, box_pool_k=3)
        assert spec.grid == (4, 4)
        a = generate_default_boxes([spec], [1.0, 2.0], clip=False)
        assert len(a) == 32
        np.testing.assert_allclose(a.boxes[0, :2], [0.125, 0.125])

    def test_literal_rule(self):
        a = generate_default_boxes([FeatureMapSpec(1, 4, 4, 1, 0.25)], [2.0], shape_rule="literal",
                                   clip=False)
        np.testing.assert_allclose(a.boxes[0, 2:], [0.5, 0.5])

    def test_clipped_and_immutable(self):
        a = generate_default_boxes([FeatureMapSpec(1, 3, 3, 2, 0.9)], [1.0, 3.0])
        x0 = a.boxes[:, 0] - a.boxes[:, 2] / 2
        x1 = a.boxes[:, 0] + a.boxes[:, 2] / 2
        assert x0.min() >= -1e-12 and x1.max() <= 1 + 1e-12
        with pytest.raises(ValueError):
            a.boxes[0, 0] = 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            generate_default_boxes([], [1.0])
        with pytest.raises(ValueError):
            generate_default_boxes([FeatureMapSpec(1, 2, 2, 2, 0.3)], [1.0])
        with pytest.raises(ValueError):
            generate_default_boxes([FeatureMapSpec(1, 2, 2, 1, 0.5), FeatureMapSpec(2, 1, 1, 1, 0.3)], [1.0])
        with pytest.raises(ValueError):
            FeatureMapSpec(1, 0, 2, 1, 0.5)
        with pytest.raises(ValueError):
            FeatureMapSpec(1, 2, 2, 1, 0.5, box_pool_k=4)

    @given(st.lists(st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(1, 3)),
                    min_size=1, max_size=4),
           st.lists(st.floats(0.25, 4.0), min_size=1, max_size=4))
    @settings(max_examples=60, deadline=None)
    def test_count_closed_form(self, dims, ratios):
        layout = [FeatureMapSpec(i + 1, m, n, len(ratios), 0.1 + 0.2 * i, k)
                  for i, (m, n, k) in enumerate(dims)]
        a = generate_default_boxes(layout, ratios)
        closed = sum(-(-m // k) * -(-n // k) * len(ratios) for m, n, k in dims)
        assert len(a) == closed
        b = generate_default_boxes(layout, ratios)
        assert np.array_equal(a.boxes, b.boxes)

    def test_dict_roundtrip(self):
        a = generate_default_boxes([FeatureMapSpec(2, 6, 6, 3, 0.2, 2), FeatureMapSpec(3, 3, 3, 3, 0.4)],
                                   [0.6, 1.0, 1.7])
        b = anchor_set_from_dict(a.to_dict())
        assert isinstance(b, AnchorSet)
        assert np.array_equal(a.boxes, b.boxes) and a.layout == b.layout
