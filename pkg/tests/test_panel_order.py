import numpy as np
import pytest

from conftest import scatter_boxes
from mangagen.annotations import BBox
from mangagen.errors import DataError
from mangagen.panel_order import find_cut, order_panels
from mangagen.synthetic import synth_page


def _grid_boxes(rows: int, cols: int, page: int = 120, gap: int = 4) -> list[BBox]:
    """Row-major grid of boxes with `gap` pixels between cells."""
    cell_w = (page - (cols - 1) * gap) // cols
    cell_h = (page - (rows - 1) * gap) // rows
    boxes = []
    for r in range(rows):
        for c in range(cols):
            x = c * (cell_w + gap)
            y = r * (cell_h + gap)
            boxes.append(BBox(x, y, x + cell_w, y + cell_h))
    return boxes


class TestOrderPanels:
    def test_two_by_two_grid_reads_right_to_left(self):
        boxes = [
            BBox(0, 0, 50, 50),     # TL
            BBox(50, 0, 100, 50),   # TR
            BBox(0, 50, 50, 100),   # BL
            BBox(50, 50, 100, 100), # BR
        ]
        result = order_panels(boxes, (100, 100))
        assert result.permutation == (1, 0, 3, 2)

    def test_single_box(self):
        assert order_panels([BBox(5, 5, 50, 50)], (100, 100)).permutation == (0,)

    def test_three_stacked_rows_top_to_bottom(self):
        boxes = [BBox(0, 0, 100, 30), BBox(0, 35, 100, 65), BBox(0, 70, 100, 100)]
        assert order_panels(boxes, (100, 100)).permutation == (0, 1, 2)

    def test_empty_list_rejected(self):
        with pytest.raises(DataError):
            order_panels([], (100, 100))

    def test_box_outside_page_rejected(self):
        with pytest.raises(DataError):
            order_panels([BBox(0, 0, 150, 50)], (100, 100))

    def test_duplicate_boxes_keep_input_order(self):
        box = BBox(10, 10, 60, 60)
        result = order_panels([box, box], (100, 100))
        assert result.permutation == (0, 1)

    def test_cut_tree_leaves_enumerate_inputs(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            page = synth_page(rng, "p", width=96, height=128, max_panels=6)
            boxes = [p.box for p in page.annotation.panels]
            result = order_panels(boxes, (96, 128))
            assert sorted(result.cut_tree.leaf_indices()) == list(range(len(boxes)))
            assert result.cut_tree.to_dict()  # JSON-able structure exists

    @pytest.mark.parametrize("rows", [1, 2, 3, 4])
    @pytest.mark.parametrize("cols", [1, 2, 3, 4])
    @pytest.mark.parametrize("gap", [0, 4])
    def test_all_grids_row_major_right_to_left(self, rows, cols, gap):
        boxes = _grid_boxes(rows, cols, page=120, gap=gap)
        expected = []
        for r in range(rows):
            expected.extend(r * cols + c for c in reversed(range(cols)))
        result = order_panels(boxes, (120, 120))
        assert list(result.permutation) == expected

    def test_permutation_on_random_layouts(self):
        rng = np.random.default_rng(11)
        for i in range(100):
            if i % 2 == 0:
                page = synth_page(rng, "p", width=96, height=128, max_panels=6)
                boxes = [p.box for p in page.annotation.panels]
                size = (96, 128)
            else:
                boxes = scatter_boxes(rng, 200, 160, int(rng.integers(1, 7)))
                size = (200, 160)
            perm = order_panels(boxes, size).permutation
            assert sorted(perm) == list(range(len(boxes)))

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            boxes = scatter_boxes(rng, 150, 150, int(rng.integers(2, 6)))
            dx, dy = int(rng.integers(1, 40)), int(rng.integers(1, 40))
            shifted = [b.shifted(dx, dy) for b in boxes]
            before = order_panels(boxes, (150, 150), gap_tolerance=2.0).permutation
            after = order_panels(shifted, (150 + dx, 150 + dy), gap_tolerance=2.0).permutation
            assert before == after

    def test_input_order_does_not_change_spatial_order(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            boxes = scatter_boxes(rng, 150, 150, int(rng.integers(2, 6)))
            perm = order_panels(boxes, (150, 150)).permutation
            shuffle = rng.permutation(len(boxes))
            shuffled = [boxes[i] for i in shuffle]
            perm2 = order_panels(shuffled, (150, 150)).permutation
            # Same spatial reading sequence regardless of input order.
            assert [boxes[i] for i in perm] == [shuffled[i] for i in perm2]

    def test_overlapping_panels_fall_back_to_center_sort(self):
        boxes = [BBox(20, 30, 80, 90), BBox(10, 10, 70, 70), BBox(30, 5, 95, 60)]
        result = order_panels(boxes, (100, 100))
        # Fallback sorts by (center-y asc, center-x desc).
        centers = [(boxes[i].center[1], -boxes[i].center[0]) for i in result.permutation]
        assert centers == sorted(centers)


class TestFindCut:
    def test_gap_midpoint(self):
        boxes = [BBox(0, 0, 100, 45), BBox(0, 55, 100, 100)]
        c = find_cut(boxes, BBox(0, 0, 100, 100), "horizontal", 2.0)
        assert c == 50.0

    def test_deep_overlap_has_no_cut(self):
        boxes = [BBox(0, 0, 100, 60), BBox(0, 30, 100, 100)]
        assert find_cut(boxes, BBox(0, 0, 100, 100), "horizontal", 2.0) is None

    def test_single_box_has_no_cut(self):
        assert find_cut([BBox(0, 0, 100, 40)], BBox(0, 0, 100, 100), "horizontal", 2.0) is None

    def test_touching_boxes_cut_at_shared_edge(self):
        boxes = [BBox(0, 0, 100, 50), BBox(0, 50, 100, 100)]
        assert find_cut(boxes, BBox(0, 0, 100, 100), "horizontal", 2.0) == 50.0

    def test_small_overlap_within_tolerance(self):
        boxes = [BBox(0, 0, 100, 51), BBox(0, 49, 100, 100)]
        c = find_cut(boxes, BBox(0, 0, 100, 100), "horizontal", 2.0)
        assert c is not None and 49.0 <= c <= 51.0

    def test_vertical_axis(self):
        boxes = [BBox(0, 0, 40, 100), BBox(60, 0, 100, 100)]
        assert find_cut(boxes, BBox(0, 0, 100, 100), "vertical", 2.0) == 50.0
