import numpy as np
import pytest

from ocrengine.detection import (
    DetParams,
    KernelStack,
    connected_components,
    db_postprocess,
    extract_contour,
    pan_aggregate,
    pan_postprocess,
    pse_expand,
    psenet_postprocess,
    region_score,
)
from ocrengine.errors import OcrEngineError, ShapeError
from ocrengine.geometry import Polygon, polygon_iou

from oracles import fifo_bfs_expand, flood_fill_labels, nearest_mean_aggregate


def checkerboard(n: int) -> np.ndarray:
    grid = np.zeros((n, n), dtype=int)
    grid[(np.indices((n, n)).sum(axis=0) % 2) == 0] = 1
    return grid


class TestConnectedComponents:
    def test_all_zero(self):
        labels, count = connected_components(np.zeros((4, 4)), 4)
        assert count == 0 and not labels.any()

    def test_single_pixel(self):
        grid = np.zeros((5, 5))
        grid[2, 3] = 1
        labels, count = connected_components(grid, 8)
        assert count == 1 and labels[2, 3] == 1

    def test_checkerboard(self):
        grid = checkerboard(3)
        _, c4 = connected_components(grid, 4)
        _, c8 = connected_components(grid, 8)
        assert (c4, c8) == (5, 1)

    def test_raster_order_labels(self):
        grid = np.array([[1, 0, 1], [0, 0, 0], [1, 0, 1]])
        labels, count = connected_components(grid, 4)
        assert count == 4
        assert labels[0, 0] == 1 and labels[0, 2] == 2 and labels[2, 0] == 3 and labels[2, 2] == 4

    @pytest.mark.parametrize("connectivity", [4, 8])
    def test_matches_flood_fill_oracle(self, rng, connectivity):
        for _ in range(30):
            grid = (rng.random((24, 24)) < 0.45).astype(int)
            got, n_got = connected_components(grid, connectivity)
            want, n_want = flood_fill_labels(grid, connectivity)
            assert n_got == n_want
            assert np.array_equal(got, want)

    def test_bad_connectivity(self):
        with pytest.raises(ValueError):
            connected_components(np.ones((2, 2)), 6)


class TestExtractContour:
    def test_solid_block(self):
        grid = np.zeros((5, 5), dtype=int)
        grid[1:4, 1:4] = 1
        poly = extract_contour(grid, 1)
        assert len(poly) == 4
        assert poly.area == pytest.approx(9.0)
        assert sorted(map(tuple, poly.vertices.tolist())) == [
            (0.5, 0.5), (0.5, 3.5), (3.5, 0.5), (3.5, 3.5),
        ]

    def test_single_pixel_unit_square(self):
        grid = np.zeros((3, 3), dtype=int)
        grid[1, 1] = 1
        poly = extract_contour(grid, 1)
        assert poly.area == pytest.approx(1.0)
        assert sorted(map(tuple, poly.vertices.tolist())) == [
            (0.5, 0.5), (0.5, 1.5), (1.5, 0.5), (1.5, 1.5),
        ]

    def test_l_shape_six_vertices(self):
        grid = np.zeros((4, 4), dtype=int)
        grid[0:3, 0] = 1
        grid[2, 0:3] = 1
        poly = extract_contour(grid, 1)
        assert len(poly) == 6
        assert poly.area == pytest.approx(5.0)

    def test_every_pixel_center_inside(self, rng):
        for _ in range(20):
            grid = (rng.random((16, 16)) < 0.4).astype(int)
            labels, count = connected_components(grid, 4)
            for label in range(1, count + 1):
                poly = extract_contour(labels, label)
                centers = np.argwhere(labels == label)[:, ::-1].astype(float)  # (x, y)
                assert poly.contains_points(centers).all()

    def test_missing_label(self):
        with pytest.raises(OcrEngineError, match="not present"):
            extract_contour(np.zeros((3, 3), dtype=int), 7)


class TestKernelStack:
    def test_enforces_nesting(self):
        big = np.zeros((4, 4), dtype=int)
        big[1:3, 1:3] = 1
        small = np.ones((4, 4), dtype=int)  # 'smaller' kernel sticking out
        stack = KernelStack([small, big])
        assert np.array_equal(stack.kernels[0], stack.kernels[0] & stack.kernels[1])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            KernelStack([np.ones((3, 3)), np.ones((4, 4))])

    def test_empty(self):
        with pytest.raises(ShapeError):
            KernelStack([])


class TestPseExpand:
    def test_single_kernel_equals_components(self, rng):
        grid = (rng.random((20, 20)) < 0.4).astype(int)
        stack = KernelStack([grid])
        labels = pse_expand(stack, 1)
        want, _ = connected_components(grid, 4)
        assert np.array_equal(labels, want)

    def test_strip_race_splits_4_3(self):
        seeds = np.zeros((1, 7), dtype=int)
        seeds[0, 0] = seeds[0, 6] = 1
        full = np.ones((1, 7), dtype=int)
        labels = pse_expand(KernelStack([seeds, full]), 1)
        assert labels.tolist() == [[1, 1, 1, 1, 2, 2, 2]]

    def test_expansion_never_merges_seeds(self):
        seeds = np.zeros((5, 9), dtype=int)
        seeds[2, 1] = seeds[2, 7] = 1
        big = np.zeros((5, 9), dtype=int)
        big[1:4, :] = 1  # one blob spanning both seeds
        labels = pse_expand(KernelStack([seeds, big]), 1)
        assert labels.max() == 2
        assert labels[2, 1] == 1 and labels[2, 7] == 2

    def test_min_kernel_area_drops_seeds(self):
        seeds = np.zeros((6, 6), dtype=int)
        seeds[0, 0] = 1  # area 1: dropped
        seeds[3:5, 3:5] = 1  # area 4: kept
        labels = pse_expand(KernelStack([seeds]), min_kernel_area=4)
        assert labels.max() == 1
        assert labels[0, 0] == 0 and labels[3, 3] == 1

    def test_matches_fifo_bfs_oracle(self, rng):
        for _ in range(40):
            base = rng.random((32, 32))
            kernels = [(base > t).astype(int) for t in (0.7, 0.55, 0.4)]
            stack = KernelStack(list(kernels))
            got = pse_expand(stack, 2)
            want = fifo_bfs_expand(kernels, 2)
            assert np.array_equal(got, want)

    def test_seed_pixels_never_relabeled(self, rng):
        base = rng.random((24, 24))
        kernels = [(base > t).astype(int) for t in (0.7, 0.4)]
        stack = KernelStack(list(kernels))
        labels = pse_expand(stack, 1)
        seed_labels, _ = connected_components(stack.kernels[0], 4)
        mask = seed_labels > 0
        assert np.array_equal(labels[mask], seed_labels[mask])

    def test_labels_confined_to_largest_kernel(self, rng):
        base = rng.random((24, 24))
        kernels = [(base > t).astype(int) for t in (0.7, 0.4)]
        labels = pse_expand(KernelStack(list(kernels)), 1)
        assert not labels[kernels[1] == 0].any()

    def test_label_count_equals_surviving_seeds(self, rng):
        for _ in range(20):
            base = rng.random((24, 24))
            kernels = [(base > t).astype(int) for t in (0.65, 0.4)]
            stack = KernelStack(list(kernels))
            min_area = int(rng.integers(1, 5))
            seed_labels, seed_count = connected_components(stack.kernels[0], 4)
            sizes = np.bincount(seed_labels.ravel(), minlength=seed_count + 1)
            survivors = int((sizes[1:] >= min_area).sum())
            labels = pse_expand(stack, min_area)
            assert labels.max(initial=0) == survivors
            assert len(np.unique(labels[labels > 0])) == survivors


class TestPanAggregate:
    def test_uniform_similarity_joins_single_kernel(self):
        text = np.ones((6, 6), dtype=int)
        kernel = np.zeros((6, 6), dtype=int)
        kernel[2:4, 2:4] = 1
        sim = np.ones((6, 6, 3))
        labels = pan_aggregate(text, kernel, sim, dist_thresh=0.5)
        assert (labels == 1).all()

    def test_zero_threshold_labels_only_kernels(self):
        text = np.ones((4, 4), dtype=int)
        kernel = np.zeros((4, 4), dtype=int)
        kernel[1, 1] = 1
        sim = np.ones((4, 4, 2))
        labels = pan_aggregate(text, kernel, sim, dist_thresh=0.0)
        assert labels.sum() == 1 and labels[1, 1] == 1

    def test_orthogonal_vectors_partition(self):
        text = np.ones((4, 8), dtype=int)
        kernel = np.zeros((4, 8), dtype=int)
        kernel[1:3, 1] = 1
        kernel[1:3, 6] = 1
        sim = np.zeros((4, 8, 2))
        sim[:, :4, 0] = 1.0  # left half carries e0
        sim[:, 4:, 1] = 1.0  # right half carries e1
        labels = pan_aggregate(text, kernel, sim, dist_thresh=0.5)
        assert (labels[:, :4] == 1).all() and (labels[:, 4:] == 2).all()

    def test_matches_exhaustive_oracle(self, rng):
        for _ in range(25):
            h, w, d = 12, 16, 3
            text = (rng.random((h, w)) < 0.6).astype(int)
            kernel = (text & (rng.random((h, w)) < 0.3)).astype(int)
            sim = rng.normal(size=(h, w, d))
            thresh = float(rng.uniform(0.5, 3.0))
            got = pan_aggregate(text, kernel, sim, thresh)
            want = nearest_mean_aggregate(text, kernel, sim, thresh)
            assert np.array_equal(got, want)

    def test_no_assignment_at_or_above_threshold(self, rng):
        for _ in range(10):
            h, w, d = 10, 10, 2
            text = (rng.random((h, w)) < 0.7).astype(int)
            kernel = (text & (rng.random((h, w)) < 0.3)).astype(int)
            sim = rng.normal(size=(h, w, d))
            thresh = float(rng.uniform(0.3, 1.5))
            labels = pan_aggregate(text, kernel, sim, thresh)
            klabels, count = connected_components(kernel, 4)
            if count == 0:
                assert not labels.any()
                continue
            means = np.stack([sim[klabels == k].mean(axis=0) for k in range(1, count + 1)])
            for r, c in np.argwhere(text & (klabels == 0)):
                best = np.min(np.linalg.norm(sim[r, c] - means, axis=1))
                if best >= thresh:
                    assert labels[r, c] == 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            pan_aggregate(np.ones((3, 3)), np.ones((4, 4)), np.ones((3, 3, 2)), 1.0)


def two_rect_prob(h=40, w=48):
    prob = np.zeros((h, w))
    prob[6:14, 4:20] = 0.9
    prob[22:34, 18:42] = 0.9
    return prob


class TestDbPostprocess:
    def test_two_rectangles_recovered(self):
        prob = two_rect_prob()
        params = DetParams(bin_thresh=0.3, box_score_thresh=0.5, unclip_ratio=1.5)
        dets = db_postprocess(prob, params)
        assert len(dets) == 2
        for det in dets:
            assert det.score == pytest.approx(0.9)
        # Analytic unclip of the first rectangle: contour (3.5,5.5)-(19.5,13.5),
        # area 128, perimeter 48, d = 128*1.5/48 = 4.
        expected = Polygon([(-0.5, 1.5), (23.5, 1.5), (23.5, 17.5), (-0.5, 17.5)])
        best = max(dets, key=lambda d: polygon_iou(d.polygon, expected))
        assert polygon_iou(best.polygon, expected) >= 0.9

    def test_all_zero_map(self):
        assert db_postprocess(np.zeros((16, 16)), DetParams()) == []

    def test_uniform_map_covers_image(self):
        dets = db_postprocess(np.ones((20, 30)), DetParams())
        assert len(dets) == 1
        assert dets[0].score == pytest.approx(1.0)
        assert dets[0].polygon.area == pytest.approx(20 * 30)

    def test_score_filter(self):
        prob = np.zeros((16, 16))
        prob[4:8, 4:8] = 0.4  # above bin_thresh, below box_score_thresh
        assert db_postprocess(prob, DetParams()) == []

    def test_max_candidates_cap_and_ordering(self):
        prob = np.zeros((8, 32))
        for i, p in enumerate((0.6, 0.95, 0.8)):
            prob[2:5, 2 + i * 10 : 8 + i * 10] = p
        dets = db_postprocess(prob, DetParams(max_candidates=2))
        assert len(dets) == 2
        assert [round(d.score, 2) for d in dets] == [0.95, 0.8]

    def test_deterministic_reruns(self, rng):
        prob = np.clip(rng.random((32, 32)), 0, 1)
        params = DetParams(box_score_thresh=0.5)
        a = db_postprocess(prob, params)
        b = db_postprocess(prob, params)
        assert len(a) == len(b)
        for da, db_ in zip(a, b):
            assert da.score == db_.score
            assert np.array_equal(da.polygon.vertices, db_.polygon.vertices)

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            db_postprocess(np.full((4, 4), 1.5), DetParams())


class TestPsenetPostprocess:
    def test_matches_db_when_unclip_vanishes(self, rng):
        prob = np.zeros((24, 24))
        prob[4:12, 4:16] = 0.9
        prob[16:22, 10:20] = 0.8
        binary = (prob > 0.3).astype(int)
        params_pse = DetParams(box_score_thresh=0.5)
        params_db = DetParams(box_score_thresh=0.5, unclip_ratio=1e-12)
        got = psenet_postprocess(KernelStack([binary]), prob, params_pse)
        want = db_postprocess(prob, params_db)
        assert len(got) == len(want)
        for g, w in zip(got, want):
            assert g.score == pytest.approx(w.score)
            assert polygon_iou(g.polygon, w.polygon) > 0.999

    def test_empty_kernels(self):
        stack = KernelStack([np.zeros((8, 8))])
        assert psenet_postprocess(stack, np.zeros((8, 8)), DetParams()) == []

    def test_touching_lines_split_by_smallest_kernel(self):
        # Two text lines merged in the full map but separated in the seeds.
        prob = np.zeros((10, 12))
        prob[2:5, 1:11] = 0.9
        prob[5:8, 1:11] = 0.9  # adjacent rows: one blob in the full map
        seeds = np.zeros((10, 12), dtype=int)
        seeds[3, 2:10] = 1
        seeds[6, 2:10] = 1
        full = (prob > 0.3).astype(int)
        dets = psenet_postprocess(KernelStack([seeds, full]), prob, DetParams(min_kernel_area=2))
        assert len(dets) == 2

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psenet_postprocess(KernelStack([np.ones((4, 4))]), np.zeros((5, 5)), DetParams())


class TestPanPostprocess:
    def test_single_kernel_full_text(self):
        prob = np.zeros((8, 8))
        prob[2:6, 2:6] = 0.9
        text = prob > 0.3
        kernel = np.zeros((8, 8), dtype=int)
        kernel[3:5, 3:5] = 1
        sim = np.ones((8, 8, 2))
        dets = pan_postprocess(text, kernel, sim, prob, DetParams())
        assert len(dets) == 1
        assert dets[0].polygon.area == pytest.approx(16.0)  # 4x4 block of unit squares

    def test_empty_maps(self):
        z = np.zeros((6, 6))
        assert pan_postprocess(z > 0, z > 0, np.zeros((6, 6, 2)), z, DetParams()) == []

    def test_two_instances_by_similarity(self):
        prob = np.zeros((4, 8))
        prob[:, :] = 0.0
        prob[1:3, 0:4] = 0.9
        prob[1:3, 4:8] = 0.9
        text = prob > 0.3
        kernel = np.zeros((4, 8), dtype=int)
        kernel[1:3, 1] = 1
        kernel[1:3, 6] = 1
        sim = np.zeros((4, 8, 2))
        sim[:, :4, 0] = 1.0
        sim[:, 4:, 1] = 1.0
        dets = pan_postprocess(text, kernel, sim, prob, DetParams(pan_dist_thresh=0.5))
        assert len(dets) == 2


class TestRegionScore:
    def test_uses_pixels_inside_contour(self):
        prob = np.zeros((6, 6))
        prob[2:4, 2:4] = 0.8
        grid = (prob > 0).astype(int)
        poly = extract_contour(grid, 1)
        assert region_score(prob, poly) == pytest.approx(0.8)
