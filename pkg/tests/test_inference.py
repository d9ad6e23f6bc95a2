import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pleomorph.errors import InvalidConfigError, InvalidInputError, NoTumorFoundError
from pleomorph.inference import (
    BlockAccumulator,
    CellDetection,
    ScoreMap,
    TileGrid,
    aggregate_roi_score,
    aggregate_slide_score,
    bilinear_resize,
    build_density_map,
    grad_cam_map,
    mask_tumor,
    plan_tiles,
    render_heatmap,
    score_color,
    score_image,
    score_tiles,
    split_regions,
)
from pleomorph.regressor import build_regression_net
from pleomorph.synthdata import Region, SyntheticSlideSpec, blob_polygon, oracle_detect, render

from oracles import brute_force_means, darkness


def defined_map(values, block_size=8):
    values = np.asarray(values, dtype=float)
    grid = TileGrid(64, 56, block_size, values.shape[1] * block_size, values.shape[0] * block_size)
    return ScoreMap(values, (~np.isnan(values)).astype(int), grid)


class TestTileGrid:
    def test_stride_must_be_positive(self):
        with pytest.raises(InvalidConfigError):
            TileGrid(64, 64, 8, 128, 128)

    def test_block_divides_tile_and_stride(self):
        with pytest.raises(InvalidConfigError):
            TileGrid(64, 60, 8, 128, 128)

    def test_default_geometries(self):
        for grid in (TileGrid.desk(1, 1), TileGrid.full_scale(1, 1)):
            assert grid.tile_size // grid.stride == 8 and grid.stride == grid.block_size


class TestPlanTiles:
    def test_single_tile(self):
        assert plan_tiles(TileGrid.full_scale(512, 512)) == [(0, 0)]

    def test_strip(self):
        assert plan_tiles(TileGrid.full_scale(1024, 512)) == [(x, 0) for x in range(0, 513, 64)]

    def test_interior_block_count(self):
        grid = TileGrid.full_scale(1536, 1536)
        acc = score_tiles(lambda t: np.zeros(len(t)), np.zeros((1536, 1536, 3), np.float32), grid)
        assert acc.counts[12, 12] == 64

    def test_edge_tile_added(self):
        assert [x for x, y in plan_tiles(TileGrid.desk(100, 64))] == [0, 8, 16, 24, 32, 36]

    def test_too_small(self):
        with pytest.raises(InvalidInputError):
            plan_tiles(TileGrid.desk(63, 100))

    @given(st.integers(64, 200), st.integers(64, 200))
    def test_every_block_covered(self, w, h):
        grid = TileGrid.desk(w, h)
        acc = BlockAccumulator.empty(grid)
        for origin in plan_tiles(grid):
            acc.add_tile(grid, origin, 1.0)
        assert (acc.counts >= 1).all()


class TestScoreTiles:
    def test_constant_scorer(self):
        acc = score_tiles(lambda t: np.full(len(t), 2.25), np.zeros((100, 90, 3), np.float32), TileGrid.desk(90, 100))
        np.testing.assert_array_equal(acc.means(), 2.25)

    def test_single_tile(self, rng):
        image = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
        acc = score_tiles(darkness, image, TileGrid.desk(64, 64))
        assert acc.counts.shape == (8, 8) and (acc.counts == 1).all()
        np.testing.assert_allclose(acc.means(), darkness(image.transpose(2, 0, 1)[None])[0])

    def test_full_scale_strip_matches_brute_force(self, rng):
        image = rng.uniform(0, 1, (512, 1024, 3)).astype(np.float32)
        grid = TileGrid.full_scale(1024, 512)
        np.testing.assert_allclose(score_tiles(darkness, image, grid).means(),
                                   brute_force_means(image, grid, darkness), rtol=0, atol=1e-6)

    @given(st.sampled_from([2, 4, 8]), st.integers(1, 4), st.integers(1, 4), st.integers(0, 20), st.integers(0, 20),
           st.integers(0, 2 ** 31))
    def test_matches_brute_force(self, block, tile_blocks, stride_blocks, dw, dh, seed):
        stride_blocks = min(stride_blocks, tile_blocks)
        t = block * tile_blocks
        grid = TileGrid(t, t - block * stride_blocks, block, t + dw, t + dh)
        image = np.random.default_rng(seed).uniform(0, 1, (grid.height, grid.width, 3)).astype(np.float32)
        np.testing.assert_allclose(score_tiles(darkness, image, grid, batch_size=5).means(),
                                   brute_force_means(image, grid, darkness), rtol=0, atol=1e-6)

    def test_workers_agree(self, rng):
        image = rng.uniform(0, 1, (160, 200, 3)).astype(np.float32)
        grid = TileGrid.desk(200, 160)
        single = score_tiles(darkness, image, grid, batch_size=4, workers=1)
        multi = score_tiles(darkness, image, grid, batch_size=4, workers=4)
        np.testing.assert_array_equal(single.counts, multi.counts)
        np.testing.assert_allclose(single.sums, multi.sums, rtol=1e-12)

    def test_extent_mismatch(self):
        with pytest.raises(InvalidInputError):
            score_tiles(darkness, np.zeros((64, 64, 3)), TileGrid.desk(72, 64))


class TestDensityMap:
    def test_empty(self):
        assert build_density_map([], 3.0, (20, 30)).total() == 0.0

    def test_kernel_value(self):
        d = build_density_map([CellDetection(10.5, 10.5)], 3.0, (21, 21)).values
        assert np.unravel_index(d.argmax(), d.shape) == (10, 10)
        assert d[10, 13] == pytest.approx(math.exp(-0.5) * d[10, 10], abs=1e-6)

    def test_additive(self):
        one = build_density_map([CellDetection(20, 20)], 2.0, (100, 100)).total()
        two = build_density_map([CellDetection(20, 20), CellDetection(70, 70)], 2.0, (100, 100)).total()
        assert two == pytest.approx(2 * one, abs=1e-6)

    def test_class_filter(self):
        dets = [CellDetection(5, 5, "normal"), CellDetection(15, 15, "tumor")]
        d = build_density_map(dets, 1.0, (20, 20), classes=("tumor",)).values
        assert d[5, 5] == 0 and d[15, 15] > 0

    def test_sigma_positive(self):
        with pytest.raises(InvalidConfigError):
            build_density_map([], 0.0, (4, 4))


class TestMasking:
    def setup_method(self):
        self.grid = TileGrid.desk(128, 128)
        self.acc = score_tiles(lambda t: np.full(len(t), 2.0), np.zeros((128, 128, 3), np.float32), self.grid)

    def test_threshold_zero(self):
        assert mask_tumor(self.acc, [], self.grid, threshold=0).defined.all()

    def test_no_tumor(self):
        dets = [CellDetection(5, 5, "normal")]
        assert mask_tumor(self.acc, dets, self.grid).is_empty()

    def test_block_selection(self):
        m = mask_tumor(self.acc, [CellDetection(17, 3)], self.grid)
        assert np.argwhere(m.defined).tolist() == [[0, 2]]

    def test_defined_blocks_inside_region(self):
        rng = np.random.default_rng(4)
        region = Region(blob_polygon(rng, 128, 128, 60), 2.0, 0.006)
        tissue = render(SyntheticSlideSpec(256, 256, (region,), seed=4))
        grid = TileGrid.desk(256, 256)
        dets = oracle_detect(tissue, jitter_sd=1.0, miss_rate=0.1, seed=4)
        acc = BlockAccumulator.empty(grid)
        for origin in plan_tiles(grid):
            acc.add_tile(grid, origin, 2.0)
        m = mask_tumor(acc, dets, grid)
        inside = tissue.region_index.reshape(32, 8, 32, 8).max(axis=(1, 3)) >= 0
        assert m.defined.sum() > 50
        assert inside[m.defined].mean() >= 0.95


class TestAggregation:
    def test_constant(self):
        assert aggregate_roi_score(defined_map([[2.5, 2.5], [np.nan, 2.5]])).value == 2.5

    def test_mean(self):
        assert aggregate_roi_score(defined_map([[1.0, 3.0]])).value == 2.0

    def test_empty(self):
        with pytest.raises(NoTumorFoundError):
            aggregate_roi_score(defined_map([[np.nan]]))

    @given(st.lists(st.floats(1, 3), min_size=1, max_size=12), st.integers(0, 10), st.integers(0, 2 ** 31))
    def test_order_and_padding_invariant(self, values, pad, seed):
        base = aggregate_roi_score(defined_map([values])).value
        shuffled = np.random.default_rng(seed).permutation(values + [np.nan] * pad)
        assert aggregate_roi_score(defined_map([shuffled])).value == pytest.approx(base, rel=1e-12)

    def test_slide_singleton(self):
        m = defined_map([[1.5, 2.5]])
        assert aggregate_slide_score([m]).value == aggregate_roi_score(m).value

    def test_slide_regions_weighted_equally(self):
        maps = [defined_map([[1.0, 1.0, 1.0]]), defined_map([[3.0, np.nan, np.nan]])]
        assert aggregate_slide_score(maps).value == 2.0
        assert aggregate_slide_score(maps, per_block=True).value == 1.5

    def test_slide_constant(self):
        assert aggregate_slide_score([defined_map([[2.0]])] * 3).value == 2.0

    def test_slide_all_empty(self):
        with pytest.raises(NoTumorFoundError):
            aggregate_slide_score([defined_map([[np.nan]])])

    def test_split_regions_eight_connected(self):
        regions = split_regions(defined_map([[1.0, np.nan, np.nan, 3.0],
                                             [np.nan, 2.0, np.nan, np.nan]]))
        assert len(regions) == 2
        assert sorted(aggregate_roi_score(r).value for r in regions) == [1.5, 3.0]


class TestScoreImage:
    def test_skipping_tiles_changes_nothing(self, rng):
        image = rng.uniform(0, 1, (128, 160, 3)).astype(np.float32)
        dets = [CellDetection(20, 20), CellDetection(21, 30), CellDetection(150, 120)]
        grid = TileGrid.desk(160, 128)
        res = score_image(darkness, image, dets, grid)
        full = mask_tumor(score_tiles(darkness, image, grid), dets, grid)
        assert res.tiles_scored < len(plan_tiles(grid))
        np.testing.assert_array_equal(res.score_map.defined, full.defined)
        np.testing.assert_allclose(res.score_map.defined_scores(), full.defined_scores(), rtol=1e-12)
        assert len(res.region_maps) == 2

    def test_no_detections(self):
        res = score_image(darkness, np.zeros((64, 64, 3), np.float32), [], TileGrid.desk(64, 64))
        assert res.tiles_scored == 0 and res.score_map.is_empty()
        with pytest.raises(NoTumorFoundError):
            res.slide_score()

    def test_overlap_averaging_reduces_variance(self):
        rng = np.random.default_rng(6)
        region = Region(((0, 0), (200, 0), (200, 200), (0, 200)), 2.5, 0.006)
        tissue = render(SyntheticSlideSpec(200, 200, (region,), seed=6))
        dets = tissue.detections
        roi_scores, tile_scores = [], []
        for dx, dy in rng.integers(0, 8, (10, 2)):
            image = tissue.image[dy:dy + 192, dx:dx + 192]
            shifted = [CellDetection(d.x - dx, d.y - dy) for d in dets
                       if 0 <= d.x - dx < 192 and 0 <= d.y - dy < 192]
            res = score_image(darkness, image, shifted, TileGrid.desk(192, 192))
            roi_scores.append(aggregate_roi_score(res.score_map).value)
            tile_scores.append(darkness(image[None, 64:128, 64:128].transpose(0, 3, 1, 2))[0])
        assert np.var(roi_scores) < np.var(tile_scores)


class TestHeatmap:
    @pytest.mark.parametrize("score,rgb", [(1.0, (0, 160, 0)), (2.0, (255, 220, 0)), (2.5, (237, 110, 0)),
                                           (3.0, (220, 0, 0))])
    def test_anchor_colors(self, score, rgb):
        assert score_color(score) == rgb

    def test_render(self):
        img = render_heatmap(defined_map([[1.0, np.nan]]))
        assert img.shape == (8, 16, 3) and img.dtype == np.uint8
        assert tuple(img[0, 0]) == (0, 160, 0) and tuple(img[7, 15]) == (255, 255, 255)


class TestGradCam:
    def test_range_and_shape(self, rng):
        net = build_regression_net(seed=2)
        for _ in range(3):
            cam = grad_cam_map(net, rng.uniform(0, 1, (3, 64, 64)).astype(np.float32))
            assert cam.shape == (64, 64)
            assert cam.min() >= 0 and cam.max() <= 1

    def test_accepts_channels_last(self, rng):
        net = build_regression_net(seed=2)
        patch = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
        np.testing.assert_array_equal(grad_cam_map(net, patch), grad_cam_map(net, patch.transpose(2, 0, 1)))

    def test_leaves_no_gradients(self, rng):
        net = build_regression_net(seed=2)
        grad_cam_map(net, rng.uniform(0, 1, (3, 64, 64)))
        assert all(p.grad is None for p in net.parameters()) and net.training

    def test_bilinear_constant(self):
        np.testing.assert_allclose(bilinear_resize(np.full((4, 4), 0.7), 64, 64), 0.7)
