"""ROI and slide scoring with overlapping tiles.

Every tile gets one network prediction. That scalar is added to each
``block_size`` block the tile overlaps, and block scores are the running
means. Blocks without enough tumor detections are then masked out before
aggregation.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import PleomorphismScore
from .errors import InvalidConfigError, InvalidInputError, NoTumorFoundError

WORKERS_ENV = "PLEOMORPH_WORKERS"


@dataclass(frozen=True)
class CellDetection:
    x: float
    y: float
    cls: str = "tumor"
    confidence: float = 1.0

    def __post_init__(self):
        if self.cls not in ("tumor", "normal"):
            raise InvalidInputError(f"detection class must be tumor/normal, got {self.cls!r}")
        if not 0 < self.confidence <= 1:
            raise InvalidInputError(f"detection confidence {self.confidence!r} outside (0, 1]")


@dataclass(frozen=True)
class TileGrid:
    tile_size: int
    overlap: int
    block_size: int
    width: int
    height: int

    def __post_init__(self):
        if self.tile_size <= 0 or self.block_size <= 0:
            raise InvalidConfigError("tile and block sizes must be positive")
        if self.stride <= 0:
            raise InvalidConfigError(f"overlap {self.overlap} leaves no positive stride for tile {self.tile_size}")
        if self.tile_size % self.block_size or self.stride % self.block_size:
            raise InvalidConfigError(
                f"tile size {self.tile_size} and stride {self.stride} must be multiples of block {self.block_size}")

    @property
    def stride(self) -> int:
        return self.tile_size - self.overlap

    @property
    def blocks_x(self) -> int:
        return math.ceil(self.width / self.block_size)

    @property
    def blocks_y(self) -> int:
        return math.ceil(self.height / self.block_size)

    @classmethod
    def desk(cls, width, height):
        return cls(64, 56, 8, width, height)

    @classmethod
    def full_scale(cls, width, height):
        return cls(512, 448, 64, width, height)

    def with_extent(self, width, height):
        return TileGrid(self.tile_size, self.overlap, self.block_size, width, height)


def _axis_origins(extent, tile, stride):
    origins = list(range(0, extent - tile + 1, stride))
    if origins[-1] + tile < extent:
        origins.append(extent - tile)
    return origins


def plan_tiles(grid: TileGrid) -> list[tuple[int, int]]:
    """Tile origins ``(x, y)`` in row-major order (y outer).

    Origins sit on every stride multiple where the tile fits; an extra
    edge-aligned tile per axis covers a margin the stride walk misses.
    """
    if grid.width < grid.tile_size or grid.height < grid.tile_size:
        raise InvalidInputError(
            f"image {grid.width}x{grid.height} is smaller than one {grid.tile_size}px tile")
    xs = _axis_origins(grid.width, grid.tile_size, grid.stride)
    ys = _axis_origins(grid.height, grid.tile_size, grid.stride)
    return [(x, y) for y in ys for x in xs]


@dataclass
class BlockAccumulator:
    sums: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, grid: TileGrid):
        shape = (grid.blocks_y, grid.blocks_x)
        return cls(np.zeros(shape, dtype=np.float64), np.zeros(shape, dtype=np.int64))

    def add_tile(self, grid: TileGrid, origin, value: float):
        x0, y0 = origin
        bs = grid.block_size
        bx0, by0 = x0 // bs, y0 // bs
        bx1 = (x0 + grid.tile_size - 1) // bs
        by1 = (y0 + grid.tile_size - 1) // bs
        self.sums[by0:by1 + 1, bx0:bx1 + 1] += value
        self.counts[by0:by1 + 1, bx0:bx1 + 1] += 1

    def merge(self, other: "BlockAccumulator") -> "BlockAccumulator":
        return BlockAccumulator(self.sums + other.sums, self.counts + other.counts)

    def means(self) -> np.ndarray:
        out = np.full(self.sums.shape, np.nan)
        covered = self.counts > 0
        out[covered] = self.sums[covered] / self.counts[covered]
        return out


def _as_hwc(image):
    image = np.asarray(image)
    if image.ndim != 3:
        raise InvalidInputError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.shape[2] != 3 and image.shape[0] == 3:
        image = image.transpose(1, 2, 0)
    return image


def extract_tiles(image, grid: TileGrid, origins) -> np.ndarray:
    """Stack tiles as a (N, 3, t, t) float32 batch."""
    image = _as_hwc(image)
    t = grid.tile_size
    out = np.empty((len(origins), 3, t, t), dtype=np.float32)
    for i, (x, y) in enumerate(origins):
        out[i] = image[y:y + t, x:x + t].transpose(2, 0, 1)
    return out


def _resolve_scorer(scorer):
    return scorer.predict if hasattr(scorer, "predict") else scorer


def default_workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def score_tiles(scorer, image, grid: TileGrid, batch_size: int = 16, origins=None,
                workers: int | None = None) -> BlockAccumulator:
    """Score every tile once and add its prediction to each block it covers.

    ``scorer`` is a network with ``predict`` or any callable mapping an
    (N, 3, t, t) batch to N scores. Work splits into contiguous chunks of
    tiles; each chunk accumulates in row-major tile order and partial
    accumulators are summed in chunk order.
    """
    image = _as_hwc(image)
    if image.shape[0] != grid.height or image.shape[1] != grid.width:
        raise InvalidInputError(f"grid extent {grid.width}x{grid.height} does not match image {image.shape[1]}x{image.shape[0]}")
    origins = plan_tiles(grid) if origins is None else list(origins)
    predict = _resolve_scorer(scorer)
    workers = workers or default_workers()

    def run(chunk):
        acc = BlockAccumulator.empty(grid)
        for start in range(0, len(chunk), batch_size):
            part = chunk[start:start + batch_size]
            scores = np.asarray(predict(extract_tiles(image, grid, part)), dtype=np.float64).reshape(-1)
            for origin, s in zip(part, scores):
                acc.add_tile(grid, origin, float(s))
        return acc

    if workers <= 1 or len(origins) < 2 * batch_size:
        return run(origins)
    n_chunks = min(workers, len(origins))
    bounds = np.linspace(0, len(origins), n_chunks + 1).astype(int)
    chunks = [origins[a:b] for a, b in zip(bounds, bounds[1:])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        partials = list(pool.map(run, chunks))
    total = BlockAccumulator.empty(grid)
    for part in partials:
        total = total.merge(part)
    return total


# density maps ----------------------------------------------------------------

@dataclass
class DensityMap:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise InvalidInputError("density map must be finite and non-negative")

    @property
    def shape(self):
        return self.values.shape

    def total(self) -> float:
        return float(self.values.sum())


def build_density_map(detections: Sequence[CellDetection], sigma: float, extent, classes=None) -> DensityMap:
    """Sum of unit-peak isotropic Gaussians, truncated at 3 sigma.

    ``extent`` is ``(height, width)``. Pixel ``(row, col)`` covers
    ``[col, col+1) x [row, row+1)`` and is evaluated at its centre.
    """
    if not sigma > 0:
        raise InvalidConfigError(f"density sigma must be > 0, got {sigma!r}")
    h, w = extent
    values = np.zeros((h, w), dtype=np.float64)
    r = 3 * sigma
    for d in detections:
        if classes is not None and d.cls not in classes:
            continue
        x0, x1 = max(0, int(math.floor(d.x - r))), min(w - 1, int(math.ceil(d.x + r)))
        y0, y1 = max(0, int(math.floor(d.y - r))), min(h - 1, int(math.ceil(d.y + r)))
        if x0 > x1 or y0 > y1:
            continue
        yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        d2 = (xx + 0.5 - d.x) ** 2 + (yy + 0.5 - d.y) ** 2
        kernel = np.exp(-d2 / (2 * sigma * sigma))
        kernel[d2 > r * r] = 0.0
        values[y0:y1 + 1, x0:x1 + 1] += kernel
    return DensityMap(values)


# masking and aggregation -----------------------------------------------------

@dataclass
class ScoreMap:
    means: np.ndarray
    counts: np.ndarray
    grid: TileGrid

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.means)

    def defined_scores(self) -> np.ndarray:
        return self.means[self.defined]

    def is_empty(self) -> bool:
        return not self.defined.any()


def tumor_counts_per_block(detections, grid: TileGrid) -> np.ndarray:
    counts = np.zeros((grid.blocks_y, grid.blocks_x), dtype=np.int64)
    for d in detections:
        if d.cls != "tumor":
            continue
        bx = min(max(int(d.x // grid.block_size), 0), grid.blocks_x - 1)
        by = min(max(int(d.y // grid.block_size), 0), grid.blocks_y - 1)
        counts[by, bx] += 1
    return counts


def mask_tumor(accumulator: BlockAccumulator, detections, grid: TileGrid, threshold: int = 1) -> ScoreMap:
    """Keep block means only where at least ``threshold`` tumor cells were detected."""
    if accumulator.sums.shape != (grid.blocks_y, grid.blocks_x):
        raise InvalidInputError("accumulator does not match the tile grid")
    means = accumulator.means()
    if threshold > 0:
        means[tumor_counts_per_block(detections, grid) < threshold] = np.nan
    return ScoreMap(means, accumulator.counts.copy(), grid)


def aggregate_roi_score(score_map: ScoreMap) -> PleomorphismScore:
    values = score_map.defined_scores()
    if values.size == 0:
        raise NoTumorFoundError("no scoreable tumor blocks")
    return PleomorphismScore(float(values.mean()))


def aggregate_slide_score(region_maps: Sequence[ScoreMap], per_block: bool = False) -> PleomorphismScore:
    """Mean of per-region scores (regions weighted equally).

    ``per_block=True`` pools all defined blocks of all regions instead.
    """
    maps = [m for m in region_maps if not m.is_empty()]
    if not maps:
        raise NoTumorFoundError("no tumor region with scoreable blocks")
    if per_block:
        return PleomorphismScore(float(np.concatenate([m.defined_scores() for m in maps]).mean()))
    return PleomorphismScore(float(np.mean([aggregate_roi_score(m).value for m in maps])))


def split_regions(score_map: ScoreMap) -> list[ScoreMap]:
    """Split a score map into 8-connected components of defined blocks."""
    labels, n = ndimage.label(score_map.defined, structure=np.ones((3, 3), dtype=int))
    regions = []
    for i in range(1, n + 1):
        means = np.where(labels == i, score_map.means, np.nan)
        regions.append(ScoreMap(means, np.where(labels == i, score_map.counts, 0), score_map.grid))
    return regions


@dataclass
class ScoringResult:
    score_map: ScoreMap
    accumulator: BlockAccumulator
    region_maps: list = field(default_factory=list)
    tiles_scored: int = 0

    def slide_score(self, per_block=False) -> PleomorphismScore:
        return aggregate_slide_score(self.region_maps, per_block=per_block)


def score_image(scorer, image, detections, grid: TileGrid, threshold: int = 1, batch_size: int = 16,
                workers=None) -> ScoringResult:
    """Full pipeline: tumor-tile selection, tile scoring, masking, region split.

    Tiles that cover no block passing the tumor threshold are skipped; they
    cannot influence any block that survives masking, so the result equals
    scoring every tile.
    """
    image = _as_hwc(image)
    grid = grid.with_extent(image.shape[1], image.shape[0])
    origins = plan_tiles(grid)
    if threshold > 0:
        keep = tumor_counts_per_block(detections, grid) >= threshold
        bs, t = grid.block_size, grid.tile_size
        origins = [(x, y) for x, y in origins
                   if keep[y // bs:(y + t - 1) // bs + 1, x // bs:(x + t - 1) // bs + 1].any()]
    if origins:
        acc = score_tiles(scorer, image, grid, batch_size=batch_size, origins=origins, workers=workers)
    else:
        acc = BlockAccumulator.empty(grid)
    score_map = mask_tumor(acc, detections, grid, threshold)
    return ScoringResult(score_map, acc, split_regions(score_map), len(origins))


# rendering -------------------------------------------------------------------

_ANCHORS = np.array([[0, 160, 0], [255, 220, 0], [220, 0, 0]], dtype=np.float64)


def score_color(score: float) -> tuple[int, int, int]:
    """Green (1) to yellow (2) to red (3), linear per segment, truncated to ints."""
    s = min(max(float(score), 1.0), 3.0)
    if s <= 2.0:
        t, a, b = s - 1.0, _ANCHORS[0], _ANCHORS[1]
    else:
        t, a, b = s - 2.0, _ANCHORS[1], _ANCHORS[2]
    rgb = a + (b - a) * t
    return tuple(int(math.floor(c + 1e-9)) for c in rgb)


def render_heatmap(score_map: ScoreMap, background=(255, 255, 255)) -> np.ndarray:
    bh, bw = score_map.means.shape
    small = np.empty((bh, bw, 3), dtype=np.uint8)
    small[...] = background
    for by, bx in zip(*np.nonzero(score_map.defined)):
        small[by, bx] = score_color(score_map.means[by, bx])
    bs = score_map.grid.block_size
    return np.repeat(np.repeat(small, bs, axis=0), bs, axis=1)


# saliency --------------------------------------------------------------------

def _linear_resize_axis(arr, new, axis):
    old = arr.shape[axis]
    src = (np.arange(new) + 0.5) * old / new - 0.5
    src = np.clip(src, 0, old - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, old - 1)
    frac = src - lo
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = new
    frac = frac.reshape(shape)
    return a * (1 - frac) + b * frac


def bilinear_resize(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a 2-d array."""
    return _linear_resize_axis(_linear_resize_axis(arr, height, 0), width, 1)


def grad_cam_map(net, patch) -> np.ndarray:
    """Grad-CAM of the scalar score w.r.t. the last dense block's output.

    Returns an (H, W) map in [0, 1]; an all-zero activation stays zero.
    """
    from .numerics import Tape, Tensor, sum_all

    image = np.asarray(getattr(patch, "image", patch), dtype=np.float32)
    if image.ndim == 3 and image.shape[0] != 3 and image.shape[2] == 3:
        image = image.transpose(2, 0, 1)
    image = image.astype(net.dtype)
    was_training = net.training
    net.eval()
    try:
        with Tape() as tape:
            out = net.forward_all(Tensor(image[None]))
            out.block_maps.retain_grad = True
            target = sum_all(out.score)
        tape.backward(target)
        maps = out.block_maps.data[0].astype(np.float64)
        grads = out.block_maps.grad[0].astype(np.float64)
    finally:
        net.zero_grad()
        net.train(was_training)
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * maps).sum(axis=0), 0.0)
    cam = bilinear_resize(cam, image.shape[1], image.shape[2])
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)
