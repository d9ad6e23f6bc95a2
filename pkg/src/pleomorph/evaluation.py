"""Held-out evaluation helpers shared by the experiment scripts and the acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import quantize
from .dataset import DatasetConfig, make_slide, slide_severities
from .inference import TileGrid, grad_cam_map, score_image
from .regressor import sample_training_patch
from .synthdata import Region, SyntheticSlideSpec, generate_patch, generate_slide


@dataclass
class PatchEvaluation:
    predictions: np.ndarray
    references: np.ndarray
    severities: np.ndarray

    @property
    def mae(self) -> float:
        return float(np.abs(self.predictions - self.references).mean())

    @property
    def spearman(self) -> float:
        return float(stats.spearmanr(self.severities, self.predictions)[0])


def evaluate_patches(net, rois, patches_per_roi: int = 4, seed: int = 123) -> PatchEvaluation:
    """Density-sampled patches from each ROI, scored against its reference."""
    rng = np.random.default_rng(seed)
    preds, refs, sev = [], [], []
    for roi in rois:
        batch = [sample_training_patch(roi, roi.density, rng, net.config.input_size) for _ in range(patches_per_roi)]
        preds.extend(net.predict(np.stack([p.image for p in batch])))
        refs.extend([roi.reference_score] * patches_per_roi)
        sev.extend([roi.severity] * patches_per_roi)
    return PatchEvaluation(np.array(preds, float), np.array(refs, float), np.array(sev, float))


@dataclass
class SlideAgreement:
    severities: np.ndarray
    scores: np.ndarray

    @property
    def category_errors(self) -> np.ndarray:
        return np.array([quantize(s, 3) - quantize(t, 3) for s, t in zip(self.scores, self.severities)])

    @property
    def hits(self) -> int:
        return int((self.category_errors == 0).sum())

    @property
    def max_error(self) -> int:
        return int(np.abs(self.category_errors).max())


def slide_agreement(net, config: DatasetConfig | None = None, n_slides: int = 20, seed: int = 77) -> SlideAgreement:
    """Score fresh single-severity slides with the desk tiling."""
    config = config or DatasetConfig()
    severities = slide_severities(n_slides, np.random.default_rng([seed, 5]))
    scores = []
    for i, s in enumerate(severities):
        slide = make_slide(config, f"eval-{i:03d}", float(s), 1000 + i)
        grid = TileGrid.desk(slide.image.shape[1], slide.image.shape[0])
        scores.append(float(score_image(net, slide.image, slide.detections, grid).slide_score()))
    return SlideAgreement(severities, np.array(scores))


def severity_ladder(n: int, steps: int = 10) -> np.ndarray:
    return 1.0 + 2.0 * (np.arange(n) % steps) / (steps - 1)


def nucleus_saliency_wins(net, n_patches: int = 100, seed: int = 5000) -> np.ndarray:
    """Per patch, whether mean Grad-CAM inside nuclei exceeds the mean outside."""
    size = net.config.input_size
    wins = []
    for i, s in enumerate(severity_ladder(n_patches)):
        tissue = generate_patch(float(s), size=size, seed=seed + i)
        cam = grad_cam_map(net, tissue.image)
        mask = tissue.nucleus_mask
        wins.append(cam[mask].mean() > cam[~mask].mean())
    return np.array(wins)


def half_saliency_wins(net, n_patches: int = 100, seed: int = 9000, density: float = 0.006) -> np.ndarray:
    """Per patch with tumor confined to the left half, whether the left half is more salient."""
    size = net.config.input_size
    half = size // 2
    left = ((0, 0), (half, 0), (half, size), (0, size))
    wins = []
    for i, s in enumerate(severity_ladder(n_patches)):
        spec = SyntheticSlideSpec(size, size, (Region(left, float(s), density),), background_seed=seed + i, seed=seed + i)
        cam = grad_cam_map(net, generate_slide(spec).image)
        wins.append(cam[:, :half].mean() > cam[:, half:].mean())
    return np.array(wins)
