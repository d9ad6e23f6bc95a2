"""Synthetic cohort: cases with tumor ROIs, a normal ROI, rater panels and slides.

The in-memory build and the on-disk layout carry the same numbers: images
are quantized to 8 bits before anything sees them, so loading a written
dataset reproduces the in-memory one exactly.

Directory layout::

    images/<id>.ppm
    detections/<id>.csv
    ratings.csv
    manifest.jsonl
    config.txt
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import quantize, reference_score
from .errors import InvalidConfigError, InvalidInputError
from .inference import build_density_map
from .io import (
    read_detections,
    read_jsonl,
    read_ppm,
    read_ratings,
    to_uint8,
    write_detections,
    write_jsonl,
    write_ppm,
    write_ratings,
)
from .regressor import Roi
from .synthdata import (
    NucleusModel,
    Region,
    SimulatedPanelConfig,
    SyntheticSlideSpec,
    blob_polygon,
    generate_patch,
    oracle_detect,
    render,
    simulate_panel,
)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetConfig:
    n_train_cases: int = 48
    n_val_cases: int = 12
    n_test_cases: int = 24
    rois_per_case: int = 2
    roi_size: int = 128
    roi_blobs: bool = True  # tumor ROIs as an irregular region on stroma rather than full frame
    roi_blob_radius: tuple[float, float] = (0.4, 1.0)  # blob radius range as a fraction of roi_size
    cell_density: float = 0.006
    normal_rois: bool = True
    n_slides: int = 4
    slide_size: int = 256
    regions_per_slide: int = 2
    detector_jitter: float = 1.0
    detector_miss_rate: float = 0.1
    detector_false_rate: float = 0.0
    density_sigma: float | None = None  # None means the nucleus base radius
    seed: int = 0
    panel: SimulatedPanelConfig = field(default_factory=SimulatedPanelConfig)
    model: NucleusModel = field(default_factory=NucleusModel)

    def __post_init__(self):
        for name in ("n_train_cases", "n_val_cases", "n_test_cases"):
            if getattr(self, name) < 3:
                raise InvalidConfigError(f"{name} must be >= 3 so every category can be covered")
        if self.rois_per_case < 1 or self.roi_size < 8 or self.slide_size < 8:
            raise InvalidConfigError("rois_per_case >= 1 and sizes >= 8 required")
        if self.n_slides < 0 or self.regions_per_slide < 1:
            raise InvalidConfigError("n_slides >= 0 and regions_per_slide >= 1 required")
        lo, hi = self.roi_blob_radius
        if not 0 < lo <= hi:
            raise InvalidConfigError("roi_blob_radius must be an increasing pair of positive fractions")
        if self.density_sigma is not None and not self.density_sigma > 0:
            raise InvalidConfigError("density_sigma must be positive")

    @property
    def sigma(self) -> float:
        return self.density_sigma if self.density_sigma is not None else self.model.base_radius

    def split_sizes(self) -> dict:
        return dict(zip(SPLITS, (self.n_train_cases, self.n_val_cases, self.n_test_cases)))


@dataclass
class SlideRecord:
    slide_id: str
    image: np.ndarray
    detections: list
    severity: float
    severity_map: np.ndarray
    seed: int


@dataclass
class Dataset:
    config: DatasetConfig | None  # None when loaded from disk
    splits: dict            # split -> list of tumor Roi (normal ROI attached)
    panels: dict            # case_id -> RaterPanel
    slides: list = field(default_factory=list)
    detections: dict = field(default_factory=dict)  # roi id -> detections

    def rois(self, split: str) -> list[Roi]:
        if split not in self.splits:
            raise InvalidInputError(f"unknown split {split!r}; expected one of {SPLITS}")
        return self.splits[split]


def stratified_severities(n: int, rng) -> np.ndarray:
    """One draw per equal-width stratum of [1, 3], shuffled."""
    s = 1.0 + 2.0 * (np.arange(n) + rng.uniform(0.1, 0.9, n)) / n
    return rng.permutation(s)


def _roi_from(tissue, roi_id, case_id, ref, severity, detections, sigma, classes):
    image = to_uint8(tissue.image).astype(np.float32) / 255.0
    density = build_density_map(detections, sigma, image.shape[:2], classes=classes)
    return Roi(roi_id, case_id, image, ref, density, severity)


def _case_seed(base: int, split_index: int, case_index: int) -> int:
    return int(np.random.default_rng([base, 7, split_index, case_index]).integers(2 ** 31))


def _slide_spec(config: DatasetConfig, severity: float, seed: int) -> SyntheticSlideSpec:
    rng = np.random.default_rng([seed, 11])
    size = config.slide_size
    n = config.regions_per_slide
    wobble = 0.25
    step = size / (n + 1)
    # blobs sit on the diagonal; their outer discs neither touch nor leave the frame
    radius = min(0.48 * step * math.sqrt(2), step - 2) / (1 + wobble)
    regions = []
    for i in range(n):
        c = step * (i + 1)
        poly = blob_polygon(rng, c, c, radius, wobble=wobble)
        regions.append(Region(poly, severity, config.cell_density))
    return SyntheticSlideSpec(size, size, tuple(regions), background_seed=seed, seed=seed, model=config.model)


def _tumor_roi_spec(config: DatasetConfig, severity: float, seed: int) -> SyntheticSlideSpec:
    # Stroma margins give training windows with partial tumor coverage, as
    # tiles along region borders have at inference time.
    size = config.roi_size
    rng = np.random.default_rng([seed, 13])
    cx, cy = rng.uniform(0.35, 0.65, 2) * size
    radius = rng.uniform(*config.roi_blob_radius) * size
    poly = tuple((min(max(x, 0.0), size), min(max(y, 0.0), size))
                 for x, y in blob_polygon(rng, cx, cy, radius, wobble=0.3))
    region = Region(poly, severity, config.cell_density)
    return SyntheticSlideSpec(size, size, (region,), background_seed=seed, seed=seed, model=config.model)


def slide_severities(n: int, rng, margin: float = 0.15) -> np.ndarray:
    """Severities at least ``margin`` away from the k=3 bin edges."""
    lo = np.array([1.0, 5 / 3 + margin, 7 / 3 + margin])
    hi = np.array([5 / 3 - margin, 7 / 3 - margin, 3.0])
    cats = np.arange(n) % 3
    return rng.permutation(rng.uniform(lo[cats], hi[cats]))


def make_slide(config: DatasetConfig, slide_id: str, severity: float, seed: int) -> SlideRecord:
    tissue = render(_slide_spec(config, severity, seed))
    dets = oracle_detect(tissue, config.detector_jitter, config.detector_miss_rate,
                         config.detector_false_rate, seed=seed)
    image = to_uint8(tissue.image).astype(np.float32) / 255.0
    return SlideRecord(slide_id, image, dets, float(severity), tissue.severity_map, seed)


def build_dataset(config: DatasetConfig | None = None) -> Dataset:
    config = config or DatasetConfig()
    rng = np.random.default_rng([config.seed, 3])
    splits, panels, all_dets = {}, {}, {}
    for si, (split, n_cases) in enumerate(config.split_sizes().items()):
        severities = stratified_severities(n_cases, rng)
        rois = []
        for ci, s in enumerate(severities):
            case_id = f"{split}-{ci:03d}"
            seed = _case_seed(config.seed, si, ci)
            panel = simulate_panel(float(s), config.panel, seed=seed, case_id=case_id)
            panels[case_id] = panel
            ref = float(reference_score(panel))
            normal = None
            if config.normal_rois:
                tissue = generate_patch(1.0, config.model, config.roi_size, seed + 1, config.cell_density, normal=True)
                dets = oracle_detect(tissue, config.detector_jitter, config.detector_miss_rate,
                                     config.detector_false_rate, seed=seed + 1)
                nid = f"{case_id}-n"
                normal = _roi_from(tissue, nid, case_id, 1.0, 1.0, dets, config.sigma, ("normal",))
                all_dets[nid] = dets
            for r in range(config.rois_per_case):
                tseed = seed + 2 + r
                if config.roi_blobs:
                    tissue = render(_tumor_roi_spec(config, float(s), tseed))
                else:
                    tissue = generate_patch(float(s), config.model, config.roi_size, tseed, config.cell_density)
                dets = oracle_detect(tissue, config.detector_jitter, config.detector_miss_rate,
                                     config.detector_false_rate, seed=tseed)
                rid = f"{case_id}-t{r}"
                roi = _roi_from(tissue, rid, case_id, ref, float(s), dets, config.sigma, ("tumor",))
                roi.normal = normal
                all_dets[rid] = dets
                rois.append(roi)
        splits[split] = rois
        present = {roi.category for roi in rois}
        if present != {1, 2, 3}:
            raise InvalidConfigError(
                f"split {split} covers reference categories {sorted(present)} only; use more cases")
    slide_rng = np.random.default_rng([config.seed, 5])
    slides = [make_slide(config, f"slide-{i:03d}", float(s), _case_seed(config.seed, 9, i))
              for i, s in enumerate(slide_severities(config.n_slides, slide_rng))]
    return Dataset(config, splits, panels, slides, all_dets)


# persistence -----------------------------------------------------------------

def manifest_records(ds: Dataset) -> list[dict]:
    records = []
    for split in SPLITS:
        for roi in ds.splits[split]:
            if roi.normal is not None and roi.roi_id.endswith("-t0"):
                records.append(_roi_record(roi.normal, split, "normal"))
            records.append(_roi_record(roi, split, "tumor"))
    for sl in ds.slides:
        records.append({"id": sl.slide_id, "kind": "slide", "split": "slides", "severity": sl.severity,
                        "seed": sl.seed, "image": f"images/{sl.slide_id}.ppm",
                        "detections": f"detections/{sl.slide_id}.csv"})
    return records


def _roi_record(roi: Roi, split: str, kind: str) -> dict:
    return {"id": roi.roi_id, "case_id": roi.case_id, "kind": kind, "split": split,
            "severity": roi.severity, "reference_score": roi.reference_score,
            "category": quantize(roi.reference_score, 3),
            "image": f"images/{roi.roi_id}.ppm", "detections": f"detections/{roi.roi_id}.csv"}


def write_dataset(ds: Dataset, out_dir) -> list[dict]:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "detections").mkdir(exist_ok=True)
    records = manifest_records(ds)
    images = {r.roi_id: r.image for rois in ds.splits.values() for r in rois}
    images.update({r.normal.roi_id: r.normal.image for rois in ds.splits.values() for r in rois if r.normal})
    dets = dict(ds.detections)
    for sl in ds.slides:
        images[sl.slide_id] = sl.image
        dets[sl.slide_id] = sl.detections
    for rec in records:
        write_ppm(out / rec["image"], images[rec["id"]])
        write_detections(out / rec["detections"], dets[rec["id"]])
    write_ratings(out / "ratings.csv", [ds.panels[c] for c in sorted(ds.panels)])
    write_jsonl(out / "manifest.jsonl", records)
    return records


def generate_dataset(config: DatasetConfig, out_dir) -> Dataset:
    ds = build_dataset(config)
    write_dataset(ds, out_dir)
    return ds


def load_dataset(path, sigma: float | None = None) -> Dataset:
    """Read a dataset directory back into ROIs with density maps.

    ``sigma`` defaults to the nucleus base radius of the default model.
    """
    root = Path(path)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise InvalidInputError(f"{root}: no manifest.jsonl")
    records = read_jsonl(manifest)
    panels = read_ratings(root / "ratings.csv")
    sigma = sigma if sigma is not None else NucleusModel().base_radius
    splits = {s: [] for s in SPLITS}
    normals, slides, all_dets = {}, [], {}
    for rec in records:
        for key in ("id", "kind", "image", "detections"):
            if key not in rec:
                raise InvalidInputError(f"{manifest}: record missing {key!r}: {rec}")
        image = read_ppm(root / rec["image"])
        dets = read_detections(root / rec["detections"])
        all_dets[rec["id"]] = dets
        if rec["kind"] == "slide":
            slides.append(SlideRecord(rec["id"], image, dets, float(rec["severity"]), None, int(rec["seed"])))
            continue
        case = rec["case_id"]
        if rec["kind"] == "normal":
            density = build_density_map(dets, sigma, image.shape[:2], classes=("normal",))
            normals[case] = Roi(rec["id"], case, image, 1.0, density, rec.get("severity"))
            continue
        if case not in panels:
            raise InvalidInputError(f"{manifest}: case {case} has no ratings")
        ref = float(reference_score(panels[case]))
        density = build_density_map(dets, sigma, image.shape[:2], classes=("tumor",))
        if rec["split"] not in splits:
            raise InvalidInputError(f"{manifest}: unknown split {rec['split']!r}")
        splits[rec["split"]].append(Roi(rec["id"], case, image, ref, density, rec.get("severity")))
    for rois in splits.values():
        for roi in rois:
            roi.normal = normals.get(roi.case_id)
    return Dataset(None, splits, panels, slides, all_dets)

