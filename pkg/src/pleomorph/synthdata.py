"""Synthetic tissue with known pleomorphism severity.

Nuclei are ellipses on a pink stroma texture. Severity ``s`` in [1, 3]
drives nuclear enlargement, size variation, eccentricity, staining
variation and chromatin speckle. All of these are monotone in ``s``. The
images have no visual realism; they only need a monotone, detectable
morphology change with known ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import RaterPanel, ObserverScore, Confidence
from .errors import InvalidInputError, InvalidSpecError
from .inference import CellDetection

STROMA_RGB = np.array([0.93, 0.76, 0.84])
NUCLEUS_RGB = np.array([0.36, 0.24, 0.55])
NORMAL_NUCLEUS_RGB = np.array([0.40, 0.28, 0.58])


def _check_severity(s):
    if not (1.0 <= s <= 3.0) or not math.isfinite(s):
        raise InvalidInputError(f"severity {s!r} outside [1, 3]")


@dataclass(frozen=True)
class NucleusModel:
    """Per-severity nucleus statistics, each affine in severity.

    Every ``(at_1, slope)`` pair gives the value at s=1 and its increase per
    unit of severity.
    """

    base_radius: float = 3.0
    enlargement: tuple[float, float] = (1.0, 0.30)
    radius_cv: tuple[float, float] = (0.03, 0.095)
    eccentricity_max: tuple[float, float] = (0.30, 0.30)
    intensity_jitter: tuple[float, float] = (0.03, 0.05)
    chromatin_texture_amp: tuple[float, float] = (0.02, 0.06)

    def __post_init__(self):
        if self.base_radius <= 0:
            raise InvalidInputError("base_radius must be positive")
        for name in ("enlargement", "radius_cv", "eccentricity_max", "intensity_jitter", "chromatin_texture_amp"):
            at_1, slope = getattr(self, name)
            if slope < 0 or at_1 < 0:
                raise InvalidInputError(f"{name} must be non-negative and non-decreasing in severity")
        if self.stat("eccentricity_max", 3.0) >= 1:
            raise InvalidInputError("eccentricity_max must stay below 1 on [1, 3]")

    def stat(self, name, s):
        at_1, slope = getattr(self, name)
        return at_1 + slope * (s - 1.0)

    def mean_radius(self, s):
        return self.base_radius * self.stat("enlargement", s)


@dataclass(frozen=True)
class Region:
    polygon: tuple[tuple[float, float], ...]
    severity: float
    cell_density: float
    normal: bool = False

    def __post_init__(self):
        object.__setattr__(self, "polygon", tuple((float(x), float(y)) for x, y in self.polygon))
        if len(self.polygon) < 3:
            raise InvalidSpecError("a region polygon needs at least 3 vertices")
        _check_severity(self.severity)
        if not self.cell_density > 0:
            raise InvalidSpecError(f"cell density must be positive, got {self.cell_density!r}")


@dataclass(frozen=True)
class SyntheticSlideSpec:
    width: int
    height: int
    regions: tuple[Region, ...] = ()
    background_seed: int = 0
    seed: int = 0
    model: NucleusModel = field(default_factory=NucleusModel)

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        if self.width <= 0 or self.height <= 0:
            raise InvalidSpecError("slide extent must be positive")
        for r in self.regions:
            xs, ys = zip(*r.polygon)
            if min(xs) < 0 or min(ys) < 0 or max(xs) > self.width or max(ys) > self.height:
                raise InvalidSpecError(f"region polygon leaves the {self.width}x{self.height} frame")


@dataclass
class Nucleus:
    x: float
    y: float
    radius: float
    eccentricity: float
    angle: float
    region: int
    cls: str


@dataclass
class RenderedTissue:
    image: np.ndarray            # (H, W, 3) float32 in [0, 1]
    severity_map: np.ndarray     # (H, W) float, NaN on background
    region_index: np.ndarray     # (H, W) int, -1 on background
    instance_map: np.ndarray     # (H, W) int, 0 on background, k for nucleus k-1
    nuclei: list
    spec: SyntheticSlideSpec

    @property
    def detections(self) -> list[CellDetection]:
        return [CellDetection(n.x, n.y, n.cls, 1.0) for n in self.nuclei]

    @property
    def nucleus_mask(self) -> np.ndarray:
        return self.instance_map > 0


def full_frame(width, height):
    return ((0, 0), (width, 0), (width, height), (0, height))


def points_in_polygon(x, y, polygon) -> np.ndarray:
    """Even-odd ray casting; ``x``/``y`` arrays of equal shape."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = np.zeros(x.shape, dtype=bool)
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > y) != (y2 > y)
        xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xint)
    return inside


def _texture(rng, shape, sigma, amp):
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    sd = noise.std()
    return noise * (amp / sd) if sd > 0 else noise


def _background(spec):
    rng = np.random.default_rng([spec.background_seed, 7])
    h, w = spec.height, spec.width
    img = np.broadcast_to(STROMA_RGB, (h, w, 3)).copy()
    coarse = _texture(rng, (h, w), 6.0, 0.035)
    fine = _texture(rng, (h, w), 0.8, 0.02)
    fibers = _texture(rng, (h, w), (1.0, 5.0), 0.025)
    img += (coarse + fine + fibers)[..., None] * np.array([0.6, 1.0, 0.8])
    return img


def _place_nuclei(rng, region, region_id, mask, model):
    s = region.severity
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return []
    target = int(rng.poisson(region.cell_density * len(xs)))
    cv = model.stat("radius_cv", s)
    mean_r = model.mean_radius(s)
    sigma_ln = math.sqrt(math.log1p(cv * cv))
    mu_ln = math.log(mean_r) - 0.5 * sigma_ln * sigma_ln
    ecc_max = model.stat("eccentricity_max", s)
    cls = "normal" if region.normal else "tumor"
    placed = []
    attempts = 0
    while len(placed) < target and attempts < 30 * target + 50:
        attempts += 1
        k = rng.integers(len(xs))
        cx = xs[k] + rng.random()
        cy = ys[k] + rng.random()
        r = float(np.exp(mu_ln + sigma_ln * rng.standard_normal()))
        ecc = float(rng.uniform(0.0, ecc_max))
        angle = float(rng.uniform(0.0, math.pi))
        major = r / (1 - ecc * ecc) ** 0.25
        if any((cx - n.x) ** 2 + (cy - n.y) ** 2 < (major + n.radius / (1 - n.eccentricity ** 2) ** 0.25 + 1.0) ** 2
               for n in placed):
            continue
        placed.append(Nucleus(cx, cy, r, ecc, angle, region_id, cls))
    return placed


def _paint(img, instance_map, nuclei, first_label, rng, model, severity, normal):
    base = NORMAL_NUCLEUS_RGB if normal else NUCLEUS_RGB
    h, w = instance_map.shape
    jitter = model.stat("intensity_jitter", severity)
    amp = model.stat("chromatin_texture_amp", severity)
    for k, n in enumerate(nuclei):
        # area-preserving semi-axes: a*b == r**2
        a = n.radius / (1 - n.eccentricity ** 2) ** 0.25
        b = n.radius * (1 - n.eccentricity ** 2) ** 0.25
        half = int(math.ceil(a)) + 1
        x0, x1 = max(0, int(n.x) - half), min(w, int(n.x) + half + 1)
        y0, y1 = max(0, int(n.y) - half), min(h, int(n.y) + half + 1)
        factor = 1.0 + jitter * rng.standard_normal()
        speckle = rng.standard_normal((y1 - y0, x1 - x0))
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dx, dy = xx + 0.5 - n.x, yy + 0.5 - n.y
        ca, sa = math.cos(n.angle), math.sin(n.angle)
        u = (dx * ca + dy * sa) / a
        v = (-dx * sa + dy * ca) / b
        inside = u * u + v * v <= 1.0
        color = np.clip(base * factor, 0, 1)
        texture = amp * ndimage.gaussian_filter(speckle, 0.6) / 0.35
        patch = img[y0:y1, x0:x1]
        patch[inside] = color + texture[inside][:, None] * np.array([1.0, 0.9, 1.0])
        instance_map[y0:y1, x0:x1][inside] = first_label + k


def render(spec: SyntheticSlideSpec) -> RenderedTissue:
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = xx + 0.5, yy + 0.5
    region_index = np.full((h, w), -1, dtype=np.int64)
    severity_map = np.full((h, w), np.nan)
    masks = []
    for i, region in enumerate(spec.regions):
        m = points_in_polygon(cx, cy, region.polygon)
        if np.any(m & (region_index >= 0)):
            raise InvalidSpecError(f"region {i} overlaps another region")
        region_index[m] = i
        severity_map[m] = region.severity
        masks.append(m)

    img = _background(spec)
    instance_map = np.zeros((h, w), dtype=np.int64)
    nuclei = []
    for i, (region, m) in enumerate(zip(spec.regions, masks)):
        rng = np.random.default_rng([spec.seed, i])
        placed = _place_nuclei(rng, region, i, m, spec.model)
        _paint(img, instance_map, placed, len(nuclei) + 1, rng, spec.model, region.severity, region.normal)
        nuclei.extend(placed)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return RenderedTissue(img, severity_map, region_index, instance_map, nuclei, spec)


def generate_slide(spec: SyntheticSlideSpec) -> RenderedTissue:
    return render(spec)


def generate_patch(severity: float, model: NucleusModel | None = None, size: int = 64, seed: int = 0,
                   cell_density: float = 0.006, normal: bool = False) -> RenderedTissue:
    """A single full-frame region; identical to :func:`generate_slide` on that spec."""
    _check_severity(severity)
    model = model or NucleusModel()
    region = Region(full_frame(size, size), severity, cell_density, normal)
    return render(SyntheticSlideSpec(size, size, (region,), background_seed=seed, seed=seed, model=model))


def blob_polygon(rng, cx, cy, radius, n_vertices=12, wobble=0.25):
    """Random star-shaped polygon around (cx, cy)."""
    angles = np.sort(rng.uniform(0, 2 * math.pi, n_vertices))
    radii = radius * (1 + wobble * rng.uniform(-1, 1, n_vertices))
    return tuple((float(cx + r * math.cos(t)), float(cy + r * math.sin(t))) for t, r in zip(angles, radii))


# rater panels ----------------------------------------------------------------

@dataclass(frozen=True)
class SimulatedPanelConfig:
    n_raters: int = 10
    score_noise_sd: float = 0.4
    certain_below: float = 0.25
    fairly_certain_below: float = 0.5

    def __post_init__(self):
        if self.n_raters < 1:
            raise InvalidInputError("a panel needs at least one rater")
        if self.score_noise_sd < 0:
            raise InvalidInputError("score noise sd must be >= 0")

    def confidence_for(self, abs_noise):
        if abs_noise < self.certain_below:
            return Confidence.CERTAIN
        if abs_noise < self.fairly_certain_below:
            return Confidence.FAIRLY_CERTAIN
        return Confidence.NOT_CERTAIN


def simulate_panel(true_severity: float, config: SimulatedPanelConfig | None = None, seed: int = 0,
                   case_id: str = "case") -> RaterPanel:
    """Each rater reports clamp(round(s + noise), 1, 3); halves round up."""
    _check_severity(true_severity)
    config = config or SimulatedPanelConfig()
    rng = np.random.default_rng([seed, 101])
    noise = rng.normal(0.0, config.score_noise_sd, config.n_raters) if config.score_noise_sd > 0 \
        else np.zeros(config.n_raters)
    scores = np.clip(np.floor(true_severity + noise + 0.5), 1, 3).astype(int)
    return RaterPanel(case_id, tuple(
        ObserverScore(f"P{g + 1}", int(sc), config.confidence_for(abs(nz)))
        for g, (sc, nz) in enumerate(zip(scores, noise))
    ))


# oracle detector -------------------------------------------------------------

def oracle_detect(tissue: RenderedTissue, jitter_sd: float = 0.0, miss_rate: float = 0.0,
                  false_rate: float = 0.0, seed: int = 0) -> list[CellDetection]:
    """Stand-in for a frozen cell detector: perturbed ground-truth centres.

    True nuclei are jittered and dropped with probability ``miss_rate``;
    Poisson false positives (``false_rate`` per pixel) take the class of
    the region they land in (tumor on background).
    """
    for name, rate in (("miss_rate", miss_rate), ("false_rate", false_rate)):
        if not 0 <= rate < 1:
            raise InvalidInputError(f"{name} must be in [0, 1), got {rate!r}")
    if jitter_sd < 0:
        raise InvalidInputError("jitter_sd must be >= 0")
    rng = np.random.default_rng([seed, 202])
    h, w = tissue.region_index.shape
    out = []
    n = len(tissue.nuclei)
    keep = rng.random(n) >= miss_rate
    offsets = rng.normal(0.0, jitter_sd, (n, 2)) if jitter_sd > 0 else np.zeros((n, 2))
    confidences = rng.uniform(0.5, 1.0, n)
    for nuc, k, off, conf in zip(tissue.nuclei, keep, offsets, confidences):
        if not k:
            continue
        x = float(np.clip(nuc.x + off[0], 0.0, np.nextafter(w, 0)))
        y = float(np.clip(nuc.y + off[1], 0.0, np.nextafter(h, 0)))
        out.append(CellDetection(x, y, nuc.cls, float(conf)))
    n_false = int(rng.poisson(false_rate * w * h)) if false_rate > 0 else 0
    normal_regions = {i for i, r in enumerate(tissue.spec.regions) if r.normal}
    for _ in range(n_false):
        x, y = float(rng.uniform(0, w)), float(rng.uniform(0, h))
        region = tissue.region_index[int(y), int(x)]
        cls = "normal" if region in normal_regions else "tumor"
        out.append(CellDetection(x, y, cls, float(rng.uniform(0.05, 0.5))))
    return out


# measurement helpers (independent of the generator's parameters) ------------

def measure_nuclei(tissue: RenderedTissue) -> dict:
    """Per-nucleus statistics measured from the rendered raster.

    Nuclei clipped by the image border are left out.
    """
    labels = tissue.instance_map.copy()
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    labels[np.isin(labels, border[border > 0])] = 0
    n = labels.max()
    if n == 0:
        return {"radius": np.zeros(0), "eccentricity": np.zeros(0), "intensity": np.zeros(0), "texture": np.zeros(0)}
    idx = np.arange(1, n + 1)
    area = ndimage.sum_labels(np.ones_like(labels), labels, idx)
    present = area > 0
    idx, area = idx[present], area[present]
    radius = np.sqrt(area / math.pi)
    gray = tissue.image.mean(axis=2).astype(np.float64)
    intensity = ndimage.mean(gray, labels, idx)
    texture = np.sqrt(np.maximum(ndimage.variance(gray, labels, idx), 0))
    yy, xx = np.mgrid[0:labels.shape[0], 0:labels.shape[1]]
    mx, my = ndimage.mean(xx, labels, idx), ndimage.mean(yy, labels, idx)
    sxx = ndimage.mean(xx * xx, labels, idx) - mx ** 2
    syy = ndimage.mean(yy * yy, labels, idx) - my ** 2
    sxy = ndimage.mean(xx * yy, labels, idx) - mx * my
    tr, det = sxx + syy, sxx * syy - sxy ** 2
    disc = np.sqrt(np.maximum(tr * tr / 4 - det, 0))
    l1, l2 = tr / 2 + disc, np.maximum(tr / 2 - disc, 1e-12)
    # second moments scale with squared semi-axes
    eccentricity = np.sqrt(np.clip(1 - l2 / l1, 0, 1))
    return {"radius": radius, "eccentricity": eccentricity, "intensity": intensity, "texture": texture}
