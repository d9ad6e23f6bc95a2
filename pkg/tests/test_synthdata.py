import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from pleomorph.core import reference_score
from pleomorph.errors import InvalidInputError, InvalidSpecError
from pleomorph.synthdata import (
    Nucleus,
    NucleusModel,
    Region,
    RenderedTissue,
    SimulatedPanelConfig,
    SyntheticSlideSpec,
    full_frame,
    generate_patch,
    generate_slide,
    measure_nuclei,
    oracle_detect,
    simulate_panel,
)

SEVERITY_GRID = (1.0, 1.5, 2.0, 2.5, 3.0)


@pytest.fixture(autouse=True)
def _quiet_empty_labels():
    # scipy warns on labels with no pixels left after border clipping
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def radius_cv(tissue):
    r = measure_nuclei(tissue)["radius"]
    return r.std() / r.mean()


def box(x0, y0, x1, y1):
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))


class TestNucleusModel:
    def test_near_uniform_at_one(self):
        assert NucleusModel().stat("radius_cv", 1.0) <= 0.08

    def test_decreasing_statistic_rejected(self):
        with pytest.raises(InvalidInputError):
            NucleusModel(radius_cv=(0.05, -0.01))

    def test_eccentricity_bound(self):
        with pytest.raises(InvalidInputError):
            NucleusModel(eccentricity_max=(0.5, 0.3))


class TestGeneratePatch:
    def test_deterministic(self):
        a, b = generate_patch(2.2, seed=7), generate_patch(2.2, seed=7)
        assert a.image.tobytes() == b.image.tobytes()
        assert generate_patch(2.2, seed=8).image.tobytes() != a.image.tobytes()

    @pytest.mark.parametrize("s", [0.99, 3.01, float("nan")])
    def test_severity_range(self, s):
        with pytest.raises(InvalidInputError):
            generate_patch(s)

    def test_image_range(self):
        img = generate_patch(3.0, seed=1).image
        assert img.dtype == np.float32 and img.shape == (64, 64, 3)
        assert img.min() >= 0 and img.max() <= 1

    def test_radius_cv_at_one(self):
        radii = np.concatenate([measure_nuclei(generate_patch(1.0, size=256, seed=s))["radius"] for s in range(2)])
        assert radii.size >= 500
        assert radii.std() / radii.mean() <= 0.10

    def test_radius_cv_grows_with_severity(self):
        wins = [radius_cv(generate_patch(3.0, size=128, seed=s)) > radius_cv(generate_patch(1.0, size=128, seed=s))
                for s in range(100)]
        assert np.mean(wins) >= 0.99

    def test_statistics_monotone(self):
        means = []
        for s in SEVERITY_GRID:
            rows = []
            for seed in range(50):
                m = measure_nuclei(generate_patch(s, size=96, seed=seed))
                rows.append([m["radius"].mean(), m["radius"].std() / m["radius"].mean(),
                             m["intensity"].std(), m["texture"].mean()])
            means.append(np.mean(rows, axis=0))
        for column in np.array(means).T:
            assert stats.spearmanr(SEVERITY_GRID, column)[0] == pytest.approx(1.0)

    def test_eccentricity_monotone(self):
        # a 3px nucleus is too coarse for moment-based eccentricity, so measure larger ones
        model = NucleusModel(base_radius=8.0)
        means = [np.mean([measure_nuclei(generate_patch(s, model, 128, seed, cell_density=0.0015))["eccentricity"].mean()
                          for seed in range(50)]) for s in SEVERITY_GRID]
        assert stats.spearmanr(SEVERITY_GRID, means)[0] == pytest.approx(1.0)


class TestGenerateSlide:
    def test_full_frame_region_matches_patch(self):
        spec = SyntheticSlideSpec(64, 64, (Region(full_frame(64, 64), 2.0, 0.006),), background_seed=3, seed=3)
        assert generate_slide(spec).image.tobytes() == generate_patch(2.0, seed=3).image.tobytes()

    def test_two_regions(self):
        spec = SyntheticSlideSpec(128, 64, (Region(box(0, 0, 60, 64), 1.0, 0.006),
                                            Region(box(68, 0, 128, 64), 3.0, 0.006)), seed=2)
        smap = generate_slide(spec).severity_map
        assert set(np.unique(smap[~np.isnan(smap)])) == {1.0, 3.0}

    def test_no_regions(self):
        tissue = generate_slide(SyntheticSlideSpec(48, 48))
        assert tissue.detections == [] and np.isnan(tissue.severity_map).all()

    def test_overlapping_regions(self):
        spec = SyntheticSlideSpec(64, 64, (Region(box(0, 0, 40, 40), 1.0, 0.006), Region(box(20, 20, 60, 60), 2.0, 0.006)))
        with pytest.raises(InvalidSpecError):
            generate_slide(spec)

    def test_region_outside_frame(self):
        with pytest.raises(InvalidSpecError):
            SyntheticSlideSpec(32, 32, (Region(box(0, 0, 40, 10), 1.0, 0.006),))

    def test_nuclei_stay_in_their_region(self):
        spec = SyntheticSlideSpec(96, 96, (Region(box(10, 10, 50, 50), 2.5, 0.01),), seed=4)
        tissue = generate_slide(spec)
        assert tissue.nuclei
        for n in tissue.nuclei:
            assert tissue.region_index[int(n.y), int(n.x)] == 0


class TestSimulatePanel:
    def test_noiseless_one(self):
        panel = simulate_panel(1.0, SimulatedPanelConfig(score_noise_sd=0.0))
        assert [o.score for o in panel.scores] == [1] * 10
        assert reference_score(panel).value == 1.0

    def test_noiseless_rounding(self):
        panel = simulate_panel(2.4, SimulatedPanelConfig(score_noise_sd=0.0))
        assert {o.score for o in panel.scores} == {2}

    def test_deterministic(self):
        assert simulate_panel(2.2, seed=5) == simulate_panel(2.2, seed=5)

    def test_mean_at_two(self):
        config = SimulatedPanelConfig(score_noise_sd=0.5)
        refs = [reference_score(simulate_panel(2.0, config, seed=i)).value for i in range(1000)]
        assert abs(np.mean(refs) - 2.0) <= 0.05

    @settings(max_examples=8)
    @given(st.floats(1.5, 2.5), st.floats(0.3, 0.5))
    def test_interior_unbiased(self, s, sd):
        config = SimulatedPanelConfig(score_noise_sd=sd)
        refs = [reference_score(simulate_panel(s, config, seed=i)).value for i in range(10_000)]
        assert abs(np.mean(refs) - s) <= 0.1

    def test_confidence_follows_noise(self):
        config = SimulatedPanelConfig()
        assert config.confidence_for(0.1).value == "certain"
        assert config.confidence_for(0.3).value == "fairly_certain"
        assert config.confidence_for(0.9).value == "not_certain"


def synthetic_tissue(n, size=400, normal=False):
    rng = np.random.default_rng(0)
    nuclei = [Nucleus(float(x), float(y), 3.0, 0.0, 0.0, 0, "normal" if normal else "tumor")
              for x, y in rng.uniform(0, size, (n, 2))]
    spec = SyntheticSlideSpec(size, size, (Region(full_frame(size, size), 1.0, 0.01, normal=normal),))
    return RenderedTissue(np.zeros((size, size, 3), np.float32), np.ones((size, size)),
                          np.zeros((size, size), int), np.zeros((size, size), int), nuclei, spec)


class TestOracleDetect:
    def test_identity(self):
        tissue = generate_patch(2.0, seed=2)
        dets = oracle_detect(tissue)
        assert [(d.x, d.y, d.cls) for d in dets] == [(n.x, n.y, n.cls) for n in tissue.nuclei]

    def test_near_total_miss(self):
        assert oracle_detect(synthetic_tissue(500), miss_rate=1 - 1e-12) == []

    def test_miss_rate_binomial(self):
        # 500 trials at p=0.8: the interval is about +-5.6 standard deviations
        counts = [len(oracle_detect(synthetic_tissue(500), miss_rate=0.2, seed=s)) for s in range(200)]
        assert all(350 <= c <= 450 for c in counts)

    def test_normal_region_class(self):
        dets = oracle_detect(synthetic_tissue(50, normal=True), false_rate=1e-4, seed=1)
        assert {d.cls for d in dets} == {"normal"}

    def test_false_positives_poisson_mean(self):
        counts = [len(oracle_detect(synthetic_tissue(0, size=100), false_rate=1e-3, seed=s)) for s in range(300)]
        assert abs(np.mean(counts) - 10.0) < 1.0

    def test_detections_in_bounds(self):
        tissue = generate_patch(3.0, seed=3)
        for d in oracle_detect(tissue, jitter_sd=5.0, seed=3):
            assert 0 <= d.x < 64 and 0 <= d.y < 64

    @pytest.mark.parametrize("kw", [{"miss_rate": 1.0}, {"false_rate": -0.1}, {"jitter_sd": -1.0}])
    def test_invalid_rates(self, kw):
        with pytest.raises(InvalidInputError):
            oracle_detect(synthetic_tissue(5), **kw)
