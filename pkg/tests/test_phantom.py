import numpy as np
import pytest

from renalseg.phantom import (
    DEFAULT_CURVES,
    PARENCHYMA,
    PhantomSpec,
    TissueCurve,
    acquisition_times,
    gamma_variate,
    generate,
    min_curve_separation,
)

SMALL_GRID = dict(grid_dims=(16, 48, 48), voxel_spacing_mm=(6.0, 6.0, 6.0), n_timepoints=12)


def small_spec(**overrides):
    params = dict(SMALL_GRID)
    params.update(overrides)
    return PhantomSpec(**params)


class TestGammaVariate:
    def test_baseline_before_onset(self):
        curve = TissueCurve("x", A=2.0, t0=15.0, tp=40.0, alpha=2.0, baseline=0.5)
        assert gamma_variate(curve, 15.0) == 0.5
        assert gamma_variate(curve, 3.0) == 0.5

    def test_peak_value_exact(self):
        curve = TissueCurve("x", A=2.0, t0=15.0, tp=40.0, alpha=2.0, baseline=0.5)
        assert abs(gamma_variate(curve, 55.0) - 2.5) < 1e-12

    def test_unimodal_on_dense_grid(self):
        curve = DEFAULT_CURVES[PARENCHYMA]
        ts = np.linspace(0.0, 400.0, 1000)
        values = gamma_variate(curve, ts)
        sign = np.sign(np.diff(values))
        changes = np.count_nonzero(np.diff(sign[sign != 0]) != 0)
        assert changes == 1

    def test_invalid_parameters_rejected(self):
        with pytest.raises(ValueError):
            TissueCurve("x", A=-1.0, t0=0.0, tp=10.0, alpha=1.0, baseline=0.0)
        with pytest.raises(ValueError):
            TissueCurve("x", A=1.0, t0=0.0, tp=0.0, alpha=1.0, baseline=0.0)


class TestGenerate:
    def test_noiseless_labels_follow_parenchyma_curve(self):
        spec = small_spec(noise_sigma=0.0, pelvis_fraction=0.0)
        vol, labels = generate(spec)
        assert labels.max() == 2
        expected = gamma_variate(spec.curves[PARENCHYMA], acquisition_times(spec)).astype(
            np.float32
        )
        for class_id in (1, 2):
            curves = vol.data[:, labels == class_id]
            np.testing.assert_array_equal(curves, expected[:, None].repeat(curves.shape[1], 1))

    def test_same_seed_bit_identical(self):
        spec = small_spec(noise_sigma=0.1, seed=77)
        vol_a, lab_a = generate(spec)
        vol_b, lab_b = generate(small_spec(noise_sigma=0.1, seed=77))
        np.testing.assert_array_equal(vol_a.data, vol_b.data)
        np.testing.assert_array_equal(lab_a, lab_b)

    def test_pelvis_fraction_thins_parenchyma(self):
        normal = generate(small_spec())[1]
        hollow = generate(small_spec(pelvis_fraction=0.7))[1]
        ratio = hollow.sum() / normal.sum()
        assert hollow.sum() < normal.sum()
        assert abs(ratio - (1 - 0.7**3)) < 0.10

    def test_labels_subset_of_parenchyma_voxels(self):
        spec = small_spec(pelvis_fraction=0.5)
        vol, labels = generate(spec)
        expected = gamma_variate(spec.curves[PARENCHYMA], acquisition_times(spec)).astype(
            np.float32
        )
        labelled = vol.data[:, labels > 0]
        np.testing.assert_array_equal(labelled, expected[:, None].repeat(labelled.shape[1], 1))

    def test_out_of_bounds_kidney_rejected(self):
        spec = small_spec(kidney_centers=((5.0, 150.0, 85.0), (48.0, 150.0, 195.0)))
        with pytest.raises(ValueError, match="outside"):
            generate(spec)

    def test_overlapping_kidneys_rejected(self):
        spec = small_spec(kidney_centers=((45.0, 150.0, 130.0), (45.0, 150.0, 140.0)))
        with pytest.raises(ValueError, match="overlap"):
            generate(spec)

    def test_curve_classes_separable(self):
        assert min_curve_separation(small_spec()) > 0.0

    def test_times_strictly_increasing_two_phase(self):
        times = acquisition_times(small_spec(n_timepoints=30, duration_sec=300.0))
        assert times.size == 30
        assert np.all(np.diff(times) > 0)
        early = np.diff(times[times <= 120.0]).mean()
        late = np.diff(times[times >= 120.0]).mean()
        assert early < late


class TestSpecValidation:
    def test_pelvis_fraction_range(self):
        with pytest.raises(ValueError):
            small_spec(pelvis_fraction=1.0)

    def test_noise_sigma_range(self):
        with pytest.raises(ValueError):
            small_spec(noise_sigma=-0.1)
