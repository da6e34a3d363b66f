import math

import numpy as np
import pytest

from biphoton_lab.config import optics_preset
from biphoton_lab.g2 import CorrelationImage
from biphoton_lab.metrics import (AlphaScan, FitError, MeasurementPlan, MetricError, XiMeasurement,
                                  alpha_grid, batch_xi, calibrate_alpha, correct_overlap,
                                  extract_xi, fit_gaussian_variance, fit_peak_separation, measure,
                                  overlap_fraction, peak_lag, point_seed, ratio_curve,
                                  ratio_quadrature, ratio_with_error)
from biphoton_lab.optics import Flat, Grating, grating_period_for, shaped_correlation
from biphoton_lab.sampler import SourceSpec

CFG = optics_preset("config1", (64, 64))
CFG2 = optics_preset("config2", (64, 64))


def gaussian_image(window, amp, center=(0.0, 0.0), var=4.0, offset=0.0):
    lx, ly = window
    x, y = np.meshgrid(np.arange(-lx, lx + 1), np.arange(-ly, ly + 1))
    v = amp * np.exp(-((x - center[0]) ** 2 + (y - center[1]) ** 2) / (2 * var)) + offset
    return CorrelationImage(v, 100, window)


def plan(frames_per_batch=500, **kw):
    return MeasurementPlan(SourceSpec(1e6, 2e-3, cfg=CFG), per_batch=frames_per_batch, **kw)


class TestExtractXi:
    def test_peak_value(self):
        assert extract_xi(gaussian_image((5, 5), 7.0), (0, 0), 1) == pytest.approx(7.0)

    def test_offset_peak_captured(self):
        img = gaussian_image((5, 5), 7.0, center=(1, -1))
        assert extract_xi(img, (0, 0), 1) == pytest.approx(7.0)

    def test_window_clipped(self):
        with pytest.raises(MetricError):
            extract_xi(gaussian_image((5, 5), 1.0), (5, 0), 1)

    def test_area_metric(self):
        img = CorrelationImage(np.ones((5, 5)), 10, (2, 2))
        assert extract_xi(img, (0, 0), 1, metric="area") == 9.0
        with pytest.raises(MetricError):
            extract_xi(img, (0, 0), 1, metric="volume")

    def test_peak_lag(self):
        # 240 um separation puts each peak 120 um, 15 sample pixels, from the centre
        assert peak_lag(0.24, CFG) == 15
        assert peak_lag(0.04, CFG) == 3


class TestBatches:
    def test_identical_batches_zero_error(self):
        frame = np.random.default_rng(0).poisson(3.0, (1, 8, 8))
        pair = np.concatenate([frame, np.roll(frame, 1, axis=2)])
        stack = np.concatenate([pair] * 4)
        xi = batch_xi(stack, (0, 0), 1, batches=4, per_batch=2, interpolation="off")
        assert xi.stderr == 0.0

    def test_stderr_definition(self):
        xi = XiMeasurement((0, 0), 1, [1.0, 2.0, 3.0, 4.0])
        assert xi.mean == 2.5
        assert xi.stderr == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)

    def test_non_finite_rejected(self):
        with pytest.raises(MetricError):
            XiMeasurement((0, 0), 1, [1.0, math.nan])

    def test_insufficient_frames(self):
        with pytest.raises(MetricError):
            batch_xi(np.zeros((10, 8, 8)), (0, 0), batches=4, per_batch=3)
        with pytest.raises(MetricError):
            batch_xi(np.zeros((10, 8, 8)), (0, 0), batches=2, per_batch=1)

    def test_batches_are_contiguous(self):
        rng = np.random.default_rng(1)
        stack = rng.poisson(2.0, (40, 8, 8)).astype(float)
        xi = batch_xi(stack, (0, 0), 1, batches=4, per_batch=10, interpolation="off",
                      overlap=False)
        one = batch_xi(stack[20:30], (0, 0), 1, batches=1, per_batch=10, interpolation="off",
                       overlap=False)
        assert xi.values[2] == one.values[0]

    def test_doubling_frames_shrinks_error(self):
        # pooled spread of per-batch peak values over replicate seeds
        spread = {}
        for k in (100, 200):
            vals = [measure(plan(k), Flat(), point_seed(7, r), (0, 0)).values for r in range(10)]
            spread[k] = np.var(np.concatenate(vals), ddof=1)
        assert spread[100] / spread[200] == pytest.approx(2.0, rel=0.5)


class TestRatioError:
    def test_linear_sum(self):
        r, e = ratio_with_error(2.0, 0.02, 4.0, 0.04)
        assert r == pytest.approx(0.5)
        assert e == pytest.approx(0.01)

    def test_zero_errors(self):
        assert ratio_with_error(1.0, 0.0, 2.0, 0.0) == (0.5, 0.0)

    def test_quadrature_diagnostic(self):
        assert ratio_quadrature(2.0, 0.02, 4.0, 0.04) == pytest.approx(0.5 * math.hypot(0.01, 0.01))

    @pytest.mark.parametrize("xi, xi0", [(0.0, 1.0), (1.0, 0.0), (-1.0, 2.0)])
    def test_nonpositive(self, xi, xi0):
        with pytest.raises(MetricError):
            ratio_with_error(xi, 0.1, xi0, 0.1)


class TestOverlap:
    def test_fraction(self):
        f = overlap_fraction((2, 1), (4, 8))
        assert f[1, 2] == 1.0
        assert f[0, 0] == pytest.approx((1 - 2 / 8) * (1 - 1 / 4))

    def test_correct_all_ones(self):
        n = 9
        from biphoton_lab.g2 import xcorr_fast
        c = xcorr_fast(np.ones((n, n)), np.ones((n, n)), (4, 4))
        img = correct_overlap(CorrelationImage(c, 2, (4, 4)), (n, n))
        assert np.allclose(img.values, n * n)
        assert "overlap-corrected" in img.flags


class TestGaussianFit:
    def test_noiseless_correlation(self):
        v_px = 1.72e-3 / CFG.sample_pixel**2
        img = gaussian_image((20, 20), 5.0, var=v_px, offset=0.3)
        fit = fit_gaussian_variance(img, CFG, "correlation")
        assert fit.variance == pytest.approx(1.72e-3, rel=1e-3)
        assert fit.converged
        assert fit.offset == pytest.approx(0.3, abs=1e-6)

    def test_noiseless_intensity_off_centre(self):
        v_px = 0.0432 / CFG2.sample_pixel**2
        img = gaussian_image((60, 60), 2.0, center=(3.5, -2.0), var=v_px)
        fit = fit_gaussian_variance(img.values, CFG2, "intensity")
        assert fit.variance == pytest.approx(0.0432, rel=1e-3)
        assert fit.center == pytest.approx((3.5, -2.0), abs=1e-4)

    def test_camera_to_sample_plane(self):
        img = gaussian_image((20, 20), 1.0, var=9.0)
        fit = fit_gaussian_variance(img, CFG, "correlation")
        pitch = CFG.pixel_pitch_um * 1e-3
        assert fit.camera_variance == pytest.approx(9.0 * pitch**2, rel=1e-6)
        assert fit.variance == pytest.approx(fit.camera_variance / CFG.magnification**2)

    def test_excluded_lags_ignored(self):
        img = gaussian_image((20, 20), 5.0, var=25.0)
        v = img.values.copy()
        v[19:22, 20] = 1e6  # artifact column at dx = 0
        fit = fit_gaussian_variance(CorrelationImage(v, 1, (20, 20)), CFG)
        assert fit.variance == pytest.approx(25.0 * CFG.sample_pixel**2, rel=1e-3)

    def test_no_peak(self):
        with pytest.raises(FitError):
            fit_gaussian_variance(np.zeros((9, 9)), CFG, "intensity")

    def test_bad_kind(self):
        with pytest.raises(MetricError):
            fit_gaussian_variance(np.zeros((9, 9)), CFG, "spectral")

    def test_report(self):
        fit = fit_gaussian_variance(gaussian_image((10, 10), 1.0), CFG)
        assert "variance_mm2 = " in fit.report()


class TestAlpha:
    def test_grid_spans_one_period(self):
        g = alpha_grid(8)
        assert g[0] == pytest.approx(-math.pi / 2)
        assert np.diff(g) == pytest.approx([math.pi / 8] * 7)
        assert 0.0 in g
        with pytest.raises(MetricError):
            alpha_grid(4)

    def test_tie_break_toward_zero(self):
        scan = AlphaScan(np.array([-0.4, -0.2, 0.0, 0.2, 0.4]), np.array([5.0, 1.0, 3.0, 1.0, 5.0]),
                         np.full(5, 0.1))
        assert calibrate_alpha(scan) == -0.2
        scan = AlphaScan(np.array([-0.4, -0.2, 0.0, 0.2]), np.array([5.0, 1.0, 1.0, 1.0]),
                         np.full(4, 0.1))
        assert calibrate_alpha(scan) == 0.0

    def test_degenerate(self):
        scan = AlphaScan(alpha_grid(8), np.full(8, 2.0) + 0.01 * np.arange(8), np.full(8, 1.0))
        with pytest.raises(MetricError, match="more frames"):
            calibrate_alpha(scan)

    def test_zero_order_mass_minimal_at_symmetric_shift(self):
        period = grating_period_for(0.4, CFG.wavelength, CFG.focal_length)

        def centre_mass(alpha):
            f = shaped_correlation(Grating(period, alpha), CFG)
            near = np.abs(f.lags) <= math.sqrt(CFG.entanglement_area)
            return float(f.values[np.ix_(near, near)].sum())

        masses = np.array([centre_mass(a) for a in alpha_grid(8)])
        assert np.argmin(masses) == 4          # alpha = 0
        assert masses[4] < 0.05 * masses.max()
        # mass falls monotonically toward the minimum from both sides
        assert np.all(np.diff(masses[:5]) < 0)
        assert np.all(np.diff(masses[4:]) > 0)


class TestSimulatedMeasurements:
    def test_flat_peak_well_above_lag_noise(self):
        one = plan(4000, batches=1, overlap=False)
        xi, (img,) = measure(one, Flat(), 3, (0, 0), window=(30, 30), keep_images=True)
        far = np.abs(np.arange(-30, 31)) >= 20
        noise = img.values[np.ix_(far, far)].std()
        assert xi.mean > 5 * noise

    def test_zero_separation_ratio_is_one(self):
        curve = ratio_curve(plan(500), [0.0], seed=4)
        p = curve.points[0]
        assert math.isinf(p.period)
        assert abs(p.ratio - 1) < 3 * p.ratio_err

    def test_both_grating_peaks_agree(self):
        dx = 0.24
        c = peak_lag(dx, CFG)
        mask = Grating(grating_period_for(dx, CFG.wavelength, CFG.focal_length))
        xi, imgs = measure(plan(1000), mask, 5, (c, 0), window=(c + 3, 4), keep_images=True)
        neg = np.array([extract_xi(i, (-c, 0), 1) for i in imgs])
        err = math.hypot(xi.stderr, neg.std(ddof=1) / 2)
        assert abs(xi.mean - neg.mean()) < 3 * err

    @staticmethod
    def coherent_pair(sep, var, lx=25, ly=8):
        # odd orders up to 7 with the amplitudes of a binary pi grating, 2 sin(n pi/2) / (n pi)
        x, y = np.meshgrid(np.arange(-lx, lx + 1.0), np.arange(-ly, ly + 1.0))
        amp = sum(math.sin(n * math.pi / 2) / (math.pi * n) * np.exp(-(x - n * sep) ** 2 / (4 * var))
                  for n in range(-7, 8, 2))
        return CorrelationImage(amp**2 * np.exp(-y**2 / (2 * var)) + 0.1, 1, (lx, ly))

    @pytest.mark.parametrize("sep", [4.0, 10.0])
    def test_separation_fit_on_synthetic_pair(self, sep):
        var = 27.0
        img = self.coherent_pair(sep, var)
        got = fit_peak_separation(img, CFG, sep + 1, variance=var * CFG.sample_pixel**2, orders=7)
        assert got == pytest.approx(2 * sep * CFG.sample_pixel, rel=1e-6)

    def test_separation_fit_ignores_smear_column(self):
        img = self.coherent_pair(10.0, 27.0)
        v = img.values.copy()
        v[:, 25] += 50.0
        got = fit_peak_separation(CorrelationImage(v, 1, img.window), CFG, 9.0, orders=7)
        assert got == pytest.approx(20 * CFG.sample_pixel, rel=1e-6)

    def test_unsorted_separations_rejected(self):
        with pytest.raises(MetricError):
            ratio_curve(plan(10), [0.2, 0.1])
