import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from biphoton_lab.config import optics_preset
from biphoton_lab.optics import (Custom, Flat, Grating, OpticsError, grating_period_for,
                                 shaped_correlation)
from biphoton_lab.sampler import (MinusSampler, SourceSpec, build_minus_sampler, draw_pair_count,
                                  sample_pair, sample_pairs, sum_variance)

CFG = optics_preset("config1", (64, 64))


def period(dx_mm):
    return grating_period_for(dx_mm, CFG.wavelength, CFG.focal_length)


class TestPairCount:
    def test_mean(self):
        rng = np.random.default_rng(0)
        n = draw_pair_count(1e6, 2e-3, rng, size=10_000)
        assert n.mean() == pytest.approx(2000, rel=0.02)

    def test_zero(self):
        rng = np.random.default_rng(0)
        assert np.all(draw_pair_count(0.0, 2e-3, rng, size=100) == 0)

    def test_variance_equals_mean(self):
        rng = np.random.default_rng(1)
        n = draw_pair_count(5e3, 2e-3, rng, size=100_000)
        assert n.var(ddof=1) == pytest.approx(n.mean(), rel=0.05)
        # dispersion index test: (N-1) s^2 / mean is chi-square with N-1 dof
        chi2 = (n.size - 1) * n.var(ddof=1) / n.mean()
        p = stats.chi2.sf(chi2, n.size - 1)
        assert 0.001 < p < 0.999

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            draw_pair_count(-1.0, 2e-3, np.random.default_rng(0))


class TestBuild:
    def test_flat_single_component(self):
        s = build_minus_sampler(Flat(), CFG)
        assert s.kind == "analytic"
        assert s.weights.tolist() == [1.0]
        assert s.centers.tolist() == [[0.0, 0.0]]

    def test_analytic_grating_components(self):
        p = period(0.16)
        s = build_minus_sampler(Grating(p), CFG, mode="analytic")
        xs = sorted(s.centers[:, 0])
        half = 0.08
        assert xs == pytest.approx([-3 * half, -half, half, 3 * half], rel=1e-9)
        assert s.weights.sum() == pytest.approx(1.0)

    def test_analytic_rejects_shift_and_custom(self):
        with pytest.raises(OpticsError):
            build_minus_sampler(Grating(0.5, 0.2), CFG, mode="analytic")
        with pytest.raises(OpticsError):
            build_minus_sampler(Custom(np.zeros((5, 5))), CFG, mode="analytic")

    def test_tabulated_cdf_invariants(self):
        s = build_minus_sampler(Grating(period(0.24)), CFG)
        assert np.all(np.diff(s.cdf) >= 0)
        assert s.cdf[-1] == pytest.approx(1.0, abs=1e-12)
        assert 0.9 < s.transmission <= 1.0

    def test_bad_cdf_rejected(self):
        with pytest.raises(ValueError):
            MinusSampler("tabulated", 1e-3, cdf=np.array([0.5, 0.4, 1.0]),
                         lags=(np.arange(3.0), np.arange(1.0)))
        with pytest.raises(ValueError):
            MinusSampler("analytic", 1e-3, centers=np.zeros((2, 2)), weights=np.array([0.3, 0.3]))


class TestSamplePairs:
    def test_flat_minus_variance(self):
        rng = np.random.default_rng(2)
        ev = sample_pairs(build_minus_sampler(Flat(), CFG), CFG, 100_000, rng)
        d = ev.r1 - ev.r2
        assert d[:, 0].var() == pytest.approx(CFG.entanglement_area, rel=0.03)
        assert d[:, 1].var() == pytest.approx(CFG.entanglement_area, rel=0.03)

    @pytest.mark.parametrize("mask", [Flat(), Grating(period(0.16)), Grating(period(0.4))])
    def test_intensity_variance_is_beam_area(self, mask):
        rng = np.random.default_rng(3)
        ev = sample_pairs(build_minus_sampler(mask, CFG), CFG, 100_000, rng)
        assert ev.r1[:, 0].var() == pytest.approx(CFG.beam_area, rel=0.03)
        assert ev.r1[:, 1].var() == pytest.approx(CFG.beam_area, rel=0.03)

    def test_sum_variance_convention(self):
        assert sum_variance(CFG) == pytest.approx(4 * CFG.beam_area - CFG.entanglement_area)

    def test_grating_two_dominant_peaks(self):
        rng = np.random.default_rng(4)
        ev = sample_pairs(build_minus_sampler(Grating(period(0.24)), CFG), CFG, 100_000, rng)
        dx = (ev.r1 - ev.r2)[:, 0]
        hist, edges = np.histogram(dx, bins=np.arange(-0.4, 0.4001, 0.02))
        centres = 0.5 * (edges[1:] + edges[:-1])
        top2 = np.sort(centres[np.argsort(hist)[-2:]])
        assert top2 == pytest.approx([-0.12, 0.12], abs=0.015)

    @pytest.mark.parametrize("dx", [0.08, 0.16, 0.24, 0.4])
    def test_intensity_mask_independent_ks(self, dx):
        a = sample_pairs(build_minus_sampler(Flat(), CFG), CFG, 100_000, np.random.default_rng(5))
        b = sample_pairs(build_minus_sampler(Grating(period(dx)), CFG), CFG, 100_000,
                         np.random.default_rng(6))
        assert stats.ks_2samp(a.r1[:, 0], b.r1[:, 0]).pvalue > 0.01

    @pytest.mark.parametrize("mask", [Grating(period(0.16)), Grating(period(0.32), 0.4)])
    def test_tabulated_fidelity_total_variation(self, mask):
        field = shaped_correlation(mask, CFG)
        v = np.where(np.abs(field.lags) <= CFG.relay_aperture, 1.0, 0.0)
        v = field.values * v[:, None] * v[None, :]
        v /= v.sum()
        # 64 bins of two lag cells each, aligned with cell boundaries so the uniform
        # in-cell jitter of the sampler never straddles a bin edge
        edges = ((np.arange(65) - 32) * 2 - 0.5) * field.spacing
        gx, gy = np.meshgrid(field.lags, field.lags)
        ref, _, _ = np.histogram2d(gx.ravel(), gy.ravel(), bins=[edges, edges], weights=v.ravel())
        ref = np.append(ref.ravel(), 1 - ref.sum())

        d, _ = build_minus_sampler(mask, CFG).sample(1_000_000, np.random.default_rng(7))
        emp, _, _ = np.histogram2d(d[:, 0], d[:, 1], bins=[edges, edges])
        emp = emp.ravel() / len(d)
        emp = np.append(emp, 1 - emp.sum())
        assert 0.5 * np.abs(emp - ref).sum() < 0.02

    def test_analytic_vs_tabulated_order_masses(self):
        p = period(0.32)
        rng = np.random.default_rng(8)
        d_a, _ = build_minus_sampler(Grating(p), CFG, mode="analytic").sample(400_000, rng)
        d_t, ok = build_minus_sampler(Grating(p), CFG).sample(400_000, rng)
        d_t = d_t[ok]
        half = 0.16

        def masses(d):
            m = np.array([np.mean(np.abs(d[:, 0] - k * half) < half) for k in (-3, -1, 1, 3)])
            return m / m.sum()

        assert masses(d_a) == pytest.approx(masses(d_t), rel=0.03)

    def test_leak_follows_flat(self):
        rng = np.random.default_rng(9)
        s = build_minus_sampler(Grating(period(0.4)), CFG, slm_efficiency=0.6)
        d, _ = s.sample(200_000, rng)
        near_zero = np.mean(np.abs(d[:, 0]) < 2 * math.sqrt(CFG.entanglement_area))
        # shaped pairs leave the centre almost empty, so the centre holds the leaked 40 percent
        flat_inside = math.erf(2 / math.sqrt(2))
        assert near_zero == pytest.approx(0.4 * flat_inside, rel=0.05)

    def test_fourier_pairing_anticorrelated(self):
        rng = np.random.default_rng(10)
        ev = sample_pairs(build_minus_sampler(Flat(), CFG), CFG, 50_000, rng, anticorrelated=True)
        s = ev.r1 + ev.r2
        assert s[:, 0].var() == pytest.approx(CFG.entanglement_area, rel=0.05)

    def test_sample_pair_shape(self):
        ev = sample_pair(build_minus_sampler(Flat(), CFG), CFG, np.random.default_rng(0))
        assert ev.r1.shape == (2,) and ev.r2.shape == (2,)

    @given(st.integers(0, 2**63))
    @settings(max_examples=10, deadline=None)
    def test_reproducible(self, seed):
        s = build_minus_sampler(Flat(), CFG)
        a = sample_pairs(s, CFG, 100, np.random.default_rng(seed))
        b = sample_pairs(s, CFG, 100, np.random.default_rng(seed))
        assert np.array_equal(a.r1, b.r1) and np.array_equal(a.r2, b.r2)


class TestSourceSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            SourceSpec(-1.0)
        with pytest.raises(ValueError):
            SourceSpec(1e6, slm_efficiency=0.0)
        with pytest.raises(ValueError):
            SourceSpec(1e6, pairing="sideways")

    def test_mean_pairs(self):
        assert SourceSpec(1e6, 2e-3).mean_pairs == pytest.approx(2000)
