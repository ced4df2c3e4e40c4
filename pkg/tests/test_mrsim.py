import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itx import metrics as M
from itx import mrsim


@pytest.fixture(scope="module")
def phantom():
    return mrsim.gen_phantom(mrsim.PhantomSpec())


@pytest.fixture(scope="module")
def g4():
    return mrsim.gen_gfactor(4, 32, 32)


def uniform_series(value, shape=(2, 16, 16)):
    return mrsim.ComplexSeries(np.full(shape, value), np.zeros(shape))


class TestPhantom:
    def test_signal_levels(self, phantom):
        gt, blood, myo = phantom
        mag = gt.magnitude()
        assert mag[blood].mean() == pytest.approx(105.7, rel=0.01)
        assert mag[myo].mean() == pytest.approx(37.0, rel=0.01)

    def test_masks(self, phantom):
        _, blood, myo = phantom
        assert blood.any() and myo.any()
        assert not (blood & myo).any()

    def test_complex_and_finite(self, phantom):
        gt, _, _ = phantom
        assert np.isfinite(gt.magnitude()).all()
        assert np.abs(gt.imag).max() > 1  # the phase map makes the data genuinely complex

    def test_beating(self, phantom):
        _, blood, _ = phantom
        assert len({int(b.sum()) for b in blood}) > 1

    def test_no_beat_frames_identical(self):
        gt, blood, _ = mrsim.gen_phantom(mrsim.PhantomSpec(beat=0.0))
        for f in range(1, gt.shape[0]):
            np.testing.assert_array_equal(gt.real[f], gt.real[0])
            np.testing.assert_array_equal(blood[f], blood[0])

    def test_deterministic(self):
        a = mrsim.gen_phantom(mrsim.PhantomSpec(seed=4))[0]
        b = mrsim.gen_phantom(mrsim.PhantomSpec(seed=4))[0]
        np.testing.assert_array_equal(a.real, b.real)

    @pytest.mark.parametrize("kw", [dict(blood=30.0), dict(background=-1.0), dict(beat=1.0), dict(F=0)])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            mrsim.PhantomSpec(**kw)

    def test_geometry_out_of_bounds(self):
        with pytest.raises(ValueError):
            mrsim.gen_phantom(mrsim.PhantomSpec(blood_radius=0.4, myo_thickness=0.2))


class TestGFactor:
    def test_unit(self):
        assert np.all(mrsim.gen_gfactor(1, 9, 7).g == 1.0)

    def test_centre_peak(self):
        assert mrsim.gen_gfactor(4, 32, 32).g[16, 16] == 4.0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1, 8), st.integers(1, 40), st.integers(1, 40))
    def test_range(self, R, H, W):
        g = mrsim.gen_gfactor(R, H, W).g
        assert g.shape == (H, W) and np.isfinite(g).all()
        assert g.min() >= 1
        assert abs(g.max() - R) < 1e-6

    def test_invalid(self):
        with pytest.raises(ValueError):
            mrsim.gen_gfactor(0.5, 4, 4)


class TestNoise:
    def test_zero_noise(self, phantom, g4):
        gt = phantom[0]
        out = mrsim.add_mr_noise(gt, 0.0, g4, 1)
        np.testing.assert_array_equal(out.real, gt.real)
        np.testing.assert_array_equal(out.imag, gt.imag)

    def test_monte_carlo_sd(self):
        # 10,000 frames of a zero image: per-pixel SD against nn * g
        g = mrsim.gen_gfactor(3, 8, 8)
        zero = mrsim.ComplexSeries(np.zeros((10_000, 8, 8)), np.zeros((10_000, 8, 8)))
        noisy = mrsim.add_mr_noise(zero, 2.5, g, 7)
        for sd in (noisy.real.std(axis=0), noisy.imag.std(axis=0)):
            assert np.abs(sd / (2.5 * g.g) - 1).max() < 0.03

    def test_real_imag_uncorrelated(self):
        g = mrsim.gen_gfactor(2, 4, 4)
        zero = mrsim.ComplexSeries(np.zeros((10_000, 4, 4)), np.zeros((10_000, 4, 4)))
        noisy = mrsim.add_mr_noise(zero, 1.0, g, 3)
        for i in range(4):
            for j in range(4):
                rho = np.corrcoef(noisy.real[:, i, j], noisy.imag[:, i, j])[0, 1]
                assert abs(rho) < 0.02

    def test_seeded(self, phantom, g4):
        a = mrsim.add_mr_noise(phantom[0], 3.0, g4, 11)
        b = mrsim.add_mr_noise(phantom[0], 3.0, g4, 11)
        np.testing.assert_array_equal(a.real, b.real)

    def test_negative(self, phantom, g4):
        with pytest.raises(ValueError):
            mrsim.add_mr_noise(phantom[0], -1.0, g4, 0)


class TestMedianSNR:
    def test_no_noise(self, phantom, g4):
        gt = phantom[0]
        mag = gt.magnitude()
        fg = mag > 0.1 * mag.max()
        assert mrsim.global_median_snr(gt, 0.0, g4) == pytest.approx(np.median(mag[fg]))

    def test_closed_form_half(self):
        g = mrsim.gen_gfactor(1, 16, 16)
        assert mrsim.global_median_snr(uniform_series(10.0), math.sqrt(3), g) == pytest.approx(5.0)

    def test_brute_force(self, phantom, g4):
        gt = phantom[0]
        mag = gt.magnitude()
        thr = 0.1 * mag.max()
        vals = []
        for f in range(gt.shape[0]):
            for i in range(32):
                for j in range(32):
                    if mag[f, i, j] > thr:
                        vals.append(mag[f, i, j] / math.sqrt(1 + (7.0 * g4.g[i, j]) ** 2))
        assert abs(mrsim.global_median_snr(gt, 7.0, g4) - float(np.median(vals))) < 1e-6

    def test_strictly_decreasing(self, phantom, g4):
        vals = [mrsim.global_median_snr(phantom[0], nn, g4) for nn in np.linspace(0, 50, 101)]
        assert all(b < a for a, b in zip(vals, vals[1:]))


class TestSolve:
    def test_closed_form(self):
        g = mrsim.gen_gfactor(1, 16, 16)
        nn = mrsim.solve_noise_sd(uniform_series(23.6), g, 8.0)
        assert nn == pytest.approx(math.sqrt((23.6 / 8) ** 2 - 1), rel=1e-7)
        assert round(nn, 4) == 2.7753

    def test_current_level(self, phantom, g4):
        cur = mrsim.global_median_snr(phantom[0], 0.0, g4)
        assert mrsim.solve_noise_sd(phantom[0], g4, cur) == 0.0

    def test_infeasible(self, phantom, g4):
        with pytest.raises(mrsim.InfeasibleTarget):
            mrsim.solve_noise_sd(phantom[0], g4, 1e4)
        with pytest.raises(mrsim.InfeasibleTarget):
            mrsim.solve_noise_sd(phantom[0], g4, 0.0)


class TestLadder:
    def test_default_ladder(self, phantom, g4):
        ladder = mrsim.NoiseLadder()
        levels = mrsim.make_snr_ladder(phantom[0], g4, ladder)
        assert [lv.target for lv in levels] == list(mrsim.DEFAULT_TARGETS)
        for lv in levels:
            assert abs(lv.measured / lv.target - 1) < 0.005
        assert all(b < a for a, b in zip(ladder.nn, ladder.nn[1:]))

    def test_seeded(self, phantom, g4):
        a = mrsim.make_snr_ladder(phantom[0], g4, mrsim.NoiseLadder(targets=(1.0,), seed=5))
        b = mrsim.make_snr_ladder(phantom[0], g4, mrsim.NoiseLadder(targets=(1.0,), seed=5))
        np.testing.assert_array_equal(a[0].noisy.real, b[0].noisy.real)

    def test_targets_must_increase(self):
        with pytest.raises(ValueError):
            mrsim.NoiseLadder(targets=(1.0, 0.5))

    def test_input_quality_monotone(self, phantom, g4):
        gt = phantom[0]
        levels = mrsim.make_snr_ladder(gt, g4, mrsim.NoiseLadder(seed=9))
        s = M.display_scale(gt.magnitude())
        ps = [M.psnr(lv.noisy.magnitude() * s, gt.magnitude() * s) for lv in levels]
        ss = [M.ssim(lv.noisy.magnitude() * s, gt.magnitude() * s) for lv in levels]
        assert all(b > a for a, b in zip(ps, ps[1:]))
        assert all(b > a for a, b in zip(ss, ss[1:]))

    def test_cnr_falls_with_snr(self, phantom, g4):
        # expected CNR over common noise draws, in per-pixel SNR units
        gt, blood, myo = phantom
        nns = [mrsim.solve_noise_sd(gt, g4, t) for t in mrsim.DEFAULT_TARGETS]
        means = []
        for nn in nns:
            vals = [M.cnr(mrsim.snr_map(mrsim.add_mr_noise(gt, nn, g4, s).magnitude(), nn, g4), blood, myo)
                    for s in range(200)]
            means.append(np.mean(vals))
        assert all(b > a for a, b in zip(means, means[1:]))
        assert means[0] < 0.05 * M.cnr(gt.magnitude(), blood, myo)


def test_series_roundtrip(tmp_path, phantom):
    gt = phantom[0]
    gt.save(tmp_path / "gt")
    back = mrsim.ComplexSeries.load(tmp_path / "gt")
    np.testing.assert_array_equal(back.real, gt.real)
    np.testing.assert_array_equal(back.imag, gt.imag)


def test_series_shape_check():
    with pytest.raises(ValueError):
        mrsim.ComplexSeries(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))
