import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mitune.schedule import NoiseSchedule, ScheduleError, build_schedule, kappa_at


class TestBuildSchedule:
    def test_single_step(self):
        s = build_schedule(1, 0.5, 0.5)
        np.testing.assert_array_equal(s.betas, [0.5])
        np.testing.assert_array_equal(s.alphas, [0.5])
        np.testing.assert_array_equal(s.alpha_bars, [0.5])
        np.testing.assert_array_equal(s.kappas, [1.0])
        np.testing.assert_allclose(s.sigmas, [math.sqrt(0.5)])

    def test_linear_endpoints_inclusive(self):
        s = build_schedule(1000, 1e-4, 0.02)
        assert s.betas[0] == 1e-4
        assert s.betas[-1] == 0.02
        assert np.all(np.diff(s.betas) >= 0)

    def test_default_schedule_frozen_values(self):
        # independent pure-Python product, frozen
        s = build_schedule()
        np.testing.assert_allclose(s.alpha_bars[-1], 4.0358297653756754e-05, rtol=1e-12)
        np.testing.assert_allclose(s.alpha_bars[499], 0.07858724288177821, rtol=1e-12)
        np.testing.assert_allclose(kappa_at(s, 1), 500.05000500055513, rtol=1e-12)
        np.testing.assert_allclose(kappa_at(s, 500), 5.503431925619709, rtol=1e-12)
        np.testing.assert_allclose(kappa_at(s, 1000), 10.204493468637875, rtol=1e-12)

    def test_desk_schedule_frozen_values(self):
        s = build_schedule(200, 5e-4, 0.05)
        np.testing.assert_allclose(s.alpha_bars[99], 0.274664235068709, rtol=1e-12)
        np.testing.assert_allclose(s.alpha_bars[-1], 0.005877870410637744, rtol=1e-12)

    @pytest.mark.parametrize("T,lo,hi", [(0, 0.1, 0.2), (-3, 0.1, 0.2), (10, 0.0, 0.2),
                                         (10, 0.3, 0.2), (10, 0.1, 1.0), (10, -0.1, 0.2)])
    def test_rejects_bad_parameters(self, T, lo, hi):
        with pytest.raises(ScheduleError):
            build_schedule(T, lo, hi)

    def test_rejects_unknown_kind(self):
        with pytest.raises(ScheduleError):
            build_schedule(10, 0.1, 0.2, kind="cosine")

    def test_tables_are_read_only(self):
        s = build_schedule(10, 0.1, 0.2)
        with pytest.raises(ValueError):
            s.kappas[0] = 1.0


class TestKappa:
    def test_substitution_example(self):
        # beta=0.02, alpha=0.98, abar=0.5, T=100
        assert math.isclose(0.02 * 100 / (2 * 0.98 * 0.5), 2.0408163265306123)
        betas = np.full(100, 0.02)
        s = NoiseSchedule.from_betas(betas)
        t = int(np.argmin(np.abs(s.alpha_bars - 0.5))) + 1
        expected = 0.02 * 100 / (2 * 0.98 * (1 - s.alpha_bars[t - 1]))
        assert kappa_at(s, t) == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("t", [0, 11, -1])
    def test_out_of_range(self, t):
        with pytest.raises(ScheduleError):
            kappa_at(build_schedule(10, 0.1, 0.2), t)

    def test_non_integer_step_rejected(self):
        with pytest.raises(ScheduleError):
            kappa_at(build_schedule(10, 0.1, 0.2), 2.0)

    def test_algebraic_inverse(self):
        s = build_schedule()
        back = s.kappas * 2 * s.alphas * (1 - s.alpha_bars) / s.betas
        np.testing.assert_allclose(back, s.T, rtol=1e-12)


class TestScheduleInvariants:
    @settings(max_examples=60, deadline=None)
    @given(T=st.integers(1, 2000), lo=st.floats(1e-6, 0.5), span=st.floats(0.0, 0.49))
    def test_invariants(self, T, lo, span):
        hi = min(lo + span, 0.999)
        try:
            s = build_schedule(T, lo, hi)
        except ScheduleError:
            # only legitimate when the cumulative product leaves float64 range
            log_abar = np.cumsum(np.log1p(-np.linspace(lo, hi, T)))
            assert log_abar[-1] < -700
            return
        assert np.all((s.betas > 0) & (s.betas < 1))
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert 0 < s.alpha_bars[-1] <= s.alpha_bars[0] < 1
        assert np.all(np.isfinite(s.kappas)) and np.all(s.kappas > 0)
        np.testing.assert_allclose(s.kappas, s.betas * T / (2 * s.alphas * (1 - s.alpha_bars)),
                                   rtol=1e-12)

    def test_round_trip_bit_identical(self):
        s = build_schedule(300, 2e-4, 0.03)
        r = NoiseSchedule.from_betas(np.array(s.betas))
        for name in ("alphas", "alpha_bars", "sigmas", "kappas"):
            np.testing.assert_array_equal(getattr(r, name), getattr(s, name))

    def test_underflowing_schedule_rejected(self):
        with pytest.raises(ScheduleError, match="underflow"):
            build_schedule(2000, 0.5, 0.9)

    def test_kappa_one_finite(self):
        s = build_schedule()
        assert 1 - s.alpha_bars[0] == pytest.approx(s.betas[0])
        assert np.isfinite(s.kappas[0]) and s.kappas[0] > 0
