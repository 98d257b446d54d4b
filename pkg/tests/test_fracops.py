import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from fbm_ergo.fracops import (
    AlphaExponent,
    CostEvaluator,
    CostValue,
    DriftSignal,
    FracopsError,
    alpha_norm,
    apply_DH,
    apply_DH_inverse,
    bump_path,
    cost,
    drift_B_to_w,
    drift_w_to_B,
    future_constant,
    future_kernel_g2,
    increment_filter,
    increment_filter_inverse,
    inversion_constant,
    series_reciprocal,
    tail_constant,
)
from fbm_ergo.noise import PastPath, TimeGrid, normalization, steps_for

# L2 / sup constant of drift_B_to_w at H = 0.3 on [0, 1], fitted once on 40
# random trigonometric drifts (largest observed ratio 0.80, rounded up)
L2_SUP_CONSTANT = 1.0


def _past_grid(dt=2.0**-6, horizon=64.0):
    return TimeGrid(dt, steps_for(horizon, dt), -horizon)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


class TestTypes:
    def test_alpha_range(self):
        AlphaExponent(0.2, 0.3)
        for bad in (0.0, 0.3, 0.5, -0.1):
            with pytest.raises(FracopsError):
                AlphaExponent(bad, 0.3)

    def test_cost_value(self):
        with pytest.raises(FracopsError):
            CostValue(-1.0)
        assert CostValue(0.2) < CostValue(0.3)

    def test_drift_signal_shape(self):
        with pytest.raises(FracopsError):
            DriftSignal(TimeGrid(0.5, 4), np.zeros(3))
        g = DriftSignal(TimeGrid(0.5, 4), np.arange(4.0))
        assert (g + g.scaled(2.0)).values[:, 0].tolist() == [0.0, 3.0, 6.0, 9.0]


# ---------------------------------------------------------------------------
# D_H and its inverse
# ---------------------------------------------------------------------------


def _quad_DH(h, a, center, width, t):
    """``a (int^t (t-s)^{H-1/2} w'(s) ds - int^0 (-s)^{H-1/2} w'(s) ds)`` for a bump."""

    def dw(s):
        x = (s - center) / width
        if abs(x) >= 1.0:
            return 0.0
        return math.exp(-1.0 / (1.0 - x * x)) * (-2.0 * x / (1.0 - x * x) ** 2) / width

    def part(u):
        lo, hi = center - width, min(u, center + width)
        if hi <= lo:
            return 0.0
        return integrate.quad(lambda s: (u - s) ** (h - 0.5) * dw(s), lo, hi, limit=200, points=[center])[0]

    return a * (part(t) - part(0.0))


class TestApplyDH:
    def test_identity_at_half(self):
        w = PastPath.from_increments(np.random.default_rng(0).standard_normal((64, 1)), 0.125)
        assert apply_DH(w, 0.5) is w

    def test_zero(self):
        assert np.all(apply_DH(PastPath.zeros(0.125, 8.0), 0.3).values == 0.0)

    @pytest.mark.parametrize("h", [0.3, 0.7])
    def test_quadrature_oracle(self, h):
        grid = _past_grid(2.0**-8, 8.0)
        w = PastPath(grid, bump_path(grid, -4.0, 1.5))
        out = apply_DH(w, h).values[:, 0]
        a = normalization(h, grid.dt, grid.n_steps)
        idx = np.arange(0, grid.n_steps + 1, 64)
        ref = np.array([_quad_DH(h, a, -4.0, 1.5, grid.times[i]) for i in idx])
        assert np.max(np.abs(out[idx] - ref)) <= 1e-3 * np.max(np.abs(ref))

    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        w1 = PastPath.from_increments(rng.standard_normal((128, 1)), 2.0**-4)
        w2 = PastPath.from_increments(rng.standard_normal((128, 1)), 2.0**-4)
        lhs = apply_DH(PastPath(w1.grid, a * w1.values + b * w2.values), 0.3).values
        rhs = a * apply_DH(w1, 0.3).values + b * apply_DH(w2, 0.3).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestInversion:
    def test_symmetry_of_constant(self):
        for h in (0.1, 0.3):
            assert inversion_constant(h, 2.0**-8) == inversion_constant(1 - h, 2.0**-8)

    @pytest.mark.parametrize("h", [0.1, 0.3, 0.7, 0.9])
    def test_future_constant_closed_form(self, h):
        # (1/2 - H) a_H gamma_H a_{1-H} = cos(pi H) / pi in the continuum
        assert future_constant(h, 2.0**-6) == pytest.approx(math.cos(math.pi * h) / math.pi, rel=1e-4)

    def test_tail_constant(self):
        assert tail_constant(0.3, 2.0**-6) == pytest.approx(0.4 * normalization(0.3, 2.0**-6, 4096))

    def test_identity_at_half(self):
        w = PastPath.from_increments(np.ones((8, 1)), 0.5)
        assert apply_DH_inverse(w, 0.5) is w

    def test_zero(self):
        assert np.all(apply_DH_inverse(PastPath.zeros(0.125, 8.0), 0.7).values == 0.0)

    @pytest.mark.parametrize("h", [0.3, 0.7])
    def test_round_trip_smooth(self, h):
        grid = _past_grid(2.0**-8, 16.0)
        w = PastPath(grid, bump_path(grid, -6.0, 2.0))
        back = apply_DH_inverse(apply_DH(w, h), h).values
        assert np.max(np.abs(back - w.values)) <= 1e-2 * np.max(np.abs(w.values))


class TestIncrementFilter:
    def test_reciprocal(self):
        d = increment_filter(0.3, 2.0**-6, 256)
        inv = increment_filter_inverse(0.3, 2.0**-6, 256)
        prod = np.convolve(d, inv)[:256]
        expected = np.zeros(256)
        expected[0] = 1.0
        np.testing.assert_allclose(prod, expected, atol=1e-12)

    def test_series_reciprocal_geometric(self):
        # 1 / (1 - x) = 1 + x + x^2 + ...
        np.testing.assert_allclose(series_reciprocal(np.array([1.0, -1.0]), 10), np.ones(10), atol=1e-14)

    def test_brownian_filter(self):
        d = increment_filter(0.5, 2.0**-3, 5)
        assert d.tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]


# ---------------------------------------------------------------------------
# Drift transfers
# ---------------------------------------------------------------------------


def _box_signal(dt=2.0**-6):
    grid = TimeGrid(dt, steps_for(4.0, dt), -2.0)
    vals = np.zeros((grid.n_steps, 1))
    mids = grid.origin + dt * (np.arange(grid.n_steps) + 0.5)
    vals[(mids > -1.0) & (mids < 0.0)] = 1.0
    return DriftSignal(grid, vals)


class TestDriftTransfer:
    def test_zero(self):
        g = DriftSignal(TimeGrid(0.125, 16, -1.0), np.zeros(16))
        assert np.all(drift_w_to_B(g, 0.3).values == 0.0)
        assert np.all(drift_B_to_w(g, 0.3).values == 0.0)

    @pytest.mark.parametrize("h", [0.3, 0.7])
    def test_box_closed_form_general(self, h):
        # g_B = a_H ((t + 1)^{H-1/2} - t^{H-1/2}) for t > 0; cell averages exactly
        g = _box_signal()
        out = drift_w_to_B(g, h).values[:, 0]
        a = normalization(h, g.grid.dt, 4096)
        q = h + 0.5
        times = g.grid.times
        pos = times[:-1] >= 0.0
        edges = times[times >= 0.0]
        prim = ((edges + 1.0) ** q - edges**q) / q
        ref = a * np.diff(prim) / g.grid.dt
        np.testing.assert_allclose(out[pos], ref, rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("h", [0.3, 0.7])
    def test_box_closed_form_vanishing_after(self, h):
        g = _box_signal()
        out = drift_w_to_B(g, h, mode="vanishing_after_t0", t0=0.0).values[:, 0]
        a = normalization(h, g.grid.dt, 4096)
        t = g.midpoints
        pos = t > 0
        ref = a * ((t[pos] + 1.0) ** (h - 0.5) - t[pos] ** (h - 0.5))
        np.testing.assert_allclose(out[pos], ref, rtol=1e-9)

    def test_modes_agree_with_general(self):
        g = _box_signal()
        gen = drift_w_to_B(g, 0.3).values
        after = drift_w_to_B(g, 0.3, mode="vanishing_after_t0", t0=0.0).values
        later = g.midpoints > 0.5
        assert np.max(np.abs(gen[later] - after[later])) < 1e-3

    def test_vanishing_before_matches_general(self):
        grid = TimeGrid(2.0**-6, 256, 0.0)
        vals = np.zeros((256, 1))
        vals[64:] = 1.0
        g = DriftSignal(grid, vals)
        gen = drift_w_to_B(g, 0.7).values
        before = drift_w_to_B(g, 0.7, mode="vanishing_before_t0", t0=1.0).values
        assert np.max(np.abs(gen[80:] - before[80:])) < 1e-2 * np.max(np.abs(gen))

    def test_mode_preconditions(self):
        g = _box_signal()
        with pytest.raises(FracopsError):
            drift_w_to_B(g, 0.3, mode="vanishing_after_t0", t0=-1.5)
        with pytest.raises(FracopsError):
            drift_w_to_B(g, 0.3, mode="vanishing_before_t0", t0=-0.5)
        with pytest.raises(FracopsError):
            drift_w_to_B(g, 0.3, mode="sideways")

    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        grid = TimeGrid(2.0**-4, 64, -2.0)
        g1 = DriftSignal(grid, rng.standard_normal(64))
        g2 = DriftSignal(grid, rng.standard_normal(64))
        for op in (drift_w_to_B, drift_B_to_w):
            lhs = op(g1.scaled(a) + g2.scaled(b), 0.3).values
            rhs = a * op(g1, 0.3).values + b * op(g2, 0.3).values
            np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    @pytest.mark.parametrize("h", [0.1, 0.3, 0.7, 0.9])
    def test_round_trip_smooth(self, h):
        grid = TimeGrid(2.0**-8, steps_for(8.0, 2.0**-8), -4.0)
        vals = bump_path(grid, 0.0, 1.5)[:-1]
        g = DriftSignal(grid, vals)
        back = drift_B_to_w(drift_w_to_B(g, h), h).values
        assert np.max(np.abs(back - vals)) <= 1e-2 * np.max(np.abs(vals))

    def test_l2_bounded_by_sup_small_h(self):
        dt = 2.0**-6
        grid = TimeGrid(dt, 64, 0.0)
        rng = np.random.default_rng(2024)
        t = grid.times[:-1] + dt / 2
        k = np.arange(1, 6)
        for _ in range(40):
            amp = rng.standard_normal(5) / k
            ph = rng.uniform(0, 2 * np.pi, 5)
            gb = (amp * np.sin(np.pi * k * t[:, None] + ph)).sum(axis=1)
            gw = drift_B_to_w(DriftSignal(grid, gb), 0.3).values
            assert math.sqrt(np.sum(gw**2) * dt) <= L2_SUP_CONSTANT * np.max(np.abs(gb))


# ---------------------------------------------------------------------------
# Future kernel and alpha-norm
# ---------------------------------------------------------------------------


class TestFutureKernel:
    def _g1(self, dt=2.0**-6, vals=None):
        grid = TimeGrid(dt, steps_for(1.0, dt), 0.0)
        return DriftSignal(grid, np.ones(grid.n_steps) if vals is None else vals)

    def test_zero(self):
        g = self._g1(vals=np.zeros(64))
        assert np.all(future_kernel_g2(g, 1.0, 4.0, 0.3).values == 0.0)

    def test_linear(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal(64), rng.standard_normal(64)
        lhs = future_kernel_g2(self._g1(vals=2 * a - b), 1.0, 4.0, 0.3).values
        rhs = 2 * future_kernel_g2(self._g1(vals=a), 1.0, 4.0, 0.3).values - future_kernel_g2(
            self._g1(vals=b), 1.0, 4.0, 0.3
        ).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_quadrature_oracle(self):
        h, dt, t2 = 0.3, 2.0**-6, 4.0
        out = future_kernel_g2(self._g1(dt), 1.0, t2, h)
        k = steps_for(1.0, dt) - 1
        t = out.midpoints[k]
        c = future_constant(h, dt)
        ref = c * t ** (0.5 - h) * integrate.quad(lambda s: (t2 - s) ** (h - 0.5) / (t + t2 - s), 0.0, 1.0)[0]
        assert out.values[k, 0] == pytest.approx(ref, rel=1e-10)

    def test_ratio_precondition(self):
        with pytest.raises(FracopsError, match="ratio precondition violated"):
            future_kernel_g2(self._g1(), 1.0, 2.0, 0.3)

    def test_default_window(self):
        out = future_kernel_g2(self._g1(), 1.0, 4.0, 0.3)
        assert out.grid.end == pytest.approx(64.0)


class TestAlphaNorm:
    def test_zero(self):
        assert alpha_norm(DriftSignal(TimeGrid(0.25, 8), np.zeros(8)), 0.25) == 0.0

    def test_unit_box(self):
        g = DriftSignal(TimeGrid(2.0**-6, 64), np.ones(64))
        assert alpha_norm(g, 0.25) == pytest.approx(math.sqrt((2**1.5 - 1) / 1.5), abs=1e-12)
        assert alpha_norm(g, 0.25) == pytest.approx(1.10406, abs=1e-5)

    @given(st.floats(-10, 10), st.integers(0, 2**31 - 1))
    @settings(max_examples=25)
    def test_homogeneity(self, c, seed):
        g = DriftSignal(TimeGrid(0.25, 16), np.random.default_rng(seed).standard_normal(16))
        assert alpha_norm(g.scaled(c), 0.3) == pytest.approx(abs(c) * alpha_norm(g, 0.3), rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# Cost
# ---------------------------------------------------------------------------


def _random_past_drift(rng, dt=2.0**-4, horizon=16.0, newest_zero=1.0):
    grid = _past_grid(dt, horizon)
    n = grid.n_steps
    vals = np.zeros((n, 1))
    lo = rng.integers(0, n // 2)
    hi = n - steps_for(newest_zero, dt)
    vals[lo:hi, 0] = rng.standard_normal(hi - lo)
    return DriftSignal(grid, vals)


def _age(g: DriftSignal, m: int) -> DriftSignal:
    """The same past drift seen ``m`` cells later (oldest cells drop out)."""
    vals = np.zeros_like(g.values)
    vals[: g.grid.n_steps - m] = g.values[m:]
    return DriftSignal(g.grid, vals)


class TestCost:
    def test_zero(self):
        g = DriftSignal(_past_grid(2.0**-4, 16.0), np.zeros(256))
        assert cost(g, 0.2, 0.3).value == 0.0

    def test_requires_past_grid(self):
        with pytest.raises(FracopsError):
            cost(DriftSignal(TimeGrid(0.25, 8), np.ones(8)), 0.2, 0.3)

    def test_rt_norm_quadrature_oracle(self):
        h, a, dt = 0.3, 0.25, 2.0**-6
        ev = CostEvaluator(h, a, dt, 4096)
        mags = np.zeros(4096)
        mags[-64:] = 1.0
        rt = ev.rt_norms(mags)
        c = future_constant(h, dt)
        for T in (0.25, 1.0, 8.0):

            def r(t):
                return c * t ** (0.5 - h) * integrate.quad(lambda s: (T - s) ** (h - 0.5) / (t + T - s), -1.0, 0.0)[0]

            sq = integrate.quad(lambda t: (1 + t) ** (2 * a) * r(t) ** 2, 0, 1, limit=200)[0]
            sq += integrate.quad(lambda t: (1 + t) ** (2 * a) * r(t) ** 2, 1, np.inf, limit=200)[0]
            j = int(np.flatnonzero(ev.ladder == T)[0])
            assert rt[j] == pytest.approx(math.sqrt(sq), rel=1e-4)

    def test_tail_term_closed_form(self):
        # g = 1 on [-2, -1]: C_K int_1^2 s^{H-3/2} ds
        h, dt = 0.3, 2.0**-4
        ev = CostEvaluator(h, 0.2, dt, 256)
        mags = np.zeros(256)
        mags[-32:-16] = 1.0
        ref = tail_constant(h, dt, 16.0) * (1.0 - 2.0 ** (h - 0.5)) / (0.5 - h)
        assert ev.tail(mags) == pytest.approx(ref, rel=1e-12)

    def test_newest_cell_gives_infinite_cost_for_small_h(self):
        vals = np.zeros(256)
        vals[-1] = 1.0
        g = DriftSignal(_past_grid(2.0**-4, 16.0), vals)
        assert math.isinf(cost(g, 0.2, 0.3).value)
        assert math.isfinite(cost(g, 0.2, 0.7).value)

    @pytest.mark.parametrize("h", [0.3, 0.7])
    @given(seed=st.integers(0, 2**31 - 1), c=st.floats(-5, 5))
    @settings(max_examples=15, deadline=None)
    def test_norm_properties(self, h, seed, c):
        rng = np.random.default_rng(seed)
        g1, g2 = _random_past_drift(rng), _random_past_drift(rng)
        k1, k2 = cost(g1, 0.2, h).value, cost(g2, 0.2, h).value
        assert cost(g1 + g2, 0.2, h).value <= k1 + k2 + 1e-12
        assert cost(g1.scaled(c), 0.2, h).value == pytest.approx(abs(c) * k1, rel=1e-10, abs=1e-14)

    @pytest.mark.parametrize("h", [0.3, 0.7])
    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=10, deadline=None)
    def test_shift_monotone(self, h, seed):
        g = _random_past_drift(np.random.default_rng(seed))
        prev = cost(g, 0.2, h).value
        for m in (1, 2, 4, 16, 64, 128):
            cur = cost(_age(g, m), 0.2, h).value
            assert cur <= prev * (1 + 1e-9)
