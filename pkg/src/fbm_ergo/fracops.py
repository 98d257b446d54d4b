"""
Discretized fractional operators acting on Wiener-level and fBm-level data.

Paths are piecewise linear and drift signals piecewise constant on a
uniform grid, and every power kernel is integrated exactly over grid cells,
so no singular kernel is ever evaluated at a coincident point.

Constants
---------
``a_H``     normalisation of the moving-average representation
            (:func:`fbm_ergo.noise.normalization`).
``gamma_H`` inversion constant, ``D_H^{-1} = gamma_H D_{1-H}``, calibrated by
            least squares on smooth bumps (:func:`inversion_constant`).
``C``       future-influence constant ``(1/2 - H) a_H gamma_H a_{1-H}``
            (:func:`future_constant`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal

import numpy as np
from scipy.signal import fftconvolve

from .noise import (
    DEFAULT_T_PAST,
    Hurst,
    HurstLike,
    NoiseError,
    PastPath,
    TimeGrid,
    as_hurst,
    kernel_weights,
    moving_average,
    normalization,
    steps_for,
)

__all__ = [
    "FracopsError",
    "DriftSignal",
    "AlphaExponent",
    "CostValue",
    "apply_DH",
    "apply_DH_inverse",
    "inversion_constant",
    "future_constant",
    "tail_constant",
    "bump_path",
    "drift_w_to_B",
    "drift_B_to_w",
    "future_kernel_g2",
    "alpha_norm",
    "cost",
    "CostEvaluator",
    "increment_filter",
    "increment_filter_inverse",
    "series_reciprocal",
]

Mode = Literal["general", "vanishing_after_t0", "vanishing_before_t0"]


class FracopsError(ValueError):
    """Raised for inconsistent drift supports and violated preconditions."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftSignal:
    """Piecewise-constant drift: ``values[k]`` holds on grid cell ``k``."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] != self.grid.n_steps:
            raise FracopsError(
                f"expected {self.grid.n_steps} cells, got shape {np.shape(self.values)}"
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def midpoints(self) -> np.ndarray:
        return self.grid.origin + self.grid.dt * (np.arange(self.grid.n_steps) + 0.5)

    def scaled(self, c: float) -> "DriftSignal":
        return DriftSignal(self.grid, c * self.values)

    def __add__(self, other: "DriftSignal") -> "DriftSignal":
        if other.grid != self.grid:
            raise FracopsError("drift signals live on different grids")
        return DriftSignal(self.grid, self.values + other.values)


@dataclass(frozen=True)
class AlphaExponent:
    """Weight exponent of the alpha-norm; ``0 < alpha < min(1/2, H)``."""

    alpha: float
    h: float | None = None

    def __post_init__(self):
        a = float(self.alpha)
        upper = 0.5 if self.h is None else min(0.5, float(self.h))
        if not (0.0 < a < upper):
            raise FracopsError(f"alpha must lie in (0, {upper}), got {self.alpha!r}")
        object.__setattr__(self, "alpha", a)

    def __float__(self) -> float:
        return self.alpha


@dataclass(frozen=True, order=True)
class CostValue:
    """Non-negative cost; ``math.inf`` marks a divergent tail integral."""

    value: float

    def __post_init__(self):
        if not (self.value >= 0.0):
            raise FracopsError(f"cost must be non-negative, got {self.value!r}")

    def __float__(self) -> float:
        return self.value


def _alpha(alpha) -> float:
    return float(alpha.alpha if isinstance(alpha, AlphaExponent) else alpha)


# ---------------------------------------------------------------------------
# D_H and its inverse
# ---------------------------------------------------------------------------


def _past_steps(t_past: float, dt: float) -> int:
    return steps_for(t_past, dt)


def apply_DH(w: PastPath, h: HurstLike) -> PastPath:
    """Apply the discretized ``D_H`` to a past path.

    Increments of ``w`` act as piecewise-constant white noise; the kernel
    ``(-s)^{H - 1/2}`` is integrated exactly over each cell.  Increments
    before the stored window are taken to be zero.
    """
    hh = as_hurst(h)
    if hh.h == 0.5:
        return w
    p = w.grid.n_steps
    x = moving_average(w.increments, hh, w.grid.dt)
    vals = normalization(hh.h, w.grid.dt, p) * (x - x[-1])
    vals[-1] = 0.0
    return PastPath(w.grid, vals)


def bump_path(grid: TimeGrid, center: float, width: float, amplitude=1.0) -> np.ndarray:
    """Smooth compactly supported bump ``amplitude * exp(-1 / (1 - x^2))``.

    Returns values of shape ``(n_steps + 1, dim)`` with ``x = (t - center) / width``.
    """
    x = (grid.times - center) / width
    inside = np.abs(x) < 1.0
    core = np.zeros_like(x)
    core[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2))
    amp = np.atleast_1d(np.asarray(amplitude, dtype=float))
    return core[:, None] * amp[None, :]


@lru_cache(maxsize=64)
def _inversion_constant(h: float, dt: float, past_steps: int) -> float:
    if h == 0.5:
        return 1.0
    grid = TimeGrid(dt, past_steps, -past_steps * dt)
    horizon = past_steps * dt
    # a fixed basis of bumps of several widths, all well inside the window
    num = 0.0
    den = 0.0
    for frac_c, frac_w in [(0.25, 0.02), (0.4, 0.05), (0.55, 0.08), (0.7, 0.04), (0.8, 0.1)]:
        width = max(frac_w * horizon, 16 * dt)
        center = -frac_c * horizon
        w = PastPath(grid, bump_path(grid, center, width) - bump_path(grid, center, width)[-1])
        v = apply_DH(apply_DH(w, h), 1.0 - h).values[:, 0]
        num += float(v @ w.values[:, 0])
        den += float(v @ v)
    return num / den


def inversion_constant(h: HurstLike, dt: float, t_past: float = DEFAULT_T_PAST) -> float:
    """Least-squares constant ``gamma_H`` with ``gamma_H D_{1-H} D_H ~ id``."""
    hh = as_hurst(h).h
    # gamma_H = gamma_{1-H}: calibrate on the canonical representative
    key = min(hh, 1.0 - hh)
    return _inversion_constant(key, float(dt), _past_steps(t_past, dt))


def apply_DH_inverse(b: PastPath, h: HurstLike) -> PastPath:
    """``gamma_H D_{1-H} b``, the calibrated inverse of :func:`apply_DH`."""
    hh = as_hurst(h)
    if hh.h == 0.5:
        return b
    g = inversion_constant(hh, b.grid.dt, b.grid.n_steps * b.grid.dt)
    out = apply_DH(b, 1.0 - hh.h)
    return PastPath(out.grid, g * out.values)


def future_constant(h: HurstLike, dt: float, t_past: float = DEFAULT_T_PAST) -> float:
    """Constant ``C`` of the future-influence kernel.

    The Wiener-level drift that cancels the future effect of a past drift
    is ``C * t^{1/2-H} int (-s)^{H-1/2} g(s) / (t - s) ds``, with
    ``C = (1/2 - H) a_H gamma_H a_{1-H}``.
    """
    hh = as_hurst(h).h
    p = _past_steps(t_past, dt)
    return (
        (0.5 - hh)
        * normalization(hh, dt, p)
        * inversion_constant(hh, dt, t_past)
        * normalization(1.0 - hh, dt, p)
    )


def tail_constant(h: HurstLike, dt: float, t_past: float = DEFAULT_T_PAST) -> float:
    """Weight ``|2H - 1| a_H`` of the tail integral in the cost."""
    hh = as_hurst(h).h
    return abs(2.0 * hh - 1.0) * normalization(hh, dt, _past_steps(t_past, dt))


# ---------------------------------------------------------------------------
# Drift transfers
# ---------------------------------------------------------------------------


def _support(values: np.ndarray) -> tuple[int, int] | None:
    nz = np.flatnonzero(np.any(values != 0.0, axis=1))
    if nz.size == 0:
        return None
    return int(nz[0]), int(nz[-1])


def _transfer(
    g: DriftSignal, kernel_h: float, const: float, mode: str, t0: float | None
) -> DriftSignal:
    """Shared implementation of both drift transfers.

    ``kernel_h`` selects the kernel ``(t - s)^{kernel_h - 1/2}``; ``const``
    multiplies the result.  The input is taken to vanish before its grid.
    """
    grid = g.grid
    dt = grid.dt
    vals = g.values
    n = grid.n_steps
    p = kernel_h - 0.5
    edges = grid.times
    mids = g.midpoints

    # general form: cell averages of d/dt of the kernel integral of g
    x = moving_average(vals * dt, kernel_h, dt)
    general = const * np.diff(x, axis=0) / dt
    if mode == "general":
        return DriftSignal(grid, general)

    supp = _support(vals)
    if mode == "vanishing_after_t0":
        if t0 is None:
            t0 = edges[supp[1] + 1] if supp else grid.origin
        k0 = steps_for(t0 - grid.origin, dt)
        if supp is not None and supp[1] >= k0:
            raise FracopsError("drift does not vanish after t0")
        out = general.copy()
        if supp is None:
            return DriftSignal(grid, np.zeros_like(vals))
        # tail integral of (t - s)^{p - 1} over each source cell, times p
        src = slice(supp[0], k0)
        left = edges[src][None, :]
        right = edges[supp[0] + 1 : k0 + 1][None, :]
        t = mids[k0:, None]
        kern = (t - left) ** p - (t - right) ** p
        out[k0:] = const * kern @ vals[src]
        return DriftSignal(grid, out)

    if mode == "vanishing_before_t0":
        if t0 is None:
            t0 = edges[supp[0]] if supp else grid.origin
        k0 = steps_for(t0 - grid.origin, dt)
        if supp is not None and supp[0] < k0:
            raise FracopsError("drift does not vanish before t0")
        out = np.zeros_like(vals)
        # boundary value plus jumps at later cell edges, each smeared by the kernel
        jumps = np.diff(vals[k0:], axis=0, prepend=np.zeros((1, vals.shape[1])))
        src_edges = edges[k0:n]
        t = mids[k0:, None]
        lag = t - src_edges[None, :]
        kern = np.where(lag > 0, np.abs(lag) ** p, 0.0)
        out[k0:] = const * kern @ jumps
        return DriftSignal(grid, out)

    raise FracopsError(f"unknown mode {mode!r}")


def drift_w_to_B(
    g_w: DriftSignal,
    h: HurstLike,
    mode: Mode = "general",
    t0: float | None = None,
    t_past: float = DEFAULT_T_PAST,
) -> DriftSignal:
    """fBm-level drift induced by a Wiener-level drift.

    ``general``: ``g_B = a_H d/dt int_{-inf}^t (t - s)^{H-1/2} g_w(s) ds``,
    as exact cell averages.  ``vanishing_after_t0`` (``g_w = 0`` after
    ``t0``): for ``t >= t0`` the tail integral
    ``(H - 1/2) a_H int_{-inf}^{t0} (t - s)^{H-3/2} g_w(s) ds`` at cell
    midpoints.  ``vanishing_before_t0`` (``g_w = 0`` before ``t0``): the
    boundary term plus the kernel integral of the derivative of ``g_w``,
    at cell midpoints.  When ``t0`` is omitted it is inferred from the
    support of ``g_w``.
    """
    hh = as_hurst(h).h
    const = normalization(hh, g_w.grid.dt, _past_steps(t_past, g_w.grid.dt))
    return _transfer(g_w, hh, const, mode, t0)


def drift_B_to_w(
    g_B: DriftSignal,
    h: HurstLike,
    mode: Mode = "general",
    t0: float | None = None,
    t_past: float = DEFAULT_T_PAST,
) -> DriftSignal:
    """Wiener-level drift producing a given fBm-level drift.

    Mirror of :func:`drift_w_to_B` with kernel ``(t - s)^{1/2-H}`` and
    constant ``gamma_H a_{1-H}``.
    """
    hh = as_hurst(h).h
    dt = g_B.grid.dt
    const = inversion_constant(hh, dt, t_past) * normalization(
        1.0 - hh, dt, _past_steps(t_past, dt)
    )
    return _transfer(g_B, 1.0 - hh, const, mode, t0)


# ---------------------------------------------------------------------------
# Exact causal filters between Wiener and fBm increments
# ---------------------------------------------------------------------------


def series_reciprocal(c: np.ndarray, n: int) -> np.ndarray:
    """First ``n`` coefficients of ``1 / c(z)`` for a power series with ``c[0] != 0``.

    Newton iteration ``b <- b (2 - c b)`` doubling the precision each round.
    """
    c = np.asarray(c, dtype=float)
    if c[0] == 0.0:
        raise FracopsError("series with vanishing constant term has no reciprocal")
    b = np.array([1.0 / c[0]])
    k = 1
    while k < n:
        k = min(2 * k, n)
        cb = fftconvolve(c[:k], b)[:k]
        corr = -cb
        corr[0] += 2.0
        b = fftconvolve(b, corr)[:k]
    return b[:n]


@lru_cache(maxsize=64)
def _increment_filter(h: float, dt: float, n: int) -> np.ndarray:
    c = np.concatenate([[0.0], kernel_weights(h, dt, n)])
    d = np.diff(c)
    d.setflags(write=False)
    return d


def increment_filter(h: HurstLike, dt: float, n: int) -> np.ndarray:
    """Causal filter ``d`` mapping Wiener increments to fBm increments.

    On a common grid, ``Delta B_k = a_H sum_{j <= k} d_{k-j} xi_j`` (plus the
    contribution of the past).
    """
    return _increment_filter(as_hurst(h).h, float(dt), int(n))


@lru_cache(maxsize=64)
def _increment_filter_inverse(h: float, dt: float, n: int) -> np.ndarray:
    out = series_reciprocal(_increment_filter(h, dt, n), n)
    out.setflags(write=False)
    return out


def increment_filter_inverse(h: HurstLike, dt: float, n: int) -> np.ndarray:
    """Exact inverse (as a causal filter) of :func:`increment_filter`."""
    return _increment_filter_inverse(as_hurst(h).h, float(dt), int(n))


# ---------------------------------------------------------------------------
# Future-influence kernel and alpha-norm
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def future_kernel_g2(
    g1: DriftSignal,
    t1: float,
    t2: float,
    h: HurstLike,
    window: float | None = None,
    t_past: float = DEFAULT_T_PAST,
) -> DriftSignal:
    """Drift ``g_2`` needed after a wait ``t_2`` to cancel a drift ``g_1`` on ``[0, t_1]``.

    ``g_2(t) = C int_0^{t_1} t^{1/2-H} (t_2 - s)^{H-1/2} / (t + t_2 - s) g_1(s) ds``,
    evaluated at output cell midpoints on ``[0, window]`` (default
    ``16 t_2``) with Gauss-Legendre quadrature inside each source cell.
    """
    hh = as_hurst(h).h
    if not (t2 > 2.0 * t1 > 0.0):
        raise FracopsError("ratio precondition violated")
    dt = g1.grid.dt
    n1 = steps_for(t1, dt)
    if g1.grid.origin != 0.0 or g1.grid.n_steps != n1:
        raise FracopsError("g1 must live on the grid [0, t1]")
    window = 16.0 * t2 if window is None else window
    out_grid = TimeGrid(dt, steps_for(window, dt), 0.0)
    t = dt * (np.arange(out_grid.n_steps) + 0.5)
    # quadrature nodes inside each source cell
    s = dt * (np.arange(n1)[:, None] + 0.5 + 0.5 * _GL_NODES[None, :])
    wq = 0.5 * dt * _GL_WEIGHTS
    lag = t2 - s  # (n1, q)
    c = future_constant(hh, dt, t_past)
    out = np.empty((out_grid.n_steps, g1.dim))
    chunk = 8192
    for start in range(0, len(t), chunk):
        tt = t[start : start + chunk, None, None]
        kern = ((lag[None] ** (hh - 0.5)) / (tt + lag[None])) @ wq  # (m, n1)
        out[start : start + chunk] = (tt[:, :, 0] ** (0.5 - hh)) * kern @ g1.values
    return DriftSignal(out_grid, c * out)


def alpha_norm(g: DriftSignal, alpha) -> float:
    """``sqrt(int (1 + t)^{2 alpha} |g(t)|^2 dt)`` over the signal's window.

    The weight is integrated exactly over each cell against the constant
    ``|g|^2`` of that cell.  Only the part of the grid in ``t >= 0`` counts.
    """
    a = _alpha(alpha)
    edges = np.maximum(g.grid.times, 0.0)
    q = 2.0 * a + 1.0
    wts = ((1.0 + edges[1:]) ** q - (1.0 + edges[:-1]) ** q) / q
    return math.sqrt(float(np.sum(wts * np.sum(g.values**2, axis=1))))


# ---------------------------------------------------------------------------
# Cost function
# ---------------------------------------------------------------------------


def _blocks(n: int, refine: int = 16) -> list[tuple[int, int]]:
    """Partition cells ``0..n-1`` into blocks whose width grows with age.

    Ages are counted from the most recent cell; a block never exceeds
    ``1/refine`` of its age (in cells), so kernels smooth on the age scale
    are resolved to relative accuracy about ``refine**-2``.
    """
    out = []
    pos = 0
    while pos < n:
        size = 1
        while 2 * size * refine <= pos:
            size *= 2
        size = min(size, n - pos)
        out.append((n - pos - size, n - pos))
        pos += size
    return out[::-1]


class CostEvaluator:
    """Cost ``K_alpha`` of past Wiener-difference drifts on a fixed grid.

    ``K(g) = max_T ||R_T g||_alpha + C_K int_{-inf}^0 (-s)^{H-3/2} |g(s)| ds``
    with ``R_T g(t) = C t^{1/2-H} int (T - s)^{H-1/2} / (t + T - s) |g(s)| ds``
    and ``T`` on the ladder ``dt * 2^j <= 4 T_past``.
    """

    def __init__(self, h: HurstLike, alpha, dt: float, n_cells: int, n_t: int = 240):
        self.h = as_hurst(h).h
        self.alpha = _alpha(alpha)
        self.dt = float(dt)
        self.n_cells = int(n_cells)
        t_past = self.n_cells * self.dt
        hh, a = self.h, self.alpha
        self.c = future_constant(hh, dt, t_past)
        self.c_k = tail_constant(hh, dt, t_past)
        ladder = []
        T = self.dt
        while T <= 4.0 * t_past * (1 + 1e-12):
            ladder.append(T)
            T *= 2.0
        self.ladder = np.array(ladder)

        # aggregation of cells into blocks, quadrature nodes inside each block
        blocks = _blocks(self.n_cells)
        self.block_index = np.repeat(np.arange(len(blocks)), [b - a_ for a_, b in blocks])
        gl_x, gl_w = np.polynomial.legendre.leggauss(4)
        lo = np.array([(a_ - self.n_cells) * self.dt for a_, _ in blocks])
        hi = np.array([(b - self.n_cells) * self.dt for _, b in blocks])
        width = hi - lo
        s_nodes = lo[:, None] + 0.5 * width[:, None] * (1.0 + gl_x[None, :])
        s_w = 0.5 * gl_w[None, :] * np.ones_like(width)[:, None]  # average over the block

        # log-spaced t nodes (trapezoid in log t) plus an analytic far tail
        t_hi = 1e6 * (4.0 * t_past + t_past)
        u = np.linspace(math.log(1e-10), math.log(t_hi), n_t)
        t = np.exp(u)
        du = u[1] - u[0]
        tw = np.full(n_t, du)
        tw[0] = tw[-1] = 0.5 * du
        self._tw = tw * t * (1.0 + t) ** (2 * a) * t ** (1.0 - 2 * hh)
        self._tail_factor = t_hi ** (2 * a - 2 * hh) / (2 * hh - 2 * a) if hh > a else math.inf
        self._mats = []
        for T in self.ladder:
            lag = T - s_nodes  # (nb, 4)
            k = (lag[None] ** (hh - 0.5) / (t[:, None, None] + lag[None])) * s_w[None]
            self._mats.append(k.sum(axis=2))  # (n_t, nb), block-averaged kernel
        self._moments = [((T - s_nodes) ** (hh - 0.5) * s_w).sum(axis=1) for T in self.ladder]

        # exact cell integrals of (-s)^{H-3/2}
        edges = self.dt * np.arange(self.n_cells, -1, -1)  # ages of cell edges, oldest first
        p = hh - 0.5
        with np.errstate(divide="ignore"):
            if p == 0:
                self._tail_w = np.zeros(self.n_cells)
            elif p < 0:
                older, newer = edges[:-1] ** p, edges[1:] ** p
                self._tail_w = (newer - older) / (-p)
            else:
                self._tail_w = (edges[:-1] ** p - edges[1:] ** p) / p

    def rt_norms(self, mags: np.ndarray) -> np.ndarray:
        """``||R_T g||_alpha`` for every ladder value, given ``|g|`` per cell."""
        mass = np.bincount(self.block_index, weights=mags * self.dt, minlength=self._mats[0].shape[1])
        out = np.empty(len(self.ladder))
        for i, mat in enumerate(self._mats):
            r = mat @ mass
            far = float(self._moments[i] @ mass) ** 2 * self._tail_factor
            out[i] = abs(self.c) * math.sqrt(float(self._tw @ (r * r)) + far)
        return out

    def tail(self, mags: np.ndarray) -> float:
        nz = mags != 0.0
        if not np.any(nz):
            return 0.0
        return self.c_k * float(np.sum(self._tail_w[nz] * mags[nz]))

    def __call__(self, values: np.ndarray) -> CostValue:
        vals = np.asarray(values, dtype=float)
        mags = np.linalg.norm(vals.reshape(self.n_cells, -1), axis=1)
        if not np.any(mags):
            return CostValue(0.0)
        return CostValue(float(self.rt_norms(mags).max()) + self.tail(mags))


@lru_cache(maxsize=16)
def _evaluator(h: float, alpha: float, dt: float, n: int) -> CostEvaluator:
    return CostEvaluator(h, alpha, dt, n)


def cost(g: DriftSignal, alpha, h: HurstLike) -> CostValue:
    """Cost of a past Wiener-difference drift ``g`` living on ``[-T_past, 0]``."""
    if abs(g.grid.end) > 1e-9:
        raise FracopsError("cost expects a drift on a past window ending at 0")
    ev = _evaluator(as_hurst(h).h, _alpha(alpha), g.grid.dt, g.grid.n_steps)
    return ev(g.values)
