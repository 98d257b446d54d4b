"""
Discretized Wiener and fractional Brownian motion paths.

A two-sided Wiener path is stored as a *past* (values on ``[-T_past, 0]``,
pinned to zero at time 0) and a *future* (values on ``[0, T]``, starting at
zero).  Both are piecewise linear between grid points, so the driving white
noise is piecewise constant on each grid cell.

The fBm induced by a Wiener path is the Mandelbrot-Van Ness moving average

    B(t) = a_H * integral [ (t - u)_+^{H - 1/2} - (-u)_+^{H - 1/2} ] dw(u),

which on a grid reduces to a causal convolution of the Wiener increments
with the cell-integrated kernel weights returned by :func:`kernel_weights`.
The normalisation ``a_H`` is fixed numerically (:func:`normalization`) so
that the truncated, discretized representation has ``E|B(1)|^2 = 1``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Union

import numpy as np
from scipy import integrate
from scipy.signal import fftconvolve
from scipy.special import gamma

__all__ = [
    "NoiseError",
    "Hurst",
    "TimeGrid",
    "PastPath",
    "FuturePath",
    "FbmPath",
    "DEFAULT_T_PAST",
    "as_hurst",
    "steps_for",
    "fbm_covariance",
    "sample_fbm_exact",
    "kernel_weights",
    "normalization",
    "continuum_normalization",
    "truncation_error",
    "moving_average",
    "fbm_from_wiener",
    "sample_wiener_past",
    "sample_wiener_future",
    "concat_Pt",
    "shift_theta",
    "holder_norm",
    "save_binary",
    "load_binary",
    "save_csv",
]

DEFAULT_T_PAST = 64.0

# Relative tolerance used when checking that a time lies on the grid.
_ALIGN_TOL = 1e-9


class NoiseError(ValueError):
    """Raised for invalid grids, mismatched paths and failed factorizations."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hurst:
    """Hurst parameter ``0 < h < 1``.

    ``excluded_by_theory`` marks ``h = 1/2``: the solver accepts it, the
    coupling construction does not.
    """

    h: float

    def __post_init__(self):
        h = float(self.h)
        if not (0.0 < h < 1.0) or not math.isfinite(h):
            raise NoiseError(f"Hurst parameter must lie in (0, 1), got {self.h!r}")
        object.__setattr__(self, "h", h)

    @property
    def excluded_by_theory(self) -> bool:
        return self.h == 0.5

    def __float__(self) -> float:
        return self.h


HurstLike = Union[Hurst, float]


def as_hurst(h: HurstLike) -> Hurst:
    return h if isinstance(h, Hurst) else Hurst(h)


def _is_power_of_two_step(dt: float) -> bool:
    if not (dt > 0.0 and dt <= 1.0):
        return False
    k = -math.log2(dt)
    return abs(k - round(k)) < 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid covering ``[origin, origin + n_steps * dt]``.

    ``dt`` must be ``2**-k`` for an integer ``k >= 0`` so that durations
    ``2**N`` and unit steps are always grid aligned.
    """

    dt: float
    n_steps: int
    origin: float = 0.0

    def __post_init__(self):
        dt = float(self.dt)
        if not _is_power_of_two_step(dt):
            raise NoiseError(f"dt must be 2**-k with k >= 0, got {self.dt!r}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise NoiseError(f"n_steps must be a positive integer, got {self.n_steps!r}")
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "origin", float(self.origin))

    @property
    def end(self) -> float:
        return self.origin + self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.origin + self.dt * np.arange(self.n_steps + 1)

    def steps_for(self, duration: float) -> int:
        """Number of cells spanning ``duration``; raises if not grid aligned."""
        return steps_for(duration, self.dt)


def steps_for(duration: float, dt: float) -> int:
    m = duration / dt
    k = int(round(m))
    if abs(m - k) > _ALIGN_TOL * max(1.0, abs(m)):
        raise NoiseError(f"time {duration!r} is not aligned with grid step {dt!r}")
    return k


def _as_values(values, n_points: int) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != n_points:
        raise NoiseError(
            f"expected {n_points} samples, got array of shape {np.shape(values)}"
        )
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PastPath:
    """Wiener past on ``[-T_past, 0]`` with ``w(0) = 0``.

    ``values`` has shape ``(n_steps + 1, dim)``.
    """

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if abs(self.grid.end) > _ALIGN_TOL * max(1.0, abs(self.grid.origin)):
            raise NoiseError("a past path must end at time 0")
        vals = _as_values(self.values, self.grid.n_steps + 1)
        if np.any(vals[-1] != 0.0):
            raise NoiseError("a past path must vanish at time 0")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_increments(cls, increments, dt: float) -> "PastPath":
        inc = np.asarray(increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        n = inc.shape[0]
        vals = np.zeros((n + 1, inc.shape[1]))
        # running sums from time 0 backwards so that w(0) is exactly 0
        vals[:-1] = -np.cumsum(inc[::-1], axis=0)[::-1]
        return cls(TimeGrid(dt, n, -n * dt), vals)

    @classmethod
    def zeros(cls, dt: float, t_past: float = DEFAULT_T_PAST, dim: int = 1) -> "PastPath":
        n = steps_for(t_past, dt)
        return cls(TimeGrid(dt, n, -n * dt), np.zeros((n + 1, dim)))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def horizon(self) -> float:
        return self.grid.n_steps * self.grid.dt

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)


@dataclass(frozen=True)
class FuturePath:
    """Wiener future on ``[0, T]`` with ``w(0) = 0``."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.grid.origin != 0.0:
            raise NoiseError("a future path must start at time 0")
        vals = _as_values(self.values, self.grid.n_steps + 1)
        if np.any(vals[0] != 0.0):
            raise NoiseError("a future path must vanish at time 0")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_increments(cls, increments, dt: float) -> "FuturePath":
        inc = np.asarray(increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        vals = np.vstack([np.zeros((1, inc.shape[1])), np.cumsum(inc, axis=0)])
        return cls(TimeGrid(dt, inc.shape[0], 0.0), vals)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def horizon(self) -> float:
        return self.grid.n_steps * self.grid.dt

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)


@dataclass(frozen=True)
class FbmPath:
    """fBm samples on a grid, zero at the grid origin."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)
    hurst: Hurst = Hurst(0.5)

    def __post_init__(self):
        vals = _as_values(self.values, self.grid.n_steps + 1)
        if np.any(vals[0] != 0.0):
            raise NoiseError("an fBm path must vanish at its origin")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "hurst", as_hurst(self.hurst))

    @property
    def dim(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# Exact fBm law
# ---------------------------------------------------------------------------


def fbm_covariance(h: HurstLike, s, t):
    """Covariance ``E[B_H(s) B_H(t)]`` of standard fBm (vectorized)."""
    two_h = 2.0 * as_hurst(h).h
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    out = 0.5 * (np.abs(s) ** two_h + np.abs(t) ** two_h - np.abs(t - s) ** two_h)
    return float(out) if out.ndim == 0 else out


def sample_fbm_exact(
    grid: TimeGrid, h: HurstLike, dim: int = 1, rng_seed: int = 0, n_paths: int | None = None
):
    """Draw fBm on ``grid`` by Cholesky factorization of the exact covariance.

    Times are measured from the grid origin, so the first sample is zero.
    With ``n_paths=None`` a single :class:`FbmPath` is returned; otherwise an
    array of shape ``(n_paths, n_steps + 1, dim)``.
    """
    hh = as_hurst(h)
    tau = grid.dt * np.arange(1, grid.n_steps + 1)
    cov = fbm_covariance(hh, tau[:, None], tau[None, :])
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NoiseError("ill-conditioned grid") from exc
    rng = np.random.default_rng(rng_seed)
    count = 1 if n_paths is None else int(n_paths)
    z = rng.standard_normal((count, dim, grid.n_steps))
    samples = np.zeros((count, grid.n_steps + 1, dim))
    samples[:, 1:, :] = np.einsum("ij,pdj->pid", chol, z)
    if n_paths is None:
        return FbmPath(grid, samples[0], hh)
    return samples


# ---------------------------------------------------------------------------
# Kernel representation
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _kernel_weights_cached(h: float, dt: float, n: int) -> np.ndarray:
    m = np.arange(1, n + 1, dtype=float)
    p = h + 0.5
    w = dt ** (h - 0.5) * (m**p - (m - 1.0) ** p) / p
    w.setflags(write=False)
    return w


def kernel_weights(h: HurstLike, dt: float, n: int) -> np.ndarray:
    """Cell-integrated moving-average weights ``c_1, ..., c_n``.

    ``c_m`` multiplies a Wiener increment over the cell that ends ``m - 1``
    cells before the evaluation time: it is the exact integral of
    ``(t - u)^{H - 1/2}`` over that cell divided by ``dt``.
    """
    return _kernel_weights_cached(as_hurst(h).h, float(dt), int(n))


def moving_average(increments: np.ndarray, h: HurstLike, dt: float) -> np.ndarray:
    """Unnormalized moving average ``X_i = sum_{j < i} c_{i-j} xi_j``.

    ``increments`` has shape ``(n, dim)``; the result has shape
    ``(n + 1, dim)`` with ``X_0 = 0``.
    """
    inc = np.asarray(increments, dtype=float)
    n = inc.shape[0]
    out = np.zeros((n + 1,) + inc.shape[1:])
    if n == 0:
        return out
    c = kernel_weights(h, dt, n)
    if inc.ndim == 1:
        out[1:] = fftconvolve(inc, c)[:n]
    else:
        out[1:] = fftconvolve(inc, c[:, None], axes=0)[:n]
    return out


@lru_cache(maxsize=128)
def normalization(h: float, dt: float, past_steps: int) -> float:
    """Normalisation ``a_H`` making the discretized ``E|B(1)|^2`` equal to 1.

    The variance of ``B(1)`` under the truncated, cell-exact representation
    is a finite weighted sum of squared kernel differences, evaluated here
    exactly.  The result depends on ``(h, dt, past_steps)``.
    """
    m = steps_for(1.0, dt)
    c = np.concatenate([[0.0], kernel_weights(h, dt, past_steps + m)])
    j = np.arange(-past_steps, m)
    coef = c[m - j].copy()
    coef[j < 0] -= c[-j[j < 0]]
    return 1.0 / math.sqrt(dt * float(np.sum(coef**2)))


def continuum_normalization(h: HurstLike) -> float:
    """Closed-form ``a_H`` of the untruncated continuous representation."""
    hh = as_hurst(h).h
    return math.sqrt(gamma(2 * hh + 1) * math.sin(math.pi * hh)) / gamma(hh + 0.5)


def truncation_error(h: HurstLike, t_past: float = DEFAULT_T_PAST) -> float:
    """Variance of ``B(1)`` carried by Wiener increments older than ``t_past``.

    This is the share of the unit variance that a past window of length
    ``t_past`` discards, in the continuous representation.
    """
    hh = as_hurst(h).h
    if hh == 0.5:
        return 0.0
    a = continuum_normalization(hh)
    f = lambda s: ((1.0 + s) ** (hh - 0.5) - s ** (hh - 0.5)) ** 2
    val, _ = integrate.quad(f, t_past, np.inf, limit=200)
    return a * a * val


def _check_dims(past: PastPath, future: FuturePath):
    if past.grid.dt != future.grid.dt:
        raise NoiseError("past and future grids have different steps")
    if past.dim != future.dim:
        raise NoiseError("past and future have different dimensions")


def fbm_from_wiener(past: PastPath, future: FuturePath, h: HurstLike) -> FbmPath:
    """fBm on the future grid induced by the two-sided Wiener path.

    At ``H = 1/2`` the kernel weights are all one and the output equals the
    Wiener future exactly.
    """
    _check_dims(past, future)
    hh = as_hurst(h)
    dt = past.grid.dt
    p = past.grid.n_steps
    if hh.h == 0.5:
        return FbmPath(future.grid, future.values.copy(), hh)
    inc = np.vstack([past.increments, future.increments])
    x = moving_average(inc, hh, dt)
    vals = normalization(hh.h, dt, p) * (x[p:] - x[p])
    return FbmPath(future.grid, vals, hh)


def sample_wiener_past(
    dt: float, t_past: float = DEFAULT_T_PAST, dim: int = 1, rng=None
) -> PastPath:
    rng = rng if hasattr(rng, "standard_normal") else np.random.default_rng(rng)
    n = steps_for(t_past, dt)
    return PastPath.from_increments(rng.standard_normal((n, dim)) * math.sqrt(dt), dt)


def sample_wiener_future(dt: float, n_steps: int, dim: int = 1, rng=None) -> FuturePath:
    rng = rng if hasattr(rng, "standard_normal") else np.random.default_rng(rng)
    return FuturePath.from_increments(rng.standard_normal((n_steps, dim)) * math.sqrt(dt), dt)


# ---------------------------------------------------------------------------
# Concatenation and shift
# ---------------------------------------------------------------------------


def concat_Pt(past: PastPath, future: FuturePath, t: float) -> PastPath:
    """New past after running the future for time ``t``.

    ``(P_t(w, v))(s) = v(t + s) - v(t)`` for ``s > -t`` and
    ``w(t + s) - v(t)`` otherwise; the window keeps its original length,
    so the oldest ``t / dt`` samples are dropped.
    """
    _check_dims(past, future)
    dt = past.grid.dt
    m = steps_for(t, dt)
    if m < 0 or m > future.grid.n_steps:
        raise NoiseError(f"t={t!r} outside the future horizon")
    if m == 0:
        return past
    p = past.grid.n_steps
    joined = np.vstack([past.values, future.values[1 : m + 1]])
    vals = joined[-(p + 1) :] - future.values[m]
    vals[-1] = 0.0
    return PastPath(past.grid, vals)


def shift_theta(past: PastPath, t: float) -> PastPath:
    """Shift ``(theta_t w)(s) = w(s - t) - w(-t)`` restricted to the known window.

    The result covers ``[-T_past + t, 0]``; values older than the stored
    history are unknown and therefore dropped.
    """
    dt = past.grid.dt
    m = steps_for(t, dt)
    if m < 0:
        raise NoiseError("shift must be non-negative")
    if m == 0:
        return past
    p = past.grid.n_steps
    if m >= p:
        raise NoiseError("shift exceeds the stored history")
    vals = past.values[: p - m + 1] - past.values[p - m]
    vals[-1] = 0.0
    return PastPath(TimeGrid(dt, p - m, -(p - m) * dt), vals)


def holder_norm(path: PastPath, h: HurstLike, chunk: int = 512) -> float:
    """Weighted Hoelder norm over all grid pairs of a past path.

    ``sup |w(t) - w(s)| / (|t - s|^{(1 - H)/2} (1 + |t| + |s|)^{1/2})``.
    """
    hh = as_hurst(h).h
    t = path.grid.times
    v = path.values
    n = len(t)
    expo = 0.5 * (1.0 - hh)
    best = 0.0
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        ti = t[start:stop, None]
        diff = np.linalg.norm(v[start:stop, None, :] - v[None, :, :], axis=2)
        gap = np.abs(ti - t[None, :])
        denom = gap**expo * np.sqrt(1.0 + np.abs(ti) + np.abs(t[None, :]))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(gap > 0, diff / np.where(gap > 0, denom, 1.0), 0.0)
        best = max(best, float(ratio.max()))
    return best


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<dqdq")


def save_binary(path_obj, target) -> None:
    """Write ``dt, n_steps, origin, dim`` (little endian) then row-major samples."""
    g = path_obj.grid
    vals = np.ascontiguousarray(path_obj.values, dtype="<f8")
    with open(target, "wb") as fh:
        fh.write(_HEADER.pack(g.dt, g.n_steps, g.origin, vals.shape[1]))
        fh.write(vals.tobytes(order="C"))


def load_binary(source, kind: type = None):
    """Read a path written by :func:`save_binary`.

    ``kind`` selects the returned type; by default the origin decides
    (negative origin gives a :class:`PastPath`, zero a :class:`FuturePath`).
    """
    raw = Path(source).read_bytes()
    dt, n_steps, origin, dim = _HEADER.unpack_from(raw)
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    vals = vals.reshape(n_steps + 1, dim).astype(float)
    grid = TimeGrid(dt, n_steps, origin)
    if kind is None:
        kind = PastPath if origin < 0 else FuturePath
    return kind(grid, vals)


def save_csv(path_obj, target) -> None:
    """Debug dump: one row per grid point, columns ``time, coord_0, ...``."""
    vals = path_obj.values
    with open(target, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time"] + [f"coord_{i}" for i in range(vals.shape[1])])
        for t, row in zip(path_obj.grid.times, vals):
            writer.writerow([repr(float(t))] + [repr(float(x)) for x in row])
