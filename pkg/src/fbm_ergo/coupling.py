"""
Self-coupling of two solutions driven by fBm.

The coupled state holds both positions and both Wiener pasts together with
an auxiliary state ``(step, N, N_fail, wait)``.  Each step draws a pair of
Wiener futures whose marginals are exactly the Wiener measure, evolves both
solutions with them and updates the pasts:

* step 0: identical futures until the gap has contracted;
* step 1: try to make the two solutions meet within half a time unit by
  adding a feedback drift to the second one, paid for through an exact
  Gaussian density ratio (the attempt succeeds with probability at most 1/2);
* step 2: keep the two fBm futures identical on ``[0, 2^N]`` by coupling a
  single Gaussian coefficient;
* step 3: identical futures for a prescribed waiting time.

On a grid, the Wiener futures are finite Gaussian vectors and every change
of measure is a ratio of Gaussian densities, so all constructions below are
exact in law.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from numba import njit
from scipy.signal import fftconvolve

from .fracops import (
    AlphaExponent,
    CostValue,
    DriftSignal,
    cost,
    increment_filter,
    increment_filter_inverse,
)
from .noise import (
    DEFAULT_T_PAST,
    FuturePath,
    PastPath,
    TimeGrid,
    as_hurst,
    normalization,
    sample_wiener_past,
    steps_for,
    truncation_error,
)
from .sde import DiffusionMatrix, DriftSpec, _poly_nb, contraction_wait_bound, rk4_cell, solve_path

__all__ = [
    "CouplingError",
    "Step",
    "AuxState",
    "CoupledState",
    "CouplingParams",
    "StepOutcome",
    "RunRecord",
    "is_admissible",
    "state_cost",
    "binding_drift",
    "gaussian_coupling_1d",
    "step0",
    "step1",
    "step2",
    "step3",
    "run_coupled_chain",
    "point_mass",
    "gaussian_initial",
    "ForcedSuccessRng",
]


class CouplingError(ValueError):
    """Raised for invalid parameters and failed construction guarantees."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


class Step(enum.IntEnum):
    INIT = 0
    HITTING = 1
    COUPLING = 2
    WAITING = 3


@dataclass(frozen=True)
class AuxState:
    """Auxiliary state ``(step, N, N_fail, wait_time)``; starts at ``(0, 1, 1, 0)``."""

    step: Step = Step.INIT
    n_success: int = 1
    n_fail: int = 1
    wait_time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "step", Step(self.step))
        if self.wait_time < 0 or (self.wait_time > 0 and self.step != Step.WAITING):
            raise CouplingError("a positive wait time is only allowed before a waiting step")


@dataclass(frozen=True)
class CoupledState:
    x: np.ndarray
    y: np.ndarray
    w_x: PastPath
    w_y: PastPath
    aux: AuxState = AuxState()

    def __post_init__(self):
        if self.w_x.grid != self.w_y.grid or self.w_x.dim != self.w_y.dim:
            raise CouplingError("both pasts must share grid and dimension")
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(-1))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).reshape(-1))

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.y - self.x))

    @property
    def difference_drift(self) -> DriftSignal:
        """Wiener-level drift ``g_w`` with ``w_y = w_x + int g_w`` on the past."""
        g = (self.w_y.increments - self.w_x.increments) / self.w_x.grid.dt
        return DriftSignal(self.w_x.grid, g)


@dataclass(frozen=True)
class CouplingParams:
    """Constants of the coupling construction.

    ``t_star`` and ``t_tilde_star`` scale the waiting times after failed
    steps 1 and 2; ``b_const`` is the constant of the a-priori bound
    ``b_N = b_const 2^{-alpha N}`` used by step 2.
    """

    h: float
    alpha: float
    beta: float
    kappa1: float
    kappa2: float
    t_star: float
    t_tilde_star: float
    b_const: float
    dt: float = 2.0**-6
    T_past: float = DEFAULT_T_PAST
    max_step_cells: int = 2**22
    hit_tol: float = 1e-8

    def __post_init__(self):
        hh = as_hurst(self.h)
        if hh.excluded_by_theory:
            raise CouplingError("the coupling construction excludes H = 1/2")
        AlphaExponent(self.alpha, hh.h)
        if not self.beta > 1.0 / (1.0 - 2.0 * self.alpha):
            raise CouplingError("beta must exceed 1 / (1 - 2 alpha)")
        for k in ("kappa1", "kappa2", "t_star", "t_tilde_star", "b_const"):
            if not getattr(self, k) > 0:
                raise CouplingError(f"{k} must be positive")
        TimeGrid(self.dt, 1)
        steps_for(self.T_past, self.dt)
        if steps_for(1.0, self.dt) < 2:
            raise CouplingError("the grid must resolve half a time unit")

    @property
    def fail_exponent(self) -> float:
        return 4.0 / (1.0 - 2.0 * self.alpha)

    def hitting_time_bound(self, distance: float) -> float:
        """Upper bound ``2 sqrt(distance) / kappa2`` on the time to close a gap."""
        return 2.0 * math.sqrt(distance) / self.kappa2

    def validate_for(self, drift: DriftSpec) -> None:
        """Check the constants that depend on the drift."""
        if abs(self.kappa1 - drift.c3) > 1e-9 * max(1.0, drift.c3):
            raise CouplingError("kappa1 must equal c3 of the drift")
        if self.hitting_time_bound(drift.admissible_distance) > 0.5:
            raise CouplingError("kappa2 too small to close every admissible gap by t = 1/2")


@dataclass(frozen=True)
class StepOutcome:
    kind: str  # "succeeded" or "failed"
    duration: float
    next_aux: AuxState
    wiener_pair: tuple
    cost_after: CostValue
    state_after: CoupledState = field(repr=False, default=None)
    info: dict = field(default_factory=dict, repr=False)

    @property
    def succeeded(self) -> bool:
        return self.kind == "succeeded"


# ---------------------------------------------------------------------------
# Noise model shared by all steps
# ---------------------------------------------------------------------------


def _pow2_at_least(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


class _NoiseModel:
    """Increment-level representation of the fBm map for fixed ``(H, dt, T_past)``."""

    def __init__(self, h: float, dt: float, t_past: float):
        self.h = h
        self.dt = dt
        self.past_steps = steps_for(t_past, dt)
        self.a = normalization(h, dt, self.past_steps)

    def filt(self, n: int) -> np.ndarray:
        return increment_filter(self.h, self.dt, _pow2_at_least(n))[:n]

    def filt_inv(self, n: int) -> np.ndarray:
        return increment_filter_inverse(self.h, self.dt, _pow2_at_least(n))[:n]

    def from_past(self, past_inc: np.ndarray, m: int) -> np.ndarray:
        """fBm increments on ``m`` future cells produced by past increments alone."""
        p = past_inc.shape[0]
        d = self.filt(p + m)
        full = fftconvolve(past_inc, d[:, None], axes=0)
        return self.a * full[p : p + m]

    def fbm_increments(self, past_inc: np.ndarray, fut_inc: np.ndarray) -> np.ndarray:
        m = fut_inc.shape[0]
        d = self.filt(m)
        own = self.a * fftconvolve(fut_inc, d[:, None], axes=0)[:m]
        return self.from_past(past_inc, m) + own

    def cancel(self, target: np.ndarray) -> np.ndarray:
        """Future Wiener increments whose fBm increments equal ``target``."""
        m = target.shape[0]
        dinv = self.filt_inv(m)
        return fftconvolve(target, dinv[:, None], axes=0)[:m] / self.a


@lru_cache(maxsize=16)
def _noise_model(h: float, dt: float, t_past: float) -> _NoiseModel:
    return _NoiseModel(h, dt, t_past)


def _model(p: CouplingParams) -> _NoiseModel:
    return _noise_model(float(p.h), float(p.dt), float(p.T_past))


def _draw(rng, m: int, dim: int, dt: float) -> np.ndarray:
    return rng.standard_normal((m, dim)) * math.sqrt(dt)


def _advance(
    z: CoupledState, p: CouplingParams, drift, sigma, u_x: np.ndarray, u_y: np.ndarray, aux: AuxState
):
    """Evolve both solutions with the given futures and concatenate the pasts."""
    nm = _model(p)
    dt = p.dt
    m = u_x.shape[0]
    b_x = nm.fbm_increments(z.w_x.increments, u_x)
    b_y = nm.fbm_increments(z.w_y.increments, u_y)
    zero = np.zeros((1, b_x.shape[1]))
    path_x = solve_path(z.x, np.vstack([zero, np.cumsum(b_x, axis=0)]), drift, sigma, dt=dt)
    path_y = solve_path(z.y, np.vstack([zero, np.cumsum(b_y, axis=0)]), drift, sigma, dt=dt)
    fx = FuturePath.from_increments(u_x, dt)
    fy = FuturePath.from_increments(u_y, dt)
    w_x = _concat(z.w_x, u_x)
    w_y = _concat(z.w_y, u_y)
    state = CoupledState(path_x[-1], path_y[-1], w_x, w_y, aux)
    return state, (fx, fy), path_x, path_y


def _concat(past: PastPath, u: np.ndarray) -> PastPath:
    """Increment-level equivalent of ``concat_Pt(past, future, horizon)``."""
    p = past.grid.n_steps
    inc = np.vstack([past.increments, u])[-p:]
    return PastPath.from_increments(inc, past.grid.dt)


def state_cost(z: CoupledState, p: CouplingParams) -> CostValue:
    return cost(z.difference_drift, p.alpha, p.h)


def is_admissible(z: CoupledState, p: CouplingParams, drift: DriftSpec) -> bool:
    """Gap at most ``1 + (1 + c4) / c2`` and cost of the past difference at most 1."""
    if z.distance > drift.admissible_distance:
        return False
    return state_cost(z, p).value <= 1.0


def _round_up(t: float, dt: float) -> float:
    return math.ceil(t / dt - 1e-9) * dt


# ---------------------------------------------------------------------------
# Step 0 and step 3: identical futures
# ---------------------------------------------------------------------------


def _identical_step(z, p, drift, sigma, rng, duration, next_aux, kind="succeeded"):
    m = steps_for(duration, p.dt)
    u = _draw(rng, m, z.w_x.dim, p.dt)
    state, pair, _, _ = _advance(z, p, drift, sigma, u, u, next_aux)
    return StepOutcome(kind, duration, next_aux, pair, state_cost(state, p), state)


def step0(z: CoupledState, p: CouplingParams, drift: DriftSpec, sigma: DiffusionMatrix, rng) -> StepOutcome:
    """Wait with identical futures until the gap has contracted."""
    if z.aux.step != Step.INIT:
        raise CouplingError("step0 requires the initial auxiliary state")
    duration = contraction_wait_bound(z.distance, drift, p.dt)
    return _identical_step(z, p, drift, sigma, rng, duration, AuxState(Step.HITTING, 0, 0, 0.0))


def step3(z: CoupledState, p: CouplingParams, drift: DriftSpec, sigma: DiffusionMatrix, rng) -> StepOutcome:
    """Wait ``wait_time`` (rounded up to the grid) with identical futures."""
    if z.aux.step != Step.WAITING or not z.aux.wait_time > 0:
        raise CouplingError("step3 requires a waiting state with positive wait time")
    duration = _round_up(z.aux.wait_time, p.dt)
    nxt = AuxState(Step.HITTING, z.aux.n_success, z.aux.n_fail, 0.0)
    return _identical_step(z, p, drift, sigma, rng, duration, nxt)


# ---------------------------------------------------------------------------
# Step 1: binding construction
# ---------------------------------------------------------------------------


def binding_drift(rho, p: CouplingParams, sigma: DiffusionMatrix) -> np.ndarray:
    """``-sigma^{-1}(kappa1 rho + kappa2 rho / sqrt|rho|)``, zero at ``rho = 0``."""
    rho = np.asarray(rho, dtype=float).reshape(-1)
    r = float(np.linalg.norm(rho))
    if r == 0.0:
        return np.zeros_like(rho)
    return -sigma.sigma_inv @ (p.kappa1 * rho + p.kappa2 * rho / math.sqrt(r))


# gaps below this are treated as closed; avoids chatter at rounding level
_GAP_FLOOR = 1e-12


def _control(rho, x, y, p, drift, sigma):
    """fBm-level drift applied to the second solution over one cell.

    The binding drift is used while it does not overshoot within one cell;
    closer to the target the drift cancels the gap and the drift mismatch
    in a single cell, which drives the gap to rounding level.
    """
    dt = p.dt
    r = float(np.linalg.norm(rho))
    if r <= _GAP_FLOOR:
        return np.zeros_like(rho), "zero"
    g = binding_drift(rho, p, sigma)
    if np.linalg.norm(sigma.sigma @ g) * dt < r:
        return g, "binding"
    return -sigma.sigma_inv @ (rho / dt + drift.f(y) - drift.f(x)), "deadbeat"


@dataclass
class _BindingRun:
    u: np.ndarray  # Wiener future of the first solution
    v: np.ndarray  # Wiener future of the second solution
    g_b: np.ndarray  # fBm-level drift per cell
    gap: np.ndarray  # |y - x| at the cell edges


def _binding_map(
    z: CoupledState,
    p: CouplingParams,
    drift,
    sigma,
    given: np.ndarray,
    inverse: bool,
    use_compiled: bool = True,
):
    """Run the feedback construction cell by cell.

    With ``inverse=False`` the given array is the first Wiener future ``u``
    and the map returns ``v = Psi(u)``; with ``inverse=True`` it is ``v``
    and the map recovers ``u``.  The shift ``v - u`` on a cell only depends
    on earlier cells, so both directions are well defined and the Jacobian
    is unit triangular.
    """
    nm = _model(p)
    m = given.shape[0]
    d = np.ascontiguousarray(nm.filt(m))
    past_x = nm.from_past(z.w_x.increments, m)
    past_diff = nm.from_past(z.w_y.increments, m) - past_x
    half = steps_for(0.5, p.dt)
    args = (given, z.x, z.y, past_x, past_diff, d, nm.a, sigma.sigma, sigma.sigma_inv)
    if use_compiled and drift.poly is not None:
        u, s, g_b, gap, ok = _binding_kernel(
            *args, drift.poly, p.kappa1, p.kappa2, p.dt, half, p.hit_tol, inverse
        )
    else:
        u, s, g_b, gap, ok = _binding_loop(*args, drift, p, half, inverse)
    if not ok:
        raise CouplingError("κ₂ too small")
    return _BindingRun(u, u + s, g_b, gap)


def _binding_loop(given, x, y, past_x, past_diff, d, a, sig, sig_inv, drift, p, half, inverse):
    dt = p.dt
    m, dim = given.shape
    sigma = DiffusionMatrix(sig, sig_inv)
    u = np.zeros((m, dim))
    s = np.zeros((m, dim))
    g_b = np.zeros((m, dim))
    gap = np.zeros(m + 1)
    x = x.copy()
    y = y.copy()
    gap[0] = np.linalg.norm(y - x)
    for k in range(m):
        rho = y - x
        if k >= half and np.linalg.norm(rho) > p.hit_tol:
            return u, s, g_b, gap, False
        g, _ = _control(rho, x, y, p, drift, sigma)
        g_b[k] = g
        # Wiener shift on cell k so that the fBm difference equals g dt
        lagged = d[k:0:-1] @ s[:k] if k else 0.0
        s[k] = (g * dt - past_diff[k] - a * lagged) / (a * d[0])
        u[k] = given[k] - s[k] if inverse else given[k]
        db_x = past_x[k] + a * (d[k::-1] @ u[: k + 1])
        x_new = rk4_cell(drift, x, sig @ db_x, dt)
        y = rk4_cell(drift, y, sig @ (db_x + g * dt), dt)
        x = x_new
        gap[k + 1] = np.linalg.norm(y - x)
    return u, s, g_b, gap, True


@njit(cache=True)
def _rk4_cell_nb(coeffs, x, dy, dt):
    ym = 0.5 * dy
    k1 = _poly_nb(coeffs, x)
    k2 = _poly_nb(coeffs, x + 0.5 * dt * k1 + ym)
    k3 = _poly_nb(coeffs, x + 0.5 * dt * k2 + ym)
    k4 = _poly_nb(coeffs, x + dt * k3 + dy)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4) + dy


@njit(cache=True)
def _binding_kernel(
    given, x0, y0, past_x, past_diff, d, a, sig, sig_inv, coeffs, kappa1, kappa2, dt, half, hit_tol, inverse
):
    m, dim = given.shape
    u = np.zeros((m, dim))
    s = np.zeros((m, dim))
    g_b = np.zeros((m, dim))
    gap = np.zeros(m + 1)
    x = x0.copy()
    y = y0.copy()
    gap[0] = np.sqrt(np.sum((y - x) ** 2))
    for k in range(m):
        rho = y - x
        r = np.sqrt(np.sum(rho * rho))
        if k >= half and r > hit_tol:
            return u, s, g_b, gap, False
        g = np.zeros(dim)
        if r > _GAP_FLOOR:
            g = -(sig_inv @ (kappa1 * rho + kappa2 * rho / np.sqrt(r)))
            if np.sqrt(np.sum((sig @ g) ** 2)) * dt >= r:
                g = -(sig_inv @ (rho / dt + _poly_nb(coeffs, y) - _poly_nb(coeffs, x)))
        g_b[k] = g
        lagged = np.zeros(dim)
        for j in range(k):
            lagged += d[k - j] * s[j]
        s[k] = (g * dt - past_diff[k] - a * lagged) / (a * d[0])
        if inverse:
            u[k] = given[k] - s[k]
        else:
            u[k] = given[k]
        conv = np.zeros(dim)
        for j in range(k + 1):
            conv += d[k - j] * u[j]
        db_x = past_x[k] + a * conv
        x_new = _rk4_cell_nb(coeffs, x, sig @ db_x, dt)
        y = _rk4_cell_nb(coeffs, y, sig @ (db_x + g * dt), dt)
        x = x_new
        gap[k + 1] = np.sqrt(np.sum((y - x) ** 2))
    return u, s, g_b, gap, True


def _log_gauss_ratio(num: np.ndarray, den: np.ndarray, dt: float) -> float:
    """``log(phi(num) / phi(den))`` for i.i.d. ``N(0, dt)`` coordinates."""
    return -(float(np.sum(num * num)) - float(np.sum(den * den))) / (2.0 * dt)


def _hit(z, p, drift, sigma, u, v, info) -> StepOutcome:
    nxt = AuxState(Step.COUPLING, 0, z.aux.n_fail, 0.0)
    state, pair, px, py = _advance(z, p, drift, sigma, u, v, nxt)
    info["path_gap"] = np.linalg.norm(py - px, axis=1)
    return StepOutcome("succeeded", 1.0, nxt, pair, state_cost(state, p), state, info)


def step1(z: CoupledState, p: CouplingParams, drift: DriftSpec, sigma: DiffusionMatrix, rng) -> StepOutcome:
    """Hitting attempt over one time unit.

    Sampler for the symmetrized coupling: draw ``u``; with probability
    ``min(1, phi(Psi u) / phi(u)) / 2`` return the bound pair
    ``(u, Psi u)``; otherwise return the swapped pair ``(u, Psi^{-1} u)``
    with the conditional probability of that branch, and ``(u, u)`` in the
    remaining case.  Both marginals are exactly the Wiener measure.  The
    attempt succeeds when the emitted pair lies on the graph of ``Psi``.
    """
    if z.aux.step != Step.HITTING:
        raise CouplingError("step1 requires a hitting state")
    dt = p.dt
    m = steps_for(1.0, dt)
    dim = z.w_x.dim
    u = _draw(rng, m, dim, dt)
    fwd = _binding_map(z, p, drift, sigma, u, inverse=False)
    accept_bound = min(1.0, math.exp(min(0.0, _log_gauss_ratio(fwd.v, u, dt))))
    info = {"accept_bound": accept_bound, "gap_at_half": float(fwd.gap[steps_for(0.5, dt)])}
    n_fail = z.aux.n_fail
    if rng.random() < 0.5 * accept_bound:
        info["branch"] = "bound"
        return _hit(z, p, drift, sigma, u, fwd.v, info)

    back = _binding_map(z, p, drift, sigma, u, inverse=True)
    accept_swap = min(1.0, math.exp(min(0.0, _log_gauss_ratio(back.u, u, dt))))
    if rng.random() * (1.0 - 0.5 * accept_bound) < 0.5 * accept_swap:
        u_y = back.u
        info["branch"] = "swap"
    else:
        u_y = u
        info["branch"] = "diagonal"
    if np.array_equal(u_y, fwd.v):
        # Psi is the identity here, so the emitted pair is also a bound pair
        return _hit(z, p, drift, sigma, u, u_y, info)
    wait = _round_up(p.t_star * (n_fail + 1) ** p.fail_exponent, dt)
    nxt = AuxState(Step.WAITING, 0, n_fail + 1, wait)
    state, pair, _, _ = _advance(z, p, drift, sigma, u, u_y, nxt)
    return StepOutcome("failed", 1.0, nxt, pair, state_cost(state, p), state, info)


# ---------------------------------------------------------------------------
# Step 2: Gaussian coupling of one coefficient
# ---------------------------------------------------------------------------


def _phi(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def gaussian_coupling_1d(a: float, b: float, rng) -> tuple[float, float, bool]:
    """Couple ``N(0, 1)`` with itself so that ``y = x + a`` with high probability.

    With ``M = max(4b, 2 log(8/b))``: draw ``x``; inside the window
    ``|x|, |x + a| <= M/2`` accept ``y = x + a`` with probability
    ``min(1, phi(x + a) / phi(x))``; otherwise reflect ``y = -x`` when
    ``|x| <= M/2`` and keep ``y = x`` outside.  ``bound`` reports
    ``y == x + a``.
    """
    if not b > 0:
        raise CouplingError("b must be positive")
    if abs(a) > b:
        raise CouplingError("the shift must not exceed b")
    half = 0.5 * max(4.0 * b, 2.0 * math.log(8.0 / b))
    x = float(rng.standard_normal())
    u = float(rng.random())
    if abs(x) <= half and abs(x + a) <= half:
        ratio = math.exp(-a * x - 0.5 * a * a)  # phi(x + a) / phi(x)
        if u <= min(1.0, ratio):
            return x, x + a, True
    if abs(x) <= half:
        return x, -x, False
    return x, x, a == 0.0


def step2(z: CoupledState, p: CouplingParams, drift: DriftSpec, sigma: DiffusionMatrix, rng) -> StepOutcome:
    """Keep both fBm futures identical on ``[0, 2^N]``.

    The Wiener shift ``g`` that cancels the effect of the past difference is
    computed exactly on the grid; the future of the first solution is split
    into its coefficient along ``g`` and the orthogonal rest, the rest is
    shared and the coefficient is coupled with :func:`gaussian_coupling_1d`.
    """
    if z.aux.step != Step.COUPLING:
        raise CouplingError("step2 requires a coupling state")
    n = z.aux.n_success
    dt = p.dt
    duration = 2.0**n
    m_cells = duration / dt
    if m_cells > p.max_step_cells:
        raise CouplingError("horizon exceeded")
    m = int(m_cells)
    dim = z.w_x.dim
    nm = _model(p)
    diff = nm.from_past(z.w_y.increments, m) - nm.from_past(z.w_x.increments, m)
    shift = nm.cancel(-diff)  # Wiener increments of the required shift
    norm = float(np.linalg.norm(shift))
    a = norm / math.sqrt(dt)  # L2 norm of the drift shift / dt
    b = max(p.b_const * 2.0 ** (-p.alpha * n), a)
    u = _draw(rng, m, dim, dt)
    if norm == 0.0:
        xc, yc, bound = gaussian_coupling_1d(0.0, b, rng)
        v = u
    else:
        e = shift / norm
        xc = float(np.sum(u * e)) / math.sqrt(dt)
        _, yc, bound = gaussian_coupling_1d(a, b, _PresetNormal(rng, xc))
        v = u + (yc - xc) * math.sqrt(dt) * e
        if bound:
            v = u + shift  # same vector, without the rounding of the projection
    info = {"shift_norm": a, "b": b, "n": n}
    if bound:
        nxt = AuxState(Step.COUPLING, n + 1, z.aux.n_fail, 0.0)
        kind = "succeeded"
    else:
        wait = _round_up(
            p.t_tilde_star * 2.0 ** (p.beta * n) * (z.aux.n_fail + 1) ** p.fail_exponent, dt
        )
        nxt = AuxState(Step.WAITING, 0, z.aux.n_fail + 1, wait)
        kind = "failed"
    state, pair, px, py = _advance(z, p, drift, sigma, u, v, nxt)
    info["path_gap"] = float(np.max(np.linalg.norm(py - px, axis=1)))
    return StepOutcome(kind, duration, nxt, pair, state_cost(state, p), state, info)


class _PresetNormal:
    """RNG proxy whose next normal draw is a given value (the projected coefficient)."""

    def __init__(self, rng, value: float):
        self._rng = rng
        self._value = value

    def standard_normal(self, *args, **kwargs):
        return self._value

    def random(self, *args, **kwargs):
        return self._rng.random(*args, **kwargs)


# ---------------------------------------------------------------------------
# Chain
# ---------------------------------------------------------------------------


class ForcedSuccessRng:
    """RNG wrapper whose uniforms are all zero, so every coupling attempt binds."""

    def __init__(self, rng):
        self._rng = np.random.default_rng(rng)

    def standard_normal(self, *args, **kwargs):
        return self._rng.standard_normal(*args, **kwargs)

    def random(self, *args, **kwargs):
        if args or kwargs:
            return np.zeros(*args, **kwargs)
        return 0.0


def point_mass(x) -> Callable:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return lambda rng: x.copy()


def gaussian_initial(mean, std: float) -> Callable:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    return lambda rng: mean + std * rng.standard_normal(mean.shape)


@dataclass
class RunRecord:
    steps: list = field(default_factory=list)
    tau_infinity: float | None = None
    censored: bool = True
    truncation_error: float = 0.0
    step1_entry_costs: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps(s, sort_keys=True) for s in self.steps]
        lines.append(
            json.dumps(
                {
                    "tau_infinity": self.tau_infinity,
                    "censored": self.censored,
                    "truncation_error": self.truncation_error,
                },
                sort_keys=True,
            )
        )
        return "\n".join(lines) + "\n"


_STEP_FUNCS = {Step.INIT: step0, Step.HITTING: step1, Step.COUPLING: step2, Step.WAITING: step3}
_STEP_NAMES = {Step.INIT: "init", Step.HITTING: "hitting", Step.COUPLING: "coupling", Step.WAITING: "waiting"}


def _finite_or_none(v: float):
    return v if math.isfinite(v) else None


def run_coupled_chain(
    mu_x: Callable,
    mu_y: Callable,
    p: CouplingParams,
    drift: DriftSpec,
    sigma: DiffusionMatrix,
    rng,
    t_max: float,
    on_step: Callable | None = None,
) -> RunRecord:
    """Run the coupled chain from a shared Wiener past until ``t_max``.

    The run is coupled when every step since the last successful step 1 is
    a successful step 2 and the chain has reached ``t_max``; the coupling
    time is then the start of that step 1.  Otherwise the run is censored.
    """
    if not t_max > 0:
        raise CouplingError("t_max must be positive")
    rng = rng if hasattr(rng, "standard_normal") else np.random.default_rng(rng)
    dim = sigma.dim
    past = sample_wiener_past(p.dt, p.T_past, dim, rng)
    z = CoupledState(mu_x(rng), mu_y(rng), past, past, AuxState())
    rec = RunRecord(truncation_error=truncation_error(p.h, p.T_past))
    t = 0.0
    streak_start = None
    while t < t_max:
        kind = z.aux.step
        if kind == Step.HITTING:
            rec.step1_entry_costs.append(state_cost(z, p).value)
        out = _STEP_FUNCS[kind](z, p, drift, sigma, rng)
        success = None if kind in (Step.INIT, Step.WAITING) else out.succeeded
        rec.steps.append(
            {
                "t_start": t,
                "duration": out.duration,
                "step_kind": _STEP_NAMES[kind],
                "success": success,
                "cost_after": _finite_or_none(out.cost_after.value),
                "distance_after": out.state_after.distance,
            }
        )
        if on_step is not None:
            on_step(z, out, t)
        if kind == Step.HITTING:
            streak_start = t if out.succeeded else None
        elif kind == Step.COUPLING and not out.succeeded:
            streak_start = None
        t += out.duration
        z = out.state_after
    if streak_start is not None:
        rec.tau_infinity = streak_start
        rec.censored = False
    return rec
