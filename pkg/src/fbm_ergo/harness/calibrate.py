"""
Constant calibration.

Computes the grid-level constants of the fBm representation (normalization,
inversion constant, future and tail constants) and the drift-dependent
chain constants, and writes them as TOML.
"""

from __future__ import annotations

import math

import numpy as np
import tomli_w

from ..coupling import (
    AuxState,
    CoupledState,
    CouplingParams,
    Step,
    _advance,
    _binding_map,
    _concat,
    _draw,
    is_admissible,
    state_cost,
    step0,
    step1,
    step3,
)
from ..fracops import future_constant, inversion_constant, tail_constant
from ..noise import (
    continuum_normalization,
    normalization,
    sample_wiener_past,
    steps_for,
    truncation_error,
)
from ..sde import DiffusionMatrix, make_drift
from . import default_constants

__all__ = [
    "grid_constants",
    "chain_constants",
    "calibrate",
    "write_constants",
    "default_params",
    "swap_failure_states",
    "cost_after_wait",
    "failure_wait_costs",
    "smallest_safe_wait",
    "hitting_entry_states",
    "step1_success_rate",
]


def grid_constants(h: float, dt: float, t_past: float) -> dict:
    """Numerical constants of the truncated grid representation for one ``H``."""
    n = steps_for(t_past, dt)
    return {
        "a_H": normalization(h, dt, n),
        "a_H_continuum": continuum_normalization(h),
        "gamma_H": inversion_constant(h, dt, t_past),
        "future_constant": future_constant(h, dt, t_past),
        "future_constant_closed_form": math.cos(math.pi * h) / math.pi,
        "tail_constant": tail_constant(h, dt, t_past),
        "truncation_error": truncation_error(h, t_past),
    }


def chain_constants(drift_name: str = "double_well", dim: int = 1, **drift_params) -> dict:
    """Drift constants and the feedback gains they force.

    ``kappa1 = c3`` and ``kappa2`` is the smallest gain that closes every
    admissible gap within half a time unit, ``4 sqrt(max gap)``.
    """
    drift = make_drift(drift_name, dim, **drift_params)
    radius = drift.admissible_distance
    return {
        "c1": drift.c1,
        "c2": drift.c2,
        "c3": drift.c3,
        "c4": drift.c4,
        "admissible_distance": radius,
        "kappa1": drift.c3,
        "kappa2_min": 4.0 * math.sqrt(radius),
    }


def calibrate(hursts=(0.3, 0.7), drift_name: str = "double_well", dim: int = 1, scenarios: int = 0) -> dict:
    """Constants for ``constants.toml``.

    With ``scenarios > 0`` the Monte Carlo part runs as well: per Hurst
    index, the step-1 success rate from ``scenarios`` admissible entry
    states and the waits after which every swapped-branch failure is
    re-admissible (cost at most 1) or within the first bookkeeping term
    (cost at most 1/2).
    """
    base = default_constants()
    dt, t_past = base["dt"], base["T_past"]
    chain = chain_constants(drift_name, dim)
    out = dict(base)
    out["kappa1"] = chain["kappa1"]
    out["kappa2"] = max(float(base["kappa2"]), math.ceil(10.0 * chain["kappa2_min"]) / 10.0)
    out["drift"] = {"name": drift_name, **chain}
    out["grid"] = {f"H{h:g}": grid_constants(h, dt, t_past) for h in hursts}
    if scenarios > 0:
        mc = {}
        for h in hursts:
            p = default_params(h=h, kappa1=out["kappa1"], kappa2=out["kappa2"])
            mc[f"H{h:g}"] = {
                "step1_success_rate": step1_success_rate(p, scenarios, drift_name=drift_name),
                "t_star_readmissible": smallest_safe_wait(p, 1.0, scenarios),
                "t_star_half_cost": smallest_safe_wait(p, 0.5, scenarios),
            }
        out["monte_carlo"] = mc
    return out


def write_constants(path, constants: dict) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(constants, fh)


# ---------------------------------------------------------------------------
# Waiting time after a failed hitting attempt
# ---------------------------------------------------------------------------


def default_params(**overrides) -> CouplingParams:
    """Shipped chain constants with selected fields replaced."""
    base = default_constants()
    fields = CouplingParams.__dataclass_fields__
    vals = {k: v for k, v in base.items() if k in fields}
    vals.update(overrides)
    return CouplingParams(**vals)


def swap_failure_states(p: CouplingParams, n: int, seed: int = 0, drift_name: str = "double_well"):
    """States right after a hitting attempt that failed on the swapped branch.

    Starts are admissible with identical pasts: ``x`` uniform on
    ``[-1.5, 1.5]`` and a gap uniform up to the admissible distance.  The
    swapped branch is the only failure that leaves a past difference, so
    these states are the worst case for the waiting time.
    """
    drift = make_drift(drift_name)
    sigma = DiffusionMatrix.identity()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A9]))
    m = steps_for(1.0, p.dt)
    aux = AuxState(Step.WAITING, 0, 1, 1.0)
    out = []
    for _ in range(n):
        past = sample_wiener_past(p.dt, p.T_past, 1, rng)
        x = rng.uniform(-1.5, 1.5)
        y = x + rng.choice([-1.0, 1.0]) * rng.uniform(0.0, drift.admissible_distance)
        z = CoupledState(np.array([x]), np.array([y]), past, past, AuxState(Step.HITTING, 0, 0, 0.0))
        u = _draw(rng, m, 1, p.dt)
        back = _binding_map(z, p, drift, sigma, u, inverse=True)
        state, _, _, _ = _advance(z, p, drift, sigma, u, back.u, aux)
        out.append(state)
    return out


def cost_after_wait(z: CoupledState, p: CouplingParams, wait: float) -> float:
    """Cost of the past difference after ``wait`` time units with identical futures."""
    zeros = np.zeros((steps_for(wait, p.dt), z.w_x.dim))
    aged = CoupledState(z.x, z.y, _concat(z.w_x, zeros), _concat(z.w_y, zeros))
    return state_cost(aged, p).value


def failure_wait_costs(p: CouplingParams, waits, n_scenarios: int = 100, seed: int = 0) -> np.ndarray:
    """Largest cost over the failure scenarios for every wait in ``waits``."""
    states = swap_failure_states(p, n_scenarios, seed)
    return np.array([max(cost_after_wait(z, p, w) for z in states) for w in waits])


def smallest_safe_wait(
    p: CouplingParams, target: float = 0.5, n_scenarios: int = 100, seed: int = 0, step: float = 0.25, max_wait: float = 16.0
) -> float:
    """Smallest multiple of ``step`` after which every scenario costs at most ``target``.

    With ``target = 1/2`` this is the waiting time that keeps the cost of
    the first failure within the first term of the ``sum 1 / (2 n^2)``
    bookkeeping; returns ``inf`` when ``max_wait`` is not enough.
    """
    states = swap_failure_states(p, n_scenarios, seed)
    w = step
    while w <= max_wait + 1e-12:
        if max(cost_after_wait(z, p, w) for z in states) <= target:
            return w
        w += step
    return math.inf


def hitting_entry_states(p: CouplingParams, n: int, seed: int = 0, drift_name: str = "double_well"):
    """Admissible states of the kind the chain presents to a hitting attempt.

    Half are reached by step 0 from starts uniform on ``[-2, 2]`` with a
    shared past; the other half by the wait ``t_star`` after a hitting
    attempt that failed on the swapped branch, which leaves a past
    difference.  Candidates that are not admissible are redrawn.
    """
    drift = make_drift(drift_name)
    sigma = DiffusionMatrix.identity()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE17]))
    out = []
    for _ in range(n - n // 2):
        past = sample_wiener_past(p.dt, p.T_past, 1, rng)
        x0, y0 = rng.uniform(-2.0, 2.0, 2)
        z = CoupledState([x0], [y0], past, past, AuxState())
        out.append(step0(z, p, drift, sigma, rng).state_after)
    batch = 0
    while len(out) < n:
        if batch > 50:
            raise ValueError("admissible entry states are too rare after the shipped wait")
        for z in swap_failure_states(p, 4 * (n // 2), seed=seed * 1000 + batch, drift_name=drift_name):
            wait = AuxState(Step.WAITING, 0, 1, p.t_star)
            z = step3(CoupledState(z.x, z.y, z.w_x, z.w_y, wait), p, drift, sigma, rng).state_after
            if is_admissible(z, p, drift):
                out.append(z)
                if len(out) == n:
                    break
        batch += 1
    return out


def step1_success_rate(p: CouplingParams, n: int, seed: int = 0, drift_name: str = "double_well") -> float:
    """Fraction of successful hitting attempts, one per admissible entry state."""
    drift = make_drift(drift_name)
    sigma = DiffusionMatrix.identity()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
    states = hitting_entry_states(p, n, seed, drift_name)
    return sum(step1(z, p, drift, sigma, rng).succeeded for z in states) / n
