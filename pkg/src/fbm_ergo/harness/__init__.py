"""
Monte Carlo driver for the coupled chain.

Runs independent coupled chains over a deterministic worker pool, estimates
the survival function of the coupling time and fits its power-law tail.
"""

from __future__ import annotations

import dataclasses
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..coupling import (
    CouplingError,
    CouplingParams,
    ForcedSuccessRng,
    RunRecord,
    gaussian_initial,
    point_mass,
    run_coupled_chain,
)
from ..noise import as_hurst
from ..sde import DiffusionMatrix, make_drift

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = [
    "HarnessError",
    "ExperimentConfig",
    "TailEstimate",
    "run_experiment",
    "survival_function",
    "fit_tail",
    "tv_bound",
    "theory_gamma",
    "load_config",
    "default_constants",
    "run_seed_sequence",
    "run_records",
    "runs_jsonl",
    "write_outputs",
]


class HarnessError(ValueError):
    """Invalid experiment configuration or degenerate experiment output."""


_PARAM_FIELDS = tuple(f.name for f in dataclasses.fields(CouplingParams))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def default_constants() -> dict:
    """Shipped chain constants (``data/constants.toml``)."""
    text = resources.files("fbm_ergo").joinpath("data/constants.toml").read_text()
    return tomllib.loads(text)


@dataclass(frozen=True)
class ExperimentConfig:
    """One Monte Carlo experiment.

    ``x0`` and ``y0`` are the means of the two initial laws; with
    ``init_std > 0`` both are Gaussian, otherwise point masses.
    """

    params: CouplingParams
    drift: str = "double_well"
    drift_params: dict = field(default_factory=dict)
    sample_count: int = 100
    t_max: float = 1024.0
    seed: int = 0
    output: str | None = None
    dim: int = 1
    x0: float = 0.5
    y0: float = 1.5
    init_std: float = 0.0
    workers: int = 1
    forced_success: bool = False

    def __post_init__(self):
        if int(self.sample_count) != self.sample_count or self.sample_count <= 0:
            raise HarnessError("sample_count must be a positive integer")
        if not self.t_max > 0:
            raise HarnessError("t_max must be positive")
        if self.init_std < 0 or self.workers < 1 or self.dim < 1:
            raise HarnessError("init_std must be >= 0, workers and dim >= 1")
        try:
            self.params.validate_for(self.make_drift())
        except CouplingError as exc:
            raise HarnessError(str(exc)) from exc

    def make_drift(self):
        try:
            return make_drift(self.drift, self.dim, **self.drift_params)
        except (TypeError, ValueError) as exc:
            raise HarnessError(f"invalid drift: {exc}") from exc

    @classmethod
    def from_mapping(cls, cfg: dict) -> "ExperimentConfig":
        """Build from flat key/values; chain constants default to the shipped ones."""
        cfg = dict(cfg)
        known = set(_PARAM_FIELDS) | {f.name for f in dataclasses.fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise HarnessError(f"unknown config keys: {sorted(unknown)}")
        consts = default_constants()
        pvals = {k: consts[k] for k in _PARAM_FIELDS if k in consts}
        pvals.update({k: cfg.pop(k) for k in list(cfg) if k in _PARAM_FIELDS})
        pvals.pop("params", None)
        try:
            params = CouplingParams(**pvals)
        except (TypeError, ValueError) as exc:
            raise HarnessError(f"invalid coupling parameters: {exc}") from exc
        cfg.pop("params", None)
        return cls(params=params, **cfg)


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise HarnessError(f"cannot parse {path}: {exc}") from exc
    return ExperimentConfig.from_mapping(raw)


# ---------------------------------------------------------------------------
# Tail estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TailEstimate:
    t_values: np.ndarray
    survival: np.ndarray
    fitted_gamma: float
    gamma_ci: tuple
    gamma_defined: bool = True
    censored_count: int = 0

    def __post_init__(self):
        s = np.asarray(self.survival, dtype=float)
        if s.size and (s[0] > 1.0 or np.any(np.diff(s) > 0) or np.any(s < 0)):
            raise HarnessError("survival must be a non-increasing sequence in [0, 1]")


def survival_function(taus, n_total: int, t_max: float):
    """Empirical ``P(tau > t)`` at every observed coupling time and at ``t_max``.

    Censored runs count as coupling after ``t_max``.
    """
    taus = np.sort(np.asarray(taus, dtype=float))
    t = np.unique(np.append(taus, t_max))
    surv = 1.0 - np.searchsorted(taus, t, side="right") / n_total
    return t, surv


def _ls_slope(t, s) -> float:
    x = np.log(t)
    y = np.log(s)
    x = x - x.mean()
    denom = float(x @ x)
    if denom <= 0:
        return math.nan
    return float(x @ (y - y.mean())) / denom


def fit_tail(taus, n_total: int, min_points: int = 20):
    """Least-squares slope of ``log P(tau > t)`` against ``log t``.

    Every observation in the upper half of the coupling times contributes
    one point (ties included, since the attempt schedule puts coupling
    times on a lattice); returns ``gamma`` (minus the slope) or ``nan``
    when fewer than ``min_points`` usable points remain or the times are
    degenerate.
    """
    taus = np.sort(np.asarray(taus, dtype=float))
    taus = taus[taus > 0]
    if taus.size == 0:
        return math.nan
    t = taus[taus.size // 2 :]
    s = 1.0 - np.searchsorted(taus, t, side="right") / n_total
    keep = s > 0
    t, s = t[keep], s[keep]
    if t.size < min_points:
        return math.nan
    return -_ls_slope(t, s)


def _estimate(records, t_max: float, seed: int, n_boot: int = 400) -> TailEstimate:
    n = len(records)
    taus = np.array([r.tau_infinity for r in records if not r.censored], dtype=float)
    cens = n - taus.size
    t, surv = survival_function(taus, n, t_max)
    gamma = fit_tail(taus, n)
    if not math.isfinite(gamma):
        return TailEstimate(t, surv, math.nan, (math.nan, math.nan), False, cens)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB007]))
    all_taus = np.array([math.inf if r.censored else r.tau_infinity for r in records])
    boot = []
    for _ in range(n_boot):
        sample = rng.choice(all_taus, size=n, replace=True)
        g = fit_tail(sample[np.isfinite(sample)], n)
        if math.isfinite(g):
            boot.append(g)
    if len(boot) < n_boot // 2:
        ci = (math.nan, math.nan)
    else:
        ci = tuple(float(v) for v in np.percentile(boot, [2.5, 97.5]))
    return TailEstimate(t, surv, float(gamma), ci, True, cens)


def tv_bound(tail: TailEstimate) -> list[tuple[float, float]]:
    """Total-variation bound ``2 P(tau > t)``, clamped to ``[0, 2]``."""
    if len(tail.t_values) == 0:
        raise HarnessError("empty tail estimate")
    b = np.clip(2.0 * np.asarray(tail.survival, dtype=float), 0.0, 2.0)
    return [(float(t), float(v)) for t, v in zip(tail.t_values, b)]


def theory_gamma(h) -> float:
    """Supremum of the admissible tail exponents for the given Hurst index."""
    hh = as_hurst(h)
    if hh.excluded_by_theory:
        raise HarnessError("excluded by theory")
    if hh.h > 0.5 or hh.h >= 0.25:
        return 0.125
    return hh.h * (1.0 - 2.0 * hh.h)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def run_seed_sequence(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream of run ``index``: independent of scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def _initial(cfg: ExperimentConfig):
    mx = np.full(cfg.dim, cfg.x0)
    my = np.full(cfg.dim, cfg.y0)
    if cfg.init_std > 0:
        return gaussian_initial(mx, cfg.init_std), gaussian_initial(my, cfg.init_std)
    return point_mass(mx), point_mass(my)


def _run_one(job) -> RunRecord:
    cfg, index = job
    mu_x, mu_y = _initial(cfg)
    rng = run_seed_sequence(cfg.seed, index)
    if cfg.forced_success:
        rng = ForcedSuccessRng(rng)
    return run_coupled_chain(
        mu_x,
        mu_y,
        cfg.params,
        cfg.make_drift(),
        DiffusionMatrix.identity(cfg.dim),
        rng,
        cfg.t_max,
    )


def run_records(cfg: ExperimentConfig) -> list[RunRecord]:
    """All runs, ordered by run index whatever the number of workers."""
    jobs = [(cfg, i) for i in range(cfg.sample_count)]
    if cfg.workers == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * cfg.workers))))


def run_experiment(cfg: ExperimentConfig) -> tuple[TailEstimate, list[RunRecord]]:
    """Run ``sample_count`` chains and estimate the coupling-time tail."""
    records = run_records(cfg)
    if all(r.censored for r in records):
        raise HarnessError("no coupling observed; increase t_max")
    tail = _estimate(records, cfg.t_max, cfg.seed)
    if cfg.output is not None:
        write_outputs(Path(cfg.output), cfg, tail, records)
    return tail, records


def runs_jsonl(records) -> str:
    """Concatenated run records; every line carries its run index."""
    out = []
    for i, rec in enumerate(records):
        for line in rec.to_jsonl().splitlines():
            out.append('{"run": %d, ' % i + line[1:])
    return "\n".join(out) + "\n"


def write_outputs(out: Path, cfg: ExperimentConfig, tail: TailEstimate, records) -> None:
    import csv
    import json

    out.mkdir(parents=True, exist_ok=True)
    (out / "runs.jsonl").write_text(runs_jsonl(records))
    with open(out / "tail.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "survival", "tv_bound"])
        for (t, b), s in zip(tv_bound(tail), tail.survival):
            w.writerow([repr(t), repr(float(s)), repr(b)])

    def _num(v):
        return float(v) if math.isfinite(v) else None

    summary = {
        "fitted_gamma": _num(tail.fitted_gamma),
        "gamma_ci": [_num(v) for v in tail.gamma_ci],
        "gamma_defined": tail.gamma_defined,
        "theory_gamma": theory_gamma(cfg.params.h),
        "censored_count": tail.censored_count,
        "sample_count": cfg.sample_count,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
