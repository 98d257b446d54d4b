"""Command line entry point ``fbm-ergo``."""

from __future__ import annotations

import math
import sys
from pathlib import Path

import click

from . import ExperimentConfig, HarnessError, run_experiment, theory_gamma, tomllib

_FLAG_KEYS = {
    "hurst": "h",
    "alpha": "alpha",
    "beta": "beta",
    "samples": "sample_count",
    "t_max": "t_max",
    "dt": "dt",
    "seed": "seed",
    "drift": "drift",
    "out": "output",
    "workers": "workers",
}


@click.group()
def main():
    """Coupling experiments for SDEs driven by fractional Brownian motion."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--hurst", type=float, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--beta", type=float, default=None)
@click.option("--samples", type=int, default=None)
@click.option("--t-max", "t_max", type=float, default=None)
@click.option("--dt", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--drift", type=str, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), default="fbm-ergo-out")
def run(config_path, out, **flags):
    """Run a coupling experiment and write runs.jsonl, tail.csv and summary.json."""
    try:
        raw = {}
        if config_path is not None:
            raw = _read_raw(config_path)
        for k, v in flags.items():
            if v is not None:
                raw[_FLAG_KEYS[k]] = v
        raw["output"] = out
        cfg = ExperimentConfig.from_mapping(raw)
    except (HarnessError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    try:
        tail, records = run_experiment(cfg)
    except HarnessError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    g = tail.fitted_gamma
    click.echo(
        f"runs={len(records)} censored={tail.censored_count} "
        f"fitted_gamma={'undefined' if not math.isfinite(g) else f'{g:.4f}'} "
        f"theory_gamma={theory_gamma(cfg.params.h):.4f} -> {out}"
    )


def _read_raw(path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise HarnessError(f"cannot parse {path}: {exc}") from exc


@main.command()
@click.option("--out", type=click.Path(dir_okay=False), default="constants.toml")
@click.option("--hurst", "hursts", type=float, multiple=True, default=(0.3, 0.7))
@click.option("--drift", type=str, default="double_well")
@click.option("--scenarios", type=int, default=0, help="Monte Carlo states per Hurst index (0 skips).")
def calibrate(out, hursts, drift, scenarios):
    """Compute grid and chain constants and write them to constants.toml."""
    from .calibrate import calibrate as _calibrate, write_constants

    try:
        consts = _calibrate(hursts, drift, scenarios=scenarios)
    except ValueError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    write_constants(Path(out), consts)
    click.echo(f"wrote {out}")


if __name__ == "__main__":  # pragma: no cover
    main()
