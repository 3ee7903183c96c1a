"""``lab`` command line: run experiment configs and re-check stored reports."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .lab import ConfigError, load_config, run_experiment, verify_report, write_report


@click.group()
def main() -> None:
    """Run gluing experiments and verify their reports."""


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None, help="Output directory (default: the config's output field, else runs/<experiment>).")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="Worker processes.")
def run(config: Path, out_dir: Path | None, seed: int | None, jobs: int) -> None:
    """Run the experiment described by CONFIG."""
    try:
        cfg = load_config(config, seed)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from None
    report = run_experiment(cfg, jobs=jobs)
    out = out_dir or Path(cfg.output or Path("runs") / cfg.experiment)
    rp, cp = write_report(report, out)
    for row in report.rows:
        if row["error"] is not None:
            click.echo(f"point {row['index']} {row['params']}: {row['error']}", err=True)
    for key, val in sorted(report.verdicts.items()):
        click.echo(f"{key}: {'pass' if val else 'FAIL'}")
    click.echo(f"wrote {rp} and {cp} ({report.elapsed_s:.1f} s)")


@main.command()
@click.argument("report", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def verify(report: Path) -> None:
    """Recompute the pass flags of REPORT from its stored rows."""
    ok, msgs = verify_report(report)
    for msg in msgs:
        click.echo(msg)
    if not ok:
        click.echo("report is inconsistent with its rows", err=True)
        sys.exit(1)
    click.echo("report consistent")


if __name__ == "__main__":
    main()
