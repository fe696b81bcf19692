"""``sentinel`` command-line interface."""

from __future__ import annotations

import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import resources
from pathlib import Path

import click
import yaml

from .errors import SentinelError, ValidationError
from .harness import EXIT_INVARIANT, run_scenario
from .scenario import Scenario, load_scenario
from .threats import (compile_policies, format_threat_table, load_threat_table, parse_asset_map,
                      rank_threats, validate_threat_table)
from .world import World

log = logging.getLogger("sentinel")


def _setup_logging() -> None:
    level = os.environ.get("SENTINEL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def bundled(name: str) -> Path:
    """Path of a file shipped in ``sentinel/data``."""
    return Path(str(resources.files("sentinel") / "data" / name))


def _load(path: str, seed: int | None = None) -> Scenario:
    try:
        sc = load_scenario(path)
    except (OSError, SentinelError) as exc:
        raise click.ClickException(str(exc)) from None
    return sc if seed is None else replace(sc, seed=seed)


@click.group()
@click.version_option(package_name="artifact")
def main() -> None:
    """Bus policing simulator and threat-table tools."""
    _setup_logging()


# -- run / batch --------------------------------------------------------------

@main.command()
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--log", "log_out", type=click.Path(dir_okay=False), default=None,
              help="Write the event log here.")
@click.option("--report", "report_out", type=click.Path(dir_okay=False), default=None,
              help="Write the YAML report here.")
def run(scenario: str, seed: int | None, log_out: str | None, report_out: str | None) -> None:
    """Run one scenario and print its report."""
    sc = _load(scenario, seed)
    log.info("running %s seed=%d for %d ticks", sc.name, sc.seed, sc.duration)
    result = run_scenario(sc)
    if log_out:
        Path(log_out).write_text(result.log_text, encoding="utf-8")
    if report_out:
        Path(report_out).write_text(result.report.to_yaml(), encoding="utf-8")
    click.echo(result.report.to_text(), nl=False)
    sys.exit(result.report.exit_code)


def _batch_one(path: str) -> tuple[str, int, str]:
    try:
        result = run_scenario(load_scenario(path))
    except SentinelError as exc:
        return path, EXIT_INVARIANT, f"error: {exc}\n"
    return path, result.report.exit_code, result.report.to_text()


@main.command()
@click.argument("directory", type=click.Path(exists=True, file_okay=False))
@click.option("--jobs", "-j", type=int, default=None, help="Worker processes.")
@click.option("--report", "report_out", type=click.Path(dir_okay=False), default=None,
              help="Write a YAML summary here.")
def batch(directory: str, jobs: int | None, report_out: str | None) -> None:
    """Run every *.yaml scenario in DIRECTORY, one world per worker."""
    paths = sorted(str(p) for p in Path(directory).glob("*.yaml"))
    if not paths:
        raise click.ClickException(f"no scenarios in {directory}")
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(_batch_one, paths))
    worst = 0
    for path, code, text in results:
        click.echo(f"== {path} (exit {code})")
        click.echo(text, nl=False)
        worst = max(worst, code)
    if report_out:
        summary = [{"scenario": p, "exit_code": c} for p, c, _ in results]
        Path(report_out).write_text(yaml.safe_dump(summary, sort_keys=False), encoding="utf-8")
    sys.exit(worst)


# -- inspect ------------------------------------------------------------------

@main.group()
def inspect() -> None:
    """Show guardian state for a scenario, optionally after N ticks."""


_ticks = click.option("--ticks", type=int, default=0, help="Ticks to run first.")


def _world(scenario: str, ticks: int) -> World:
    w = World(_load(scenario))
    w.run(ticks)
    return w


@inspect.command("spe")
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--slave", default=None, help="Only this slave's SPE.")
@_ticks
def inspect_spe(scenario: str, slave: str | None, ticks: int) -> None:
    """Device and policy tables of each SPE."""
    w = _world(scenario, ticks)
    out = []
    for spe in w.spes.values():
        if slave is not None and spe.slave_name != slave:
            continue
        t = spe.tables
        out.append({
            "slave": spe.slave_name, "enabled": spe.enabled, "isolated": spe.isolated,
            "owner": spe.owner_master, "pipeline_latency": spe.pipeline_latency,
            "devices": [{"master": d.master_id, "policy_base": d.policy_base,
                         "policy_count": d.policy_count, "enabled": d.enabled}
                        for d in t.devices],
            "policies": spe.dump(),
        })
    if slave is not None and not out:
        raise click.ClickException(f"no SPE guards {slave!r}")
    click.echo(yaml.safe_dump(out, sort_keys=False), nl=False)


@inspect.command("sck")
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--slave", default=None, help="Only this slave's SCK.")
@_ticks
def inspect_sck(scenario: str, slave: str | None, ticks: int) -> None:
    """FSM state, countdown and last violation of each SCK."""
    w = _world(scenario, ticks)
    out = [s.status() for s in w.scks.values() if slave is None or s.slave_name == slave]
    if slave is not None and not out:
        raise click.ClickException(f"no SCK on {slave!r}")
    click.echo(yaml.safe_dump(out, sort_keys=False), nl=False)


@inspect.command("sre")
@click.argument("scenario", type=click.Path(exists=True, dir_okay=False))
@_ticks
def inspect_sre(scenario: str, ticks: int) -> None:
    """Response policy, queue depth and recent dispatches."""
    w = _world(scenario, ticks)
    doc = {
        "policy": w.sre.policy.to_records(),
        "depth": w.sre.depth,
        "recent": [{"tick": d.tick, "kind": d.event.kind.value, "origin": d.event.origin,
                    "action": str(d.action), "outcome": d.outcome} for d in w.sre.recent],
        "ate": {"lockdown": w.ate.lockdown, "crypto_enabled": w.ate.crypto_enabled,
                "keys_zeroized": not any(w.ate.read_keys())},
    }
    click.echo(yaml.safe_dump(doc, sort_keys=False), nl=False)


# -- threats ------------------------------------------------------------------

@main.group()
def threats() -> None:
    """Threat-table tools.  TABLE defaults to the bundled vehicle table."""


_table = click.argument("table", required=False, type=click.Path(exists=True, dir_okay=False))


def _rows(table: str | None):
    try:
        return load_threat_table(table or bundled("vehicle_threats.csv"))
    except ValidationError as exc:
        raise click.ClickException(str(exc)) from None


@threats.command("validate")
@_table
def threats_validate(table: str | None) -> None:
    """Recompute DREAD averages and check every row."""
    report = validate_threat_table(_rows(table))
    for row, avg in report.confirmed:
        click.echo(f"row {row}: ok ({avg})")
    for f in report.findings:
        click.echo(str(f))
    click.echo(f"{report.rows} rows, {len(report.findings)} findings")
    sys.exit(0 if report.ok else 1)


@threats.command("rank")
@_table
@click.option("--top", type=int, default=None, help="Show only the first N.")
def threats_rank(table: str | None, top: int | None) -> None:
    """Sort threats by DREAD average, highest first."""
    rows = rank_threats(_rows(table))
    click.echo(format_threat_table(rows[:top] if top else rows), nl=False)


@threats.command("compile")
@_table
@click.option("--map", "asset_map", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Asset-to-slave map (YAML).  Defaults to the bundled map.")
@click.option("--min-avg", type=float, default=0.0, help="Drop threats below this average.")
@click.option("--sources", is_flag=True, help="Annotate each policy with its source rows.")
def threats_compile(table: str | None, asset_map: str | None, min_avg: float,
                    sources: bool) -> None:
    """Emit SPE policy records for a scenario's ``policies`` list."""
    path = Path(asset_map) if asset_map else bundled("asset_map.yaml")
    try:
        amap = parse_asset_map(yaml.safe_load(path.read_text(encoding="utf-8")))
        compiled = compile_policies(_rows(table), amap, min_avg)
    except ValidationError as exc:
        raise click.ClickException(str(exc)) from None
    click.echo(yaml.safe_dump({"policies": compiled.to_records(sources)}, sort_keys=False), nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
