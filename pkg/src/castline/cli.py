"""Operator CLI: serve the platform, drive the casting simulator, check
requirement conformance, export series data."""

from __future__ import annotations

import json
import os
import sys

import click
import uvicorn

from castline import errors
from castline.api import create_app
from castline.config import ServiceConfig, load_config
from castline.platform import Platform
from castline.sim import (
    CastingScenario,
    DEFAULT_URL,
    conformance,
    export_csv,
    simulate,
)
from castline.timeutil import parse_timestamp_ns


@click.group()
def main():
    """IIoT timeseries platform with a continuous-casting demo line."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="service configuration file (YAML)")
def serve(config_path):
    """Run the HTTP service."""
    try:
        cfg = load_config(config_path) if config_path else ServiceConfig()
    except errors.ConfigError as exc:
        raise click.ClickException(f"invalid config: {exc}")
    listen_override = os.environ.get("CASTLINE_LISTEN")
    if listen_override:
        host, _, port = listen_override.rpartition(":")
        if not host or not port.isdigit():
            raise click.ClickException(f"CASTLINE_LISTEN must be host:port, got {listen_override!r}")
        cfg.listen_host, cfg.listen_port = host, int(port)
    platform = Platform(data_dir=cfg.data_dir, fsync=cfg.fsync)
    try:
        platform.apply_config(cfg)
    except errors.CastlineError as exc:
        raise click.ClickException(f"config application failed: {exc}")
    app = create_app(platform, cfg)
    if cfg.maintenance_interval_s:
        platform.start_maintenance_driver(cfg.maintenance_interval_s)
    click.echo(f"castline serving on http://{cfg.listen_host}:{cfg.listen_port} "
               f"(data_dir={cfg.data_dir or 'in-memory'})")
    uvicorn.run(app, host=cfg.listen_host, port=cfg.listen_port, log_level="info")


@main.command("simulate")
@click.option("--scenario", "scenario_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="scenario file (YAML); defaults are used when omitted")
@click.option("--url", default=DEFAULT_URL, show_default=True)
def simulate_cmd(scenario_path, url):
    """Generate a casting run against a live service."""
    try:
        scenario = CastingScenario.from_file(scenario_path) if scenario_path else CastingScenario()
        batches, cuts = simulate(scenario, url)
    except errors.CastlineError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"posted {batches} data batches and {cuts} cut events to {url}")


@main.command("conformance")
@click.option("--url", default=DEFAULT_URL, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="emit the report as JSON")
def conformance_cmd(url, as_json):
    """Probe a deployment and print the requirements fulfilment matrix."""
    report = conformance(url)
    if as_json:
        click.echo(json.dumps(report.as_dict(), indent=2))
    else:
        click.echo(report.render())
    if report.fulfilled() < len(report.results):
        sys.exit(1)


@main.command("export")
@click.option("--series", required=True, help="series id to export")
@click.option("--from", "start", default=None, help="range start (ns or ISO-8601)")
@click.option("--to", "end", default=None, help="range end (ns or ISO-8601)")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="output CSV path")
@click.option("--url", default=DEFAULT_URL, show_default=True)
def export_cmd(series, start, end, out, url):
    """Export a series range as CSV (same format the csv-file connector reads)."""
    try:
        start_ns = parse_timestamp_ns(start) if start is not None else None
        end_ns = parse_timestamp_ns(end) if end is not None else None
    except ValueError as exc:
        raise click.ClickException(str(exc))
    try:
        count = export_csv(series, start_ns, end_ns, out, url)
    except errors.CastlineError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"wrote {count} rows to {out}")


if __name__ == "__main__":
    main()
