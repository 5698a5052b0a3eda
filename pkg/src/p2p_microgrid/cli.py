"""CLI entry point for p2p-microgrid-sim."""

import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Annotated, Any, NoReturn

import typer

from p2p_microgrid.errors import ValidationFailedError
from p2p_microgrid.scenario_io import (
    Scenario,
    SummaryReport,
    TraceDigest,
    digest_trace,
    parse_scenario,
    parse_summary,
    read_trace,
    scenario_from_dict,
    scenario_to_dict,
    set_parameter,
    summarize,
    summary_to_json,
    sweep_label,
    sweep_row,
    write_sweep,
    write_trace,
)
from p2p_microgrid.sim import run_scenario

logger = logging.getLogger(__name__)

app = typer.Typer(help="P2P microgrid simulator - run, validate, sweep and report on scenarios")

TRACE_FILE = "trace.csv"
SUMMARY_FILE = "summary.json"
SWEEP_FILE = "sweep.csv"
EXIT_RUNTIME_ERROR = 1
EXIT_VALIDATION_ERROR = 2

ScenarioArg = Annotated[
    Path,
    typer.Argument(exists=True, dir_okay=False, readable=True, help="Scenario JSON file"),
]
OutDirArg = Annotated[Path, typer.Argument(help="Output directory, created if missing")]
SeedOpt = Annotated[int | None, typer.Option("--seed", min=0, help="Override the scenario seed")]
RoundsOpt = Annotated[
    int | None, typer.Option("--rounds", min=0, help="Override the number of rounds")
]
QuietOpt = Annotated[bool, typer.Option("--quiet", "-q", help="Print nothing on success")]
VerboseOpt = Annotated[bool, typer.Option("--verbose", "-v", help="Log faults and activations")]


def _configure_logging(verbose: bool, quiet: bool) -> None:
    if quiet:
        level = logging.ERROR
    elif verbose:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _fail(error: Exception) -> NoReturn:
    typer.echo(f"Error: {error}", err=True)
    if isinstance(error, ValidationFailedError):
        sys.exit(EXIT_VALIDATION_ERROR)
    sys.exit(EXIT_RUNTIME_ERROR)


def _atomic_write(path: Path, data: bytes) -> None:
    """Write to a temp file in the same directory, then rename over the target."""
    fd, temp_path = tempfile.mkstemp(
        dir=path.parent, prefix=f".tmp_{path.stem}_", suffix=path.suffix
    )
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        Path(temp_path).replace(path)
    except BaseException:
        Path(temp_path).unlink(missing_ok=True)
        raise


def _load_scenario(path: Path, seed: int | None, rounds: int | None) -> Scenario:
    scenario = parse_scenario(path.read_bytes())
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    if rounds is not None:
        scenario = replace(scenario, rounds=rounds)
    return scenario


def _run_into(scenario: Scenario, out_dir: Path) -> SummaryReport:
    trace = run_scenario(scenario)
    csv_bytes, summary_bytes = write_trace(trace)
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / TRACE_FILE, csv_bytes)
    _atomic_write(out_dir / SUMMARY_FILE, summary_bytes)
    return summarize(trace)


def _parse_values(text: str) -> list[Any]:
    """Comma-separated JSON literals; bare words are taken as strings."""
    values: list[Any] = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            raise ValidationFailedError("empty entry in value list", ("--values",))
        try:
            values.append(json.loads(item))
        except json.JSONDecodeError:
            values.append(item)
    return values


def _fmt(value: float | None, unit: str, digits: int = 9) -> str:
    return "n/a" if value is None else f"{value:.{digits}f} {unit}"


def _digest_lines(digest: TraceDigest) -> list[str]:
    return [
        f"Rounds: {digest.rounds} ({digest.rows} rows, {digest.nodes} nodes)",
        f"Final frequency: {_fmt(digest.final_freq_hz, 'Hz')}",
        f"Frequency range: {_fmt(digest.min_freq_hz, 'Hz')} .. {_fmt(digest.max_freq_hz, 'Hz')}",
        f"Voltage range: {_fmt(digest.min_voltage_pu, 'pu')} .. "
        f"{_fmt(digest.max_voltage_pu, 'pu')}",
        f"Max residual: {digest.max_residual:.3e}",
        f"Messages: {digest.msgs_delivered} delivered, {digest.msgs_lost} lost",
    ]


def _summary_lines(summary: SummaryReport) -> list[str]:
    lines = [
        f"Generation cost (final round): {summary.total_generation_cost:.6f}",
        f"Violations: voltage {summary.voltage_violation_rounds} rounds, "
        f"frequency {summary.frequency_violation_rounds} rounds",
    ]
    for fault in summary.fault_recovery:
        if fault.rounds_to_restore is None:
            outcome = "frequency not restored"
        else:
            outcome = f"restored after {fault.rounds_to_restore} rounds"
        lines.append(f"Fault at round {fault.round}: {fault.fault} - {outcome}")
    activity = summary.protocol_activity
    stalled = sum(1 for a in activity if not a.converged)
    total = sum(a.protocol_rounds for a in activity)
    lines.append(f"Activations: {len(activity)} ({total} protocol rounds, {stalled} not converged)")
    return lines


@app.command()
def run(
    scenario_path: ScenarioArg,
    out_dir: OutDirArg,
    seed: SeedOpt = None,
    rounds: RoundsOpt = None,
    quiet: QuietOpt = False,
    verbose: VerboseOpt = False,
) -> None:
    """Run a scenario and write trace.csv and summary.json."""
    _configure_logging(verbose, quiet)
    try:
        scenario = _load_scenario(scenario_path, seed, rounds)
        summary = _run_into(scenario, out_dir)
    except Exception as e:
        _fail(e)
    if not quiet:
        typer.echo(summary_to_json(summary).decode("utf-8"), nl=False)


@app.command()
def validate(
    scenario_path: ScenarioArg,
    quiet: QuietOpt = False,
    verbose: VerboseOpt = False,
) -> None:
    """Check a scenario file without running it."""
    _configure_logging(verbose, quiet)
    try:
        scenario = parse_scenario(scenario_path.read_bytes())
    except Exception as e:
        _fail(e)
    if not quiet:
        typer.echo(f"Scenario OK: {len(scenario.microgrids)} microgrids, {scenario.rounds} rounds")


@app.command()
def sweep(
    scenario_path: ScenarioArg,
    parameter: Annotated[
        str, typer.Argument(help="Dotted parameter path, e.g. channel.loss_probability")
    ],
    out_dir: OutDirArg,
    values: Annotated[
        str, typer.Option("--values", help="Comma-separated JSON values, e.g. 0,0.2,0.4")
    ],
    seed: SeedOpt = None,
    rounds: RoundsOpt = None,
    quiet: QuietOpt = False,
    verbose: VerboseOpt = False,
) -> None:
    """Run a scenario once per parameter value and collate the summaries."""
    _configure_logging(verbose, quiet)
    try:
        base = scenario_to_dict(_load_scenario(scenario_path, seed, rounds))
        variants = [
            (value, scenario_from_dict(set_parameter(base, parameter, value)))
            for value in _parse_values(values)
        ]
        rows: list[list[str]] = []
        for index, (value, scenario) in enumerate(variants):
            label = sweep_label(index, value)
            logger.info("sweep %s = %s in %s", parameter, json.dumps(value), label)
            rows.append(sweep_row(value, label, _run_into(scenario, out_dir / label)))
        out_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write(out_dir / SWEEP_FILE, write_sweep(rows))
    except Exception as e:
        _fail(e)
    if not quiet:
        typer.echo(f"Swept {parameter} over {len(rows)} values: {out_dir / SWEEP_FILE}")


@app.command()
def report(
    trace_path: Annotated[
        Path, typer.Argument(exists=True, dir_okay=False, readable=True, help="trace.csv file")
    ],
) -> None:
    """Print a digest of a trace, and of the summary.json beside it if present."""
    try:
        digest = digest_trace(read_trace(trace_path.read_bytes()))
        summary_path = trace_path.with_name(SUMMARY_FILE)
        summary = parse_summary(summary_path.read_bytes()) if summary_path.exists() else None
    except Exception as e:
        _fail(e)
    for line in _digest_lines(digest):
        typer.echo(line)
    if summary is not None:
        for line in _summary_lines(summary):
            typer.echo(line)


def main() -> None:
    """Main entry point."""
    app()


if __name__ == "__main__":
    main()
