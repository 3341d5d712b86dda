"""Command-line front end: ``flowsched {analytic,fluid,packet,compare,sweep}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analytic, fluid, packetsim
from .core import (Scenario, ScenarioError, SteadyStateSummary, load_scenario_file,
                   packets_to_mbps)
from .metrics import DEFAULT_WINDOW, long_term_jain, windowed_jain

FLUID_TOL = 0.02
PACKET_TOL = 0.15
MIN_UTILIZATION = 0.97
ENGINES = ("analytic", "fluid", "packet")


class CliError(Exception):
    pass


# --- helpers ---------------------------------------------------------------------

def _parse_sets(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise CliError(f"--set expects key=value, got '{item}'")
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class RunManifest:
    """One invocation: which scenario, which engine, where outputs go."""

    scenario_path: Path
    command: str
    out_dir: Path | None = None
    overrides: dict = field(default_factory=dict)

    @classmethod
    def from_args(cls, args) -> "RunManifest":
        overrides = _parse_sets(args.set)
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        out = None if args.out is None else Path(args.out)
        return cls(Path(args.scenario), args.command, out, overrides)

    def validate(self) -> None:
        if not self.scenario_path.is_file():
            raise CliError(f"scenario file not found: {self.scenario_path}")
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if not os.access(self.out_dir, os.W_OK):
                raise CliError(f"output directory not writable: {self.out_dir}")

    def load(self) -> Scenario:
        self.validate()
        return load_scenario_file(self.scenario_path).with_overrides(self.overrides)


def load(args) -> Scenario:
    return RunManifest.from_args(args).load()


def _warmup(args, scenario: Scenario) -> float:
    return packetsim.default_warmup(scenario) if args.warmup is None else args.warmup


def _write(out_dir: str | None, name: str, text: str) -> None:
    if out_dir is None:
        return
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / name).write_text(text)


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _cell(v, fmt="{:8.2f}") -> str:
    return f"{'-':>8}" if v is None else fmt.format(v)


def format_summary(summary: SteadyStateSummary) -> str:
    """Fixed-width table with one row per metric and flow, rates in Mbps."""
    n = summary.n_flows
    head = f"{'':10}" + "".join(f"{'flow ' + str(k + 1):>10}" for k in range(n))
    rows = [f"{summary.source} / {summary.discipline.value}", head]
    metrics = [
        ("A [Mbps]", summary.to_mbps(summary.sending_rate)),
        ("X [Mbps]", summary.to_mbps(summary.throughput)),
        ("Q [pkt]", summary.mean_queue),
        ("L [Mbps]", summary.to_mbps(summary.loss_rate)),
    ]
    for label, values in metrics:
        rows.append(f"{label:10}" + "".join(f"{_cell(v):>10}" for v in values))
    rows.append(f"{'sum X':10}{packets_to_mbps(sum(summary.throughput), summary.packet_size):10.2f}"
                f"   utilization {summary.utilization:.4f}")
    if summary.cycle_period is not None:
        rows.append(f"cycle period {summary.cycle_period:.4f} s")
    for note in summary.notes:
        rows.append(f"note: {note}")
    return "\n".join(rows) + "\n"


# --- engines ------------------------------------------------------------------------

def run_analytic(scenario: Scenario) -> SteadyStateSummary:
    return analytic.analyze(scenario)


def run_fluid(scenario: Scenario, warmup: float):
    traj = fluid.simulate(scenario)
    return traj, fluid.summarize(traj, warmup)


def run_packet(scenario: Scenario, warmup: float, window: float):
    return packetsim.run_packet_sim(scenario, warmup=warmup, window=window)


# --- comparison ------------------------------------------------------------------------

def relative_deviation(a: float, b: float, floor: float) -> float:
    """|a - b| relative to ``b``, with ``floor`` guarding near-zero references."""
    return abs(a - b) / max(abs(b), floor)


@dataclass
class Comparison:
    summaries: dict[str, SteadyStateSummary | None]
    deviations: dict[str, list[float]] = field(default_factory=dict)
    limits: dict[str, float] = field(default_factory=dict)
    min_utilization: float = MIN_UTILIZATION
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "engines": {k: (v.to_dict() if v is not None else None) for k, v in self.summaries.items()},
            "throughput_deviation": self.deviations,
            "tolerance": self.limits,
            "min_utilization": self.min_utilization,
            "passed": self.passed,
            "failures": self.failures,
        }

    def table(self) -> str:
        present = [e for e in ENGINES if self.summaries.get(e) is not None]
        ref = self.summaries[present[0]]
        lines = [f"compare / {ref.discipline.value}",
                 f"{'metric':12}" + "".join(f"{e:>10}" for e in present)]
        for label, attr, mbps in (("A", "sending_rate", True), ("X", "throughput", True),
                                  ("Q", "mean_queue", False), ("L", "loss_rate", True)):
            for k in range(ref.n_flows):
                cells = []
                for e in present:
                    s = self.summaries[e]
                    v = getattr(s, attr)[k]
                    if v is not None and mbps:
                        v = packets_to_mbps(v, s.packet_size)
                    cells.append(f"{_cell(v):>10}")
                lines.append(f"{label + str(k + 1) + (' [Mbps]' if mbps else ' [pkt]'):12}" + "".join(cells))
        lines.append(f"{'utilization':12}" + "".join(f"{self.summaries[e].utilization:10.4f}" for e in present))
        for pair, devs in self.deviations.items():
            lines.append(f"max dev X {pair}: {max(devs):.4f} (limit {self.limits[pair]:.4f})")
        lines.append("PASS" if self.passed else "FAIL: " + "; ".join(self.failures))
        return "\n".join(lines) + "\n"


def compare_summaries(summaries: dict[str, SteadyStateSummary | None],
                      fluid_tol: float = FLUID_TOL, tol: float = PACKET_TOL,
                      min_utilization: float = MIN_UTILIZATION) -> Comparison:
    """Gate throughputs: fluid against analytic, packet against fluid."""
    cmp = Comparison(summaries, min_utilization=min_utilization)
    pairs = (("fluid", "analytic", fluid_tol), ("packet", "fluid", tol))
    for test, ref, limit in pairs:
        a, b = summaries.get(test), summaries.get(ref)
        if a is None or b is None or any(v is None for v in b.throughput):
            continue
        floor = 0.01 * b.capacity
        devs = [relative_deviation(x, y, floor) for x, y in zip(a.throughput, b.throughput)]
        key = f"{test}_vs_{ref}"
        cmp.deviations[key] = devs
        cmp.limits[key] = limit
        if max(devs) > limit:
            cmp.failures.append(f"{key} deviation {max(devs):.4f} > {limit:g}")
    for name, s in summaries.items():
        if s is not None and s.utilization < min_utilization:
            cmp.failures.append(f"{name} utilization {s.utilization:.4f} < {min_utilization:g}")
    return cmp


def compare(scenario: Scenario, warmup: float, window: float = DEFAULT_WINDOW,
            fluid_tol: float = FLUID_TOL, tol: float = PACKET_TOL,
            min_utilization: float = MIN_UTILIZATION) -> Comparison:
    try:
        an = run_analytic(scenario)
    except ValueError:
        an = None
    _, fl = run_fluid(scenario, warmup)
    pk = run_packet(scenario, warmup, window).to_summary()
    return compare_summaries({"analytic": an, "fluid": fl, "packet": pk},
                             fluid_tol, tol, min_utilization)


# --- sweep --------------------------------------------------------------------------------

SWEEP_HEADER = ["param", "value", "engine", "flow", "sending_rate_mbps",
                "throughput_mbps", "mean_queue_pkts", "loss_rate_mbps", "utilization"]


def _sweep_point(job):
    scenario, engine, warmup, window = job
    if engine == "analytic":
        return run_analytic(scenario)
    if engine == "fluid":
        return run_fluid(scenario, warmup)[1]
    return run_packet(scenario, warmup, window).to_summary()


def sweep_values(start: float, stop: float, steps: int) -> list[float]:
    if steps < 0:
        raise CliError("--steps must be >= 0")
    if steps == 0:
        return []
    if steps == 1:
        return [start]
    return [float(v) for v in np.linspace(start, stop, steps)]


def sweep(base: Scenario, param: str, values, engine: str, warmup: float | None,
          window: float = DEFAULT_WINDOW, jobs: int = 1) -> str:
    scenarios = []
    for v in values:
        try:
            scenarios.append(base.with_overrides({param: repr(v)}))
        except ScenarioError as exc:
            raise CliError(f"cannot sweep '{param}': {exc}") from exc
    work = [(s, engine, packetsim.default_warmup(s) if warmup is None else warmup, window)
            for s in scenarios]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, work))
    else:
        results = [_sweep_point(w) for w in work]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for v, s in zip(values, results):
        A, X, L = s.to_mbps(s.sending_rate), s.to_mbps(s.throughput), s.to_mbps(s.loss_rate)
        for k in range(s.n_flows):
            w.writerow([param, repr(v), engine, k + 1, _csv(A[k]), _csv(X[k]),
                        _csv(s.mean_queue[k]), _csv(L[k]), repr(float(s.utilization))])
    return buf.getvalue()


def _csv(v) -> str:
    return "" if v is None else repr(float(v))


# --- commands -------------------------------------------------------------------------------

def cmd_analytic(args) -> int:
    s = load(args)
    summary = run_analytic(s)
    _write(args.out, "analytic.json", _dump(summary.to_dict()))
    sys.stdout.write(format_summary(summary))
    return 0


def cmd_fluid(args) -> int:
    s = load(args)
    traj, summary = run_fluid(s, _warmup(args, s))
    _write(args.out, "fluid.json", _dump(summary.to_dict()))
    if args.out is not None:
        traj.to_csv(Path(args.out) / "trajectory.csv")
    sys.stdout.write(format_summary(summary))
    return 0


def cmd_packet(args) -> int:
    s = load(args)
    report = run_packet(s, _warmup(args, s), args.window)
    doc = report.to_dict()
    doc["jain"] = _jain(report)
    _write(args.out, "packet.json", _dump(doc))
    _write(args.out, "trace.csv", report.trace_csv())
    text = format_summary(report.to_summary())
    if doc["jain"]:
        text += f"jain short-term {doc['jain']['short_term']:.4f}  long-term {doc['jain']['long_term']:.4f}\n"
    sys.stdout.write(text)
    return 0


def _jain(report) -> dict:
    try:
        return {"window_s": report.trace.window,
                "short_term": windowed_jain(report.trace),
                "long_term": long_term_jain(report.trace.totals())}
    except ValueError:
        return {}


def cmd_compare(args) -> int:
    s = load(args)
    cmp = compare(s, _warmup(args, s), args.window, args.fluid_tol, args.tol, args.min_util)
    _write(args.out, "compare.json", _dump(cmp.to_dict()))
    sys.stdout.write(cmp.table())
    return 0 if cmp.passed else 1


def cmd_sweep(args) -> int:
    s = load(args)
    values = sweep_values(args.start, args.stop, args.steps)
    text = sweep(s, args.param, values, args.engine, args.warmup, args.window, args.jobs)
    if args.out is not None:
        _write(args.out, "sweep.csv", text)
    else:
        sys.stdout.write(text)
    return 0


# --- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowsched",
                                description="TCP/UDP under per-flow scheduling: closed forms, fluid and packet engines.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--scenario", required=True, help="scenario file")
        sp.add_argument("--out", help="directory for JSON/CSV outputs")
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a scenario key (flow keys as flowN.key)")
        sp.add_argument("--warmup", type=float, help="seconds excluded from averages")
        sp.add_argument("--window", type=float, default=DEFAULT_WINDOW,
                        help="packet trace window in seconds (default 0.5)")

    for name, fn, text in (("analytic", cmd_analytic, "closed-form steady state"),
                           ("fluid", cmd_fluid, "integrate the fluid model"),
                           ("packet", cmd_packet, "packet-level simulation")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("compare", help="run all engines and check agreement")
    common(sp)
    sp.add_argument("--tol", type=float, default=PACKET_TOL,
                    help="packet-vs-fluid relative tolerance on throughput (default 0.15)")
    sp.add_argument("--fluid-tol", type=float, default=FLUID_TOL,
                    help="fluid-vs-analytic relative tolerance on throughput (default 0.02)")
    sp.add_argument("--min-util", type=float, default=MIN_UTILIZATION,
                    help="minimum utilization in every engine (default 0.97)")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("sweep", help="one summary row per parameter value")
    common(sp)
    sp.add_argument("--param", required=True, help="scenario key, e.g. flow2.rtt_ms")
    sp.add_argument("--from", dest="start", type=float, required=True)
    sp.add_argument("--to", dest="stop", type=float, required=True)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--engine", choices=ENGINES, default="analytic")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ScenarioError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
