"""Command-line front end: validate, plan, run, sweep, replay-check."""
from __future__ import annotations

import argparse
import csv
import io
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from . import __version__
from .config import POLICIES, ConfigError, RunConfig, load_config
from .economics import analyze
from .perf import InfeasibleMemory
from .planner import PipelinePlan, PlanError, plan, ring_order
from .sim import EventTrace, SimDeadlock, replay_check, run
from .sim.engine import SimulationError
from .types import validate_topology

EXIT_OK = 0
EXIT_FAILURE = 1  # replay violations, failed sweep cells, I/O
EXIT_USAGE = 2  # argparse
EXIT_PARSE = 3
EXIT_INVALID = 4
EXIT_INFEASIBLE = 5
EXIT_DEADLOCK = 6


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _load(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as e:
        raise _Exit(EXIT_PARSE, str(e)) from None
    except ConfigError as e:
        raise _Exit(EXIT_PARSE, str(e)) from None
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _apply_policy(cfg: RunConfig, args) -> RunConfig:
    if args.policy is not None:
        return cfg.with_policy(args.policy, args.nb)
    if args.nb is not None:
        return replace(cfg, policy=replace(cfg.policy, nb_override=args.nb))
    return cfg


def _check(cfg: RunConfig) -> list[str]:
    problems = [str(v) for v in validate_topology(cfg.topology)]
    if not problems:
        order = ring_order(cfg.topology, cfg.policy.ring_order)
        for i, src in enumerate(order if len(order) > 1 else []):
            dst = order[(i + 1) % len(order)]
            if cfg.topology.link(src, dst) is None:
                problems.append(f"missing-link: {src}->{dst}: the ring needs this hop")
    return problems


def _plan(cfg: RunConfig, topo=None) -> PipelinePlan:
    try:
        return plan(cfg.model, topo or cfg.topology, cfg.workload, cfg.policy)
    except (PlanError, InfeasibleMemory) as e:
        raise _Exit(EXIT_INFEASIBLE, f"plan infeasible: {e}") from None


def _header(cfg: RunConfig, cell: str) -> str:
    return (f"# ringpipe {__version__} report cell={cell} seed={cfg.workload.rng_seed} "
            f"config={cfg.source}\n")


def _report_text(cfg: RunConfig, cell: str, p: PipelinePlan, report) -> str:
    out = io.StringIO()
    out.write(_header(cfg, cell))
    out.write(f"n_microbatches_planned={p.n_microbatches}\n")
    out.write(f"stage_time_us={p.stage_time_us}\n")
    out.write(f"global_pool_bytes={p.global_pool_bytes()}\n")
    out.write(report.to_kv())
    if cfg.pricing is not None:
        pa = analyze(report, cfg.pricing)
        for k, v in pa.to_flat().items():
            out.write(f"profit.{k}={v:.6f}\n" if isinstance(v, float) else f"profit.{k}={v}\n")
    return out.getvalue()


# ---------------------------------------------------------------- subcommands

def cmd_validate(args) -> int:
    cfg = _load(args)
    problems = _check(cfg)
    for p in problems:
        print(p, file=sys.stderr)
    if problems:
        return EXIT_INVALID
    print(f"{cfg.source}: ok (seed={cfg.workload.rng_seed})")
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = _apply_policy(_load(args), args)
    problems = _check(cfg)
    if problems:
        raise _Exit(EXIT_INVALID, "; ".join(problems))
    p = _plan(cfg)
    print(p.summary())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "plan.json").write_text(p.to_json() + "\n")
    return EXIT_OK


def _run_one(cfg: RunConfig, cell: str, out: Optional[Path], write_trace: bool) -> str:
    p = _plan(cfg)
    try:
        report, trace = run(p, cfg.topology, cfg.workload, cfg.model)
    except SimDeadlock as e:
        raise _Exit(EXIT_DEADLOCK, f"simulation deadlock: {e}") from None
    except SimulationError as e:
        raise _Exit(EXIT_INVALID, str(e)) from None
    text = _report_text(cfg, cell, p, report)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"report.{cell}.kv").write_text(text)
        (out / f"plan.{cell}.json").write_text(p.to_json() + "\n")
        if write_trace:
            trace.write_jsonl(out / f"trace.{cell}.log")
    return text


def cmd_run(args) -> int:
    cfg = _apply_policy(_load(args), args)
    problems = _check(cfg)
    if problems:
        raise _Exit(EXIT_INVALID, "; ".join(problems))
    cell = args.policy or "run"
    text = _run_one(cfg, cell, Path(args.out) if args.out else None, write_trace=True)
    sys.stdout.write(text)
    return EXIT_OK


@dataclass(frozen=True)
class _Cell:
    policy: str
    latency_us: int
    throughput: Optional[float]
    error: str = ""

    @property
    def name(self) -> str:
        return f"{self.policy}.L{self.latency_us}"

    def formatted(self) -> str:
        return "failed" if self.throughput is None else f"{self.throughput:.3f}"


def _sweep_cell(job) -> _Cell:
    cfg, policy, lat, nb, out, write_trace = job
    c = cfg.with_policy(policy, nb)
    c = replace(c, topology=c.topology.with_latency(lat))
    cell = f"{policy}.L{lat}"
    try:
        p = plan(c.model, c.topology, c.workload, c.policy)
        report, trace = run(p, c.topology, c.workload, c.model)
    except (PlanError, InfeasibleMemory, SimulationError, ValueError) as e:
        return _Cell(policy, lat, None, f"{type(e).__name__}: {e}")
    if out is not None:
        (out / f"report.{cell}.kv").write_text(_report_text(c, cell, p, report))
        (out / f"plan.{cell}.json").write_text(p.to_json() + "\n")
        if write_trace:
            trace.write_jsonl(out / f"trace.{cell}.log")
    return _Cell(policy, lat, report.output_throughput)


def sweep_table(cells: list[_Cell], policies, latencies) -> tuple[str, str]:
    """(csv text, human table) holding the same formatted numbers."""
    by = {(c.policy, c.latency_us): c for c in cells}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy"] + [f"L_us={lat}" for lat in latencies])
    rows = []
    for pol in policies:
        vals = [by[(pol, lat)].formatted() for lat in latencies]
        w.writerow([pol] + vals)
        rows.append([pol] + vals)
    head = ["policy \\ latency"] + [f"{lat / 1000:g} ms" for lat in latencies]
    widths = [max(len(r[i]) for r in rows + [head]) for i in range(len(head))]
    lines = ["  ".join(h.rjust(wd) for h, wd in zip(head, widths))]
    lines += ["  ".join(v.rjust(wd) for v, wd in zip(r, widths)) for r in rows]
    return buf.getvalue(), "\n".join(lines)


def cmd_sweep(args) -> int:
    cfg = _load(args)
    problems = _check(cfg)
    if problems:
        raise _Exit(EXIT_INVALID, "; ".join(problems))
    if cfg.sweep is None:
        raise _Exit(EXIT_INVALID, f"{cfg.source}: no sweep section")
    policies = (args.policy,) if args.policy else cfg.sweep.policies
    lats = cfg.sweep.latencies_us
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, pol, lat, args.nb, out, args.trace) for pol in policies for lat in lats]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as ex:
            cells = list(ex.map(_sweep_cell, jobs))  # map keeps submission order
    else:
        cells = [_sweep_cell(j) for j in jobs]
    csv_text, table = sweep_table(cells, policies, lats)
    print(f"# output throughput (tokens/s), seed={cfg.workload.rng_seed}")
    print(table)
    for c in cells:
        if c.error:
            print(f"cell {c.name} failed: {c.error}", file=sys.stderr)
    if out is not None:
        (out / "sweep.csv").write_text(csv_text)
    return EXIT_FAILURE if any(c.error for c in cells) else EXIT_OK


def cmd_replay_check(args) -> int:
    try:
        p = PipelinePlan.from_json(Path(args.plan).read_text())
        trace = EventTrace.read_jsonl(args.trace)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise _Exit(EXIT_PARSE, f"cannot read inputs: {e}") from None
    violations = replay_check(trace, p)
    for v in violations:
        print(v)
    if violations:
        return EXIT_FAILURE
    print(f"{args.trace}: {len(trace)} events, no violations")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ringpipe", description=__doc__)
    ap.add_argument("--version", action="version", version=f"ringpipe {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, policy=True):
        p.add_argument("--config", required=True,
                       help="config path, or a name looked up in $RINGPIPE_CONFIG_DIR "
                            "then the bundled configs")
        p.add_argument("--seed", type=int, help="override workload.rng_seed")
        if policy:
            p.add_argument("--policy", choices=POLICIES)
            p.add_argument("--nb", type=int, help="fix the microbatch count")

    p = sub.add_parser("validate", help="parse a config and check the topology")
    common(p, policy=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("plan", help="print the pipeline plan")
    common(p)
    p.add_argument("--out", help="also write plan.json here")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="simulate one configuration")
    common(p)
    p.add_argument("--out", help="directory for report, plan and trace files")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="output throughput per policy and hop latency")
    common(p)
    p.add_argument("--out", help="directory for sweep.csv and per-cell reports")
    p.add_argument("--parallel", type=int, default=1, metavar="K")
    p.add_argument("--trace", action="store_true", help="also write per-cell traces")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay-check", help="re-validate a trace against its plan")
    p.add_argument("trace")
    p.add_argument("--plan", required=True, help="plan JSON written by run/plan")
    p.set_defaults(func=cmd_replay_check)
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "nb", None) is not None and args.nb < 1:
        print("--nb must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "parallel", 1) < 1:
        print("--parallel must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except _Exit as e:
        print(str(e), file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
