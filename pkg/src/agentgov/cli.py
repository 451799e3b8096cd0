"""Command line entry points: run, replay, audit, sweep.

Exit codes
  run     0 normal termination (FailedSafe included), 2 scenario error, 3 io error
  replay  0 identical, 1 diverged, 2 scenario mismatch or unreadable trace
  audit   0 all automatable MUST rows pass, 1 otherwise, 2 invalid corpus
  sweep   as run
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from .audit import audit
from .errors import AgentGovError, InvalidCorpus, ScenarioError, ScenarioMismatch
from .multiagent.simulator import MODES
from .scenario import (Overrides, RunOutput, ScenarioConfig, execute, load_scenario, replay,
                       shipped_scenarios, trace_filename)
from .trace import read_trace

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_IO = 0, 1, 2, 3


def _toggle(text: str) -> tuple[str, bool]:
    mode, sep, value = text.partition("=")
    if not sep or value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected <mode>=on|off, got {text!r}")
    if mode not in MODES:
        raise argparse.ArgumentTypeError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    return mode, value == "on"


def _seeds(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        lo, sep, hi = part.partition("-")
        try:
            out.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    return out


def _resolve(path: str) -> Path:
    """A path, or the name of a shipped scenario (``healthy_swarm``)."""
    p = Path(path)
    if p.exists():
        return p
    for shipped in shipped_scenarios():
        if shipped.stem == path or shipped.name == path:
            return shipped
    return p


def _overrides(args) -> Overrides:
    return Overrides(seed=args.seed, k_max=args.k_max, t_max=args.t_max,
                     inject=dict(args.inject or ()), mitigate=dict(args.mitigate or ()))


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _summary_line(out: RunOutput) -> str:
    if out.result is not None:
        r = out.result
        return (f"{out.run_id}: {r.status} steps={r.steps_used} success={r.success} "
                f"answer={r.answer_or_summary!r}")
    r = out.report
    return (f"{out.run_id}: done={r.completed} failed={r.failed} revoked={r.revoked} "
            f"pending={r.pending} hitl={r.hitl} alarms={len(r.alarms)} steps={r.steps_run}")


def _write_outputs(cfg: ScenarioConfig, outputs: list[RunOutput], out_dir: Path,
                   suffix: str = "") -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"scenario": cfg.id, "scenario_digest": cfg.digest, "runs": []}
    text = [f"scenario {cfg.id} (digest {cfg.digest[:16]})"]
    for out in outputs:
        name = trace_filename(out.run_id)
        if suffix:
            name = name.replace(".jsonl", f"{suffix}.jsonl")
        trace_path = out_dir / name
        trace_path.write_text("".join(line + "\n" for line in out.lines), encoding="utf-8")
        entry = {"label": out.label, "run_id": out.run_id, "trace": trace_path.name}
        if out.result is not None:
            entry["result"] = out.result.to_dict()
        else:
            entry["simulation"] = out.report.to_dict()
        record["runs"].append(entry)
        text.append(_summary_line(out))
        if out.report is not None:
            text.append(out.report.to_text().rstrip("\n"))
    base = out_dir / f"{cfg.id}{suffix}.report"
    Path(f"{base}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    Path(f"{base}.txt").write_text("\n".join(text) + "\n")
    return base


# ------------------------------------------------------------ commands

def cmd_run(args) -> int:
    try:
        cfg = load_scenario(_resolve(args.scenario))
        outputs = execute(cfg, _overrides(args))
        _write_outputs(cfg, outputs, Path(args.out))
    except ScenarioError as e:
        _err(f"parse-error in {e.where}: {e}")
        return EXIT_INVALID
    except OSError as e:
        _err(f"io-error: {e}")
        return EXIT_IO
    except AgentGovError as e:
        _err(f"{e.kind}: {e}")
        return EXIT_INVALID
    for out in outputs:
        print(_summary_line(out))
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        cfg = load_scenario(_resolve(args.scenario))
        recorded = read_trace(args.trace)
        verdict = replay(cfg, recorded)
    except (ScenarioError, ScenarioMismatch, InvalidCorpus) as e:
        _err(f"{e.kind}: {e}")
        return EXIT_INVALID
    except OSError as e:
        _err(f"io-error: {e}")
        return EXIT_INVALID
    if verdict.ok:
        print(f"Identical ({verdict.length} events)")
        return EXIT_OK
    print(f"DivergedAt(seq={verdict.seq}, field={verdict.field})")
    return EXIT_FAIL


def cmd_audit(args) -> int:
    try:
        cfg = load_scenario(_resolve(args.scenario))
        traces = [read_trace(p) for p in args.traces]
        report = audit(traces, cfg.registry().digests(), cfg.gate().rule_digests())
    except (ScenarioError, InvalidCorpus) as e:
        _err(f"{e.kind}: {e}")
        return EXIT_INVALID
    except OSError as e:
        _err(f"io-error: {e}")
        return EXIT_INVALID
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "audit.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        (out / "audit.txt").write_text(report.to_text())
    except OSError as e:
        _err(f"io-error: {e}")
        return EXIT_IO
    print(report.to_text(), end="")
    return EXIT_OK if report.must_pass else EXIT_FAIL


def _sweep_one(job) -> tuple[int, int, list[str]]:
    path, overrides, out_dir = job
    try:
        cfg = load_scenario(path)
        outputs = execute(cfg, overrides)
        _write_outputs(cfg, outputs, Path(out_dir), suffix=f".seed{overrides.seed}")
    except ScenarioError as e:
        return overrides.seed, EXIT_INVALID, [f"parse-error in {e.where}: {e}"]
    except OSError as e:
        return overrides.seed, EXIT_IO, [f"io-error: {e}"]
    return overrides.seed, EXIT_OK, [_summary_line(o) for o in outputs]


def cmd_sweep(args) -> int:
    path = _resolve(args.scenario)
    base = _overrides(args)
    jobs = [(str(path), Overrides(seed=s, k_max=base.k_max, t_max=base.t_max, inject=base.inject,
                                  mitigate=base.mitigate), args.out) for s in args.seeds]
    if args.jobs == 1:
        results = [_sweep_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    code = EXIT_OK
    for seed, rc, lines in results:
        for line in lines:
            print(f"seed {seed}: {line}", file=sys.stdout if rc == EXIT_OK else sys.stderr)
        code = max(code, rc)
    return code


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentgov", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--k-max", type=int, dest="k_max")
        p.add_argument("--t-max", type=int, dest="t_max")
        p.add_argument("--inject", type=_toggle, action="append", metavar="MODE=on|off")
        p.add_argument("--mitigate", type=_toggle, action="append", metavar="MODE=on|off")
        p.add_argument("--out", default="out", help="output directory (default: out)")

    p = sub.add_parser("run", help="execute a scenario and write traces and reports")
    p.add_argument("scenario", help="scenario file or shipped scenario name")
    overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="re-run a trace's scenario and compare")
    p.add_argument("scenario")
    p.add_argument("trace")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("audit", help="check traces against the hardening checklist")
    p.add_argument("traces", nargs="+")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("sweep", help="run one scenario over many seeds in parallel")
    p.add_argument("scenario")
    p.add_argument("--seeds", type=_seeds, required=True, help="e.g. 1-10 or 1,4,9")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: cpu count)")
    overrides(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and args.command == "sweep":
        args.seed = None
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
