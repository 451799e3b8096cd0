"""Run every shipped failure-mode scenario with its injection on, off, and
mitigated, and print what the detectors saw.

    python3 demos/failure_tour.py
"""

from agentgov.multiagent.simulator import MODES
from agentgov.scenario import Overrides, execute, load_scenario, shipped_scenarios


def sim_report(cfg, **kw):
    return execute(cfg, Overrides(**kw), only=["sim"])[0].report


def main():
    for path in shipped_scenarios():
        if not path.stem.startswith("fm_"):
            continue
        cfg = load_scenario(path)
        mode = next(d["mode"] for d in cfg.simulation["injections"])
        assert mode in MODES
        off = sim_report(cfg, inject={mode: False}, mitigate={mode: False})
        on = sim_report(cfg, mitigate={mode: False})
        fixed = sim_report(cfg, mitigate={mode: True})
        first = min(on.alarms, key=lambda a: a.step, default=None)
        print(f"{mode:24s} latency={on.latency.get(mode)!s:>4}  "
              f"first={first.detector + '@' + str(first.step) if first else '-':24s} "
              f"done off/on/mitigated={off.completed}/{on.completed}/{fixed.completed}  "
              f"clean-twin alarms={len(off.alarms)}")


if __name__ == "__main__":
    main()
