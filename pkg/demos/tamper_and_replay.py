"""Record a governed run, replay it, then edit one recorded event.

    python3 demos/tamper_and_replay.py
"""

import json

from agentgov._canon import canonical_json
from agentgov.scenario import execute, load_scenario, replay, shipped_scenarios
from agentgov.trace import verify_chain

path = next(p for p in shipped_scenarios() if p.stem == "agent_operations")
cfg = load_scenario(path)
out = execute(cfg)[0]
print(f"{out.run_id}: {out.result.status} after {out.result.steps_used} steps, "
      f"{len(out.events)} events")
print("chain:  ", verify_chain(out.lines))
print("replay: ", replay(cfg, out.events))

# zero the recorded cost of the first tool execution
lines = list(out.lines)
for i, line in enumerate(lines):
    event = json.loads(line)
    if event["kind"] == "ToolExecuted":
        event["payload"]["cost"] = 0
        lines[i] = canonical_json(event)
        break
print(f"edited seq {i}:", verify_chain(lines))
