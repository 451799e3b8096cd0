"""Multi-agent topologies, coordination mechanisms and the failure simulator."""

from .mechanisms import (Admitted, Backpressure, Bid, DistortedAt, Fallback, HerdingMetrics,
                         IntentHop, IntentOk, MarketConfig, MarketOutcome, Match, Mismatch, Route,
                         admit, check_capability, entropy_bits, extend_chain, gini, herding_metrics,
                         hop_tag, market_round, route_task, stake_weight, verify_intent_chain)
from .simulator import (DETECTORS, MATCHING, MODES, AgentMessage, Alarm, DetectorConfig,
                        FailureInjection, SimReport, simulate)
from .topology import (KINDS, ROLES, Acyclic, AgentNode, Cycle, Task, Topology, build_topology,
                       check_dag, detect_cycle)

__all__ = [name for name in dir() if not name.startswith("_")]
