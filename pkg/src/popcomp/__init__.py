"""Simulation and analysis toolkit for level-based comparison population protocols."""

__version__ = "0.1.0"

from .engine import Population, SwitchEvent, Trace, make_initial, run, simulate
from .protocol import AgentState, GenericLeak, LeakPolicy, Output, ProtocolParams, Variant, transition
from .rng import RandomStream

__all__ = [
    "AgentState",
    "GenericLeak",
    "LeakPolicy",
    "Output",
    "Population",
    "ProtocolParams",
    "RandomStream",
    "SwitchEvent",
    "Trace",
    "Variant",
    "make_initial",
    "run",
    "simulate",
    "transition",
]
