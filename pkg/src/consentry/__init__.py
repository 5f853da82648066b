"""Privacy-preserving average consensus, outlier-resistant averaging and
shallow ranked-vote leader election over simulated message-passing networks."""

from .he_slots import (AccessDeniedError, BackendConfig, Ciphertext,
                       KeyMaterial, SlotBackend, SlotEngine, SlotVector,
                       slot_capacity_for)
from .topology import Topology, load_topology
from .netsim import ScenarioConfig, SimReport, run

__all__ = [
    "AccessDeniedError", "BackendConfig", "Ciphertext", "KeyMaterial",
    "ScenarioConfig", "SimReport", "SlotBackend", "SlotEngine", "SlotVector",
    "Topology", "load_topology", "run", "slot_capacity_for",
]

__version__ = "0.1.0"
