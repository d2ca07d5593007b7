"""Uplink/downlink transmission scheduling for a half-duplex wireless control loop."""

__version__ = "0.1.0"

from .channels import MarkovChannel, StaticChannel  # noqa: E402
from .dynamics import Action, SchedState  # noqa: E402
from .plant import PlantModel, classify  # noqa: E402
from .policies import (  # noqa: E402
    FullDuplexScheduler,
    OptimalScheduler,
    PersistentScheduler,
    RoundRobinScheduler,
)

__all__ = [
    "Action",
    "FullDuplexScheduler",
    "MarkovChannel",
    "OptimalScheduler",
    "PersistentScheduler",
    "PlantModel",
    "RoundRobinScheduler",
    "SchedState",
    "StaticChannel",
    "classify",
]
