"""Oblivious in-memory time-series store."""

from .errors import TimeclaveError
from .pathoram import PathOram, RecursivePositionMap
from .roram import RoOram, RoOramConfig
from .tsengine import Agg, Engine, EngineConfig, SummaryBlock, plan_query

__all__ = [
    "Agg",
    "Engine",
    "EngineConfig",
    "PathOram",
    "RecursivePositionMap",
    "RoOram",
    "RoOramConfig",
    "SummaryBlock",
    "TimeclaveError",
    "plan_query",
]

__version__ = "0.1.0"
