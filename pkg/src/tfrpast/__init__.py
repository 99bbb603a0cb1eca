"""Bayesian estimation and projection of total fertility from multiple imperfect data sources."""

from .data_model import (
    ClampWarning,
    CountryParams,
    DataError,
    GlobalParams,
    LatentTrajectory,
    Method,
    Observation,
    ParseError,
    Phase,
    ReferenceSeries,
    Source,
    TimeGrid,
)

__version__ = "0.1.0"

__all__ = [
    "ClampWarning",
    "CountryParams",
    "DataError",
    "GlobalParams",
    "LatentTrajectory",
    "Method",
    "Observation",
    "ParseError",
    "Phase",
    "ReferenceSeries",
    "Source",
    "TimeGrid",
]
