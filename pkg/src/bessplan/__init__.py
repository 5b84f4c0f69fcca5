"""Voltage-violation screening and battery-storage planning for radial feeders."""

from .netmodel import (
    Branch,
    Bus,
    LoadProfileSet,
    Network,
    NetworkError,
    electrical_distance,
    leaf_buses,
    load_bundled,
    load_network,
    scale_profiles,
)

__all__ = [
    "Branch",
    "Bus",
    "LoadProfileSet",
    "Network",
    "NetworkError",
    "electrical_distance",
    "leaf_buses",
    "load_bundled",
    "load_network",
    "scale_profiles",
]

__version__ = "0.1.0"
