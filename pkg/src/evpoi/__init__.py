"""POI influence on EV charging-station utilization."""

__version__ = "0.1.0"
