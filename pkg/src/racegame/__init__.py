"""Head-to-head autonomous racing planners and tournament simulator."""

__version__ = "0.1.0"
