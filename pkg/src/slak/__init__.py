"""Region indicator prediction from meta-path sub-graphs of a location-based knowledge graph."""

__version__ = "0.1.0"
