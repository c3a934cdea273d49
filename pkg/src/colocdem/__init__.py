"""Co-located CFD-DEM coupling with partition-aware exchange accounting."""

__version__ = "0.1.0"
