"""Multi-target ISAC detection with 3D-OMP and its transformer unrolling."""

__version__ = "0.1.0"
