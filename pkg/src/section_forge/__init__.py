"""Global cross sections for model Anosov flows, built and checked numerically."""

__version__ = "0.1.0"
