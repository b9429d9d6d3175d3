"""Quasi-static simulation, calibration and effort estimation for pneumatic soft arms."""

__version__ = "0.1.0"
