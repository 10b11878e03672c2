"""Simulation of cryptographic and differentially private collaborative learning."""

__version__ = "0.1.0"
