"""Branching Markov processes: tree simulation, spine process, estimators and PDE."""

__version__ = "0.1.0"
