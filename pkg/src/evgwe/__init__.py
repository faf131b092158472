"""Variational generalized Wardrop equilibria of coupled EV routing, station choice and feeder OPF."""

__version__ = "0.1.0"
