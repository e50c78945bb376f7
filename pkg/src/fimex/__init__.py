"""Fully-implicit-explicit (FIMEX) polynomial block integrators based on Radau IIA."""

__version__ = "0.1.0"
