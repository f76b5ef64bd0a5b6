"""Directional selective fixed-filter ANC toolkit: room simulation, DoA
network, control filter library and cancellation experiments."""

__version__ = "0.1.0"
