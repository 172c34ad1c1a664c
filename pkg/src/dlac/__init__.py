"""Distributed Lyapunov actor-critic control of a reactor-separator process."""

__version__ = "0.1.0"
