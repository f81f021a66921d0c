"""Multi-agent packet routing with learned neighbour communication."""

__version__ = "0.1.0"
