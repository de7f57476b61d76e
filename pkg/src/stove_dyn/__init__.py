"""Object-centric physics simulators, graph-network dynamics, Gaussian fusion filtering and MCTS."""

__version__ = "0.1.0"
