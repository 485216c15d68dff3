"""Node affinity prediction on continuous-time dynamic graphs.

A gated linear state-space forecaster with a virtual global state, the
moving-average heuristics it generalizes, rank-based training losses and
an evaluation harness.
"""

__version__ = "0.1.0"
