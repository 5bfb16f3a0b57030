"""alphagate: staged deployment gating for systematic trading strategies.

A strategy graduates through three gates: an in-sample stability mapper
that locks a parameter shortlist (G1), a walk-forward evaluation with a
majority-pass gate and catastrophic veto that locks a single parameter
point (G2), and a strict out-of-sample holdout run under that lock (G3).
Every run emits a canonical, byte-reproducible evidence pack.
"""

__version__ = "0.1.0"
