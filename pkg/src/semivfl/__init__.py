"""Vertical semi-federated learning lab.

Two-stage pipeline: a split-network teacher trained over a simulated
two-party protocol on overlapped rows, then a single-party student distilled
over the full sample space with feature-imitation and ranking-consistency
losses, compared against Local and soft-label-distillation baselines.
"""

__version__ = "0.1.0"
