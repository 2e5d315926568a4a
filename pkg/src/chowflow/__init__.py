"""Generative flows from scalar controls over fixed bracket-generating fields.

The velocity of the flow is a learned scalar-weighted combination of a small
set of fixed vector fields whose iterated Lie brackets span the ambient
space. Training maximizes exact continuous-normalizing-flow likelihood
through a fixed-step RK4 solver.
"""

from ._mem import tune_malloc

tune_malloc()

__version__ = "0.1.0"
