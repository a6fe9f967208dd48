"""Quadratically regularized optimal transport (QOT) laboratory.

Solves the QOT dual system for discrete marginals, extracts the sparse
optimal coupling, and verifies the quantitative sparsity bounds
(density, concentration, bias, self-transport rates) at desk scale.
"""

__version__ = "0.1.0"
