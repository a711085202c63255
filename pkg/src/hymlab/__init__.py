"""Numerical laboratory for canonical-metric flows on holomorphic bundles.

Model bases are flat tori and the round sphere; bundles are given by
constant automorphy factors (torus) or rational transition matrices
(sphere).  The package computes Chern-Weil degrees, induced metrics on
sub- and quotient bundles, the Donaldson-type energy comparing two
metrics, and integrates its downward gradient flow.
"""

__version__ = "0.1.0"
