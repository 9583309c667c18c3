"""terrafem: a compatible (mimetic) finite element kernel and geophysical test bench.

The package provides tensor-product and simplicial compatible finite
element spaces, mixed/hybridised sparse solvers, discrete de Rham
structure diagnostics, rotating shallow water schemes, column-wise
hydrostatic balance solvers, and a convergence-rate harness, all at
desk scale.
"""

__version__ = "0.1.0"
