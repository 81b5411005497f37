"""Stochastic unravellings of non-Markovian open-system dynamics.

Subpackages: core (operators, grids, CPTP diagnostics), noise (colored
Gaussian synthesis), cumulants (ordered-cumulant engine), maps (system-bath
oracle and truncated generators), gaussian (trajectory unravelling),
quadratic (contraction-kernel recursion), expansion (perturbative terms),
cli (configuration-driven driver).
"""

from ._accel import backend_name

__all__ = ["backend_name"]
__version__ = "0.1.0"
