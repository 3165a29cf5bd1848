"""qsd_sensitivity package

Estimates how far the quasi-stationary distribution of a stochastic mass-action network sits
from the one of its diffusion approximation: finite time error over one minus a contraction
factor obtained from coupling times.
"""

__version__ = "0.1.0"
