"""Numerical laboratory for gluing pseudo-holomorphic curves.

The modules follow the pipeline of the construction:

- ``acs``: almost-complex structures on flat charts
- ``domain``: log-polar grids, glued cylinders, quadrature and norms
- ``cutoff``: logarithmic cutoff functions
- ``curves``: sampled curves, the Cauchy-Riemann residual and image metrics
- ``glue``: approximate solutions obtained by cutoff blending
- ``linop``: linearized operators and their right inverses
- ``solver``: Newton correctors, with and without point constraints
- ``lab``: experiment orchestration and the ``lab`` command line
"""

__version__ = "0.1.0"
