"""Synthetic individual location trajectories via categorical diffusion in embedding space."""

import jax

# All diffusion math is validated at double precision; enable x64 before any
# array is created. Single precision can be re-enabled by the caller.
jax.config.update("jax_enable_x64", True)

from trajdiff.errors import DataError, NumericalError

__version__ = "0.1.0"

__all__ = ["DataError", "NumericalError", "__version__"]
