"""Unified multi-resolution cascaded diffusion on numpy.

One weight-shared denoiser serves every rung of a resolution ladder.  Sampling
runs bottom-up, each lower stage stopping early and conditioning the next.
Gaussian-mixture oracles provide exact denoisers for verification.
"""

from . import cascade, metrics, network, numerics, oracle, schedule

__version__ = "0.1.0"

__all__ = ["cascade", "metrics", "network", "numerics", "oracle", "schedule", "__version__"]
