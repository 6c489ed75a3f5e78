"""Joint amortization of posterior and likelihood for simulator-based models.

The package trains a conditional flow over parameters (the posterior network)
and a conditional flow over data (the likelihood network) together with an
optional summary network, all against samples from a simulator.  On top of the
trained pair it provides marginal-likelihood and predictive estimators plus
rank-based calibration diagnostics that can attribute failures to either
network.
"""

__version__ = "0.1.0"

# Version stamp shared by every serialized artifact (datasets, checkpoints,
# reports, estimates).  Bump when any on-disk layout changes.
FORMAT_VERSION = 1
