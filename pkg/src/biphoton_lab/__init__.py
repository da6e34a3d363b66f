"""Simulation and analysis of spatially shaped photon-pair correlations.

Pairs are drawn in the sample plane for a given SLM phase mask, passed
through absorbing or scattering media, recorded by an EMCCD model and
analysed with the consecutive-frame covariance estimator.
"""

__version__ = "0.1.0"
