"""Upstream time-division-multiplexed QKD access network: analytic key rates and Monte Carlo."""

__version__ = "0.1.0"
