"""Batch-parallel ABC and ABC-SMC (MCMC-tuned and Beta-distributed step sizes)
for a stochastic COVID-19 compartmental model."""

__version__ = "0.1.0"
