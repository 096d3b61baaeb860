"""Bayesian parameter estimation for a closed-loop 0D cardiovascular model."""
