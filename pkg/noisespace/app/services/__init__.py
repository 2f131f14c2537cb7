"""Sampling, oracle, metric and orchestration services."""
