"""Noise-space Langevin posterior sampling toolkit."""
