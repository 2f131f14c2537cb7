"""Noise-space sampling application package."""
