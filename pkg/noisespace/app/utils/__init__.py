"""
Utility modules for the noise-space sampler.
"""
