"""
Kernel topic model: LDA with per-topic Gaussian process priors on document metadata
"""

__version__ = "1.0.0"
