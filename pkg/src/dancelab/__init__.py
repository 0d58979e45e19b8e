"""Universal domain adaptation with neighborhood clustering and entropy separation.

Pure numpy implementation: explicit forward/backward kernels, an MLP with
domain-specific batch norm, memory-bank clustering loss, a synthetic
category-shift benchmark, baselines, metrics and an experiment runner.
"""

__version__ = "0.1.0"
