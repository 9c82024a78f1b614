"""Real-time fetal brain segmentation engine (RFBSNet) on plain numpy.

Submodules are imported lazily on purpose: the CLI entry point pins BLAS
thread counts via environment variables, which only takes effect if it runs
before numpy is first imported.
"""

__version__ = "0.1.0"
