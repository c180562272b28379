"""Desk-scale neural structured-light depth toolkit.

Submodules are imported on demand so that the numpy-only parts (patterns,
geometry, simulator, classical matching, metrics, dataset I/O) load without
pulling in torch.
"""
__version__ = "0.1.0"

__all__ = ["__version__"]
