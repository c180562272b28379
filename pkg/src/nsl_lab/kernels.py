"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise, or when
``NSL_LAB_BACKEND=python``, the numpy implementation is used. ``BACKEND``
names the active one.
"""
from __future__ import annotations

import os

from nsl_lab import _kernels_py

METRIC_ZNCC = _kernels_py.METRIC_ZNCC
METRIC_SAD = _kernels_py.METRIC_SAD

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("NSL_LAB_BACKEND", "").lower() != "python":
    try:
        from nsl_lab import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def get_backend(name: str | None = None):
    """Kernel module by name (``"cython"`` / ``"python"``), or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from nsl_lab import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def intersect(*args, **kwargs):
    return _impl.intersect(*args, **kwargs)


def render_view(*args, **kwargs):
    return _impl.render_view(*args, **kwargs)


def window_scores(*args, **kwargs):
    return _impl.window_scores(*args, **kwargs)


def temporal_scores(*args, **kwargs):
    return _impl.temporal_scores(*args, **kwargs)
