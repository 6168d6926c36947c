"""Kernel backend selection.

The compiled extension (tcenet.kernels._core) is preferred when it
imported cleanly; otherwise the pure-numpy fallback in pyref takes over.
Set TCENET_KERNELS=python or =compiled to force a backend at import
time, or call use_backend() to switch at runtime (tests and the
benchmark do this). Both backends implement identical semantics.
"""

from __future__ import annotations

import os

from tcenet.kernels import pyref

try:
    from tcenet.kernels import _core
except ImportError:
    _core = None

_BACKENDS = {"python": pyref}
if _core is not None:
    _BACKENDS["compiled"] = _core

_active_name = ""


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def backend_name() -> str:
    return _active_name


def use_backend(name: str):
    """Point the module-level kernel functions at the named backend."""
    global _active_name, knn, fps, scatter_add_rows
    global attention_pool_forward, attention_pool_backward
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    mod = _BACKENDS[name]
    knn = mod.knn
    fps = mod.fps
    scatter_add_rows = mod.scatter_add_rows
    attention_pool_forward = mod.attention_pool_forward
    attention_pool_backward = mod.attention_pool_backward
    _active_name = name


_requested = os.environ.get("TCENET_KERNELS", "auto")
if _requested == "auto":
    use_backend("compiled" if _core is not None else "python")
else:
    use_backend(_requested)
