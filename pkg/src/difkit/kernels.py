"""E-step backend selection.

The compiled extension is used when it imports; otherwise the numpy
implementation. ``DIFKIT_KERNEL=python`` forces the fallback.
"""

from __future__ import annotations

import os

from . import _estep_py

BACKEND = "python"
_impl = _estep_py

if os.environ.get("DIFKIT_KERNEL", "").lower() != "python":
    try:
        from . import _estep as _compiled
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "compiled"
        _impl = _compiled


def get_backend(name: str | None = None):
    """Return a kernel module by name (``"compiled"``/``"python"``), or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _estep_py
    if name == "compiled":
        from . import _estep
        return _estep
    raise ValueError(f"unknown kernel backend {name!r}")


def prepare(cells):
    return _impl.prepare(cells)


def estep(block, logp, log1mp, logw):
    return _impl.estep(block, logp, log1mp, logw)


def posterior(block, logp, log1mp, logw):
    return _impl.posterior(block, logp, log1mp, logw)
