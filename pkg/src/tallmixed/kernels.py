"""Backend selection for the quadrature kernel.

The compiled ``_aghq`` extension is used when it imports; otherwise the
numpy implementation.  Set ``TALLMIXED_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _aghq_py

BACKENDS = {"python": _aghq_py.cluster_aghq}

try:
    from . import _aghq as _compiled
except ImportError:  # extension not built
    _compiled = None
else:
    BACKENDS["cython"] = _compiled.cluster_aghq

if os.environ.get("TALLMIXED_PURE_PYTHON") or _compiled is None:
    BACKEND = "python"
else:
    BACKEND = "cython"


def get_kernel(name: str | None = None):
    """Return the ``cluster_aghq`` implementation for ``name`` (default: active backend)."""
    name = name or BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
