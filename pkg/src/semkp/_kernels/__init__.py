"""Kernel backend selection.

Two interchangeable implementations of the hot inner loops exist: a compiled
Cython module (`_fast`) and a pure numpy/python reference (`_ref`).  The
compiled one is preferred when the extension built; `SEMKP_KERNELS=python`
or `SEMKP_KERNELS=compiled` in the environment forces a choice.  Both expose
the same four functions and are held to equality by the parity tests.
"""

from __future__ import annotations

import os

from . import _ref


def _select():
    forced = os.environ.get("SEMKP_KERNELS", "").strip().lower()
    if forced in ("python", "ref"):
        return _ref, "python"
    try:
        from . import _fast
    except ImportError:
        if forced == "compiled":
            raise ImportError(
                "SEMKP_KERNELS=compiled but the semkp._kernels._fast extension "
                "is not built; reinstall the package with a C toolchain"
            )
        return _ref, "python"
    return _fast, "compiled"


_impl, _name = _select()

geodesic_from = _impl.geodesic_from
geodesic_all = _impl.geodesic_all
splat_forward = _impl.splat_forward
splat_backward = _impl.splat_backward
zbuffer_points = _impl.zbuffer_points


def backend_name() -> str:
    """Which implementation is live: "compiled" or "python"."""
    return _name


def get_backend(name: str):
    """Fetch a specific backend module (used by parity tests and benchmarks)."""
    if name in ("python", "ref"):
        return _ref
    if name == "compiled":
        from . import _fast

        return _fast
    raise ValueError(f"unknown kernel backend {name!r}")
