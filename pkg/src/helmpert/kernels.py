"""Backend dispatch for the element assembly kernels.

The compiled extension is preferred; the numpy fallback is selected when the
extension was not built or when HELMPERT_KERNELS=python is set. Both expose
the same five functions with identical numerics (the parity test suite holds
them to near machine precision), so callers import from here and never care.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("HELMPERT_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled

        _impl = _compiled
        BACKEND = "compiled"
    except ImportError:
        pass

element_geometry = _impl.element_geometry
local_matrices = _impl.local_matrices
triangle_gradients = _impl.triangle_gradients
nodal_average = _impl.nodal_average
gradient_load = _impl.gradient_load

__all__ = [
    "BACKEND",
    "element_geometry",
    "local_matrices",
    "triangle_gradients",
    "nodal_average",
    "gradient_load",
]
