"""Hot-kernel backend selection.

The compiled Cython extension is preferred when present; the pure-numpy
fallback is always available. Set SUBMAP_SLAM_KERNELS=python (or =native)
to force a backend; "native" raises if the extension is missing.
"""

import os

from . import _numpy

_choice = os.environ.get("SUBMAP_SLAM_KERNELS", "auto").lower()

if _choice == "python":
    _impl = _numpy
    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        if _choice == "native":
            raise ImportError(
                "SUBMAP_SLAM_KERNELS=native but the compiled extension is missing; "
                "reinstall with Cython and a C compiler available"
            )
        _impl = _numpy
        BACKEND = "python"

raycast = _impl.raycast
nn_query = _impl.nn_query
nn_dists = _impl.nn_dists


def backend_name() -> str:
    return BACKEND
