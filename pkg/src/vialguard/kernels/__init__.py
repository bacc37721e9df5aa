"""Box kernels with a compiled fast path.

The Cython extension is used when it built successfully; the pure-numpy
implementation is the fallback. Set VIALGUARD_NO_EXT=1 to force the fallback
(used by the backend-parity tests and the kernel benchmark).
"""

import os

from . import _numpy

if os.environ.get("VIALGUARD_NO_EXT") == "1":
    _impl = _numpy
    BACKEND = "python"
else:
    try:
        from . import _boxops as _impl  # type: ignore[no-redef]
        BACKEND = "compiled"
    except ImportError:
        _impl = _numpy
        BACKEND = "python"


def iou_matrix(a, b):
    import numpy as np
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return _impl.iou_matrix(a, b)


def nms_keep(boxes, iou_threshold):
    import numpy as np
    boxes = np.ascontiguousarray(boxes, dtype=np.float64)
    return _impl.nms_keep(boxes, float(iou_threshold))


__all__ = ["iou_matrix", "nms_keep", "BACKEND"]
