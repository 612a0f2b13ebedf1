"""Hot-kernel backend selection.

Two interchangeable implementations live here: ``numpy_impl`` (pure
numpy, always available) and ``numba_impl`` (jitted loops, much faster
on the scatter/gather kernels). The env var VOXDIFF_KERNELS picks one:

    auto   prefer numba, fall back to numpy (default)
    numba  require the jitted path
    numpy  force the reference path

Both backends satisfy the same contracts; the test suite checks them
against each other to ~1e-12.
"""
import os

import numpy as np

_choice = os.environ.get("VOXDIFF_KERNELS", "auto").lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError("VOXDIFF_KERNELS must be auto, numba or numpy, got %r" % _choice)

if _choice == "numpy":
    from . import numpy_impl as _impl
    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl
        BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise
        from . import numpy_impl as _impl
        BACKEND = "numpy"

conv3d_out_shape = _impl.conv3d_out_shape
conv3d_fwd = _impl.conv3d_fwd
conv3d_bwd_x = _impl.conv3d_bwd_x
conv3d_bwd_w = _impl.conv3d_bwd_w
trilinear_fwd = _impl.trilinear_fwd
trilinear_bwd = _impl.trilinear_bwd
splat_fwd = _impl.splat_fwd
splat_bwd = _impl.splat_bwd
dilate27 = _impl.dilate27
raymarch = _impl.raymarch


def warmup():
    """Run every kernel once on tiny inputs (triggers JIT compilation)."""
    x = np.ones((1, 2, 2, 2))
    w = np.ones((1, 1, 3, 3, 3))
    b = np.zeros(1)
    y = conv3d_fwd(x, w, b, 1, 1)
    conv3d_bwd_x(y, w, 1, 1, (2, 2, 2))
    conv3d_bwd_w(y, x, 3, 1, 1)
    pts = np.array([[0.5, 0.5, 0.5]])
    trilinear_bwd(x, pts, trilinear_fwd(x, pts))
    vox = np.zeros((1, 1), dtype=np.int64)
    wt = np.ones((1, 1))
    splat_bwd(splat_fwd(wt, np.ones((1, 1)), vox, 8), wt, np.ones((1, 1)), vox)
    dilate27(np.zeros((2, 2, 2)))
    raymarch(np.ones((2, 2, 2), dtype=np.int64), np.zeros(3), 1.0,
             np.zeros((1, 3)), np.ones((1, 3)), 0.0, 0.5, 4)
