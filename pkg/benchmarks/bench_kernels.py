"""Compare the numba kernels against the pure-numpy fallback.

Run: python3 benchmarks/bench_kernels.py [--repeats N] [--quick]
"""
import argparse
import time

import numpy as np

from voxdiff.kernels import numpy_impl as knp

try:
    from voxdiff.kernels import numba_impl as knb
except ImportError:
    knb = None


def bench(fn, args, repeats):
    fn(*args)  # warm (JIT + caches)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(quick):
    rng = np.random.default_rng(0)
    c, d = 8, 8
    hw = (16, 16, 8) if quick else (32, 32, 8)
    h, w, z = hw
    x = rng.normal(size=(c, h, w, z))
    wt = rng.normal(size=(d, c, 3, 3, 3))
    b = rng.normal(size=d)
    dy = rng.normal(size=(d,) + knp.conv3d_out_shape(hw, 3, 1, 1))
    npts = 2000 if quick else 16384
    pts = rng.uniform(-1, max(hw), size=(npts, 3))
    dsamp = rng.normal(size=(npts, c))
    bins, pix = 16, (24 * 32 if not quick else 12 * 16)
    weights = rng.uniform(size=(bins, pix))
    feats = rng.normal(size=(c, pix))
    vox = rng.integers(-1, h * w * z, (bins, pix))
    dout = rng.normal(size=(c, h * w * z))
    occ = (rng.uniform(size=hw) > 0.9).astype(np.float64)
    labels = rng.integers(0, 4, hw).astype(np.uint8)
    nrays = 512 if quick else 2048
    starts = np.tile(np.array([h / 4.0, w / 4.0, z + 1.0]), (nrays, 1))
    dirs = rng.normal(size=(nrays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return [
        ("conv3d_fwd", (x, wt, b, 1, 1)),
        ("conv3d_bwd_x", (dy, wt, 1, 1, hw)),
        ("conv3d_bwd_w", (dy, x, 3, 1, 1)),
        ("trilinear_fwd", (x, pts)),
        ("trilinear_bwd", (x, pts, dsamp)),
        ("splat_fwd", (weights, feats, vox, h * w * z)),
        ("splat_bwd", (dout, weights, feats, vox)),
        ("dilate27", (occ,)),
        ("raymarch", (labels, np.zeros(3), 0.25, starts * 0.25, dirs,
                      0.0625, 0.0625, 200)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    if knb is None:
        print("numba unavailable; nothing to compare")
        return
    print("%-16s %12s %12s %9s" % ("kernel", "numpy (ms)", "numba (ms)",
                                   "speedup"))
    for name, call_args in cases(args.quick):
        t_np = bench(getattr(knp, name), call_args, args.repeats)
        t_nb = bench(getattr(knb, name), call_args, args.repeats)
        print("%-16s %12.3f %12.3f %8.1fx"
              % (name, 1e3 * t_np, 1e3 * t_nb, t_np / t_nb))


if __name__ == "__main__":
    main()
