"""Numba-jitted hot kernels.

Same contracts as ``numpy_impl``. Convolutions go through an explicit
im2col so the contraction itself runs on BLAS via np.dot; the gather /
scatter kernels are plain loops, which is where the JIT pays off most.
All kernels are single-threaded on purpose: scatter order stays fixed,
so results are deterministic run to run.
"""
import numpy as np
from numba import njit

from .numpy_impl import conv3d_out_shape  # noqa: F401  (re-exported)


@njit(cache=True)
def _im2col(x, k, stride, pad, o1, o2, o3):
    ci = x.shape[0]
    d1, d2, d3 = x.shape[1], x.shape[2], x.shape[3]
    cols = np.zeros((o1 * o2 * o3, ci * k * k * k))
    for z1 in range(o1):
        for z2 in range(o2):
            for z3 in range(o3):
                row = (z1 * o2 + z2) * o3 + z3
                j = 0
                for c in range(ci):
                    for kd in range(k):
                        a1 = z1 * stride + kd - pad
                        if a1 < 0 or a1 >= d1:
                            j += k * k
                            continue
                        for kh in range(k):
                            a2 = z2 * stride + kh - pad
                            if a2 < 0 or a2 >= d2:
                                j += k
                                continue
                            for kw in range(k):
                                a3 = z3 * stride + kw - pad
                                if 0 <= a3 < d3:
                                    cols[row, j] = x[c, a1, a2, a3]
                                j += 1
    return cols


@njit(cache=True)
def conv3d_fwd(x, w, b, stride, pad):
    co = w.shape[0]
    ci = w.shape[1]
    k = w.shape[2]
    o1 = (x.shape[1] + 2 * pad - k) // stride + 1
    o2 = (x.shape[2] + 2 * pad - k) // stride + 1
    o3 = (x.shape[3] + 2 * pad - k) // stride + 1
    cols = _im2col(x, k, stride, pad, o1, o2, o3)
    wm = np.ascontiguousarray(w.reshape(co, ci * k * k * k).T)
    y = np.dot(cols, wm)
    out = np.empty((co, o1, o2, o3))
    for o in range(co):
        for z1 in range(o1):
            for z2 in range(o2):
                for z3 in range(o3):
                    out[o, z1, z2, z3] = y[(z1 * o2 + z2) * o3 + z3, o] + b[o]
    return out


@njit(cache=True)
def conv3d_bwd_x(dy, w, stride, pad, in_shape):
    co = w.shape[0]
    ci = w.shape[1]
    k = w.shape[2]
    d1, d2, d3 = in_shape
    o1, o2, o3 = dy.shape[1], dy.shape[2], dy.shape[3]
    dym = np.empty((o1 * o2 * o3, co))
    for o in range(co):
        for z1 in range(o1):
            for z2 in range(o2):
                for z3 in range(o3):
                    dym[(z1 * o2 + z2) * o3 + z3, o] = dy[o, z1, z2, z3]
    wm = np.ascontiguousarray(w.reshape(co, ci * k * k * k))
    dcols = np.dot(dym, wm)  # [V, Ci*k^3]
    dx = np.zeros((ci, d1, d2, d3))
    for z1 in range(o1):
        for z2 in range(o2):
            for z3 in range(o3):
                row = (z1 * o2 + z2) * o3 + z3
                j = 0
                for c in range(ci):
                    for kd in range(k):
                        a1 = z1 * stride + kd - pad
                        if a1 < 0 or a1 >= d1:
                            j += k * k
                            continue
                        for kh in range(k):
                            a2 = z2 * stride + kh - pad
                            if a2 < 0 or a2 >= d2:
                                j += k
                                continue
                            for kw in range(k):
                                a3 = z3 * stride + kw - pad
                                if 0 <= a3 < d3:
                                    dx[c, a1, a2, a3] += dcols[row, j]
                                j += 1
    return dx


@njit(cache=True)
def conv3d_bwd_w(dy, x, k, stride, pad):
    co = dy.shape[0]
    ci = x.shape[0]
    o1, o2, o3 = dy.shape[1], dy.shape[2], dy.shape[3]
    cols = _im2col(x, k, stride, pad, o1, o2, o3)
    dym = np.empty((co, o1 * o2 * o3))
    db = np.zeros(co)
    for o in range(co):
        for z1 in range(o1):
            for z2 in range(o2):
                for z3 in range(o3):
                    v = dy[o, z1, z2, z3]
                    dym[o, (z1 * o2 + z2) * o3 + z3] = v
                    db[o] += v
    dw = np.dot(dym, cols).reshape(co, ci, k, k, k)
    return dw, db


@njit(cache=True)
def trilinear_fwd(f, pts):
    c = f.shape[0]
    d1, d2, d3 = f.shape[1], f.shape[2], f.shape[3]
    m = pts.shape[0]
    out = np.zeros((m, c))
    for i in range(m):
        x0 = int(np.floor(pts[i, 0]))
        y0 = int(np.floor(pts[i, 1]))
        z0 = int(np.floor(pts[i, 2]))
        fx = pts[i, 0] - x0
        fy = pts[i, 1] - y0
        fz = pts[i, 2] - z0
        for dx in range(2):
            ax = x0 + dx
            if ax < 0 or ax >= d1:
                continue
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                ay = y0 + dy
                if ay < 0 or ay >= d2:
                    continue
                wy = fy if dy else 1.0 - fy
                for dz in range(2):
                    az = z0 + dz
                    if az < 0 or az >= d3:
                        continue
                    wz = fz if dz else 1.0 - fz
                    wt = wx * wy * wz
                    for ch in range(c):
                        out[i, ch] += wt * f[ch, ax, ay, az]
    return out


@njit(cache=True)
def trilinear_bwd(f, pts, dout):
    c = f.shape[0]
    d1, d2, d3 = f.shape[1], f.shape[2], f.shape[3]
    m = pts.shape[0]
    df = np.zeros_like(f)
    dpts = np.zeros_like(pts)
    for i in range(m):
        x0 = int(np.floor(pts[i, 0]))
        y0 = int(np.floor(pts[i, 1]))
        z0 = int(np.floor(pts[i, 2]))
        fx = pts[i, 0] - x0
        fy = pts[i, 1] - y0
        fz = pts[i, 2] - z0
        for dx in range(2):
            ax = x0 + dx
            if ax < 0 or ax >= d1:
                continue
            wx = fx if dx else 1.0 - fx
            gx = 1.0 if dx else -1.0
            for dy in range(2):
                ay = y0 + dy
                if ay < 0 or ay >= d2:
                    continue
                wy = fy if dy else 1.0 - fy
                gy = 1.0 if dy else -1.0
                for dz in range(2):
                    az = z0 + dz
                    if az < 0 or az >= d3:
                        continue
                    wz = fz if dz else 1.0 - fz
                    gz = 1.0 if dz else -1.0
                    wt = wx * wy * wz
                    gdot = 0.0
                    for ch in range(c):
                        g = dout[i, ch]
                        df[ch, ax, ay, az] += wt * g
                        gdot += g * f[ch, ax, ay, az]
                    dpts[i, 0] += gx * wy * wz * gdot
                    dpts[i, 1] += gy * wx * wz * gdot
                    dpts[i, 2] += gz * wx * wy * gdot
    return df, dpts


@njit(cache=True)
def splat_fwd(weights, feats, vox, nvox):
    c = feats.shape[0]
    b, p = weights.shape
    out = np.zeros((c, nvox))
    for bb in range(b):
        for pp in range(p):
            v = vox[bb, pp]
            if v < 0:
                continue
            w = weights[bb, pp]
            for ch in range(c):
                out[ch, v] += w * feats[ch, pp]
    return out


@njit(cache=True)
def splat_bwd(dout, weights, feats, vox):
    c, p = feats.shape
    b = weights.shape[0]
    dweights = np.zeros_like(weights)
    dfeats = np.zeros_like(feats)
    for bb in range(b):
        for pp in range(p):
            v = vox[bb, pp]
            if v < 0:
                continue
            acc = 0.0
            w = weights[bb, pp]
            for ch in range(c):
                g = dout[ch, v]
                acc += g * feats[ch, pp]
                dfeats[ch, pp] += g * w
            dweights[bb, pp] = acc
    return dweights, dfeats


@njit(cache=True)
def dilate27(occ):
    d1, d2, d3 = occ.shape
    out = np.empty_like(occ)
    for i in range(d1):
        for j in range(d2):
            for k in range(d3):
                m = occ[i, j, k]
                for di in range(-1, 2):
                    a = i + di
                    if a < 0 or a >= d1:
                        continue
                    for dj in range(-1, 2):
                        b = j + dj
                        if b < 0 or b >= d2:
                            continue
                        for dk in range(-1, 2):
                            cc = k + dk
                            if cc < 0 or cc >= d3:
                                continue
                            v = occ[a, b, cc]
                            if v > m:
                                m = v
                out[i, j, k] = m
    return out


@njit(cache=True)
def raymarch(labels, grid_origin, voxel_size, starts, dirs, t0, dt, nsteps):
    n1, n2, n3 = labels.shape
    nrays = starts.shape[0]
    hit_t = np.full(nrays, -1.0)
    hit_label = np.zeros(nrays, dtype=np.int64)
    for r in range(nrays):
        for j in range(nsteps):
            t = t0 + dt * j
            i1 = int(np.floor((starts[r, 0] + t * dirs[r, 0] - grid_origin[0]) / voxel_size))
            if i1 < 0 or i1 >= n1:
                continue
            i2 = int(np.floor((starts[r, 1] + t * dirs[r, 1] - grid_origin[1]) / voxel_size))
            if i2 < 0 or i2 >= n2:
                continue
            i3 = int(np.floor((starts[r, 2] + t * dirs[r, 2] - grid_origin[2]) / voxel_size))
            if i3 < 0 or i3 >= n3:
                continue
            lab = labels[i1, i2, i3]
            if lab > 0:
                hit_t[r] = t
                hit_label[r] = lab
                break
    return hit_t, hit_label
