"""Pure-numpy implementations of the hot kernels.

Reference/fallback backend. Same signatures and semantics as
``numba_impl``; selected by setting ``VOXDIFF_KERNELS=numpy``.
All volumes are float64, channel-first, C-contiguous.
"""
import numpy as np


def conv3d_out_shape(in_shape, k, stride, pad):
    d1, d2, d3 = in_shape
    return tuple((n + 2 * pad - k) // stride + 1 for n in (d1, d2, d3))


def _windows(xp, k, stride, out_shape):
    # strided view [Ci, O1, O2, O3, k, k, k] over the padded input
    ci = xp.shape[0]
    s = xp.strides
    o1, o2, o3 = out_shape
    return np.lib.stride_tricks.as_strided(
        xp,
        (ci, o1, o2, o3, k, k, k),
        (s[0], s[1] * stride, s[2] * stride, s[3] * stride, s[1], s[2], s[3]),
    )


def conv3d_fwd(x, w, b, stride, pad):
    """Cross-correlation of x [Ci,D1,D2,D3] with w [Co,Ci,k,k,k], bias b [Co]."""
    ci = x.shape[0]
    co, _, k, _, _ = w.shape
    out_shape = conv3d_out_shape(x.shape[1:], k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = _windows(xp, k, stride, out_shape)
    cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(-1, ci * k ** 3)
    y = cols @ w.reshape(co, -1).T + b
    return np.ascontiguousarray(y.T.reshape((co,) + out_shape))


def conv3d_bwd_x(dy, w, stride, pad, in_shape):
    """Gradient w.r.t. the conv input; in_shape = (D1, D2, D3)."""
    co, _, k, _, _ = w.shape
    o1, o2, o3 = dy.shape[1:]
    ci = w.shape[1]
    dcols = dy.reshape(co, -1).T @ w.reshape(co, -1)  # [V, Ci*k^3]
    dcols = dcols.reshape(o1, o2, o3, ci, k, k, k)
    dxp = np.zeros((ci, in_shape[0] + 2 * pad, in_shape[1] + 2 * pad,
                    in_shape[2] + 2 * pad))
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                dxp[:, kd:kd + o1 * stride:stride,
                    kh:kh + o2 * stride:stride,
                    kw:kw + o3 * stride:stride] += \
                    dcols[:, :, :, :, kd, kh, kw].transpose(3, 0, 1, 2)
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp)


def conv3d_bwd_w(dy, x, k, stride, pad):
    """Gradients w.r.t. kernel and bias."""
    ci = x.shape[0]
    co = dy.shape[0]
    out_shape = dy.shape[1:]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = _windows(xp, k, stride, out_shape)
    cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(-1, ci * k ** 3)
    dw = (dy.reshape(co, -1) @ cols).reshape(co, ci, k, k, k)
    db = dy.reshape(co, -1).sum(axis=1)
    return dw, db


def trilinear_fwd(f, pts):
    """Sample f [C,D1,D2,D3] at continuous voxel coords pts [M,3] -> [M,C].

    Out-of-bounds corners contribute zero (zero padding).
    """
    c = f.shape[0]
    dims = np.array(f.shape[1:], dtype=np.int64)
    p0 = np.floor(pts).astype(np.int64)
    fr = pts - p0
    out = np.zeros((pts.shape[0], c))
    for dx in range(2):
        wx = fr[:, 0] if dx else 1.0 - fr[:, 0]
        for dy in range(2):
            wy = fr[:, 1] if dy else 1.0 - fr[:, 1]
            for dz in range(2):
                wz = fr[:, 2] if dz else 1.0 - fr[:, 2]
                idx = p0 + np.array([dx, dy, dz])
                ok = ((idx >= 0) & (idx < dims)).all(axis=1)
                ii = idx[ok]
                out[ok] += (wx * wy * wz)[ok, None] * \
                    f[:, ii[:, 0], ii[:, 1], ii[:, 2]].T
    return out


def trilinear_bwd(f, pts, dout):
    """Gradients of trilinear_fwd w.r.t. f and pts."""
    c = f.shape[0]
    dims = np.array(f.shape[1:], dtype=np.int64)
    p0 = np.floor(pts).astype(np.int64)
    fr = pts - p0
    df = np.zeros_like(f)
    dpts = np.zeros_like(pts)
    for dx in range(2):
        wx = fr[:, 0] if dx else 1.0 - fr[:, 0]
        gx = 1.0 if dx else -1.0
        for dy in range(2):
            wy = fr[:, 1] if dy else 1.0 - fr[:, 1]
            gy = 1.0 if dy else -1.0
            for dz in range(2):
                wz = fr[:, 2] if dz else 1.0 - fr[:, 2]
                gz = 1.0 if dz else -1.0
                idx = p0 + np.array([dx, dy, dz])
                ok = ((idx >= 0) & (idx < dims)).all(axis=1)
                ii = idx[ok]
                gdot = (dout[ok] * f[:, ii[:, 0], ii[:, 1], ii[:, 2]].T).sum(axis=1)
                wt = (wx * wy * wz)[ok]
                np.add.at(df, (slice(None), ii[:, 0], ii[:, 1], ii[:, 2]),
                          (wt[:, None] * dout[ok]).T)
                dpts[ok, 0] += gx * (wy * wz)[ok] * gdot
                dpts[ok, 1] += gy * (wx * wz)[ok] * gdot
                dpts[ok, 2] += gz * (wx * wy)[ok] * gdot
    return df, dpts


def splat_fwd(weights, feats, vox, nvox):
    """Scatter-add weights[b,p] * feats[c,p] into out[c, vox[b,p]].

    vox entries < 0 are dropped (point fell outside the grid).
    """
    c, p = feats.shape
    b = weights.shape[0]
    out = np.zeros((c, nvox))
    valid = vox.ravel() >= 0
    idx = vox.ravel()[valid]
    wv = weights.ravel()[valid]
    fb = np.broadcast_to(feats[:, None, :], (c, b, p)).reshape(c, b * p)[:, valid]
    for ch in range(c):
        np.add.at(out[ch], idx, wv * fb[ch])
    return out


def splat_bwd(dout, weights, feats, vox):
    """Gradients of splat_fwd w.r.t. weights and feats."""
    c, p = feats.shape
    b = weights.shape[0]
    safe = np.maximum(vox, 0)
    g = dout[:, safe]                      # [C, B, P]
    g = g * (vox >= 0)[None]
    dweights = (g * feats[:, None, :]).sum(axis=0)
    dfeats = (g * weights[None]).sum(axis=1)
    return dweights, dfeats


def dilate27(occ):
    """One round of 3x3x3 neighborhood max over a [D1,D2,D3] volume."""
    p = np.pad(occ, 1)
    out = occ.copy()
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                out = np.maximum(out, p[dx:dx + occ.shape[0],
                                        dy:dy + occ.shape[1],
                                        dz:dz + occ.shape[2]])
    return out


def raymarch(labels, grid_origin, voxel_size, starts, dirs, t0, dt, nsteps):
    """Fixed-step march of rays through a label grid.

    Returns (hit_t, hit_label): distance of the first sample point that
    falls in an occupied voxel (label > 0), or -1.0 / 0 if none within
    nsteps. Both backends use the identical fixed-step rule so results
    are bit-exact across them.
    """
    n1, n2, n3 = labels.shape
    nrays = starts.shape[0]
    ts = t0 + dt * np.arange(nsteps)
    pts = starts[:, None, :] + ts[None, :, None] * dirs[:, None, :]
    idx = np.floor((pts - grid_origin) / voxel_size).astype(np.int64)
    inb = ((idx >= 0) & (idx < np.array([n1, n2, n3]))).all(axis=2)
    ic = np.clip(idx, 0, np.array([n1 - 1, n2 - 1, n3 - 1]))
    lab = labels[ic[..., 0], ic[..., 1], ic[..., 2]]
    occ = inb & (lab > 0)
    first = occ.argmax(axis=1)
    any_hit = occ.any(axis=1)
    hit_t = np.where(any_hit, ts[first], -1.0)
    hit_label = np.where(any_hit, lab[np.arange(nrays), first], 0).astype(np.int64)
    return hit_t, hit_label
