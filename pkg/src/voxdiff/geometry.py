"""Conditional encoder: LiDAR stream, camera lifting, mask, fusion, backbone."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .layers import Conv3d, Linear, Module
from .numerics import Tensor, ops
from .occupancy import camera_rays, depth_bin_centers, voxelize_points


@dataclass
class FusionVolume:
    """Multi-scale conditional features F_m; levels halve per step."""
    levels: list  # three Tensors [d, H/2^i, W/2^i, Z/2^i], i = 1..3


def gumbel_noise(rng, shape):
    """Standard Gumbel draws via -log(-log(u)), u clipped off {0, 1}."""
    u = np.clip(rng.uniform(size=shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


class LidarStream(Module):
    """Two 3x3x3 convs with smooth nonlinearity; the toy point backbone."""

    def __init__(self, c_f, rng):
        self.conv1 = Conv3d(2, c_f, 3, rng)
        self.conv2 = Conv3d(c_f, c_f, 3, rng)

    def __call__(self, vox):
        return ops.silu(self.conv2(ops.silu(self.conv1(vox))))


def hard_gumbel_onehot(logits, tau, g=None, train=True):
    """One-hot of argmax((z + g) / tau) along the depth axis (axis 0).

    Forward output is exactly one-hot; the straight-through backward
    routes gradients through softmax((z + g) / tau).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not train or g is None:
        g = np.zeros(logits.shape)
    y = ops.div(ops.add(logits, Tensor(g)), tau)
    soft = ops.softmax(y, axis=0)
    return ops.hard_onehot_st(soft, axis=0)


def _pixel_voxels(view, grid, range_limit):
    """Flat voxel index per (bin, pixel) ray sample; -1 if out of bounds."""
    _, hc, wc = view.shape
    center, dirs = camera_rays(view.intrinsics, view.extrinsics, (hc, wc))
    dist = depth_bin_centers(view.d_bins, range_limit)
    pts = center + dist[:, None, None] * dirs[None]  # [D_bins, P, 3]
    h, w, z = grid.dims
    idx = np.floor((pts - grid.origin.astype(np.float64))
                   / grid.voxel_size).astype(np.int64)
    ok = ((idx >= 0) & (idx < np.array([h, w, z]))).all(axis=2)
    flat = (idx[..., 0] * w + idx[..., 1]) * z + idx[..., 2]
    return np.where(ok, flat, -1)


def lift_splat(view, depth_onehot, grid, range_limit):
    """Scatter pixel features into voxels at their one-hot depth.

    Each pixel contributes feature * weight at the voxel containing the
    point on its ray at each bin center; out-of-grid points are dropped.
    Returns an unprojected [C_img, H, W, Z] volume so mass conservation
    is directly checkable; the encoder applies the 1x1x1 projection.
    """
    ci, hc, wc = view.shape
    vox = _pixel_voxels(view, grid, range_limit)
    weights = ops.reshape(depth_onehot, (view.d_bins, hc * wc))
    feats = Tensor(view.features.astype(np.float64).reshape(ci, hc * wc))
    return ops.scatter_splat(weights, feats, vox, grid.dims)


def geometry_mask(lidar_occ, conv, r=2):
    """Dilate occupancy r times (3^3 max), smooth with a learnable 3^3
    conv, then softmax over the height axis per column."""
    occ = lidar_occ.data if isinstance(lidar_occ, Tensor) else np.asarray(lidar_occ)
    occ = occ.astype(np.float64)
    for _ in range(r):
        occ = kernels.dilate27(occ)
    y = conv(Tensor(occ[None]))  # [1, H, W, Z]
    m = ops.softmax(y, axis=3)
    return ops.reshape(m, occ.shape)


def apply_mask(f_c, mask):
    """Per-voxel reweighting broadcast over the channel axis."""
    if f_c.shape[1:] != mask.shape:
        raise ValueError("mask shape %s does not match features %s"
                         % (mask.shape, f_c.shape))
    return ops.mul(f_c, mask)


class AdaptiveFuse(Module):
    """Sigmoid-gated convex blend of the two sensor volumes."""

    def __init__(self, c_f, rng):
        self.conv_p = Conv3d(c_f, c_f, 3, rng)
        self.conv_c = Conv3d(c_f, c_f, 3, rng)
        self.conv_w = Conv3d(2 * c_f, c_f, 3, rng, zero_init=True)

    def __call__(self, f_p, f_c):
        if f_p.shape != f_c.shape:
            raise ValueError("fuse inputs disagree: %s vs %s"
                             % (f_p.shape, f_c.shape))
        w = self.conv_w(ops.concat([self.conv_p(f_p), self.conv_c(f_c)], axis=0))
        gate = ops.sigmoid(w)
        return ops.add(ops.mul(gate, f_p), ops.mul(ops.sub(1.0, gate), f_c))


class Backbone(Module):
    """Three stride-2 stages (two convs + residual each) emitting levels."""

    def __init__(self, c_f, d, rng):
        cins = [c_f, d, d]
        self.downs = [Conv3d(cin, d, 3, rng, stride=2) for cin in cins]
        self.mixes = [Conv3d(d, d, 3, rng) for _ in cins]

    def __call__(self, x):
        if any(n % 8 for n in x.shape[1:]):
            raise ValueError("backbone needs dims divisible by 8, got %s"
                             % (x.shape,))
        levels = []
        for down, mix in zip(self.downs, self.mixes):
            x = ops.silu(down(x))
            x = ops.add(x, mix(ops.silu(x)))
            levels.append(x)
        return FusionVolume(levels)


class Encoder(Module):
    """The full conditional encoder; runs once per scene."""

    def __init__(self, classes, rng, c_f=8, d=8, d_bins=16, tau=1.0,
                 mask_r=2, range_limit=12.0):
        c_img = classes + 1
        self.tau = tau
        self.mask_r = mask_r
        self.range_limit = range_limit
        self.lidar = LidarStream(c_f, rng)
        self.depth_head = Linear(c_img, d_bins, rng)
        self.cam_proj = Conv3d(c_img, c_f, 1, rng)
        self.mask_conv = Conv3d(1, 1, 3, rng)
        self.fuse = AdaptiveFuse(c_f, rng)
        self.backbone = Backbone(c_f, d, rng)
        self.calls = 0  # instrumentation for the encoder-once contract

    def depth_logits(self, view):
        """Per-pixel depth logits from the view features via a 1x1 head."""
        ci, hc, wc = view.shape
        flat = Tensor(view.features.astype(np.float64).reshape(ci, hc * wc))
        out = self.depth_head(ops.transpose(flat, (1, 0)))  # [P, D_bins]
        return ops.reshape(ops.transpose(out, (1, 0)), (-1, hc, wc))

    def __call__(self, scene, train=False, gumbel_rng=None):
        """Returns (FusionVolume, depth logits per view)."""
        self.calls += 1
        grid = scene.grid
        vox = voxelize_points(scene.points, grid)
        f_p = self.lidar(vox)
        volume = None
        logits_all = []
        for view in scene.views:
            logits = self.depth_logits(view)
            logits_all.append(logits)
            g = gumbel_noise(gumbel_rng, logits.shape) if (train and gumbel_rng
                                                           is not None) else None
            onehot = hard_gumbel_onehot(logits, self.tau, g, train=train)
            lifted = lift_splat(view, onehot, grid, self.range_limit)
            volume = lifted if volume is None else ops.add(volume, lifted)
        f_c = self.cam_proj(volume)
        mask = geometry_mask(vox.data[0], self.mask_conv, self.mask_r)
        f_c = apply_mask(f_c, mask)
        f_m0 = self.fuse(f_p, f_c)
        return self.backbone(f_m0), logits_all
