"""Progressive refinement decoder: deformable attention over noise pyramids.

Layers are pre-norm residual blocks, so with zero-initialized offset,
attention-weight, output, and FiLM projections the whole decoder reduces
to downsample -> upsample-merge -> head (identity-plus-head), which is
the documented well-conditioned starting point.
"""
from dataclasses import dataclass

import numpy as np

from .layers import Conv3d, LayerNorm, Linear, Module
from .numerics import Tensor, ops
from .occupancy import AnalogMap, decode_occupancy
from .schedule import TimeEmbed, ddim_step, embed_time, time_pairs


@dataclass
class QueryPyramid:
    """Per level: flat queries [V, d], normalized reference points [V, 3]
    at voxel centers, and the level's spatial dims."""
    queries: list
    refs: list
    dims: list

    def replace(self, queries):
        return QueryPyramid(queries, self.refs, self.dims)


@dataclass
class DecoderConfig:
    layers: int = 6
    points: int = 4
    width: int = 8
    upsample: str = "nearest"

    def validate(self):
        if self.layers < 1 or self.points < 1:
            raise ValueError("need layers >= 1 and points >= 1")
        if self.upsample not in ("nearest", "trilinear"):
            raise ValueError("upsample must be nearest or trilinear")
        return self


def level_refs(dims):
    """Normalized voxel-center coordinates, flattened in C order."""
    d1, d2, d3 = dims
    i, j, k = np.meshgrid(np.arange(d1), np.arange(d2), np.arange(d3),
                          indexing="ij")
    pts = np.stack([(i.ravel() + 0.5) / d1, (j.ravel() + 0.5) / d2,
                    (k.ravel() + 0.5) / d3], axis=1)
    return pts


def _to_volume(q, d, dims):
    return ops.reshape(ops.transpose(q, (1, 0)), (d,) + tuple(dims))


def _to_queries(vol):
    d = vol.shape[0]
    return ops.transpose(ops.reshape(vol, (d, -1)), (1, 0))


def da3d(q, refs, f, off_proj, att_proj, val_proj, out_proj, n_points):
    """Single-head 3D deformable attention for one query set.

    Offsets live in normalized [0,1] coordinates; sampling positions are
    ref + offset mapped into the feature volume's continuous voxel
    coords. Attention weights softmax-normalize over the N points.
    """
    v = q.shape[0]
    off = ops.reshape(off_proj(q), (v, n_points, 3))
    att = ops.softmax(att_proj(q), axis=1)  # [V, N]
    pos = ops.add(ops.reshape(Tensor(refs), (v, 1, 3)), off)
    dims = np.asarray(f.shape[1:], dtype=np.float64)
    pts = ops.sub(ops.mul(pos, dims), 0.5)
    samp = ops.trilinear_sample(f, ops.reshape(pts, (v * n_points, 3)))
    vals = ops.reshape(val_proj(samp), (v, n_points, -1))
    agg = ops.tsum(ops.mul(ops.reshape(att, (v, n_points, 1)), vals), axis=1)
    return out_proj(agg)


class RefineLayer(Module):
    """One decoder block: deformable cross-attn, self-attn, then FiLM."""

    def __init__(self, d, n_points, t_dim, rng):
        self.n_points = n_points
        zed = dict(zero_init=True)
        self.cross_off = [Linear(d, n_points * 3, rng, **zed) for _ in range(3)]
        self.cross_att = [Linear(d, n_points, rng, **zed) for _ in range(3)]
        self.cross_val = Linear(d, d, rng)
        self.cross_out = Linear(d, d, rng, **zed)
        self.norm_cross = LayerNorm(d)
        self.self_off = Linear(d, n_points * 3, rng, **zed)
        self.self_att = Linear(d, n_points, rng, **zed)
        self.self_val = Linear(d, d, rng)
        self.self_out = Linear(d, d, rng, **zed)
        self.norm_self = LayerNorm(d)
        self.film_scale = [Linear(t_dim, d, rng, **zed) for _ in range(3)]
        self.film_shift = [Linear(t_dim, d, rng, **zed) for _ in range(3)]


def dca3d(pyr, f_m, layer):
    """Queries attend to every fusion level; per-level results summed,
    pre-norm residual update."""
    if len(f_m.levels) != len(pyr.queries):
        raise ValueError("pyramid has %d levels but fusion volume %d"
                         % (len(pyr.queries), len(f_m.levels)))
    out = []
    for q, refs in zip(pyr.queries, pyr.refs):
        qn = layer.norm_cross(q)
        upd = None
        for n, f in enumerate(f_m.levels):
            r = da3d(qn, refs, f, layer.cross_off[n], layer.cross_att[n],
                     layer.cross_val, layer.cross_out, layer.n_points)
            upd = r if upd is None else ops.add(upd, r)
        out.append(ops.add(q, upd))
    return pyr.replace(out)


def dsa3d(pyr, layer):
    """Each level's queries attend to their own level's volume."""
    out = []
    d = pyr.queries[0].shape[1]
    for q, refs, dims in zip(pyr.queries, pyr.refs, pyr.dims):
        qn = layer.norm_self(q)
        f_self = _to_volume(qn, d, dims)
        upd = da3d(qn, refs, f_self, layer.self_off, layer.self_att,
                   layer.self_val, layer.self_out, layer.n_points)
        out.append(ops.add(q, upd))
    return pyr.replace(out)


def film(pyr, t_emb, layer):
    """Y <- Y * (1 + scale(t)) + shift(t), broadcast over queries."""
    out = []
    for i, q in enumerate(pyr.queries):
        scale = layer.film_scale[i](t_emb)  # [1, d]
        shift = layer.film_shift[i](t_emb)
        out.append(ops.add(ops.mul(q, ops.add(scale, 1.0)), shift))
    return pyr.replace(out)


class Decoder(Module):
    """Noise-map pyramid + L refinement layers + merge + occupancy head."""

    def __init__(self, classes, cfg, rng, t_dim=None):
        cfg.validate()
        self.cfg = cfg
        self.classes = classes
        d = cfg.width
        self.t_dim = t_dim or max(d, 8)
        self.down_projs = [Conv3d(classes, d, 1, rng) for _ in range(3)]
        self.layers = [RefineLayer(d, cfg.points, self.t_dim, rng)
                       for _ in range(cfg.layers)]
        self.merge_projs = [Conv3d(d, d, 1, rng) for _ in range(3)]
        self.head_mix = Conv3d(d, d, 3, rng)
        self.head_out = Conv3d(d, classes, 1, rng)
        self.time_embed = TimeEmbed(self.t_dim, rng)
        self.calls = 0  # instrumentation for step-count contracts

    def downsample_noise(self, y_t):
        """Three chained 2x average pools, each projected to query width."""
        x = y_t.values
        if any(n % 8 for n in x.shape[1:]):
            raise ValueError("noise map dims must be divisible by 8, got %s"
                             % (x.shape,))
        queries, refs, dims = [], [], []
        d = self.cfg.width
        for proj in self.down_projs:
            x = ops.avgpool2(x)
            vol = proj(x)
            queries.append(_to_queries(vol))
            refs.append(level_refs(vol.shape[1:]))
            dims.append(vol.shape[1:])
        return QueryPyramid(queries, refs, dims)

    def upsample_merge(self, pyr, full_dims):
        """Back to full resolution: per-level upsample + 1x1x1 proj, summed."""
        d = self.cfg.width
        total = None
        for i, (q, dims) in enumerate(zip(pyr.queries, pyr.dims)):
            vol = _to_volume(q, d, dims)
            if self.cfg.upsample == "nearest":
                for _ in range(i + 1):
                    vol = ops.upsample2(vol)
            else:
                # sample the level volume at full-res voxel centers
                pts = level_refs(full_dims) * np.asarray(dims, dtype=np.float64)
                samp = ops.trilinear_sample(vol, Tensor(pts - 0.5))
                vol = _to_volume(samp, d, full_dims)
            total = self.merge_projs[i](vol) if total is None \
                else ops.add(total, self.merge_projs[i](vol))
        return total

    def occ_head(self, feats):
        return self.head_out(ops.silu(self.head_mix(feats)))

    def refine_once(self, y_t, t, f_m):
        """One denoiser evaluation: (logits, z0_hat)."""
        self.calls += 1
        full_dims = y_t.values.shape[1:]
        pyr = self.downsample_noise(y_t)
        t_emb = embed_time(t, self.time_embed)
        for layer in self.layers:
            pyr = dca3d(pyr, f_m, layer)
            pyr = dsa3d(pyr, layer)
            pyr = film(pyr, t_emb, layer)
        logits = self.occ_head(self.upsample_merge(pyr, full_dims))
        s = y_t.scale
        z0 = ops.mul(ops.sub(ops.mul(ops.softmax(logits, axis=0), 2.0), 1.0), s)
        return logits, AnalogMap(z0, s)


def uncertainty(prev, cur):
    """Binary per-voxel disagreement map between consecutive predictions."""
    if prev.dims != cur.dims:
        raise ValueError("grid dims disagree: %s vs %s" % (prev.dims, cur.dims))
    diff = (prev.labels != cur.labels).astype(np.uint8)
    return diff, int(diff.sum())


def progressive_infer(denoise, f_m, sampler_cfg, sched, rng, like, scale):
    """Run the reverse process, recording a grid per step.

    denoise(y_t, t, f_m) -> (logits, z0_hat) is the trained model (or a
    test oracle). Returns (grids, uncertainty (map, count) pairs).
    """
    c = like.classes
    shape = (c,) + tuple(like.dims)
    y = AnalogMap(Tensor(rng.standard_normal(shape)), scale)
    pairs = time_pairs(sampler_cfg, sched.T)
    grids, uncs = [], []
    for i, (t_now, t_next) in enumerate(pairs):
        logits, z0 = denoise(y, t_now, f_m)
        grid = decode_occupancy(logits, like=like)
        if grids:
            uncs.append(uncertainty(grids[-1], grid))
        grids.append(grid)
        if i + 1 < len(pairs):
            if sampler_cfg.strategy == "ddpm":
                y = _ddpm_to(y, z0, t_now, t_next, sched, rng)
            else:
                y = ddim_step(y, z0, t_now, t_next, sched)
    return grids, uncs


def _ddpm_to(z_t, z0_hat, t_now, t_next, sched, rng):
    """Respaced ancestral step t_now -> t_next (ddpm_step generalized to
    a coarser time grid; identical posterior when t_next = t_now - 1)."""
    a_now = sched.alpha_bars[t_now]
    a_next = sched.alpha_bars[t_next]
    beta = 1.0 - a_now / a_next
    s = z0_hat.scale
    z0 = np.clip(z0_hat.values.data, -s, s)
    z = z_t.values.data
    mean = (np.sqrt(a_next) * beta / (1.0 - a_now) * z0
            + np.sqrt(1.0 - beta) * (1.0 - a_next) / (1.0 - a_now) * z)
    if t_next > 0:
        var = (1.0 - a_next) / (1.0 - a_now) * beta
        mean = mean + np.sqrt(var) * rng.standard_normal(z.shape)
    return AnalogMap(Tensor(mean), z_t.scale)
