"""Central finite-difference verification for every differentiable op."""
from dataclasses import dataclass

import numpy as np

from .layers import Linear
from .numerics import Tensor, Tape, ops
from .objective import ce_loss, depth_loss, lovasz_softmax, scal_loss
from .occupancy import SemanticGrid
from .rand import rng_for
from .refine import (Decoder, DecoderConfig, QueryPyramid, da3d, dca3d,
                     dsa3d, film, level_refs)
from .geometry import FusionVolume

EPS = 1e-6
TIGHT = 1e-4   # elementwise / conv / softmax
LOOSE = 1e-3   # composite blocks and losses
COORDS = 4     # FD probes per leaf tensor


@dataclass
class CheckResult:
    name: str
    worst_rel: float
    tol: float

    @property
    def passed(self):
        return self.worst_rel < self.tol


def _randomize(module, rng, scale=0.1):
    """Overwrite every parameter (including zero-inits) so gradients are
    non-trivial at the probe point."""
    for p in module.params().values():
        p.data = scale * rng.normal(size=p.data.shape)


def _grid(rng, c, dims):
    return SemanticGrid(rng.integers(0, c, dims).astype(np.uint8), c, 1.0,
                        np.zeros(3, np.float32))


def _away_from_kinks(pts, margin=1e-4):
    """True when no trilinear sample position sits on a lattice plane."""
    frac = pts - np.round(pts)
    return np.abs(frac).min() > margin


def _lovasz_gap_ok(probs, labels, margin=1e-4):
    """True when every per-class sorted error vector has distinct entries,
    so the FD step cannot cross a sorting kink."""
    p = probs.reshape(probs.shape[0], -1)
    for cls in np.unique(labels):
        fg = (labels.reshape(-1) == cls).astype(float)
        errs = np.sort(np.where(fg == 1, 1 - p[cls], p[cls]))
        if errs.size > 1 and np.diff(errs).min() < margin:
            return False
    return True


def _tiny_pyramid(rng, d, draw):
    dims = [(4, 4, 4), (2, 2, 2), (1, 1, 1)]
    queries = [Tensor(draw(rng, (int(np.prod(dm)), d)), requires_grad=True)
               for dm in dims]
    refs = [level_refs(dm) for dm in dims]
    return QueryPyramid(queries, refs, dims)


def _check_silu(rng):
    x = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
    return [x], lambda: ops.tsum(ops.mul(ops.silu(x), ops.sigmoid(x)))


def _check_matmul(rng):
    a = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    b = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    w = rng.normal(size=(4, 3))
    return [a, b], lambda: ops.tsum(ops.mul(ops.matmul(a, b), w))


def _check_softmax(rng):
    x = Tensor(rng.normal(size=(5, 11)), requires_grad=True)
    w = rng.normal(size=(5, 11))
    return [x], lambda: ops.tsum(ops.mul(ops.softmax(x, axis=0), w))


def _check_log_softmax(rng):
    x = Tensor(rng.normal(size=(6, 9)), requires_grad=True)
    w = rng.normal(size=(6, 9))
    return [x], lambda: ops.tsum(ops.mul(ops.log_softmax(x, axis=1), w))


def _check_conv3d(rng):
    x = Tensor(rng.normal(size=(3, 5, 4, 4)), requires_grad=True)
    w = Tensor(0.3 * rng.normal(size=(2, 3, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2,)), requires_grad=True)
    mix = rng.normal(size=(2, 3, 2, 2))
    fn = lambda: ops.tsum(ops.mul(ops.conv3d(x, w, b, stride=2, pad=1), mix))
    return [x, w, b], fn


def _check_trilinear(rng):
    f = Tensor(rng.normal(size=(3, 5, 5, 5)), requires_grad=True)
    while True:
        raw = rng.uniform(-0.6, 4.6, size=(20, 3))
        if _away_from_kinks(raw):
            break
    pts = Tensor(raw, requires_grad=True)
    w = rng.normal(size=(20, 3))
    return [f, pts], lambda: ops.tsum(ops.mul(ops.trilinear_sample(f, pts), w))


def _check_da3d(rng):
    d, n, v = 4, 2, 8
    f = Tensor(rng.normal(size=(d, 4, 4, 4)), requires_grad=True)
    refs = level_refs((2, 2, 2))
    projs = [Linear(d, n * 3, rng), Linear(d, n, rng), Linear(d, d, rng),
             Linear(d, d, rng)]
    for p in projs:
        _randomize(p, rng, 0.3)
    while True:
        q = Tensor(rng.normal(size=(v, d)), requires_grad=True)
        off = ops.reshape(projs[0](q), (v, n, 3))
        pos = (refs.reshape(v, 1, 3) + off.data) * 4.0 - 0.5
        if _away_from_kinks(pos):
            break
    leaves = [q, f] + [t for p in projs for t in p.params().values()]
    fn = lambda: ops.tsum(da3d(q, refs, f, projs[0], projs[1], projs[2],
                               projs[3], n))
    return leaves, fn


def _make_layer(rng, d=4, n=2, t_dim=4):
    from .refine import RefineLayer
    layer = RefineLayer(d, n, t_dim, rng)
    _randomize(layer, rng, 0.1)
    return layer


def _check_dca3d(rng):
    d = 4
    layer = _make_layer(rng)
    pyr = _tiny_pyramid(rng, d, lambda r, s: 0.5 * r.normal(size=s))
    f_m = FusionVolume([Tensor(rng.normal(size=(d,) + dm), requires_grad=True)
                        for dm in [(4, 4, 4), (2, 2, 2), (1, 1, 1)]])
    leaves = list(pyr.queries) + list(f_m.levels) \
        + list(layer.params().values())
    fn = lambda: sum_pyr(dca3d(pyr, f_m, layer))
    return leaves, fn


def _check_dsa3d(rng):
    layer = _make_layer(rng)
    pyr = _tiny_pyramid(rng, 4, lambda r, s: 0.5 * r.normal(size=s))
    leaves = list(pyr.queries) + list(layer.params().values())
    return leaves, lambda: sum_pyr(dsa3d(pyr, layer))


def _check_film(rng):
    layer = _make_layer(rng)
    pyr = _tiny_pyramid(rng, 4, lambda r, s: r.normal(size=s))
    t_emb = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    leaves = list(pyr.queries) + [t_emb] + list(layer.params().values())
    return leaves, lambda: sum_pyr(film(pyr, t_emb, layer))


def _check_occ_head(rng):
    dec = Decoder(3, DecoderConfig(layers=1, points=2, width=4), rng)
    _randomize(dec.head_mix, rng, 0.2)
    _randomize(dec.head_out, rng, 0.2)
    f = Tensor(rng.normal(size=(4, 4, 4, 4)), requires_grad=True)
    w = rng.normal(size=(3, 4, 4, 4))
    leaves = [f] + list(dec.head_mix.params().values()) \
        + list(dec.head_out.params().values())
    return leaves, lambda: ops.tsum(ops.mul(dec.occ_head(f), w))


def _loss_inputs(rng, kink_free=False):
    c, dims = 4, (4, 4, 4)
    grid = _grid(rng, c, dims)
    while True:
        x = Tensor(rng.normal(size=(c,) + dims), requires_grad=True)
        if not kink_free:
            return x, grid
        probs = ops.softmax(x, axis=0)
        if _lovasz_gap_ok(probs.data, grid.labels):
            return x, grid


def _check_ce(rng):
    x, grid = _loss_inputs(rng)
    return [x], lambda: ce_loss(x, grid)


def _check_lovasz(rng):
    x, grid = _loss_inputs(rng, kink_free=True)
    return [x], lambda: lovasz_softmax(ops.softmax(x, axis=0), grid)


def _check_scal_geo(rng):
    x, grid = _loss_inputs(rng)
    return [x], lambda: scal_loss(ops.softmax(x, axis=0), grid, "geometric")


def _check_scal_sem(rng):
    x, grid = _loss_inputs(rng)
    return [x], lambda: scal_loss(ops.softmax(x, axis=0), grid, "semantic")


def _check_depth(rng):
    d, hw = 6, (3, 4)
    bins = rng.integers(0, d, hw).astype(np.uint16)
    x = Tensor(rng.normal(size=(d,) + hw), requires_grad=True)
    return [x], lambda: depth_loss(x, bins)


def sum_pyr(pyr):
    total = None
    for q in pyr.queries:
        t = ops.tsum(q)
        total = t if total is None else ops.add(total, t)
    return total


CHECKS = [
    ("silu", TIGHT, _check_silu),
    ("matmul", TIGHT, _check_matmul),
    ("softmax", TIGHT, _check_softmax),
    ("log_softmax", TIGHT, _check_log_softmax),
    ("conv3d", TIGHT, _check_conv3d),
    ("trilinear_sample", TIGHT, _check_trilinear),
    ("da3d", LOOSE, _check_da3d),
    ("dca3d", LOOSE, _check_dca3d),
    ("dsa3d", LOOSE, _check_dsa3d),
    ("film", LOOSE, _check_film),
    ("occ_head", LOOSE, _check_occ_head),
    ("ce_loss", LOOSE, _check_ce),
    ("lovasz_softmax", LOOSE, _check_lovasz),
    ("scal_geometric", LOOSE, _check_scal_geo),
    ("scal_semantic", LOOSE, _check_scal_sem),
    ("depth_loss", LOOSE, _check_depth),
]


def run_check(name, tol, builder, seed=0, perturb=None):
    rng = rng_for(seed, "gradcheck", name)
    leaves, fn = builder(rng)
    for leaf in leaves:
        leaf.grad = None
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    worst = 0.0
    for leaf in leaves:
        # absent grad is a claim of zero; FD disproves it if wrong
        an = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.copy()
        if perturb == name:
            an.reshape(-1)[0] += 0.05
        flat_idx = rng.permutation(leaf.size)[:COORDS]
        for fi in flat_idx:
            idx = np.unravel_index(fi, leaf.shape)
            keep = leaf.data[idx]
            leaf.data = leaf.data.copy()
            leaf.data[idx] = keep + EPS
            up = fn().item()
            leaf.data = leaf.data.copy()
            leaf.data[idx] = keep - EPS
            dn = fn().item()
            leaf.data = leaf.data.copy()
            leaf.data[idx] = keep
            fd = (up - dn) / (2 * EPS)
            rel = abs(fd - an[idx]) / max(1.0, abs(fd), abs(an[idx]))
            worst = max(worst, rel)
    return CheckResult(name, worst, tol)


def run_all(seed=0, perturb=None):
    return [run_check(name, tol, builder, seed, perturb)
            for name, tol, builder in CHECKS]
