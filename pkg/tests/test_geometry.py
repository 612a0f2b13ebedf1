"""Conditional encoder: depth sampling, lifting, mask, fusion, backbone."""
import numpy as np
import pytest

from voxdiff import kernels
from voxdiff.geometry import (AdaptiveFuse, Backbone, Encoder, LidarStream,
                              apply_mask, geometry_mask, gumbel_noise,
                              hard_gumbel_onehot, lift_splat)
from voxdiff.layers import Conv3d
from voxdiff.numerics import Tape, Tensor, ops
from voxdiff.occupancy import (CameraView, SceneParams, SemanticGrid,
                               camera_rays, depth_bin_centers, gen_scene)

SMALL = SceneParams(dims=(16, 16, 8), classes=4, objects=3, views=2,
                    view_hw=(12, 16), d_bins=8, lidar_rays=256)


class TestGumbel:
    def test_argmax_invariant_to_tau(self):
        logits = Tensor(np.array([3.0, 1.0, 0.0]).reshape(3, 1))
        for tau in (0.1, 1.0, 7.0):
            out = hard_gumbel_onehot(logits, tau, g=np.zeros((3, 1)))
            np.testing.assert_array_equal(out.data[:, 0], [1.0, 0.0, 0.0])

    def test_always_valid_onehot(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.normal(size=(8, 6, 5)))
        out = hard_gumbel_onehot(logits, 1.0,
                                 g=gumbel_noise(rng, (8, 6, 5))).data
        assert set(np.unique(out)) <= {0.0, 1.0}
        np.testing.assert_array_equal(out.sum(axis=0), 1.0)

    def test_selection_frequencies_match_softmax(self):
        # Gumbel-max property: P(argmax(z + g) = i) = softmax(z)_i
        rng = np.random.default_rng(1)
        z = np.array([1.0, 0.0, -0.5, 2.0])
        p = np.exp(z) / np.exp(z).sum()
        n = 10 ** 4
        logits = Tensor(np.broadcast_to(z[:, None], (4, n)).copy())
        out = hard_gumbel_onehot(logits, 1.0, g=gumbel_noise(rng, (4, n))).data
        counts = out.sum(axis=1)
        sigma = np.sqrt(n * p * (1 - p))
        assert (np.abs(counts - n * p) <= 3 * sigma).all()

    def test_straight_through_matches_soft_finite_differences(self):
        rng = np.random.default_rng(2)
        z = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
        g = gumbel_noise(rng, (3, 2, 2))
        r = rng.normal(size=(3, 2, 2))
        tau = 0.7
        with Tape() as tape:
            y = hard_gumbel_onehot(z, tau, g=g)
            tape.backward(ops.tsum(ops.mul(y, Tensor(r))))
        an = z.grad

        def soft(vals):
            e = np.exp((vals + g) / tau)
            return ((e / e.sum(axis=0, keepdims=True)) * r).sum()

        eps = 1e-6
        for idx in np.ndindex(z.shape):
            base = z.data.copy()
            base[idx] += eps
            up = soft(base)
            base[idx] -= 2 * eps
            dn = soft(base)
            fd = (up - dn) / (2 * eps)
            assert abs(fd - an[idx]) < 1e-4 * max(1.0, abs(fd))

    def test_eval_mode_ignores_noise(self):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.normal(size=(4, 3)))
        a = hard_gumbel_onehot(logits, 1.0, g=gumbel_noise(rng, (4, 3)),
                               train=False)
        b = hard_gumbel_onehot(logits, 1.0, g=None, train=True)
        np.testing.assert_array_equal(a.data, b.data)

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            hard_gumbel_onehot(Tensor(np.zeros((2, 1))), 0.0)


class TestLidarStream:
    def test_zero_input_zero_output(self):
        stream = LidarStream(4, np.random.default_rng(0))
        out = stream(Tensor(np.zeros((2, 8, 8, 8))))
        assert out.shape == (4, 8, 8, 8)
        assert (out.data == 0).all()

    def test_gradient_through_stream(self):
        rng = np.random.default_rng(1)
        stream = LidarStream(3, rng)
        x = Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
        r = Tensor(rng.normal(size=(3, 4, 4, 4)))

        def loss():
            return ops.tsum(ops.mul(stream(x), r))

        x.grad = None
        with Tape() as tape:
            tape.backward(loss())
        an = x.grad
        eps = 1e-6
        for fi in rng.permutation(x.size)[:6]:
            idx = np.unravel_index(fi, x.shape)
            keep = x.data[idx]
            x.data = x.data.copy()
            x.data[idx] = keep + eps
            up = loss().item()
            x.data = x.data.copy()
            x.data[idx] = keep - eps
            dn = loss().item()
            x.data = x.data.copy()
            x.data[idx] = keep
            fd = (up - dn) / (2 * eps)
            assert abs(fd - an[idx]) < 1e-4 * max(1.0, abs(fd))


def splat_oracle(view, choice, grid, range_limit):
    """Scatter each pixel's features by explicit pinhole projection."""
    ci, hc, wc = view.shape
    center, dirs = camera_rays(view.intrinsics, view.extrinsics, (hc, wc))
    dist = depth_bin_centers(view.d_bins, range_limit)
    h, w, z = grid.dims
    out = np.zeros((ci, h, w, z))
    feats = view.features.astype(np.float64).reshape(ci, hc * wc)
    for p in range(hc * wc):
        b = choice[p]
        pt = center + dist[b] * dirs[p]
        i = np.floor((pt - grid.origin.astype(np.float64))
                     / grid.voxel_size).astype(int)
        if (i >= 0).all() and (i < np.array([h, w, z])).all():
            out[:, i[0], i[1], i[2]] += feats[:, p]
    return out


class TestLiftSplat:
    def test_matches_projection_oracle(self):
        rng = np.random.default_rng(4)
        scene = gen_scene(0, SMALL)
        view = scene.views[0]
        _, hc, wc = view.shape
        choice = rng.integers(0, view.d_bins, size=hc * wc)
        onehot = np.zeros((view.d_bins, hc, wc))
        onehot[choice, np.arange(hc * wc) // wc, np.arange(hc * wc) % wc] = 1.0
        out = lift_splat(view, Tensor(onehot), scene.grid, SMALL.range_limit)
        want = splat_oracle(view, choice, scene.grid, SMALL.range_limit)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_conserves_in_bounds_mass(self):
        rng = np.random.default_rng(5)
        scene = gen_scene(1, SMALL)
        view = scene.views[1]
        _, hc, wc = view.shape
        choice = rng.integers(0, view.d_bins, size=hc * wc)
        onehot = np.zeros((view.d_bins, hc, wc))
        onehot[choice, np.arange(hc * wc) // wc, np.arange(hc * wc) % wc] = 1.0
        out = lift_splat(view, Tensor(onehot), scene.grid, SMALL.range_limit)
        want = splat_oracle(view, choice, scene.grid, SMALL.range_limit)
        assert abs(out.data.sum() - want.sum()) < 1e-9

    def test_out_of_grid_mass_drops(self):
        # every bin center on a ray pointing away from the grid is outside
        g = SemanticGrid(np.zeros((8, 8, 8), dtype=np.uint8), 2, 0.25)
        r = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [-1.0, 0.0, 0.0]])
        eye = np.array([-1.0, 1.0, 1.0])  # looking along -x, grid behind
        ext = np.concatenate([r.reshape(-1), -r @ eye]).astype(np.float32)
        view = CameraView((10.0, 10.0, 0.5, 0.5), ext,
                          np.ones((3, 1, 1), dtype=np.float32),
                          np.zeros((1, 1), dtype=np.uint16), 8)
        onehot = np.zeros((8, 1, 1))
        onehot[3, 0, 0] = 1.0
        out = lift_splat(view, Tensor(onehot), g, 12.0)
        assert (out.data == 0).all()


def dilate_oracle(occ):
    """Brute-force 3^3 neighborhood max."""
    h, w, z = occ.shape
    out = np.zeros_like(occ)
    for i in range(h):
        for j in range(w):
            for k in range(z):
                out[i, j, k] = occ[max(0, i - 1):i + 2, max(0, j - 1):j + 2,
                                   max(0, k - 1):k + 2].max()
    return out


class TestGeometryMask:
    def test_empty_occupancy_gives_uniform_columns(self):
        conv = Conv3d(1, 1, 3, np.random.default_rng(0))
        m = geometry_mask(np.zeros((4, 4, 8)), conv, r=2).data
        np.testing.assert_allclose(m, 1.0 / 8.0, atol=1e-12)

    def test_columns_sum_to_one(self):
        rng = np.random.default_rng(6)
        conv = Conv3d(1, 1, 3, rng)
        occ = (rng.uniform(size=(6, 5, 8)) < 0.3).astype(float)
        m = geometry_mask(occ, conv, r=2).data
        np.testing.assert_allclose(m.sum(axis=2), 1.0, atol=1e-9)
        assert (m >= 0).all()

    def test_dilation_matches_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            occ = (rng.uniform(size=(8, 8, 8)) < 0.1).astype(np.float64)
            np.testing.assert_array_equal(kernels.dilate27(occ),
                                          dilate_oracle(occ))

    def test_dilation_grows_monotonically(self):
        rng = np.random.default_rng(8)
        occ = (rng.uniform(size=(8, 8, 8)) < 0.05).astype(np.float64)
        once = kernels.dilate27(occ)
        twice = kernels.dilate27(once)
        assert (occ > 0).sum() <= (once > 0).sum() <= (twice > 0).sum()

    def test_single_voxel_neighborhood(self):
        occ = np.zeros((5, 5, 5))
        occ[2, 2, 2] = 1.0
        out = kernels.dilate27(occ)
        assert (out[1:4, 1:4, 1:4] == 1.0).all()
        assert out.sum() == 27


class TestApplyMask:
    def test_uniform_mask_scales(self):
        rng = np.random.default_rng(9)
        f = Tensor(rng.normal(size=(3, 4, 4, 8)))
        m = Tensor(np.full((4, 4, 8), 1.0 / 8.0))
        np.testing.assert_allclose(apply_mask(f, m).data, f.data / 8.0,
                                   atol=1e-15)

    def test_zero_weight_zeroes_features(self):
        rng = np.random.default_rng(10)
        f = Tensor(rng.normal(size=(2, 3, 3, 4)))
        m = np.ones((3, 3, 4))
        m[1, 2, :] = 0.0
        out = apply_mask(f, Tensor(m)).data
        assert (out[:, 1, 2, :] == 0).all()

    def test_height_sum_is_weighted_average(self):
        rng = np.random.default_rng(11)
        f = Tensor(rng.normal(size=(3, 4, 4, 8)))
        conv = Conv3d(1, 1, 3, rng)
        occ = (rng.uniform(size=(4, 4, 8)) < 0.3).astype(float)
        m = geometry_mask(occ, conv, r=1)
        summed = apply_mask(f, m).data.sum(axis=3)
        want = np.einsum("cxyz,xyz->cxy", f.data, m.data)
        np.testing.assert_allclose(summed, want, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_mask(Tensor(np.zeros((2, 4, 4, 4))),
                       Tensor(np.zeros((4, 4, 2))))


class TestAdaptiveFuse:
    def test_zero_init_gate_averages(self):
        rng = np.random.default_rng(12)
        fuse = AdaptiveFuse(4, rng)
        f_p = Tensor(rng.normal(size=(4, 4, 4, 8)))
        f_c = Tensor(rng.normal(size=(4, 4, 4, 8)))
        out = fuse(f_p, f_c).data
        np.testing.assert_allclose(out, (f_p.data + f_c.data) / 2.0,
                                   atol=1e-12)

    def test_equal_inputs_pass_through(self):
        rng = np.random.default_rng(13)
        fuse = AdaptiveFuse(3, rng)
        fuse.conv_w.w.data = rng.normal(size=fuse.conv_w.w.shape)
        f = Tensor(rng.normal(size=(3, 4, 4, 8)))
        np.testing.assert_allclose(fuse(f, f).data, f.data, atol=1e-12)

    def test_voxelwise_convex_combination(self):
        rng = np.random.default_rng(14)
        fuse = AdaptiveFuse(3, rng)
        fuse.conv_w.w.data = rng.normal(size=fuse.conv_w.w.shape)
        f_p = Tensor(rng.normal(size=(3, 4, 4, 8)))
        f_c = Tensor(rng.normal(size=(3, 4, 4, 8)))
        out = fuse(f_p, f_c).data
        lo = np.minimum(f_p.data, f_c.data)
        hi = np.maximum(f_p.data, f_c.data)
        assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()

    def test_shape_mismatch(self):
        fuse = AdaptiveFuse(2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            fuse(Tensor(np.zeros((2, 4, 4, 4))), Tensor(np.zeros((2, 4, 4, 8))))


class TestBackbone:
    def test_level_shapes(self):
        bb = Backbone(4, 6, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).normal(size=(4, 32, 32, 8)))
        fv = bb(x)
        assert [lv.shape for lv in fv.levels] == [(6, 16, 16, 4), (6, 8, 8, 2),
                                                  (6, 4, 4, 1)]

    def test_rejects_indivisible_dims(self):
        bb = Backbone(2, 4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            bb(Tensor(np.zeros((2, 12, 16, 8))))

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        bb = Backbone(2, 4, rng)
        x = Tensor(rng.normal(size=(2, 8, 8, 8)))
        a = bb(x)
        b = bb(x)
        for la, lb in zip(a.levels, b.levels):
            np.testing.assert_array_equal(la.data, lb.data)


class TestEncoder:
    def test_output_contract(self):
        enc = Encoder(SMALL.classes, np.random.default_rng(0), c_f=4, d=4,
                      d_bins=SMALL.d_bins, range_limit=SMALL.range_limit)
        scene = gen_scene(0, SMALL)
        fv, logits = enc(scene)
        assert len(fv.levels) == 3
        assert [lv.shape for lv in fv.levels] == [(4, 8, 8, 4), (4, 4, 4, 2),
                                                  (4, 2, 2, 1)]
        assert len(logits) == len(scene.views)
        assert logits[0].shape == (SMALL.d_bins, 12, 16)

    def test_call_counter(self):
        enc = Encoder(SMALL.classes, np.random.default_rng(0), c_f=2, d=2,
                      d_bins=SMALL.d_bins, range_limit=SMALL.range_limit)
        scene = gen_scene(1, SMALL)
        assert enc.calls == 0
        enc(scene)
        enc(scene)
        assert enc.calls == 2

    def test_deterministic_eval(self):
        enc = Encoder(SMALL.classes, np.random.default_rng(3), c_f=4, d=4,
                      d_bins=SMALL.d_bins, range_limit=SMALL.range_limit)
        scene = gen_scene(2, SMALL)
        a, _ = enc(scene)
        b, _ = enc(scene)
        for la, lb in zip(a.levels, b.levels):
            np.testing.assert_array_equal(la.data, lb.data)

    def test_train_mode_uses_gumbel_draws(self):
        enc = Encoder(SMALL.classes, np.random.default_rng(4), c_f=4, d=4,
                      d_bins=SMALL.d_bins, range_limit=SMALL.range_limit)
        scene = gen_scene(3, SMALL)
        a, _ = enc(scene, train=True, gumbel_rng=np.random.default_rng(7))
        b, _ = enc(scene, train=True, gumbel_rng=np.random.default_rng(7))
        for la, lb in zip(a.levels, b.levels):
            np.testing.assert_array_equal(la.data, lb.data)
