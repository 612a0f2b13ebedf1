"""Loss terms vs brute-force oracles; IoU/mIoU vs counting oracles."""
import numpy as np
import pytest

from voxdiff.numerics import NonFiniteError, Tensor, ops
from voxdiff.objective import (ce_loss, confusion, depth_loss, iou,
                               lovasz_softmax, miou, scal_loss, total_loss)
from voxdiff.occupancy import SemanticGrid, gen_scene, SceneParams

SMALL = SceneParams(dims=(16, 16, 8), classes=4, objects=3, views=2,
                    view_hw=(12, 16), d_bins=8, lidar_rays=256)


def grid_of(labels, classes):
    return SemanticGrid(np.asarray(labels, dtype=np.uint8), classes, 0.25)


def softmax_np(z, axis=0):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class TestCe:
    def test_uniform_logits_give_log_c(self):
        gt = grid_of(np.random.default_rng(0).integers(0, 4, (4, 4, 4)), 4)
        logits = Tensor(np.zeros((4, 4, 4, 4)))
        np.testing.assert_allclose(ce_loss(logits, gt).item(), np.log(4),
                                   atol=1e-12)

    def test_saturated_correct_logits_vanish(self):
        rng = np.random.default_rng(1)
        gt = grid_of(rng.integers(0, 3, (4, 4, 4)), 3)
        onehot = (gt.labels[None] == np.arange(3)[:, None, None, None])
        logits = Tensor(60.0 * onehot.astype(np.float64))
        assert ce_loss(logits, gt).item() < 1e-10

    def test_hand_oracle(self):
        gt = grid_of([[[0]], [[1]]], 2)   # two voxels, classes 0 and 1
        z = np.array([[[[1.0]], [[0.5]]], [[[-0.3]], [[2.0]]]])
        logits = Tensor(z)
        p = softmax_np(z.reshape(2, 2), axis=0)
        want = -(np.log(p[0, 0]) + np.log(p[1, 1])) / 2.0
        np.testing.assert_allclose(ce_loss(logits, gt).item(), want,
                                   atol=1e-12)

    def test_shape_mismatch(self):
        gt = grid_of(np.zeros((2, 2, 2)), 2)
        with pytest.raises(ValueError):
            ce_loss(Tensor(np.zeros((2, 3, 2, 2))), gt)


def lovasz_oracle_binary(p_fg, fg):
    """Lovasz extension for one class from first principles."""
    errors = np.where(fg > 0, 1.0 - p_fg, p_fg)
    perm = np.argsort(-errors, kind="stable")
    fg_s = fg[perm]
    gts = fg_s.sum()
    inter = gts - np.cumsum(fg_s)
    union = gts + np.cumsum(1.0 - fg_s)
    jacc = 1.0 - inter / union
    grad = np.concatenate([jacc[:1], np.diff(jacc)])
    return (errors[perm] * grad).sum()


class TestLovasz:
    def test_perfect_prediction_is_zero(self):
        rng = np.random.default_rng(2)
        gt = grid_of(rng.integers(0, 3, (4, 4, 4)), 3)
        onehot = (gt.labels[None] == np.arange(3)[:, None, None, None])
        probs = Tensor(onehot.astype(np.float64))
        assert abs(lovasz_softmax(probs, gt).item()) < 1e-12

    def test_single_wrong_voxel_binary(self):
        # one confidently wrong voxel out of 8: per-class Jaccard errors
        # are exactly 1/|union| summed by the extension
        gt = grid_of(np.zeros((2, 2, 2)), 2)
        probs = np.zeros((2, 2, 2, 2))
        probs[0] = 1.0
        probs[0, 0, 0, 0], probs[1, 0, 0, 0] = 0.0, 1.0
        got = lovasz_softmax(Tensor(probs), gt).item()
        # only class 0 is present in gt; its error vector has one 1.0
        want = lovasz_oracle_binary(probs[0].reshape(-1),
                                    np.ones(8))
        np.testing.assert_allclose(got, want, atol=1e-12)
        np.testing.assert_allclose(got, 1.0 / 8.0, atol=1e-12)

    def test_matches_extension_oracle_two_class(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            labels = rng.integers(0, 2, size=512)
            gt = grid_of(labels.reshape(8, 8, 8), 2)
            p1 = rng.uniform(size=512)
            probs = np.stack([1.0 - p1, p1]).reshape(2, 8, 8, 8)
            want = np.mean([lovasz_oracle_binary(
                probs.reshape(2, -1)[cls], (labels == cls).astype(float))
                for cls in np.unique(labels)])
            got = lovasz_softmax(Tensor(probs), gt).item()
            np.testing.assert_allclose(got, want, atol=1e-10)


def scal_oracle(probs, labels, mode):
    """Soft precision/recall/specificity from explicit counting."""

    def one(p, m):
        out = 0.0
        tp = (p * m).sum()
        if p.sum() > 0:
            out -= np.log(tp / p.sum())
        if m.sum() > 0:
            out -= np.log(tp / m.sum())
        if (1 - m).sum() > 0:
            out -= np.log(((1 - p) * (1 - m)).sum() / (1 - m).sum())
        return out

    if mode == "geometric":
        return one(1.0 - probs[0], (labels > 0).astype(float))
    vals = [one(probs[cls], (labels == cls).astype(float))
            for cls in np.unique(labels)]
    return np.mean(vals)


class TestScal:
    def test_perfect_hard_prediction_is_zero(self):
        rng = np.random.default_rng(4)
        gt = grid_of(rng.integers(0, 3, (4, 4, 4)), 3)
        onehot = (gt.labels[None] == np.arange(3)[:, None, None, None])
        probs = Tensor(onehot.astype(np.float64))
        for mode in ("geometric", "semantic"):
            assert abs(scal_loss(probs, gt, mode).item()) < 1e-12

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            labels = rng.integers(0, 3, size=(4, 4, 4))
            gt = grid_of(labels, 3)
            z = rng.normal(size=(3, 4, 4, 4))
            probs = softmax_np(z)
            for mode in ("geometric", "semantic"):
                got = scal_loss(Tensor(probs), gt, mode).item()
                want = scal_oracle(probs.reshape(3, -1), labels.reshape(-1),
                                   mode)
                np.testing.assert_allclose(got, want, atol=1e-11)

    def test_bad_mode(self):
        gt = grid_of(np.zeros((2, 2, 2)), 2)
        with pytest.raises(ValueError):
            scal_loss(Tensor(np.full((2, 2, 2, 2), 0.5)), gt, "metric")


class TestDepth:
    def test_uniform_gives_log_bins(self):
        bins = np.random.default_rng(6).integers(0, 8, size=(4, 5))
        logits = Tensor(np.zeros((8, 4, 5)))
        np.testing.assert_allclose(depth_loss(logits, bins).item(), np.log(8),
                                   atol=1e-12)

    def test_hand_oracle(self):
        bins = np.array([[1], [0]])
        z = np.array([[[2.0], [0.0]], [[1.0], [-1.0]]])
        p = softmax_np(z.reshape(2, 2), axis=0)
        want = -(np.log(p[1, 0]) + np.log(p[0, 1])) / 2.0
        np.testing.assert_allclose(depth_loss(Tensor(z), bins).item(), want,
                                   atol=1e-12)


class TestTotal:
    def _setup(self, seed=7):
        rng = np.random.default_rng(seed)
        scene = gen_scene(0, SMALL)
        logits = Tensor(rng.normal(size=(4,) + SMALL.dims))
        dls = [Tensor(rng.normal(size=(SMALL.d_bins, 12, 16)))
               for _ in scene.views]
        return scene, logits, dls

    def test_total_is_sum_of_parts(self):
        scene, logits, dls = self._setup()
        rep = total_loss(logits, scene.grid, dls, scene.views)
        parts = rep.floats()
        want = (parts["ce"] + parts["lovasz"] + parts["scal_geo"]
                + parts["scal_sem"] + parts["depth"])
        np.testing.assert_allclose(parts["total"], want, atol=1e-12)

    def test_weights_scale_terms(self):
        scene, logits, dls = self._setup()
        rep = total_loss(logits, scene.grid, dls, scene.views,
                         weights={"ce": 2.0, "depth": 0.0})
        parts = rep.floats()
        want = (2.0 * parts["ce"] + parts["lovasz"] + parts["scal_geo"]
                + parts["scal_sem"])
        np.testing.assert_allclose(parts["total"], want, atol=1e-12)

    def test_nonfinite_term_is_annotated(self):
        scene, logits, dls = self._setup()
        logits.data[0, 0, 0, 0] = np.nan
        with np.errstate(all="ignore"):
            with pytest.raises(NonFiniteError):
                total_loss(logits, scene.grid, dls, scene.views)

    def test_depth_averaged_over_views(self):
        scene, logits, dls = self._setup()
        rep = total_loss(logits, scene.grid, dls, scene.views)
        want = np.mean([depth_loss(dl, v.depth_bins).item()
                        for dl, v in zip(dls, scene.views)])
        np.testing.assert_allclose(rep.floats()["depth"], want, atol=1e-12)


def confusion_oracle(pred, gt, classes):
    tp = np.zeros(classes, dtype=int)
    fp = np.zeros(classes, dtype=int)
    fn = np.zeros(classes, dtype=int)
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        if p == g:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    return tp, fp, fn


class TestMetrics:
    def test_confusion_matches_loop_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            a = rng.integers(0, 4, size=(8, 8, 8)).astype(np.uint8)
            b = rng.integers(0, 4, size=(8, 8, 8)).astype(np.uint8)
            stats = confusion(grid_of(a, 4), grid_of(b, 4))
            tp, fp, fn = confusion_oracle(a, b, 4)
            np.testing.assert_array_equal(stats.tp, tp)
            np.testing.assert_array_equal(stats.fp, fp)
            np.testing.assert_array_equal(stats.fn, fn)

    def test_iou_hand_case(self):
        a = np.zeros((2, 2, 2), dtype=np.uint8)
        b = np.zeros((2, 2, 2), dtype=np.uint8)
        a[0, 0, 0] = 1
        a[0, 0, 1] = 2
        b[0, 0, 0] = 2
        b[1, 1, 1] = 1
        # occupied: pred {000, 001}, gt {000, 111}: |I| = 1, |U| = 3
        np.testing.assert_allclose(iou(grid_of(a, 3), grid_of(b, 3)), 1 / 3)

    def test_iou_both_empty(self):
        g = grid_of(np.zeros((2, 2, 2)), 2)
        assert iou(g, g) == 1.0

    def test_miou_skips_absent_classes(self):
        a = np.zeros((2, 2, 2), dtype=np.uint8)
        b = np.zeros((2, 2, 2), dtype=np.uint8)
        a[0, 0, 0] = 1
        b[0, 0, 0] = 1
        b[0, 1, 0] = 1
        # class 1: tp=1, fn=1 -> 0.5; classes 2.. absent -> skipped
        np.testing.assert_allclose(miou(grid_of(a, 4), grid_of(b, 4)), 0.5)

    def test_miou_no_semantic_classes(self):
        g = grid_of(np.zeros((2, 2, 2)), 3)
        assert miou(g, g) == 1.0

    def test_metric_dim_mismatch(self):
        a = grid_of(np.zeros((2, 2, 2)), 2)
        b = grid_of(np.zeros((2, 2, 4)), 2)
        with pytest.raises(ValueError):
            iou(a, b)
        with pytest.raises(ValueError):
            confusion(a, b)

    def test_miou_matches_confusion_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            a = rng.integers(0, 4, size=(8, 8, 8)).astype(np.uint8)
            b = rng.integers(0, 4, size=(8, 8, 8)).astype(np.uint8)
            tp, fp, fn = confusion_oracle(a, b, 4)
            vals = [tp[c] / (tp[c] + fp[c] + fn[c]) for c in range(1, 4)
                    if tp[c] + fp[c] + fn[c] > 0]
            want = np.mean(vals) if vals else 1.0
            np.testing.assert_allclose(miou(grid_of(a, 4), grid_of(b, 4)),
                                       want, atol=1e-12)
