"""Loss terms (unit-weight sum) and IoU/mIoU evaluation metrics."""
from dataclasses import dataclass

import numpy as np

from .numerics import NonFiniteError, Tensor, ops


@dataclass
class LossReport:
    ce: Tensor
    lovasz: Tensor
    scal_geo: Tensor
    scal_sem: Tensor
    depth: Tensor
    total: Tensor

    def floats(self):
        return {k: float(getattr(self, k).item())
                for k in ("ce", "lovasz", "scal_geo", "scal_sem", "depth", "total")}


@dataclass
class ConfusionStats:
    tp: np.ndarray  # per class
    fp: np.ndarray
    fn: np.ndarray


def _flat_labels(gt):
    return (gt.labels if hasattr(gt, "labels") else np.asarray(gt)).reshape(-1)


def ce_loss(logits, gt):
    """Mean over voxels of -log softmax at the true class."""
    c = logits.shape[0]
    labels = _flat_labels(gt)
    if labels.size != logits.size // c:
        raise ValueError("logits %s do not match %d voxels"
                         % (logits.shape, labels.size))
    logp = ops.log_softmax(ops.reshape(logits, (c, -1)), axis=0)
    onehot = (labels[None] == np.arange(c)[:, None]).astype(np.float64)
    return ops.neg(ops.tsum(ops.mul(logp, onehot))) / labels.size


def lovasz_softmax(probs, gt):
    """Lovasz extension of the per-class Jaccard loss, averaged over the
    classes present in the ground truth.

    For class c the error vector is 1 - p_c on class voxels and p_c
    elsewhere; sorted descending it is dotted with the extension
    gradient of the sorted indicator.
    """
    c = probs.shape[0]
    labels = _flat_labels(gt)
    p = ops.reshape(probs, (c, -1))
    terms = []
    for cls in np.unique(labels):
        fg = (labels == cls).astype(np.float64)
        pc = ops.take(p, np.array([cls]), axis=0).reshape((-1,))
        errors = ops.add(ops.mul(pc, 1.0 - 2.0 * fg), fg)  # fg ? 1-p : p
        perm = np.argsort(-errors.data, kind="stable")
        fg_sorted = fg[perm]
        gts = fg_sorted.sum()
        inter = gts - np.cumsum(fg_sorted)
        union = gts + np.cumsum(1.0 - fg_sorted)
        jacc = 1.0 - inter / union
        grad = np.concatenate([jacc[:1], np.diff(jacc)])
        terms.append(ops.tsum(ops.mul(ops.take(errors, perm), grad)))
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total / len(terms)


def _scal_class(pc, mask):
    """-[log precision + log recall + log specificity] with soft counts;
    terms with zero denominators are skipped."""
    pred_sum = ops.tsum(pc)  # depends on the prediction, keeps its gradient
    gt_pos = float(mask.sum())
    gt_neg = float((1.0 - mask).sum())
    tp = ops.tsum(ops.mul(pc, mask))
    parts = []
    if pred_sum.item() > 0:
        parts.append(ops.log(ops.div(tp, pred_sum)))
    if gt_pos > 0:
        parts.append(ops.log(tp / gt_pos))
    if gt_neg > 0:
        tn = ops.tsum(ops.mul(ops.sub(1.0, pc), 1.0 - mask))
        parts.append(ops.log(tn / gt_neg))
    if not parts:
        return None
    total = parts[0]
    for t in parts[1:]:
        total = ops.add(total, t)
    return ops.neg(total)


def scal_loss(probs, gt, mode):
    """Soft precision/recall/specificity log-loss.

    geometric: classes collapsed to occupied-vs-empty; semantic: one term
    per class present in the ground truth, averaged.
    """
    c = probs.shape[0]
    labels = _flat_labels(gt)
    p = ops.reshape(probs, (c, -1))
    if mode == "geometric":
        p_occ = ops.sub(1.0, ops.take(p, np.array([0]), axis=0).reshape((-1,)))
        term = _scal_class(p_occ, (labels > 0).astype(np.float64))
        return term if term is not None else Tensor(0.0)
    if mode != "semantic":
        raise ValueError("mode must be geometric or semantic")
    terms = []
    for cls in np.unique(labels):
        pc = ops.take(p, np.array([cls]), axis=0).reshape((-1,))
        term = _scal_class(pc, (labels == cls).astype(np.float64))
        if term is not None:
            terms.append(term)
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total / len(terms)


def depth_loss(pred_logits, gt_bins):
    """Mean per-pixel cross-entropy between soft depth and the true bin."""
    d = pred_logits.shape[0]
    bins = np.asarray(gt_bins).reshape(-1)
    logp = ops.log_softmax(ops.reshape(pred_logits, (d, -1)), axis=0)
    onehot = (bins[None] == np.arange(d)[:, None]).astype(np.float64)
    return ops.neg(ops.tsum(ops.mul(logp, onehot))) / bins.size


def _named(name, fn):
    try:
        return fn()
    except NonFiniteError as e:
        raise NonFiniteError("%s term is non-finite (%s)" % (name, e))


def total_loss(logits, gt, depth_logits, views, weights=None):
    """Unit-weight sum of the five terms (weights overridable)."""
    w = {"ce": 1.0, "lovasz": 1.0, "scal_geo": 1.0, "scal_sem": 1.0,
         "depth": 1.0}
    if weights:
        w.update(weights)
    probs = ops.softmax(logits, axis=0)
    ce = _named("ce", lambda: ce_loss(logits, gt))
    lov = _named("lovasz", lambda: lovasz_softmax(probs, gt))
    sg = _named("scal_geo", lambda: scal_loss(probs, gt, "geometric"))
    ss = _named("scal_sem", lambda: scal_loss(probs, gt, "semantic"))

    def depth_all():
        dep = None
        for dl, view in zip(depth_logits, views):
            term = depth_loss(dl, view.depth_bins)
            dep = term if dep is None else ops.add(dep, term)
        return dep / len(views) if dep is not None else Tensor(0.0)

    dep = _named("depth", depth_all)
    total = (ce * w["ce"] + lov * w["lovasz"] + sg * w["scal_geo"]
             + ss * w["scal_sem"] + dep * w["depth"])
    return LossReport(ce, lov, sg, ss, dep, total)


def confusion(pred, gt):
    """Per-class TP/FP/FN voxel counts."""
    if pred.dims != gt.dims:
        raise ValueError("grid dims disagree: %s vs %s" % (pred.dims, gt.dims))
    c = max(pred.classes, gt.classes)
    pl = pred.labels.reshape(-1).astype(np.int64)
    gl = gt.labels.reshape(-1).astype(np.int64)
    tp = np.bincount(gl[pl == gl], minlength=c)
    pred_count = np.bincount(pl, minlength=c)
    gt_count = np.bincount(gl, minlength=c)
    return ConfusionStats(tp, pred_count - tp, gt_count - tp)


def iou(pred, gt):
    """Binary occupied-voxel IoU; 1.0 when both sides are empty."""
    if pred.dims != gt.dims:
        raise ValueError("grid dims disagree: %s vs %s" % (pred.dims, gt.dims))
    po = pred.labels > 0
    go = gt.labels > 0
    union = np.logical_or(po, go).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(po, go).sum() / union)


def miou(pred, gt):
    """Mean per-class IoU over semantic classes (1..C-1) present in
    either grid; 1.0 if no semantic class appears anywhere."""
    stats = confusion(pred, gt)
    vals = []
    for cls in range(1, len(stats.tp)):
        denom = stats.tp[cls] + stats.fp[cls] + stats.fn[cls]
        if denom == 0:
            continue  # class absent from both grids
        vals.append(stats.tp[cls] / denom)
    if not vals:
        return 1.0
    return float(np.mean(vals))
