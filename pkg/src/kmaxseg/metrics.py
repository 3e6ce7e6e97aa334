"""Panoptic post-processing and evaluation metrics.

``merge_masks`` turns a set prediction into a concrete panoptic labeling by
mask-wise merging: keep confident queries, let them compete per pixel on
confidence-weighted mask probability, prune segments that retained too
little of their own binary mask, and finally assign instance ids (fresh per
'thing' segment, shared per 'stuff' class).

``panoptic_quality`` follows the standard definition: segments of equal
class match when IoU exceeds 0.5 (such a match is unique), and
PQ = sum of matched IoUs / (TP + FP/2 + FN/2), averaged over classes that
occur. Void pixels never count against intersection-over-union denominators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .panoptic import VOID, PanopticMap
from .tensor import no_grad

__all__ = ["PanopticResult", "merge_masks", "panoptic_quality", "miou",
           "PQStat", "evaluate_model", "evaluation_report"]


@dataclass
class PanopticResult:
    """Concrete per-pixel panoptic labeling with emitted segment metadata."""

    class_map: np.ndarray     # (H, W), VOID where nothing was kept
    instance_map: np.ndarray  # (H, W), 0 for stuff and void
    segments: list            # (class_id, instance_id, confidence)

    def upscale(self, factor):
        return PanopticResult(
            np.repeat(np.repeat(self.class_map, factor, 0), factor, 1),
            np.repeat(np.repeat(self.instance_map, factor, 0), factor, 1),
            list(self.segments),
        )

    def to_map(self):
        return PanopticMap(self.class_map, self.instance_map)


def merge_masks(pred, conf_thresh=0.3, overlap_thresh=0.8, thing_ids=frozenset(),
                mask_binarize=0.5):
    """Mask-wise merging of a set prediction into a panoptic labeling."""
    if not 0.0 <= conf_thresh <= 1.0 or not 0.0 <= overlap_thresh <= 1.0:
        raise ValueError("thresholds must lie in [0, 1]")
    h, w = pred.height, pred.width
    n = pred.num_queries
    class_probs = pred.class_probs()
    z = pred.mask_probs()

    if n == 0:
        return PanopticResult(np.full((h, w), VOID, dtype=np.int64),
                              np.zeros((h, w), dtype=np.int64), [])

    cls = class_probs[:, :-1].argmax(axis=1)
    conf = class_probs[np.arange(n), cls]
    active = conf >= conf_thresh

    scores = z * conf[None, :]
    binary = z > mask_binarize

    def assign(active_mask):
        if not active_mask.any():
            return None
        masked = np.where(active_mask[None, :], scores, -np.inf)
        return masked.argmax(axis=1)

    assigned = assign(active)
    # prune segments that kept too small a fraction of their binary mask;
    # removing a query only grows the remaining segments, so iterate
    while assigned is not None:
        drop = []
        for q in np.nonzero(active)[0]:
            area = int(binary[:, q].sum())
            won = int(((assigned == q) & binary[:, q]).sum())
            if area == 0 or won / area < overlap_thresh:
                drop.append(q)
        if not drop:
            break
        active[drop] = False
        assigned = assign(active)

    class_map = np.full(h * w, VOID, dtype=np.int64)
    instance_map = np.zeros(h * w, dtype=np.int64)
    segments = []
    if assigned is not None:
        next_instance = 1
        stuff_seen = {}
        for q in np.nonzero(active)[0]:
            pixels = assigned == q
            if not pixels.any():
                continue
            c = int(cls[q])
            class_map[pixels] = c
            if c in thing_ids:
                instance_map[pixels] = next_instance
                segments.append((c, next_instance, float(conf[q])))
                next_instance += 1
            elif c in stuff_seen:
                # duplicate stuff queries of one class merge into one segment
                idx = stuff_seen[c]
                segments[idx] = (c, 0, max(segments[idx][2], float(conf[q])))
            else:
                stuff_seen[c] = len(segments)
                segments.append((c, 0, float(conf[q])))
    return PanopticResult(class_map.reshape(h, w), instance_map.reshape(h, w),
                          segments)


class PQStat:
    """Accumulates panoptic-quality statistics over one or more images."""

    def __init__(self):
        self.iou = {}
        self.tp = {}
        self.fp = {}
        self.fn = {}

    def _bump(self, store, cls, amount=1):
        store[cls] = store.get(cls, 0) + amount

    def update(self, pred, gt, thing_ids=frozenset()):
        pred_map = pred.to_map() if isinstance(pred, PanopticResult) else pred
        if pred_map.class_map.shape != gt.class_map.shape:
            raise ShapeError(
                f"prediction grid {pred_map.class_map.shape} does not match "
                f"ground truth {gt.class_map.shape}"
            )
        gt_segments = gt.segments()
        pred_segments = pred_map.segments()
        void_mask = gt.class_map == VOID

        gt_matched = set()
        pred_matched = set()
        for i, gseg in enumerate(gt_segments):
            g_area = int(gseg.mask.sum())
            for j, pseg in enumerate(pred_segments):
                if pseg.class_id != gseg.class_id or j in pred_matched:
                    continue
                inter = int((gseg.mask & pseg.mask).sum())
                if inter == 0:
                    continue
                p_area = int(pseg.mask.sum())
                p_void = int((pseg.mask & void_mask).sum())
                union = g_area + p_area - inter - p_void
                iou = inter / union if union > 0 else 0.0
                if iou > 0.5:
                    self._bump(self.tp, gseg.class_id)
                    self._bump(self.iou, gseg.class_id, iou)
                    gt_matched.add(i)
                    pred_matched.add(j)
                    break
        for i, gseg in enumerate(gt_segments):
            if i not in gt_matched:
                self._bump(self.fn, gseg.class_id)
        for j, pseg in enumerate(pred_segments):
            if j in pred_matched:
                continue
            p_area = int(pseg.mask.sum())
            p_void = int((pseg.mask & void_mask).sum())
            if p_area and p_void / p_area > 0.5:
                continue  # mostly-void predictions are not false positives
            self._bump(self.fp, pseg.class_id)
        return self

    def summarize(self, thing_ids=frozenset()):
        classes = sorted(set(self.iou) | set(self.tp) | set(self.fp) | set(self.fn))
        per_class = {}
        for cls in classes:
            tp = self.tp.get(cls, 0)
            fp = self.fp.get(cls, 0)
            fn = self.fn.get(cls, 0)
            denom = tp + 0.5 * fp + 0.5 * fn
            per_class[cls] = {
                "pq": self.iou.get(cls, 0.0) / denom if denom else 0.0,
                "iou_sum": self.iou.get(cls, 0.0),
                "tp": tp, "fp": fp, "fn": fn,
            }

        def average(ids):
            vals = [per_class[c]["pq"] for c in ids]
            return float(np.mean(vals)) if vals else 0.0

        things = [c for c in classes if c in thing_ids]
        stuff = [c for c in classes if c not in thing_ids]
        return {
            "pq": average(classes),
            "pq_things": average(things),
            "pq_stuff": average(stuff),
            "per_class": per_class,
        }


def panoptic_quality(pred, gt, thing_ids=frozenset()):
    """Single-image PQ with PQ over thing and stuff classes split out."""
    return PQStat().update(pred, gt, thing_ids).summarize(thing_ids)


def miou(pred, gt):
    """Class-wise IoU of the semantic maps, averaged over classes in gt."""
    pred_map = pred.to_map() if isinstance(pred, PanopticResult) else pred
    if pred_map.class_map.shape != gt.class_map.shape:
        raise ShapeError(
            f"prediction grid {pred_map.class_map.shape} does not match "
            f"ground truth {gt.class_map.shape}"
        )
    classes = sorted(int(c) for c in np.unique(gt.class_map) if c != VOID)
    if not classes:
        return 0.0
    ious = []
    for cls in classes:
        p = pred_map.class_map == cls
        g = gt.class_map == cls
        union = (p | g).sum()
        ious.append((p & g).sum() / union if union else 0.0)
    return float(np.mean(ious))


def evaluate_model(model, examples, infer_cfg, class_table):
    """Aggregate PQ and mIoU of a model over (image, ground truth) pairs."""
    stat = PQStat()
    inter = {}
    union = {}
    thing_ids = class_table.thing_ids
    for img, gt in examples:
        with no_grad():
            pred, _, _ = model.forward(img, train_mode=False)
        merged = merge_masks(pred, conf_thresh=infer_cfg.conf_thresh,
                             overlap_thresh=infer_cfg.overlap_thresh,
                             thing_ids=thing_ids,
                             mask_binarize=infer_cfg.mask_binarize)
        full = merged.upscale(gt.height // pred.height)
        stat.update(full, gt, thing_ids)
        for cls in range(class_table.num_classes):
            p = full.class_map == cls
            g = gt.class_map == cls
            inter[cls] = inter.get(cls, 0) + int((p & g).sum())
            union[cls] = union.get(cls, 0) + int((p | g).sum())
    result = stat.summarize(thing_ids)
    present = [c for c in union if union[c]]
    result["miou"] = float(np.mean([inter[c] / union[c] for c in present])) if present else 0.0
    return result


def evaluation_report(result, class_table):
    """Fixed-order plain-text report of an evaluation result."""
    lines = [
        f"overall pq {result['pq']:.6f}",
        f"overall pq_things {result['pq_things']:.6f}",
        f"overall pq_stuff {result['pq_stuff']:.6f}",
        f"overall miou {result.get('miou', 0.0):.6f}",
    ]
    for cls in sorted(result["per_class"]):
        row = result["per_class"][cls]
        name = class_table.names[cls] if cls < len(class_table.names) else str(cls)
        lines.append(
            f"class {cls} {name} pq {row['pq']:.6f} iou_sum {row['iou_sum']:.6f} "
            f"tp {row['tp']} fp {row['fp']} fn {row['fn']}"
        )
    return "\n".join(lines)
