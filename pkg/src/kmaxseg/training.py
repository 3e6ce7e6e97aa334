"""Set-prediction training: matching, losses, optimizer, loop.

Ground-truth segments are matched one-to-one to predicted masks by
minimum-cost bipartite assignment on a similarity of class confidence times
mask Dice. A single matching, computed on the final prediction, supervises
the final output and every auxiliary decoder output:

* mask-quality term per matched pair: class cross-entropy plus (1 - Dice);
  unmatched queries are pushed to the void class at a reduced weight,
* mask-id cross-entropy: each supervised pixel's mask distribution against
  the query matched to its ground-truth segment,
* a semantic cross-entropy on the stride-4 semantic head (final output only).

All mask losses are computed at stride 4; coarser auxiliary logits are
upsampled by nearest neighbor first.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import Config
from .data import SyntheticDataset, SceneSpec, augment_flip
from .errors import ContractError, ShapeError
from .model import KMaxModel
from .panoptic import PanopticMap, PredictionSet
from .tensor import (Tensor, cross_entropy_from_logits, div, mul, reduce_sum,
                     reshape, scale, softmax, take, upsample2x_nearest)

DICE_EPS = 1e-6


@dataclass
class Matching:
    """Injective ground-truth-segment -> query assignment."""

    gt_to_query: np.ndarray  # (K,) query index per ground-truth segment
    num_queries: int

    def __post_init__(self):
        self.gt_to_query = np.asarray(self.gt_to_query, dtype=np.int64)
        if len(set(self.gt_to_query.tolist())) != self.gt_to_query.size:
            raise ContractError("matching must be injective")

    @property
    def num_matched(self):
        return int(self.gt_to_query.size)

    def unmatched_queries(self):
        mask = np.ones(self.num_queries, dtype=bool)
        mask[self.gt_to_query] = False
        return np.nonzero(mask)[0]


def hungarian_match(cost):
    """Minimum-total-cost assignment of K rows to K of N columns (K <= N)."""
    c = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeError(f"cost must be 2-D, got shape {c.shape}")
    k, n = c.shape
    if k > n:
        raise ValueError(f"cannot match {k} segments to only {n} queries")
    if k and not np.all(np.isfinite(c)):
        raise ValueError("matching costs must be finite")
    if k == 0:
        return Matching(np.zeros(0, dtype=np.int64), n)
    rows, cols = linear_sum_assignment(c)
    order = np.argsort(rows)
    return Matching(cols[order], n)


def _gt_arrays(gt, num_classes):
    """Segment masks and class ids at the supervision resolution."""
    segs = gt.segments()
    masks = np.stack([s.mask.reshape(-1) for s in segs], axis=1).astype(np.float64) \
        if segs else np.zeros((gt.height * gt.width, 0))
    class_ids = np.array([s.class_id for s in segs], dtype=np.int64)
    if class_ids.size and class_ids.max() >= num_classes:
        raise ShapeError(
            f"ground truth class {class_ids.max()} exceeds {num_classes} classes"
        )
    return masks, class_ids


def matching_cost(pred, gt):
    """(K, N) matching cost: negative class confidence times mask Dice."""
    masks, class_ids = _gt_arrays(gt, pred.num_classes)
    z = pred.mask_probs()
    class_probs = pred.class_probs()
    inter = masks.T @ z                                  # (K, N)
    denom = masks.sum(axis=0)[:, None] + z.sum(axis=0)[None, :]
    dice = 2.0 * inter / (denom + DICE_EPS)
    confidence = class_probs[:, class_ids].T             # (K, N)
    return Tensor(-confidence * dice)


def _upsample_logits(aux, target_stride_hw):
    """Nearest-upsample (HW, N) stage logits to the supervision resolution."""
    logits, h, w = aux.mask_logits, aux.height, aux.width
    n = logits.data.shape[1]
    target_h, target_w = target_stride_hw
    while (h, w) != (target_h, target_w):
        logits = reshape(upsample2x_nearest(reshape(logits, (h, w, n))),
                         ((h * 2) * (w * 2), n))
        h, w = h * 2, w * 2
        if h > target_h:
            raise ShapeError(f"stage logits {aux.height}x{aux.width} exceed "
                             f"supervision grid {target_h}x{target_w}")
    return logits


def _output_terms(mask_logits, class_logits, masks, class_ids, matching, weights):
    """Mask-quality and mask-id terms for one output (final or auxiliary)."""
    n = class_logits.data.shape[0]
    k = matching.num_matched
    void_id = class_logits.data.shape[1] - 1
    norm = max(k, 1) if weights.pq_norm == "K" else n

    targets = np.full(n, void_id, dtype=np.int64)
    targets[matching.gt_to_query] = class_ids
    ce_rows = cross_entropy_from_logits(class_logits, targets, reduction="none")

    pq = Tensor(0.0)
    if k:
        matched_ce = reduce_sum(take(ce_rows, matching.gt_to_query, axis=0))
        z = softmax(mask_logits, axis=1)
        zm = take(z, matching.gt_to_query, axis=1)       # (HW, K)
        inter = reduce_sum(mul(zm, Tensor(masks)), axis=0)
        denom = reduce_sum(zm, axis=0) + Tensor(masks.sum(axis=0) + DICE_EPS)
        dice = scale(div(inter, denom), 2.0)
        one_minus_dice = reduce_sum(Tensor(np.ones(k)) - dice)
        pq = pq + scale(matched_ce + one_minus_dice, 1.0 / norm)
    unmatched = matching.unmatched_queries()
    if unmatched.size:
        void_ce = reduce_sum(take(ce_rows, unmatched, axis=0))
        pq = pq + scale(void_ce, weights.w_void / unmatched.size)

    # mask-id cross-entropy over pixels covered by a ground-truth segment
    hw = mask_logits.data.shape[0]
    qid = np.full(hw, -1, dtype=np.int64)
    for i in range(k):
        qid[masks[:, i] > 0] = matching.gt_to_query[i]
    supervised = qid >= 0
    if supervised.all():
        maskid = cross_entropy_from_logits(mask_logits, qid, reduction="mean")
    elif supervised.any():
        rows = np.nonzero(supervised)[0]
        maskid = cross_entropy_from_logits(
            take(mask_logits, rows, axis=0), qid[rows], reduction="mean")
    else:
        maskid = Tensor(0.0)
    return pq, maskid


@dataclass
class LossWeights:
    w_pq: float = 3.0
    w_sem: float = 1.0
    w_maskid: float = 0.3
    w_void: float = 0.1
    w_aux: float = 1.0
    pq_norm: str = "K"

    @staticmethod
    def from_config(train_cfg):
        return LossWeights(train_cfg.w_pq, train_cfg.w_sem, train_cfg.w_maskid,
                           train_cfg.w_void, train_cfg.w_aux, train_cfg.pq_norm)


def total_loss(final, aux, sem_logits, gt, weights, matching, return_parts=False):
    """Weighted training loss for one image.

    ``matching`` must be the assignment computed on ``final``; it is reused
    for every auxiliary output. ``gt`` is the ground truth already at the
    supervision resolution of ``final``.
    """
    if matching is None:
        raise ContractError("total_loss requires the matching computed on the final prediction")
    masks, class_ids = _gt_arrays(gt, final.num_classes)
    if masks.shape[0] != final.mask_logits.data.shape[0]:
        raise ShapeError(
            f"ground truth grid {gt.height}x{gt.width} does not match the "
            f"{final.height}x{final.width} prediction"
        )

    l_pq, l_maskid = _output_terms(final.mask_logits, final.class_logits,
                                   masks, class_ids, matching, weights)
    total = scale(l_pq, weights.w_pq) + scale(l_maskid, weights.w_maskid)
    pq_sum, maskid_sum = l_pq.item(), l_maskid.item()
    for a in aux:
        up = _upsample_logits(a, (final.height, final.width))
        a_pq, a_maskid = _output_terms(up, a.class_logits, masks, class_ids,
                                       matching, weights)
        total = total + scale(
            scale(a_pq, weights.w_pq) + scale(a_maskid, weights.w_maskid),
            weights.w_aux)
        pq_sum += a_pq.item()
        maskid_sum += a_maskid.item()

    flat_classes = gt.class_map.reshape(-1)
    labeled = flat_classes >= 0
    if labeled.all():
        l_sem = cross_entropy_from_logits(sem_logits, flat_classes, reduction="mean")
    elif labeled.any():
        rows = np.nonzero(labeled)[0]
        l_sem = cross_entropy_from_logits(take(sem_logits, rows, axis=0),
                                          flat_classes[rows], reduction="mean")
    else:
        l_sem = Tensor(0.0)
    total = total + scale(l_sem, weights.w_sem)

    if return_parts:
        return total, {"l_pq": pq_sum, "l_sem": l_sem.item(), "l_maskid": maskid_sum}
    return total


class AdamW:
    """Decoupled-weight-decay Adam over the model's named parameters."""

    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.05):
        self.items = [(t, decay) for _, t, decay in named_params]
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(t.data) for t, _ in self.items]
        self.v = [np.zeros_like(t.data) for t, _ in self.items]
        self.t = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for (p, decay), m, v in zip(self.items, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if decay and self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update


def warmup_lr(step, total_steps, base_lr, warmup_frac):
    """Linear warm-up from zero, then constant."""
    warmup_steps = max(1, int(round(total_steps * warmup_frac)))
    return base_lr * min(1.0, (step + 1) / warmup_steps)


METRICS_HEADER = "step,loss,l_pq,l_sem,l_maskid,val_pq"


@dataclass
class TrainResult:
    model: KMaxModel
    rows: list
    final_val_pq: float
    seconds: float = 0.0


def scene_spec_from_config(cfg):
    return SceneSpec(
        seed=cfg.data.seed,
        height=cfg.model.image_size,
        width=cfg.model.image_size,
        min_shapes=cfg.data.min_shapes,
        max_shapes=cfg.data.max_shapes,
        color_jitter=cfg.data.color_jitter,
        min_segment_px=cfg.data.min_segment_px,
        separate_background_classes=cfg.data.separate_background_classes,
    )


def train_loop(cfg: Config, dataset=None, seed=None, checkpoint_path=None,
               metrics_path=None):
    """Train a model per ``cfg``; returns the model and the metrics rows.

    Fully deterministic for a fixed (config, seed): data order, flips and
    query dropping all derive from one seed sequence.
    """
    from .checkpoint import save_checkpoint
    from .metrics import evaluate_model

    cfg.validate()
    tc = cfg.train
    seed = tc.seed if seed is None else seed
    if dataset is None:
        dataset = SyntheticDataset(scene_spec_from_config(cfg), tc.train_size,
                                   tc.val_size, threads=cfg.data.threads)
    table = dataset.class_table
    if table.num_classes != cfg.model.num_classes:
        raise ContractError(
            f"dataset has {table.num_classes} classes but the model expects "
            f"{cfg.model.num_classes}"
        )
    surviving = cfg.model.num_queries
    if cfg.model.drop_query:
        surviving -= cfg.model.num_queries // 2
    max_segments = cfg.data.max_shapes + len(table.stuff_ids)
    if surviving < max_segments:
        raise ContractError(
            f"{surviving} (surviving) queries cannot cover up to "
            f"{max_segments} ground-truth segments"
        )

    ss = np.random.SeedSequence(seed)
    s_model, s_order, s_aug, s_drop = ss.spawn(4)
    model = KMaxModel(cfg.model, seed=s_model)
    opt = AdamW(model.named_parameters(), lr=tc.lr, beta1=tc.beta1,
                beta2=tc.beta2, eps=tc.eps, weight_decay=tc.weight_decay)
    order_rng = np.random.default_rng(s_order)
    aug_rng = np.random.default_rng(s_aug)
    drop_rng = np.random.default_rng(s_drop)
    weights = LossWeights.from_config(tc)

    rows = [METRICS_HEADER]
    order = None
    val_pq = float("nan")
    started = time.time()
    n_train = len(dataset.train)
    for step in range(tc.steps):
        if step % n_train == 0:
            order = order_rng.permutation(n_train)
        img, gt = dataset.train[order[step % n_train]]
        img, gt = augment_flip(img, gt, aug_rng, prob=tc.flip_prob)

        model.zero_grad()
        pred, aux, sem = model.forward(img, train_mode=True, rng=drop_rng)
        if not tc.aux_supervision:
            aux = []
        gt4 = gt.downsample(cfg.model.image_size // pred.height)
        matching = hungarian_match(matching_cost(pred, gt4))
        loss, parts = total_loss(pred, aux, sem, gt4, weights, matching,
                                 return_parts=True)
        loss.backward()
        opt.step(warmup_lr(step, tc.steps, tc.lr, tc.warmup_frac))

        is_eval = (step + 1) % tc.eval_interval == 0 or step + 1 == tc.steps
        if is_eval:
            val_pq = evaluate_model(model, dataset.val, cfg.infer, table)["pq"]
        rows.append(
            f"{step},{loss.item()!r},{parts['l_pq']!r},{parts['l_sem']!r},"
            f"{parts['l_maskid']!r},{val_pq!r}" if is_eval else
            f"{step},{loss.item()!r},{parts['l_pq']!r},{parts['l_sem']!r},"
            f"{parts['l_maskid']!r},"
        )

    if metrics_path is not None:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(rows) + "\n")
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
    return TrainResult(model, rows, val_pq, time.time() - started)
