"""Pixel-cluster interaction kernels.

Three interchangeable mechanisms update a set of cluster centers (object
queries) from pixel features:

* ``cross_attention_softmax`` - affinities are normalized with a softmax over
  the pixel axis and used as soft aggregation weights.
* ``cross_attention_kmeans``  - each pixel is hard-assigned to its best
  cluster (argmax over the cluster axis) and assigned pixel values are
  aggregated per cluster. The assignment is detached; gradients reach the
  query/key projections only through losses attached to the returned
  affinity logits.
* ``kmeans_step`` / ``lloyd_kmeans`` - the classic parameter-free clustering
  update, kept as a reference the hard-attention kernel can be checked
  against.

Feed-forward layers and normalization are deliberately absent here; they
belong to the decoder block that wraps these kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, argmax_onehot, matmul, mul, softmax

__all__ = [
    "PixelFeatures",
    "ProjectionWeights",
    "cross_attention_softmax",
    "cross_attention_kmeans",
    "self_attention",
    "kmeans_step",
    "lloyd_kmeans",
]


@dataclass
class PixelFeatures:
    """Flattened (H*W, D) pixel features plus their spatial extent."""

    values: Tensor
    height: int
    width: int

    def __post_init__(self):
        hw = self.values.data.shape[0]
        if hw != self.height * self.width:
            raise ShapeError(
                f"{hw} feature rows do not match {self.height}x{self.width}"
            )


@dataclass
class ProjectionWeights:
    """Query/key/value projections shared by the attention kernels."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    bq: Tensor | None = None
    bk: Tensor | None = None
    bv: Tensor | None = None
    heads: int = 1

    @staticmethod
    def identity(d):
        eye = np.eye(d)
        return ProjectionWeights(Tensor(eye), Tensor(eye), Tensor(eye))

    @staticmethod
    def init(rng, d, heads=1, bias=True, requires_grad=True):
        def w():
            return Tensor(rng.normal(0.0, d ** -0.5, (d, d)), requires_grad)

        def b():
            return Tensor(np.zeros(d), requires_grad) if bias else None

        return ProjectionWeights(w(), w(), w(), b(), b(), b(), heads)

    def tensors(self):
        named = [("wq", self.wq), ("wk", self.wk), ("wv", self.wv),
                 ("bq", self.bq), ("bk", self.bk), ("bv", self.bv)]
        return [(n, t) for n, t in named if t is not None]

    def project(self, centers, pixels):
        q = matmul(centers, self.wq)
        if self.bq is not None:
            q = q + self.bq
        k = matmul(pixels, self.wk)
        if self.bk is not None:
            k = k + self.bk
        v = matmul(pixels, self.wv)
        if self.bv is not None:
            v = v + self.bv
        return q, k, v


def _check_dims(centers, pixels, w):
    cd = centers.data.shape[-1]
    pd = pixels.data.shape[-1]
    wd = w.wq.data.shape[0]
    if cd != pd or cd != wd:
        raise ShapeError(
            f"channel mismatch: centers {centers.data.shape}, pixels "
            f"{pixels.data.shape}, projections {w.wq.data.shape}"
        )
    if w.heads < 1 or cd % w.heads:
        raise ShapeError(f"{w.heads} heads do not divide channel width {cd}")


def _head_slices(d, heads):
    step = d // heads
    return [(i * step, (i + 1) * step) for i in range(heads)]


def _run_interaction(q, k, v, kind, heads=1, normalize=False, prev_centers=None,
                     logit_scale=1.0):
    """Affinity logits -> attention map -> per-cluster update.

    ``kind`` is 'softmax' or 'kmeans'. Returns (update, logits, assignment);
    logits are summed over heads when heads > 1, assignment is None for the
    softmax kind. ``prev_centers`` feeds the empty-cluster fallback in
    normalized kmeans aggregation. ``logit_scale`` multiplies the affinity
    logits before the attention map (argmax is invariant to it).
    """
    from .tensor import concat, scale as scale_op, slice_along

    d = q.data.shape[1]
    updates = []
    logits_sum = None
    assignment = None
    for lo, hi in _head_slices(d, heads):
        qh = slice_along(q, 1, lo, hi) if heads > 1 else q
        kh = slice_along(k, 1, lo, hi) if heads > 1 else k
        vh = slice_along(v, 1, lo, hi) if heads > 1 else v
        logits = matmul(qh, kh.T)
        if logit_scale != 1.0:
            logits = scale_op(logits, logit_scale)
        if kind == "softmax":
            attn = softmax(logits, axis=1)
            updates.append(matmul(attn, vh))
        elif kind == "kmeans":
            a = argmax_onehot(logits)
            if normalize:
                counts = a.data.sum(axis=1, keepdims=True)
                weights = Tensor(a.data / np.maximum(counts, 1.0))
                upd = matmul(weights, vh)
                if prev_centers is not None:
                    # empty clusters fall back to their previous center row
                    empty = (counts[:, 0] == 0).astype(np.float64)[:, None]
                    if empty.any():
                        ph = (slice_along(prev_centers, 1, lo, hi)
                              if heads > 1 else prev_centers)
                        upd = upd + mul(ph, Tensor(empty))
                updates.append(upd)
            else:
                updates.append(matmul(a, vh))
            assignment = a
        else:
            raise ValueError(f"unknown interaction kind {kind!r}")
        logits_sum = logits if logits_sum is None else logits_sum + logits
    update = updates[0] if len(updates) == 1 else concat(updates, axis=1)
    return update, logits_sum, assignment


def cross_attention_softmax(centers, pixels, w, residual=True):
    """Soft cross-attention update of cluster centers.

    Affinities between projected centers and pixels are softmax-normalized
    along the pixel axis, so each center row aggregates a convex combination
    of pixel values. Returns (updated centers, affinity logits).
    """
    pixels = pixels.values if isinstance(pixels, PixelFeatures) else pixels
    _check_dims(centers, pixels, w)
    q, k, v = w.project(centers, pixels)
    update, logits, _ = _run_interaction(q, k, v, "softmax", heads=w.heads)
    out = centers + update if residual else update
    return out, logits


def cross_attention_kmeans(centers, pixels, w, residual=True, normalize=False):
    """Hard-assignment cross-attention update of cluster centers.

    Each pixel is assigned to the cluster with the highest projected
    affinity (ties to the lowest cluster index); assigned pixel values are
    summed per cluster, or averaged when ``normalize`` is set. The returned
    affinity logits are the only differentiable trace of the assignment and
    must be routed into a supervision head by callers, otherwise the
    query/key projections receive no gradient at all.
    """
    pixels = pixels.values if isinstance(pixels, PixelFeatures) else pixels
    _check_dims(centers, pixels, w)
    q, k, v = w.project(centers, pixels)
    update, logits, _ = _run_interaction(
        q, k, v, "kmeans", heads=w.heads, normalize=normalize,
        prev_centers=None if residual else centers,
    )
    out = centers + update if residual else update
    return out, logits


def self_attention(centers, w, residual=True):
    """Standard transformer self-attention over the cluster centers."""
    out, _ = cross_attention_softmax(centers, centers, w, residual=residual)
    return out


def kmeans_step(centers, pixels, normalize=False):
    """One parameter-free clustering update (assign, then aggregate).

    Assignments use raw affinities (centers @ pixels.T). With
    ``normalize=False`` the new center is the plain sum of its assigned
    pixel rows (empty clusters become zero rows); with ``normalize=True`` it
    is their mean (empty clusters keep their previous center). Non-residual
    by construction. Returns (new_centers, assignment).
    """
    pixels = pixels.values if isinstance(pixels, PixelFeatures) else pixels
    if centers.data.shape[-1] != pixels.data.shape[-1]:
        raise ShapeError(
            f"channel mismatch: centers {centers.data.shape} vs pixels "
            f"{pixels.data.shape}"
        )
    logits = matmul(centers, pixels.T)
    assignment = argmax_onehot(logits)
    if not normalize:
        return matmul(assignment, pixels), assignment
    counts = assignment.data.sum(axis=1, keepdims=True)
    weights = Tensor(assignment.data / np.maximum(counts, 1.0))
    new = matmul(weights, pixels)
    empty = (counts[:, 0] == 0).astype(np.float64)[:, None]
    if empty.any():
        new = new + mul(centers, Tensor(empty))
    return new, assignment


def lloyd_kmeans(points, k, max_iters=100, seed=0):
    """Classic Lloyd iteration with Euclidean assignment and mean updates.

    Initial centers are ``k`` distinct points drawn by seeded sampling.
    Stops when labels stop changing or after ``max_iters`` full steps.
    Returns (centers, labels) as plain numpy arrays.
    """
    pts = np.asarray(points.data if isinstance(points, Tensor) else points,
                     dtype=np.float64)
    if pts.ndim != 2:
        raise ShapeError(f"points must be (M, D), got {pts.shape}")
    m = pts.shape[0]
    if k > m:
        raise ValueError(f"k={k} exceeds the number of points ({m})")
    distinct = np.unique(pts, axis=0)
    if k > distinct.shape[0]:
        raise ValueError(f"k={k} exceeds the number of distinct points")
    rng = np.random.default_rng(seed)
    centers = distinct[rng.choice(distinct.shape[0], size=k, replace=False)]

    labels = None
    for _ in range(max_iters):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = pts[labels == j]
            if members.shape[0]:
                centers[j] = members.mean(axis=0)
    return centers, labels
