"""Shared panoptic domain types.

Ground truth and predictions both describe an image as a set of
non-overlapping class-labeled masks. Per-pixel maps are the storage format;
segment lists are derived views. The class id ``-1`` marks void (unlabeled)
pixels in per-pixel maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

VOID = -1


@dataclass(frozen=True)
class Segment:
    class_id: int
    instance_id: int
    mask: np.ndarray  # (H, W) bool


class PanopticMap:
    """Per-pixel (class id, instance id) labeling of one image."""

    def __init__(self, class_map, instance_map):
        self.class_map = np.asarray(class_map, dtype=np.int64)
        self.instance_map = np.asarray(instance_map, dtype=np.int64)
        if self.class_map.shape != self.instance_map.shape or self.class_map.ndim != 2:
            raise ShapeError(
                f"class map {self.class_map.shape} and instance map "
                f"{self.instance_map.shape} must be equal 2-D grids"
            )

    @property
    def height(self):
        return self.class_map.shape[0]

    @property
    def width(self):
        return self.class_map.shape[1]

    def segments(self):
        """Non-void segments in canonical (class id, instance id) order."""
        keys = np.stack([self.class_map.reshape(-1), self.instance_map.reshape(-1)])
        uniq = np.unique(keys, axis=1).T
        out = []
        for cls, inst in uniq:
            if cls == VOID:
                continue
            mask = (self.class_map == cls) & (self.instance_map == inst)
            out.append(Segment(int(cls), int(inst), mask))
        return out

    def downsample(self, stride):
        """Nearest-sample every ``stride``-th pixel (window centers)."""
        off = stride // 2
        return PanopticMap(
            self.class_map[off::stride, off::stride],
            self.instance_map[off::stride, off::stride],
        )

    def flip_horizontal(self):
        return PanopticMap(self.class_map[:, ::-1].copy(),
                           self.instance_map[:, ::-1].copy())


def _softmax_np(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class PredictionSet:
    """N mask logits over pixels plus per-mask class logits.

    ``mask_logits`` is (H*W, N) at the prediction stride; ``class_logits`` is
    (N, num_classes + 1) with the void class in the last column. Probability
    views are computed on demand and detached from the graph.
    """

    mask_logits: Tensor
    class_logits: Tensor
    height: int
    width: int

    def __post_init__(self):
        hw, n = self.mask_logits.data.shape
        if hw != self.height * self.width:
            raise ShapeError(
                f"{hw} mask rows do not match {self.height}x{self.width}"
            )
        if self.class_logits.data.shape[0] != n:
            raise ShapeError(
                f"{n} masks but {self.class_logits.data.shape[0]} class rows"
            )

    @property
    def num_queries(self):
        return self.mask_logits.data.shape[1]

    @property
    def num_classes(self):
        return self.class_logits.data.shape[1] - 1

    def mask_probs(self):
        """Per-pixel softmax over the N masks; rows sum to one."""
        return _softmax_np(self.mask_logits.data, axis=1)

    def class_probs(self):
        """Per-mask class distribution including the void class."""
        return _softmax_np(self.class_logits.data, axis=1)
