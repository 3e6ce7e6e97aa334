"""Rendering of per-stage pixel-cluster assignments and panoptic results.

Cluster colors are a deterministic function of the cluster index (golden
angle hue walk), so two renderings of the same model state are identical.
Stage maps show which cluster each pixel's features were assigned to at
that decoder stage; the final image colors the merged panoptic prediction.
"""

from __future__ import annotations

import colorsys
import os

import numpy as np

from .metrics import merge_masks
from .panoptic import VOID
from .ppm import write_ppm
from .tensor import no_grad

_GOLDEN_ANGLE = 0.6180339887498949


def cluster_color(index):
    """Deterministic distinct-ish RGB color for a cluster or instance index."""
    hue = (index * _GOLDEN_ANGLE) % 1.0
    sat = 0.55 + 0.35 * ((index * 7919) % 3) / 2.0
    val = 0.95 - 0.25 * ((index * 104729) % 2)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val))


def assignment_image(affinity, height, width, upscale=1):
    """Color the per-pixel argmax cluster of an (N, HW) affinity matrix."""
    labels = np.asarray(affinity).argmax(axis=0).reshape(height, width)
    img = np.zeros((height, width, 3))
    for cluster in np.unique(labels):
        img[labels == cluster] = cluster_color(int(cluster))
    if upscale > 1:
        img = np.repeat(np.repeat(img, upscale, 0), upscale, 1)
    return img


def panoptic_image(result):
    """Color a panoptic labeling; things vary by instance, stuff by class."""
    h, w = result.class_map.shape
    img = np.zeros((h, w, 3))
    for cls, inst, _ in result.segments:
        sel = (result.class_map == cls) & (result.instance_map == inst)
        img[sel] = cluster_color(cls * 31 + inst)
    img[result.class_map == VOID] = 0.0
    return img


def render_stages(model, image, infer_cfg, thing_ids, out_dir):
    """Write one assignment PPM per decoder stage plus the final panoptic map.

    Returns the list of written paths (stage images in order, final last).
    """
    os.makedirs(out_dir, exist_ok=True)
    with no_grad():
        pred, aux, _ = model.forward(image, train_mode=False)
    side = image.shape[0]
    paths = []
    for a in aux:
        img = assignment_image(a.affinity, a.height, a.width,
                               upscale=side // a.height)
        path = os.path.join(out_dir, f"stage_{a.source:02d}.ppm")
        write_ppm(path, img)
        paths.append(path)
    merged = merge_masks(pred, conf_thresh=infer_cfg.conf_thresh,
                         overlap_thresh=infer_cfg.overlap_thresh,
                         thing_ids=thing_ids,
                         mask_binarize=infer_cfg.mask_binarize)
    final = panoptic_image(merged.upscale(side // pred.height))
    final_path = os.path.join(out_dir, "final_panoptic.ppm")
    write_ppm(final_path, final)
    paths.append(final_path)
    return paths
