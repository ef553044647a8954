"""Segmentation losses, relevance supervision and IoU metrics.

Losses act at superpoint level on the final response map; metrics act at
point level after mask expansion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, absolute, as_tensor, clip, log, tensor_mean, tensor_sum
from .scene import expand_mask, pool_gt_mask

CLAMP = 1e-7
DICE_SMOOTH = 1e-6


@dataclass
class LossWeights:
    bce: float = 1.0
    dice: float = 1.0
    rel: float = 5.0
    score: float = 0.5


@dataclass
class GroundTruth:
    point_mask: np.ndarray         # (N_p,) binary
    superpoint_mask: np.ndarray    # (N_s,) binary, pooled at 0.5
    relevance_labels: np.ndarray   # (N_s,) binary
    word_targets: list = None      # per (ROOT + token) row: (N_s,) mask or None

    @classmethod
    def build(cls, scene, partition, target_instance, mentioned_categories,
              category_ids, expr_tokens=None, color_names=()):
        """Assemble targets for one expression.

        A superpoint is relevance-positive when its majority category is one
        the expression mentions.  When the expression tokens are given, each
        color or category word also gets its own aligned superpoint mask
        (the cells of objects carrying that attribute) and ROOT gets the
        target mask; these drive the optional per-round auxiliary losses.
        """
        point_mask = (scene.instance_id == target_instance).astype(np.float64)
        superpoint_mask = pool_gt_mask(point_mask, partition)
        mentioned_ids = {category_ids[c] for c in mentioned_categories}

        majority_inst = np.zeros(partition.count, dtype=np.int64)
        majority_cat = np.zeros(partition.count, dtype=np.int64)
        for i, cell in enumerate(partition.cells):
            insts, counts = np.unique(scene.instance_id[cell],
                                      return_counts=True)
            majority_inst[i] = int(insts[np.argmax(counts)])
            cats, counts = np.unique(scene.category_id[cell],
                                     return_counts=True)
            majority_cat[i] = int(cats[np.argmax(counts)])
        labels = np.isin(majority_cat, sorted(mentioned_ids)).astype(np.float64)

        word_targets = None
        if expr_tokens is not None:
            color_of = {o["instance"]: o["color"] for o in scene.objects}
            cell_color = np.array(
                [color_of.get(int(inst), "") for inst in majority_inst])
            word_targets = [superpoint_mask]  # ROOT row tracks the target
            for tok in expr_tokens:
                if tok in category_ids:
                    word_targets.append(
                        (majority_cat == category_ids[tok]).astype(np.float64))
                elif tok in color_names:
                    word_targets.append((cell_color == tok).astype(np.float64))
                else:
                    word_targets.append(None)
        return cls(point_mask=point_mask, superpoint_mask=superpoint_mask,
                   relevance_labels=labels, word_targets=word_targets)


def _bce(pred, target):
    p = clip(pred, CLAMP, 1.0 - CLAMP)
    t = np.asarray(target, dtype=np.float64)
    return -tensor_mean(t * log(p) + (1.0 - t) * log(1.0 - p))


def bce_loss(pred_map, superpoint_mask):
    """Mean binary cross-entropy over superpoints."""
    if pred_map.data.shape[0] != np.asarray(superpoint_mask).shape[0]:
        raise ValueError("prediction and mask lengths differ")
    return _bce(pred_map, superpoint_mask)


def dice_loss(pred_map, superpoint_mask):
    """1 - 2|M∩Y| / (|M|+|Y|), smoothed so both-empty gives exactly zero."""
    t = np.asarray(superpoint_mask, dtype=np.float64)
    if pred_map.data.shape[0] != t.shape[0]:
        raise ValueError("prediction and mask lengths differ")
    pred = as_tensor(pred_map)
    inter = tensor_sum(pred * t)
    total = tensor_sum(pred) + float(t.sum())
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH)


def rel_loss(relevance_scores, labels, n_words):
    """BCE on the relevance mass, normalized by word count into (0, 1)."""
    labels = np.asarray(labels, dtype=np.float64)
    if relevance_scores.data.shape[0] != labels.shape[0]:
        raise ValueError("relevance scores and labels lengths differ")
    p = relevance_scores * (1.0 / float(n_words))
    return _bce(p, labels)


def score_loss(quality_score, iou):
    """|s - iou| gated on IoU strictly above one half."""
    if iou <= 0.5:
        return Tensor(0.0)
    return absolute(quality_score - float(iou)).reshape(())


def total_loss(components, weights):
    """Weighted sum of the four loss components."""
    return (weights.bce * components["bce"]
            + weights.dice * components["dice"]
            + weights.rel * components["rel"]
            + weights.score * components["score"])


def mask_iou(a, b):
    """Point-level IoU of two binary masks; both empty counts as 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def compute_losses(output, gt, weights, n_words, partition):
    """All four components plus the weighted total for one expression.

    The score target is the point-level IoU of the binarized prediction, a
    constant w.r.t. the tape.
    """
    components = {
        "bce": bce_loss(output.final_map, gt.superpoint_mask),
        "dice": dice_loss(output.final_map, gt.superpoint_mask),
        "rel": rel_loss(output.relevance_scores, gt.relevance_labels, n_words),
    }
    pred_points = expand_mask(
        (output.final_map.data >= 0.5).astype(np.float64), partition)
    iou = mask_iou(pred_points, gt.point_mask)
    components["score"] = score_loss(output.quality_score, iou)
    total = total_loss(components, weights)
    return components, total, iou
