"""Toy downstream tasks and their metrics.

Each adapter bundles: run (task output), feedback (the signal fed back into
the dehazing loop: output maps for segmentation/depth, backbone features for
detection), a differentiable task loss, and evaluation metrics.  Heads are
pretrained on clear images and frozen afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError


@dataclass
class TaskFeedback:
    kind: str  # "seg" | "depth" | "det"
    payload: torch.Tensor


# ---------------------------------------------------------------------------
# adapters

class SegAdapter(nn.Module):
    """2-class per-pixel segmentation of bright blobs."""

    name = "seg"
    keywords = frozenset({"segment", "segmentation"})
    instruction = "segment the scene"

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(16, 16, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(16, 2, 3, padding=1),
        )

    def run(self, image):
        return self.net(image)

    def feedback(self, image):
        return TaskFeedback("seg", self.run(image))

    def loss(self, pred_logits, gt_labels):
        return F.cross_entropy(pred_logits, gt_labels)

    def ground_truth(self, sample):
        return sample.seg_labels.unsqueeze(0)

    def metric(self, pred_logits, gt_labels):
        return {"miou": miou(pred_logits.argmax(dim=1), gt_labels, 2)}


class DepthAdapter(nn.Module):
    """Dense depth regression; output strictly positive."""

    name = "depth"
    keywords = frozenset({"depth"})
    instruction = "estimate the depth of the scene"

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(16, 16, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(16, 1, 3, padding=1),
        )

    def run(self, image):
        return F.softplus(self.net(image)) + 0.1

    def feedback(self, image):
        return TaskFeedback("depth", self.run(image))

    def loss(self, pred_depth, gt_depth):
        return (pred_depth.squeeze(1) - gt_depth).abs().mean()

    def ground_truth(self, sample):
        return sample.depth.unsqueeze(0)

    def metric(self, pred_depth, gt_depth):
        return depth_metrics(pred_depth.squeeze(1), gt_depth)


class DetAdapter(nn.Module):
    """Single-class dense detection of bright blobs.

    Head predicts, per pixel, an objectness logit and (cx, cy, w, h) offsets
    normalized by image size; feedback is the backbone feature map.
    """

    name = "det"
    keywords = frozenset({"detect", "detection"})
    instruction = "detect objects in the image"
    feature_channels = 16

    def __init__(self):
        super().__init__()
        self.backbone = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(16, self.feature_channels, 3, padding=1),
            nn.GELU(),
        )
        self.head = nn.Conv2d(self.feature_channels, 5, 3, padding=1)

    def run(self, image):
        return self.head(self.backbone(image))

    def feedback(self, image):
        return TaskFeedback("det", self.backbone(image))

    def loss(self, pred, gt):
        obj_logit, offsets = pred[:, 0], pred[:, 1:]
        gt_obj, gt_off = gt[:, 0], gt[:, 1:]
        obj_loss = F.binary_cross_entropy_with_logits(obj_logit, gt_obj)
        pos = gt_obj.unsqueeze(1) > 0.5
        if pos.any():
            box_loss = (offsets - gt_off).abs()[pos.expand_as(offsets)].mean()
        else:
            box_loss = pred.new_zeros(())
        return obj_loss + box_loss

    def ground_truth(self, sample):
        h, w = sample.clear.shape[-2:]
        gt = torch.zeros(1, 5, h, w)
        ys = torch.arange(h).float().view(h, 1)
        xs = torch.arange(w).float().view(1, w)
        scale = float(max(h, w))
        for (bx, by, bw, bh) in sample.boxes:
            y0, y1 = int(by), min(h, int(by + bh))
            x0, x1 = int(bx), min(w, int(bx + bw))
            gt[0, 0, y0:y1, x0:x1] = 1.0
            cx, cy = bx + bw / 2.0, by + bh / 2.0
            gt[0, 1, y0:y1, x0:x1] = (cx - xs[:, x0:x1]) / scale
            gt[0, 2, y0:y1, x0:x1] = (cy - ys[y0:y1]) / scale
            gt[0, 3, y0:y1, x0:x1] = bw / scale
            gt[0, 4, y0:y1, x0:x1] = bh / scale
        return gt

    def decode_boxes(self, pred, threshold=0.5, max_boxes=16, nms_iou=0.5):
        """Greedy peak picking on the objectness map -> (x, y, w, h, score)."""
        obj = torch.sigmoid(pred[0, 0])
        h, w = obj.shape
        scale = float(max(h, w))
        flat = obj.flatten()
        order = torch.argsort(flat, descending=True)
        boxes = []
        for idx in order.tolist():
            score = float(flat[idx])
            if score < threshold or len(boxes) >= max_boxes:
                break
            y, x = divmod(idx, w)
            dx, dy, bw, bh = (float(v) for v in pred[0, 1:, y, x])
            cx, cy = x + dx * scale, y + dy * scale
            cand = (cx - bw * scale / 2, cy - bh * scale / 2, bw * scale, bh * scale, score)
            if all(box_iou(cand[:4], b[:4]) < nms_iou for b in boxes):
                boxes.append(cand)
        return boxes

    def metric(self, pred, sample_boxes):
        pred_boxes = self.decode_boxes(pred)
        return simple_ap(pred_boxes, sample_boxes)


ADAPTER_CLASSES = {"seg": SegAdapter, "depth": DepthAdapter, "det": DetAdapter}


def build_registry():
    """Fresh adapters in the canonical order: seg, depth, det."""
    return {name: cls() for name, cls in ADAPTER_CLASSES.items()}


# ---------------------------------------------------------------------------
# metrics

def miou(pred_labels: torch.Tensor, gt_labels: torch.Tensor, num_classes: int) -> float:
    """Mean intersection-over-union; classes absent from both are skipped."""
    if pred_labels.numel() == 0:
        raise InputError("empty label arrays")
    if pred_labels.shape != gt_labels.shape:
        raise InputError(
            f"label shapes disagree: {tuple(pred_labels.shape)} vs {tuple(gt_labels.shape)}"
        )
    ious = []
    for c in range(num_classes):
        p = pred_labels == c
        g = gt_labels == c
        union = (p | g).sum().item()
        if union == 0:
            continue
        ious.append((p & g).sum().item() / union)
    return sum(ious) / len(ious) if ious else 0.0


def depth_metrics(pred: torch.Tensor, gt: torch.Tensor) -> dict:
    """AbsRel, SqRel, RMSE, RMSElog and the delta < 1.25^k accuracies."""
    if (pred <= 0).any() or (gt <= 0).any():
        raise InputError("depth metrics require strictly positive depths")
    diff = pred - gt
    absrel = float((diff.abs() / gt).mean())
    sqrel = float((diff**2 / gt).mean())
    rmse = float(diff.pow(2).mean().sqrt())
    rmselog = float((pred.log() - gt.log()).pow(2).mean().sqrt())
    ratio = torch.maximum(pred / gt, gt / pred)
    out = {"absrel": absrel, "sqrel": sqrel, "rmse": rmse, "rmselog": rmselog}
    for k in (1, 2, 3):
        out[f"delta{k}"] = float((ratio < 1.25**k).float().mean())
    return out


def box_iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _ap_at(pred_boxes, gt_boxes, iou_thr) -> float:
    if not gt_boxes:
        return 1.0 if not pred_boxes else 0.0
    preds = sorted(pred_boxes, key=lambda b: -b[4])
    matched = [False] * len(gt_boxes)
    tps = []
    for pb in preds:
        best, best_iou = -1, iou_thr
        for gi, gb in enumerate(gt_boxes):
            if matched[gi]:
                continue
            iou = box_iou(pb[:4], gb)
            if iou >= best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            matched[best] = True
            tps.append(1)
        else:
            tps.append(0)
    precisions, recalls = [], []
    tp = 0
    for i, hit in enumerate(tps, 1):
        tp += hit
        precisions.append(tp / i)
        recalls.append(tp / len(gt_boxes))
    # 11-point interpolation
    ap = 0.0
    for r in [i / 10 for i in range(11)]:
        p = max((prec for prec, rec in zip(precisions, recalls) if rec >= r), default=0.0)
        ap += p / 11.0
    return ap


def simple_ap(pred_boxes, gt_boxes, iou_thresholds=None) -> dict:
    """Single-class 11-point AP at IoU 0.5 plus the mean over 0.5:0.05:0.95.

    pred_boxes: (x, y, w, h, score); gt_boxes: (x, y, w, h).
    """
    for b in pred_boxes:
        if len(b) != 5:
            raise InputError(f"prediction must be (x,y,w,h,score), got {b}")
    for b in gt_boxes:
        if len(b) != 4:
            raise InputError(f"ground truth must be (x,y,w,h), got {b}")
    thresholds = iou_thresholds or [0.5 + 0.05 * i for i in range(10)]
    aps = [_ap_at(pred_boxes, gt_boxes, t) for t in thresholds]
    return {"ap50": _ap_at(pred_boxes, gt_boxes, 0.5), "ap": sum(aps) / len(aps)}
