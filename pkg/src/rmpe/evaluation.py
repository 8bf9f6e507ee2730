"""PCKh-based multi-person mean average precision.

Protocol, per image: predictions are visited by descending pose score and each
is greedily matched to the still-unmatched ground-truth person sharing the most
PCKh-correct joints (distance <= alpha * head_size). Then, per joint, every
visible predicted joint becomes a detection scored by its confidence; it is a
true positive only if its prediction was matched and the joint is PCKh-correct
against a visible ground-truth joint. AP is the area under the all-points
interpolated precision/recall curve, where detections with equal confidence
enter the curve together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (MPII_SCHEMA, ImageAnnotation, InvalidPoseError, JointSchema, PoseProposal,
                   RMPEError)


class UnknownImageError(RMPEError, KeyError):
    code = "unknown_image"


@dataclass(frozen=True)
class EvalConfig:
    pckh_alpha: float = 0.5
    schema: JointSchema = MPII_SCHEMA

    def __post_init__(self):
        if not 0 < self.pckh_alpha <= 1:
            raise ValueError(f"pckh_alpha must be in (0, 1], got {self.pckh_alpha}")


@dataclass
class EvalReport:
    ap_per_joint: list[tuple[int, float]]
    map: float
    matched_counts: dict = field(default_factory=dict)

    def table(self, schema: JointSchema = MPII_SCHEMA) -> str:
        lines = [f"{'joint':<12} {'AP':>7}"]
        for j, ap in self.ap_per_joint:
            name = schema.joints[j] if j < schema.m else str(j)
            lines.append(f"{name:<12} {100 * ap:7.2f}")
        lines.append(f"{'Total':<12} {100 * self.map:7.2f}")
        return "\n".join(lines)


def canonical_order(preds: Sequence[PoseProposal]) -> list[int]:
    """Descending score; exact ties resolved by pose content so order never depends on input order."""
    def key(i):
        p = preds[i].pose
        return (-p.score, tuple(p.xy.ravel()), tuple(p.conf), preds[i].box.as_tuple())
    return sorted(range(len(preds)), key=key)


def pckh_correct(preds: Sequence[PoseProposal], ann: ImageAnnotation, alpha: float) -> np.ndarray:
    """Boolean ``(n_pred, n_gt, m)``: predicted joint visible, GT joint visible, within radius."""
    n, g = len(preds), len(ann.people)
    if n == 0 or g == 0:
        m = preds[0].pose.m if n else (ann.people[0].pose.m if g else 0)
        return np.zeros((n, g, m), dtype=bool)
    pxy = np.stack([p.pose.xy for p in preds])
    pvis = np.stack([p.pose.visible for p in preds])
    gxy = np.stack([gt.pose.xy for gt in ann.people])
    gvis = np.stack([gt.pose.visible for gt in ann.people])
    radius = alpha * np.array([gt.head_size for gt in ann.people])
    dist = np.linalg.norm(pxy[:, None] - gxy[None], axis=-1)
    return (dist <= radius[None, :, None]) & pvis[:, None, :] & gvis[None, :, :]


def greedy_assign(overlap: np.ndarray, order: Sequence[int]) -> np.ndarray:
    """Assign predictions (visited in ``order``) to GT indices; -1 means unassigned."""
    n, g = overlap.shape
    assign = np.full(n, -1, dtype=int)
    taken = np.zeros(g, dtype=bool)
    for p in order:
        if g == 0:
            break
        row = np.where(taken, -1, overlap[p])
        best = int(np.argmax(row))
        if row[best] > 0:
            assign[p] = best
            taken[best] = True
    return assign


@dataclass
class Assignment:
    order: list[int]
    gt_index: np.ndarray   # (n_pred,) matched GT index or -1
    correct: np.ndarray    # (n_pred, n_gt, m)

    @property
    def overlap(self) -> np.ndarray:
        return self.correct.sum(axis=-1)


def match_poses(preds: Sequence[PoseProposal], gt: ImageAnnotation,
                cfg: EvalConfig = EvalConfig()) -> Assignment:
    preds = list(preds)
    for p in preds:
        if p.image_id != gt.image_id:
            raise ValueError(f"prediction for {p.image_id!r} matched against {gt.image_id!r}")
    correct = pckh_correct(preds, gt, cfg.pckh_alpha)
    order = canonical_order(preds)
    return Assignment(order, greedy_assign(correct.sum(axis=-1), order), correct)


def average_precision(conf: np.ndarray, tp: np.ndarray, n_pos: int) -> float:
    """All-points interpolated AP; detections with equal confidence form one PR point."""
    if n_pos <= 0 or len(conf) == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    c = conf[order]
    t = tp[order].astype(np.int64)
    ctp = np.cumsum(t)
    cfp = np.cumsum(1 - t)
    ends = np.append(np.flatnonzero(c[1:] != c[:-1]), len(c) - 1)
    tp_e, fp_e = ctp[ends], cfp[ends]
    recall = tp_e / n_pos
    precision = tp_e / (tp_e + fp_e)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    d_recall = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(d_recall * envelope))


def report_from_detections(conf_lists, tp_lists, n_pos, n_pred, n_assigned, n_gt) -> EvalReport:
    """Assemble a report from per-joint detection arrays (shared by all evaluation paths)."""
    ap = []
    for j in range(len(n_pos)):
        if n_pos[j] == 0:
            continue
        ap.append((j, average_precision(conf_lists[j], tp_lists[j], int(n_pos[j]))))
    mAP = float(np.mean([a for _, a in ap])) if ap else 0.0
    counts = {
        "n_predictions": int(n_pred),
        "n_assigned": int(n_assigned),
        "n_gt_people": int(n_gt),
        "n_gt_joints": [int(v) for v in n_pos],
        "true_positives": [int(np.sum(t)) for t in tp_lists],
    }
    return EvalReport(ap, mAP, counts)


def evaluate(preds: Sequence[PoseProposal], gts: Sequence[ImageAnnotation],
             cfg: EvalConfig = EvalConfig()) -> EvalReport:
    m = cfg.schema.m
    by_id = {a.image_id: a for a in gts}
    grouped: dict[str, list[PoseProposal]] = {}
    for p in preds:
        if p.image_id not in by_id:
            raise UnknownImageError(f"prediction for unknown image {p.image_id!r}")
        if p.pose.m != m:
            raise InvalidPoseError(f"prediction has {p.pose.m} joints, schema has {m}")
        grouped.setdefault(p.image_id, []).append(p)
    if any(gt.pose.m != m for a in gts for gt in a.people):
        raise InvalidPoseError(f"ground truth joint count differs from schema ({m})")

    n_pos = np.zeros(m, dtype=np.int64)
    for ann in gts:
        for gt in ann.people:
            n_pos += gt.pose.visible
    conf_parts: list[list[np.ndarray]] = [[] for _ in range(m)]
    tp_parts: list[list[np.ndarray]] = [[] for _ in range(m)]
    n_assigned = 0
    for image_id in sorted(grouped):
        ps = grouped[image_id]
        asg = match_poses(ps, by_id[image_id], cfg)
        conf = np.stack([p.pose.conf for p in ps])
        vis = np.stack([p.pose.visible for p in ps])
        tp = np.zeros_like(vis)
        hit = asg.gt_index >= 0
        n_assigned += int(hit.sum())
        if hit.any():
            tp[hit] = asg.correct[np.flatnonzero(hit), asg.gt_index[hit]]
        for j in range(m):
            sel = vis[:, j]
            conf_parts[j].append(conf[sel, j])
            tp_parts[j].append(tp[sel, j])
    conf_lists = [np.concatenate(c) if c else np.zeros(0) for c in conf_parts]
    tp_lists = [np.concatenate(t) if t else np.zeros(0, dtype=bool) for t in tp_parts]
    n_gt = sum(len(a.people) for a in gts)
    return report_from_detections(conf_lists, tp_lists, n_pos, len(preds), n_assigned, n_gt)
