"""Parametric pose non-maximum suppression.

Similarity between a reference proposal ``i`` and a candidate ``j`` is

    d(i, j) = K(i, j | sigma1) + lambda * H(i, j | sigma2)

where ``K`` softly counts joints of ``j`` that fall inside a small window
around the matching joint of ``i`` (weighted by ``tanh(c / sigma1)`` of both
confidences) and ``H`` sums ``exp(-|k_i - k_j|^2 / sigma2)`` over joints
visible in both poses, with coordinates divided by the diagonal of the
reference box. Larger ``d`` means more similar; a candidate is suppressed
when ``d >= eta``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .core import BBox, Pose, PoseProposal, RMPEError

WINDOW_DIVISOR = 20.0  # half-extent = box side / 20, so the window side is 1/10 of the box


class MixedImagesError(RMPEError, ValueError):
    code = "mixed_images"


@dataclass(frozen=True)
class NmsParams:
    sigma1: float = 0.1
    sigma2: float = 0.01
    lam: float = 1.0
    eta: float = 2.0

    def __post_init__(self):
        for name in ("sigma1", "sigma2", "lam", "eta"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, float(v))
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ValueError("sigma1 and sigma2 must be > 0")
        if self.lam < 0 or self.eta < 0:
            raise ValueError("lambda and eta must be >= 0")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.sigma1, self.sigma2, self.lam, self.eta)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MatchWindow:
    center: tuple[float, float]
    half_w: float
    half_h: float

    @classmethod
    def around(cls, center, box: BBox) -> "MatchWindow":
        return cls((float(center[0]), float(center[1])),
                   box.width / WINDOW_DIVISOR, box.height / WINDOW_DIVISOR)

    def contains(self, p) -> bool:
        return (abs(p[0] - self.center[0]) <= self.half_w
                and abs(p[1] - self.center[1]) <= self.half_h)


def k_sim(ref: PoseProposal, cand: PoseProposal, sigma1: float) -> float:
    """Soft count of candidate joints inside the reference match windows."""
    hw = ref.box.width / WINDOW_DIVISOR
    hh = ref.box.height / WINDOW_DIVISOR
    delta = np.abs(cand.pose.xy - ref.pose.xy)
    inside = (delta[:, 0] <= hw) & (delta[:, 1] <= hh)
    w = np.tanh(ref.pose.conf / sigma1) * np.tanh(cand.pose.conf / sigma1)
    return float(np.sum(w * inside))


def h_sim(ref: Pose, cand: Pose, sigma2: float, scale: float = 1.0) -> float:
    """Gaussian similarity of corresponding joints.

    Coordinates are divided by ``scale`` first. Joints invisible in either
    pose are skipped.
    """
    diff = (ref.xy - cand.xy) / scale
    sq = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]
    both = ref.visible & cand.visible
    return float(np.sum(np.exp(-sq / sigma2) * both))


def pose_distance(ref: PoseProposal, cand: PoseProposal, params: NmsParams) -> float:
    return (k_sim(ref, cand, params.sigma1)
            + params.lam * h_sim(ref.pose, cand.pose, params.sigma2, ref.box.diagonal))


# -- vectorized kernel -------------------------------------------------------
#
# Everything that does not depend on (sigma1, sigma2, lambda) is computed once
# per image: the window test, the normalized squared joint distances and the
# joint-visibility mask. Arrays are indexed [ref, cand, joint].

@dataclass(frozen=True, eq=False)
class PairTerms:
    conf: np.ndarray     # (n, m)
    window: np.ndarray   # (n, n, m) float 0/1
    sqdist: np.ndarray   # (n, n, m) squared distance / ref diagonal^2
    both_vis: np.ndarray  # (n, n, m) float 0/1
    score: np.ndarray    # (n,)


def pair_terms(proposals: Sequence[PoseProposal]) -> PairTerms:
    xy = np.stack([p.pose.xy for p in proposals])
    conf = np.stack([p.pose.conf for p in proposals])
    vis = np.stack([p.pose.visible for p in proposals])
    boxes = np.array([p.box.as_tuple() for p in proposals])
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    diag = np.hypot(w, h)

    delta = xy[None, :, :, :] - xy[:, None, :, :]
    window = ((np.abs(delta[..., 0]) <= (w / WINDOW_DIVISOR)[:, None, None])
              & (np.abs(delta[..., 1]) <= (h / WINDOW_DIVISOR)[:, None, None]))
    nd = delta / diag[:, None, None, None]
    sqdist = nd[..., 0] * nd[..., 0] + nd[..., 1] * nd[..., 1]
    both = vis[:, None, :] & vis[None, :, :]
    return PairTerms(
        conf=conf,
        window=window.astype(float),
        sqdist=sqdist,
        both_vis=both.astype(float),
        score=np.array([p.pose.score for p in proposals]),
    )


def k_matrix(conf: np.ndarray, window: np.ndarray, sigma1: float) -> np.ndarray:
    """Pairwise soft joint counts; works on ``(n, m)`` or batched ``(b, n, m)`` inputs."""
    tc = np.tanh(conf / sigma1)
    return (tc[..., :, None, :] * tc[..., None, :, :] * window).sum(axis=-1)


def h_matrix(sqdist: np.ndarray, both_vis: np.ndarray, sigma2: float) -> np.ndarray:
    return (np.exp(-sqdist / sigma2) * both_vis).sum(axis=-1)


def distance_matrix(terms: PairTerms, params: NmsParams) -> np.ndarray:
    K = k_matrix(terms.conf, terms.window, params.sigma1)
    H = h_matrix(terms.sqdist, terms.both_vis, params.sigma2)
    return K + params.lam * H


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties keep input order."""
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def greedy_keep(d: np.ndarray, order: np.ndarray, eta: float) -> list[int]:
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        alive &= d[i] < eta
        alive[i] = False
        if not alive.any():
            break
    return keep


def run_nms(proposals: Sequence[PoseProposal], params: NmsParams) -> list[PoseProposal]:
    """Greedy pose NMS for the proposals of a single image.

    Output is ordered by descending score, ties broken by input position.
    """
    proposals = list(proposals)
    if not proposals:
        return []
    _check_single_image(proposals)
    if len(proposals) == 1:
        return proposals
    terms = pair_terms(proposals)
    keep = greedy_keep(distance_matrix(terms, params), score_order(terms.score), params.eta)
    return [proposals[i] for i in keep]


def run_nms_naive(proposals: Sequence[PoseProposal], params: NmsParams) -> list[PoseProposal]:
    """Unoptimized scalar transcription of the greedy scheme, used as a test oracle."""
    proposals = list(proposals)
    _check_single_image(proposals)
    remaining = list(range(len(proposals)))
    out = []
    while remaining:
        best = remaining[0]
        for idx in remaining[1:]:
            if proposals[idx].pose.score > proposals[best].pose.score:
                best = idx
        ref = proposals[best]
        out.append(ref)
        remaining = [idx for idx in remaining
                     if idx != best and _naive_distance(ref, proposals[idx], params) < params.eta]
    return out


def _naive_distance(ref: PoseProposal, cand: PoseProposal, params: NmsParams) -> float:
    box = ref.box
    hw, hh = box.width / WINDOW_DIVISOR, box.height / WINDOW_DIVISOR
    diag = math.hypot(box.width, box.height)
    k = 0.0
    h = 0.0
    for n in range(ref.pose.m):
        rx, ry = ref.pose.xy[n]
        cx, cy = cand.pose.xy[n]
        if abs(cx - rx) <= hw and abs(cy - ry) <= hh:
            k += math.tanh(ref.pose.conf[n] / params.sigma1) * math.tanh(cand.pose.conf[n] / params.sigma1)
        if ref.pose.visible[n] and cand.pose.visible[n]:
            dx = (rx - cx) / diag
            dy = (ry - cy) / diag
            h += math.exp(-(dx * dx + dy * dy) / params.sigma2)
    return k + params.lam * h


def _check_single_image(proposals):
    ids = {p.image_id for p in proposals}
    if len(ids) > 1:
        raise MixedImagesError(f"run_nms expects one image, got {sorted(ids)}")


def group_by_image(proposals: Sequence[PoseProposal]) -> dict[str, list[PoseProposal]]:
    groups: dict[str, list[PoseProposal]] = {}
    for p in proposals:
        groups.setdefault(p.image_id, []).append(p)
    return groups


def run_nms_batch(proposals: Sequence[PoseProposal], params: NmsParams,
                  threads: int | None = 1) -> list[PoseProposal]:
    """Apply :func:`run_nms` independently to every image.

    Images keep their first-appearance order; results do not depend on
    ``threads``.
    """
    groups = list(group_by_image(proposals).values())
    if threads is not None and threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            kept = list(pool.map(lambda g: run_nms(g, params), groups))
    else:
        kept = [run_nms(g, params) for g in groups]
    return [p for group in kept for p in group]
