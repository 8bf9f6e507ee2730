"""Pose-guided proposal generation.

Ground-truth poses are aligned (torso midpoint at the origin, unit torso
length) and clustered with k-means into atomic poses. For every atomic pose
the normalized offsets between detector boxes and ground-truth boxes are
modelled by a diagonal Gaussian mixture fitted with EM; new training
proposals are drawn from the mixture of the pose's atomic cluster.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .core import (MPII_SCHEMA, BBox, BoxOffset, ImageAnnotation, InvalidBoxError,
                   JointSchema, Pose, PoseProposal, RMPEError, apply_offset, box_offset)

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
MIN_SAMPLES = 20


class DegeneratePoseError(RMPEError, ValueError):
    code = "degenerate_pose"


class InsufficientDataError(RMPEError, ValueError):
    code = "insufficient_data"


class RejectionBudgetError(RMPEError, RuntimeError):
    """Raised when too many sampled boxes were rejected; ``partial`` holds the accepted ones."""

    code = "rejection_budget"

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True, eq=False)
class AlignedPose:
    coords: np.ndarray  # (2m,) interleaved x, y
    mask: np.ndarray    # (2m,) 1.0 where the joint is visible

    @property
    def m(self) -> int:
        return self.coords.shape[0] // 2


def align_pose(pose: Pose, torso: tuple[int, int] = MPII_SCHEMA.torso) -> AlignedPose:
    """Translate the torso midpoint to the origin and scale the torso to unit length.

    Rotation is left untouched.
    """
    upper, lower = torso
    if not (pose.visible[upper] and pose.visible[lower]):
        raise DegeneratePoseError("torso joints must be visible")
    a, b = pose.xy[upper], pose.xy[lower]
    length = float(np.hypot(*(a - b)))
    if not length > 0:
        raise DegeneratePoseError("torso joints coincide")
    xy = (pose.xy - 0.5 * (a + b)) / length
    vis = pose.visible
    xy = np.where(vis[:, None], xy, 0.0)
    mask = np.repeat(vis.astype(float), 2)
    return AlignedPose(xy.ravel(), mask)


def masked_sqdist(X, MX, C, MC) -> np.ndarray:
    """Mean squared difference over coordinates visible in both vectors.

    ``X``/``MX`` are ``(N, D)``, ``C``/``MC`` are ``(K, D)``; returns ``(N, K)``.
    Pairs sharing no visible coordinate get ``inf``.
    """
    both = MX[:, None, :] * MC[None, :, :]
    ss = (both * (X[:, None, :] - C[None, :, :]) ** 2).sum(axis=-1)
    cnt = both.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(cnt > 0, ss / np.maximum(cnt, 1), np.inf)


def kmeans_pp_init(X, MX, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``k`` seeds chosen by k-means++ (D^2 weighting)."""
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = masked_sqdist(X, MX, X[idx], MX[idx])[:, 0]
    for _ in range(1, k):
        w = np.where(np.isfinite(d2), d2, 0.0)
        total = w.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=w / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, masked_sqdist(X, MX, X[[nxt]], MX[[nxt]])[:, 0])
    return np.array(idx)


@dataclass
class KMeansResult:
    centers: np.ndarray  # (k, D)
    masks: np.ndarray    # (k, D)
    labels: np.ndarray
    n_iter: int


def masked_kmeans(X, MX, k: int, seed=None, max_iter: int = 300) -> KMeansResult:
    X = np.asarray(X, dtype=float)
    MX = np.asarray(MX, dtype=float)
    if X.shape[0] < k:
        raise InsufficientDataError(f"need at least k={k} points, got {X.shape[0]}")
    rng = np.random.default_rng(seed)
    seeds = kmeans_pp_init(X, MX, k, rng)
    C, MC = X[seeds].copy(), MX[seeds].copy()
    labels = np.full(X.shape[0], -1)
    for it in range(1, max_iter + 1):
        dist = masked_sqdist(X, MX, C, MC)
        new = np.argmin(dist, axis=1)
        if np.array_equal(new, labels):
            return KMeansResult(C, MC, labels, it - 1)
        labels = new
        for j in range(k):
            members = labels == j
            if not members.any():
                # Re-seed an empty cluster at the point worst served by its center.
                far = int(np.argmax(np.where(np.isfinite(dist[np.arange(len(X)), labels]),
                                             dist[np.arange(len(X)), labels], 0.0)))
                C[j], MC[j] = X[far], MX[far]
                continue
            w = MX[members]
            cnt = w.sum(axis=0)
            C[j] = np.where(cnt > 0, (w * X[members]).sum(axis=0) / np.maximum(cnt, 1), 0.0)
            MC[j] = (cnt > 0).astype(float)
    return KMeansResult(C, MC, labels, max_iter)


def _aligned_matrix(poses: Sequence[Pose], torso) -> tuple[np.ndarray, np.ndarray]:
    al = [align_pose(p, torso) for p in poses]
    return np.stack([a.coords for a in al]), np.stack([a.mask for a in al])


def fit_atomic(poses: Sequence[Pose], k: int, seed=None,
               torso: tuple[int, int] = MPII_SCHEMA.torso) -> KMeansResult:
    """Cluster aligned poses; the centers are the atomic poses."""
    if len(poses) < k:
        raise InsufficientDataError(f"need at least k={k} poses, got {len(poses)}")
    X, MX = _aligned_matrix(poses, torso)
    return masked_kmeans(X, MX, k, seed)


@dataclass
class OffsetGMM:
    weights: np.ndarray    # (C,)
    means: np.ndarray      # (C, 4)
    variances: np.ndarray  # (C, 4)
    log_likelihood: list[float] = field(default_factory=list)
    converged: bool = True

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 4)
        self.variances = np.asarray(self.variances, dtype=float).reshape(-1, 4)
        C = self.weights.shape[0]
        if self.means.shape[0] != C or self.variances.shape[0] != C:
            raise ValueError("weights, means and variances disagree on component count")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ValueError("weights must lie on the simplex")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def components(self) -> int:
        return self.weights.shape[0]

    def component_log_pdf(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        diff = X[:, None, :] - self.means[None]
        return -0.5 * (np.log(2 * np.pi * self.variances)[None]
                       + diff ** 2 / self.variances[None]).sum(axis=-1)

    def log_pdf(self, X) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return logsumexp(self.component_log_pdf(X) + np.log(self.weights)[None], axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.components, size=n, p=self.weights)
        z = rng.standard_normal((n, 4))
        return self.means[comp] + z * np.sqrt(self.variances[comp])


def _as_offset_array(offsets) -> np.ndarray:
    if len(offsets) and isinstance(offsets[0], BoxOffset):
        return np.array([o.d for o in offsets], dtype=float)
    return np.asarray(offsets, dtype=float).reshape(-1, 4)


def fit_offset_gmm(offsets, components: int = 3, seed=None, min_samples: int = MIN_SAMPLES,
                   tol: float = 1e-6, max_iter: int = 500,
                   var_floor: float = VARIANCE_FLOOR) -> OffsetGMM:
    """EM for a diagonal-covariance Gaussian mixture on 4-D box offsets.

    Initial means are k-means++ seeds. Stops when the mean per-point
    log-likelihood improves by less than ``tol``.
    """
    X = _as_offset_array(offsets)
    n = X.shape[0]
    if n < max(min_samples, components):
        raise InsufficientDataError(
            f"{n} offsets < required {max(min_samples, components)}")
    rng = np.random.default_rng(seed)
    ones = np.ones_like(X)
    means = X[kmeans_pp_init(X, ones, components, rng)].copy()
    variances = np.tile(np.maximum(X.var(axis=0), var_floor), (components, 1))
    weights = np.full(components, 1.0 / components)

    history: list[float] = []
    converged = False
    for _ in range(max_iter):
        gmm = OffsetGMM(weights, means, variances)
        with np.errstate(divide="ignore"):
            joint = gmm.component_log_pdf(X) + np.log(weights)[None]
        norm = logsumexp(joint, axis=1)
        ll = float(norm.mean())
        if history and ll - history[-1] < tol:
            history.append(ll)
            converged = True
            break
        history.append(ll)
        resp = np.exp(joint - norm[:, None])
        nk = resp.sum(axis=0)
        alive = nk > 0
        weights = nk / n
        safe = np.where(alive, nk, 1.0)[:, None]
        new_means = resp.T @ X / safe
        means = np.where(alive[:, None], new_means, means)
        sq = (X[:, None, :] - means[None]) ** 2
        var = np.einsum("nc,ncd->cd", resp, sq) / safe
        var = np.where(alive[:, None], var, variances)
        variances = np.maximum(var, var_floor)
    else:
        gmm = OffsetGMM(weights, means, variances)
        with np.errstate(divide="ignore"):
            history.append(float(gmm.log_pdf(X).mean()))
    weights = weights / weights.sum()
    return OffsetGMM(weights, means, variances, history, converged)


@dataclass
class AtomicPoseModel:
    centers: np.ndarray        # (k, 2m)
    center_masks: np.ndarray   # (k, 2m)
    gmms: list                 # OffsetGMM or None for clusters that fell back
    global_gmm: OffsetGMM
    torso: tuple[int, int] = MPII_SCHEMA.torso
    cluster_sizes: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def degenerate(self) -> list[bool]:
        return [g is None for g in self.gmms]

    def gmm_for(self, atom: int) -> OffsetGMM:
        g = self.gmms[atom]
        return self.global_gmm if g is None else g


def assign_atomic(pose: Pose, model: AtomicPoseModel) -> int:
    al = align_pose(pose, model.torso)
    d = masked_sqdist(al.coords[None], al.mask[None], model.centers, model.center_masks)[0]
    return int(np.argmin(d))


def match_detections(gts: Sequence[ImageAnnotation], detections: Sequence[PoseProposal],
                     min_iou: float = 0.5) -> list[tuple[str, int, BoxOffset]]:
    """Pair each detection with the ground-truth box it overlaps most (IoU >= ``min_iou``)."""
    by_id = {a.image_id: a for a in gts}
    pairs = []
    for det in detections:
        ann = by_id.get(det.image_id)
        if ann is None or not ann.people:
            continue
        ious = [det.box.iou(gt.box) for gt in ann.people]
        best = int(np.argmax(ious))
        if ious[best] >= min_iou:
            pairs.append((det.image_id, best, box_offset(det.box, ann.people[best].box)))
    return pairs


def _dataset_hash(X: np.ndarray, offsets: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X).tobytes())
    h.update(np.ascontiguousarray(offsets).tobytes())
    return h.hexdigest()[:16]


def fit_model(gts: Sequence[ImageAnnotation], detections: Sequence[PoseProposal],
              k: int = 15, components: int = 3, seed: int = 0,
              min_samples: int = MIN_SAMPLES, schema: JointSchema = MPII_SCHEMA,
              min_iou: float = 0.5) -> AtomicPoseModel:
    """Learn atomic poses from annotations and per-atom offset mixtures from detections."""
    keys, poses = [], []
    for ann in gts:
        for gi, gt in enumerate(ann.people):
            keys.append((ann.image_id, gi))
            poses.append(gt.pose)
    usable = []
    for key, p in zip(keys, poses):
        try:
            align_pose(p, schema.torso)
        except DegeneratePoseError:
            continue
        usable.append((key, p))
    ss = np.random.SeedSequence(seed)
    km_seed, gmm_seed, *cluster_seeds = ss.spawn(k + 2)
    km = fit_atomic([p for _, p in usable], k, np.random.default_rng(km_seed), schema.torso)
    label_of = {key: int(lab) for (key, _), lab in zip(usable, km.labels)}

    per_cluster: list[list[tuple[float, ...]]] = [[] for _ in range(k)]
    pooled = []
    for image_id, gi, off in match_detections(gts, detections, min_iou):
        lab = label_of.get((image_id, gi))
        if lab is None:
            continue
        per_cluster[lab].append(off.d)
        pooled.append(off.d)
    pooled_arr = np.array(pooled, dtype=float).reshape(-1, 4)
    global_gmm = fit_offset_gmm(pooled_arr, components, np.random.default_rng(gmm_seed), min_samples)
    gmms = []
    for j in range(k):
        try:
            gmms.append(fit_offset_gmm(per_cluster[j], components,
                                       np.random.default_rng(cluster_seeds[j]), min_samples))
        except InsufficientDataError:
            log.info("atomic pose %d has %d offsets; using the pooled mixture", j, len(per_cluster[j]))
            gmms.append(None)
    X, _ = _aligned_matrix([p for _, p in usable], schema.torso)
    return AtomicPoseModel(
        centers=km.centers, center_masks=km.masks, gmms=gmms, global_gmm=global_gmm,
        torso=tuple(schema.torso),
        cluster_sizes=[len(c) for c in per_cluster],
        metadata={"seed": seed, "components": components, "min_samples": min_samples,
                  "schema": schema.name, "n_poses": len(usable), "n_offsets": len(pooled),
                  "dataset_hash": _dataset_hash(X, pooled_arr)},
    )


def draw_offsets(model: AtomicPoseModel, atom: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Raw offsets from the atom's mixture, before any box-validity filtering."""
    return model.gmm_for(atom).sample(n, rng)


def sample_proposals(gt_pose: Pose, gt_box: BBox, model: AtomicPoseModel, n: int, seed=None,
                     iou_floor: float = 0.3, max_attempts: int | None = None) -> list[BBox]:
    """Draw ``n`` proposal boxes for one annotated person.

    Degenerate boxes and boxes with IoU below ``iou_floor`` against the
    ground truth are re-drawn, up to ``10 * n`` draws in total.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    atom = assign_atomic(gt_pose, model)
    budget = 10 * n if max_attempts is None else max_attempts
    out: list[BBox] = []
    used = 0
    while len(out) < n and used < budget:
        batch = min(n - len(out), budget - used)
        used += batch
        for d in draw_offsets(model, atom, batch, rng):
            try:
                box = apply_offset(gt_box, d)
            except InvalidBoxError:
                continue
            if box.iou(gt_box) >= iou_floor:
                out.append(box)
    if len(out) < n:
        raise RejectionBudgetError(
            f"only {len(out)} of {n} proposals accepted after {used} draws", out)
    return out
