"""Data-driven tuning of the pose NMS parameters against validation mAP.

Two parameters are searched jointly on a grid while the other two stay
fixed, alternating between (sigma1, sigma2) and (lambda, eta) until a full
round stops improving. The incumbent values are always part of each grid, so
the objective trace never decreases.

Evaluating thousands of grid points is made cheap by :class:`NmsEvalCache`:
everything that does not depend on the parameters (pairwise window tests,
normalized joint distances, PCKh correctness against ground truth, ...) is
computed once, and images are batched by proposal count so that NMS and
matching run as a handful of array operations per grid point.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import ImageAnnotation, PoseProposal, RMPEError
from .evaluation import (EvalConfig, EvalReport, UnknownImageError, canonical_order,
                         evaluate, pckh_correct, report_from_detections)
from .nms import NmsParams, h_matrix, k_matrix, pair_terms, score_order

log = logging.getLogger(__name__)


class EmptyValidationError(RMPEError, ValueError):
    code = "empty_validation"


@dataclass
class OptimConfig:
    grid_sigma1: int = 10
    grid_sigma2: int = 10
    grid_lam: int = 10
    grid_eta: int = 10
    sigma1_range: tuple[float, float] = (0.01, 2.0)
    sigma2_range: tuple[float, float] = (1e-3, 100.0)
    lam_range: tuple[float, float] = (0.0, 5.0)
    eta_range: tuple[float, float] | None = None  # None -> (0.1, 2m)
    max_rounds: int = 10
    tol: float = 1e-4
    seed: int = 0
    threads: int = 1
    initial: NmsParams = field(default_factory=NmsParams)

    def __post_init__(self):
        for name in ("grid_sigma1", "grid_sigma2", "grid_lam", "grid_eta"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2")
        for name in ("sigma1_range", "sigma2_range", "lam_range", "eta_range"):
            r = getattr(self, name)
            if r is None:
                continue
            r = (float(r[0]), float(r[1]))
            if not r[0] < r[1]:
                raise ValueError(f"{name} must be a non-empty interval, got {r}")
            setattr(self, name, r)
        if self.sigma1_range[0] <= 0 or self.sigma2_range[0] <= 0:
            raise ValueError("sigma ranges must be positive (log-spaced)")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")

    def grids(self, m: int) -> dict[str, np.ndarray]:
        eta = self.eta_range or (0.1, 2.0 * m)
        return {
            "sigma1": np.geomspace(*self.sigma1_range, self.grid_sigma1),
            "sigma2": np.geomspace(*self.sigma2_range, self.grid_sigma2),
            "lam": np.linspace(*self.lam_range, self.grid_lam),
            "eta": np.linspace(*eta, self.grid_eta),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial"] = self.initial.to_dict()
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        d = dict(d)
        if "initial" in d:
            d["initial"] = NmsParams(**d["initial"])
        for k in ("sigma1_range", "sigma2_range", "lam_range", "eta_range"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class _Bucket:
    """Images that share a proposal count ``n``; arrays are stacked on axis 0."""

    n: int
    conf: np.ndarray      # (B, n, m)
    window: np.ndarray    # (B, n, n, m)
    sqdist: np.ndarray    # (B, n, n, m)
    both_vis: np.ndarray  # (B, n, n, m)
    nms_order: np.ndarray  # (B, n)
    eval_order: np.ndarray  # (B, n)
    correct: np.ndarray   # (B, n, G, m), G padded with all-False rows
    overlap: np.ndarray   # (B, n, G)
    vis: np.ndarray       # (B, n, m)


class NmsEvalCache:
    """Precomputed state for evaluating ``evaluate(run_nms(proposals, p), gts).map`` quickly."""

    def __init__(self, proposals: Sequence[PoseProposal], gts: Sequence[ImageAnnotation],
                 cfg: EvalConfig = EvalConfig()):
        by_id = {a.image_id: a for a in gts}
        groups: dict[str, list[PoseProposal]] = {}
        for p in proposals:
            if p.image_id not in by_id:
                raise UnknownImageError(f"proposal for unknown image {p.image_id!r}")
            groups.setdefault(p.image_id, []).append(p)
        self.m = cfg.schema.m
        self.n_pos = np.zeros(self.m, dtype=np.int64)
        for ann in gts:
            for gt in ann.people:
                self.n_pos += gt.pose.visible
        self.n_gt = sum(len(a.people) for a in gts)
        self.n_proposals = len(proposals)

        by_n: dict[int, list[str]] = {}
        for image_id in sorted(groups):
            by_n.setdefault(len(groups[image_id]), []).append(image_id)
        self.buckets = [self._build_bucket(n, [groups[i] for i in ids],
                                           [by_id[i] for i in ids], cfg.pckh_alpha)
                        for n, ids in sorted(by_n.items())]
        self._k_cache: dict[float, list[np.ndarray]] = {}
        self._h_cache: dict[float, list[np.ndarray]] = {}

    def _build_bucket(self, n, groups, anns, alpha) -> _Bucket:
        terms = [pair_terms(g) for g in groups]
        g_max = max(1, max(len(a.people) for a in anns))
        correct = np.zeros((len(groups), n, g_max, self.m), dtype=bool)
        for b, (g, a) in enumerate(zip(groups, anns)):
            c = pckh_correct(g, a, alpha)
            correct[b, :, : c.shape[1]] = c
        return _Bucket(
            n=n,
            conf=np.stack([t.conf for t in terms]),
            window=np.stack([t.window for t in terms]),
            sqdist=np.stack([t.sqdist for t in terms]),
            both_vis=np.stack([t.both_vis for t in terms]),
            nms_order=np.stack([score_order(t.score) for t in terms]),
            eval_order=np.array([canonical_order(g) for g in groups], dtype=int).reshape(len(groups), n),
            correct=correct,
            overlap=correct.sum(axis=-1),
            vis=np.stack([np.stack([p.pose.visible for p in g]) for g in groups]),
        )

    def k_terms(self, sigma1: float) -> list[np.ndarray]:
        if sigma1 not in self._k_cache:
            self._k_cache[sigma1] = [k_matrix(b.conf, b.window, sigma1) for b in self.buckets]
        return self._k_cache[sigma1]

    def h_terms(self, sigma2: float) -> list[np.ndarray]:
        if sigma2 not in self._h_cache:
            self._h_cache[sigma2] = [h_matrix(b.sqdist, b.both_vis, sigma2) for b in self.buckets]
        return self._h_cache[sigma2]

    def clear(self):
        self._k_cache.clear()
        self._h_cache.clear()

    def report(self, params: NmsParams | None) -> EvalReport:
        """Evaluation report after NMS with ``params`` (``None`` disables NMS)."""
        conf_parts = [[] for _ in range(self.m)]
        tp_parts = [[] for _ in range(self.m)]
        n_kept = n_assigned = 0
        if params is not None:
            Ks, Hs = self.k_terms(params.sigma1), self.h_terms(params.sigma2)
        for bi, bk in enumerate(self.buckets):
            B = bk.conf.shape[0]
            if params is None:
                kept = np.ones((B, bk.n), dtype=bool)
            else:
                kept = _batched_greedy(Ks[bi] + params.lam * Hs[bi], bk.nms_order, params.eta)
            assign = _batched_assign(bk.overlap, bk.eval_order, kept)
            rows = np.arange(B)[:, None]
            hit = assign >= 0
            tp = bk.correct[rows, np.arange(bk.n)[None, :], np.maximum(assign, 0)] & hit[..., None]
            sel = kept[..., None] & bk.vis
            n_kept += int(kept.sum())
            n_assigned += int(hit.sum())
            for j in range(self.m):
                s = sel[..., j]
                conf_parts[j].append(bk.conf[..., j][s])
                tp_parts[j].append(tp[..., j][s])
        conf_lists = [np.concatenate(c) if c else np.zeros(0) for c in conf_parts]
        tp_lists = [np.concatenate(t) if t else np.zeros(0, dtype=bool) for t in tp_parts]
        return report_from_detections(conf_lists, tp_lists, self.n_pos, n_kept, n_assigned, self.n_gt)

    def map(self, params: NmsParams | None) -> float:
        return self.report(params).map


def _batched_greedy(d: np.ndarray, order: np.ndarray, eta: float) -> np.ndarray:
    B, n = order.shape
    rows = np.arange(B)
    alive = np.ones((B, n), dtype=bool)
    kept = np.zeros((B, n), dtype=bool)
    for s in range(n):
        i = order[:, s]
        ref_alive = alive[rows, i]
        kept[rows, i] = ref_alive
        alive &= ~((d[rows, i] >= eta) & ref_alive[:, None])
        alive[rows, i] = False
    return kept


def _batched_assign(overlap: np.ndarray, order: np.ndarray, kept: np.ndarray) -> np.ndarray:
    B, n, G = overlap.shape
    rows = np.arange(B)
    assign = np.full((B, n), -1, dtype=int)
    taken = np.zeros((B, G), dtype=bool)
    for s in range(n):
        p = order[:, s]
        row = np.where(taken, -1, overlap[rows, p])
        best = np.argmax(row, axis=1)
        ok = kept[rows, p] & (row[rows, best] > 0)
        assign[rows[ok], p[ok]] = best[ok]
        taken[rows[ok], best[ok]] = True
    return assign


@dataclass
class OptimResult:
    params: NmsParams
    best_map: float
    trace: list[float]
    rounds: list[dict]
    evaluations: int

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "best_map": self.best_map,
                "trace": list(self.trace), "rounds": self.rounds,
                "evaluations": self.evaluations}


def _with_incumbent(grid: np.ndarray, value: float) -> list[float]:
    return sorted(set(float(v) for v in grid) | {float(value)})


def optimize_params(proposals: Sequence[PoseProposal], gts: Sequence[ImageAnnotation],
                    cfg: OptimConfig | None = None,
                    eval_cfg: EvalConfig = EvalConfig()) -> OptimResult:
    """Alternating two-parameter grid search maximizing validation mAP."""
    cfg = cfg or OptimConfig()
    if not proposals or not gts:
        raise EmptyValidationError("validation proposals and annotations must be non-empty")
    cache = NmsEvalCache(proposals, gts, eval_cfg)
    if cache.n_gt and cache.n_proposals / cache.n_gt < 1.1:
        warnings.warn(f"only {cache.n_proposals / cache.n_gt:.2f} proposals per GT person; "
                      "little redundancy for NMS to remove", stacklevel=2)
    grids = cfg.grids(cache.m)

    best = cfg.initial
    best_map = cache.map(best)
    trace = [best_map]
    rounds = [{"round": 0, "map": best_map, "params": best.to_dict()}]
    n_evals = 1

    def search(pairs):
        nonlocal best, best_map, n_evals
        scored = _score_all(cache, pairs, cfg.threads)
        n_evals += len(scored)
        for value, params in scored:
            if value > best_map or (value == best_map and params.as_tuple() < best.as_tuple()):
                best, best_map = params, value

    for r in range(1, cfg.max_rounds + 1):
        start = best_map
        s1 = _with_incumbent(grids["sigma1"], best.sigma1)
        s2 = _with_incumbent(grids["sigma2"], best.sigma2)
        search([NmsParams(a, b, best.lam, best.eta) for a in s1 for b in s2])
        lam = _with_incumbent(grids["lam"], best.lam)
        eta = _with_incumbent(grids["eta"], best.eta)
        search([NmsParams(best.sigma1, best.sigma2, a, b) for a in lam for b in eta])
        cache.clear()
        trace.append(best_map)
        rounds.append({"round": r, "map": best_map, "params": best.to_dict()})
        log.info("round %d: mAP %.6f with %s", r, best_map, best)
        if best_map - start < cfg.tol:
            break
    return OptimResult(best, best_map, trace, rounds, n_evals)


def _score_all(cache: NmsEvalCache, candidates: list[NmsParams], threads: int):
    # Warm the kernel caches serially; the per-point work afterwards is read-only.
    for p in candidates:
        cache.k_terms(p.sigma1)
        cache.h_terms(p.sigma2)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(cache.map, candidates))
    else:
        values = [cache.map(p) for p in candidates]
    return list(zip(values, candidates))


def disable_nms_baseline(proposals: Sequence[PoseProposal], gts: Sequence[ImageAnnotation],
                         eval_cfg: EvalConfig = EvalConfig()) -> float:
    """mAP when every proposal is kept."""
    return evaluate(proposals, gts, eval_cfg).map


def mean_redundancy(proposals: Sequence[PoseProposal], gts: Sequence[ImageAnnotation]) -> float:
    n_gt = sum(len(a.people) for a in gts)
    return len(proposals) / n_gt if n_gt else math.inf
