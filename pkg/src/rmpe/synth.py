"""Seeded synthetic stand-in for a human detector followed by a single-person pose estimator.

Every image draws people from a small library of template poses. Each person
yields ``1 + Poisson(duplicate_rate)`` proposals (or none, with probability
``miss_rate``); a proposal box is the ground-truth box moved by an offset
drawn from that template's generating mixture, and its joints are the
ground-truth joints plus Gaussian noise that grows with the offset size.
Confidences fall off with the realized joint error. False positives are
template poses dropped at random places with low confidences.

Randomness comes from numpy's PCG64 bit generator; image ``i`` uses the
stream seeded by ``SeedSequence([seed, i])`` so images are independent of
each other and of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (MPII_SCHEMA, GroundTruth, ImageAnnotation, InvalidBoxError, Pose,
                   PoseProposal, apply_offset, clip_box, pose_score, tight_box)
from .pgpg import OffsetGMM

# Templates in MPII joint order, person height = 1, head top at y = 0, y pointing down.
_STANDING = [(-0.08, 1.0), (-0.08, 0.75), (-0.07, 0.5), (0.07, 0.5), (0.08, 0.75), (0.08, 1.0),
             (0.0, 0.5), (0.0, 0.2), (0.0, 0.15), (0.0, 0.0),
             (-0.18, 0.5), (-0.17, 0.35), (-0.12, 0.2), (0.12, 0.2), (0.17, 0.35), (0.18, 0.5)]
_ARMS_UP = _STANDING[:10] + [(-0.2, -0.12), (-0.18, 0.05), (-0.12, 0.2),
                             (0.12, 0.2), (0.18, 0.05), (0.2, -0.12)]
_WALKING = [(-0.22, 1.0), (-0.13, 0.76), (-0.06, 0.5), (0.06, 0.5), (0.11, 0.75), (0.2, 1.0),
            (0.0, 0.5), (0.0, 0.2), (0.0, 0.15), (0.0, 0.0),
            (0.08, 0.46), (-0.02, 0.35), (-0.12, 0.2), (0.12, 0.2), (0.2, 0.34), (0.26, 0.45)]
_SITTING = [(0.22, 1.0), (0.25, 0.78), (-0.05, 0.72), (0.07, 0.72), (0.3, 0.76), (0.3, 1.0),
            (0.0, 0.72), (0.0, 0.4), (0.0, 0.34), (0.0, 0.18),
            (0.2, 0.62), (-0.15, 0.56), (-0.12, 0.4), (0.12, 0.4), (0.2, 0.55), (0.26, 0.62)]
_T_POSE = _STANDING[:10] + [(-0.45, 0.2), (-0.3, 0.2), (-0.12, 0.2),
                            (0.12, 0.2), (0.3, 0.2), (0.45, 0.2)]

TEMPLATES = {
    "standing": np.array(_STANDING),
    "arms_up": np.array(_ARMS_UP),
    "walking": np.array(_WALKING),
    "sitting": np.array(_SITTING),
    "t_pose": np.array(_T_POSE),
}


def _gmm(w, means, stds) -> OffsetGMM:
    return OffsetGMM(np.array(w), np.array(means), np.array(stds) ** 2)


# Detector offset behaviour per template (x_min, y_min, x_max, y_max, normalized).
DEFAULT_OFFSET_MODELS = {
    "standing": _gmm([0.7, 0.3], [[0.0, 0.02, 0.0, -0.02], [-0.06, -0.04, 0.06, 0.03]],
                     [[0.03, 0.03, 0.03, 0.04], [0.04, 0.04, 0.04, 0.05]]),
    "arms_up": _gmm([0.6, 0.4], [[0.0, 0.12, 0.0, 0.0], [0.03, 0.03, -0.03, -0.02]],
                    [[0.03, 0.04, 0.03, 0.03], [0.03, 0.03, 0.03, 0.03]]),
    "walking": _gmm([0.5, 0.5], [[0.05, 0.0, 0.0, 0.0], [0.0, 0.0, -0.05, 0.0]],
                    [[0.04, 0.03, 0.04, 0.03], [0.04, 0.03, 0.04, 0.03]]),
    "sitting": _gmm([0.8, 0.2], [[-0.04, -0.03, 0.04, 0.05], [0.05, 0.05, -0.05, -0.05]],
                    [[0.04, 0.04, 0.04, 0.04], [0.03, 0.03, 0.03, 0.03]]),
    "t_pose": _gmm([0.6, 0.4], [[0.1, 0.0, -0.1, 0.0], [0.0, 0.0, 0.0, 0.0]],
                   [[0.04, 0.03, 0.04, 0.03], [0.03, 0.03, 0.03, 0.03]]),
}


@dataclass
class SynthConfig:
    seed: int
    n_images: int = 100
    image_size: tuple[int, int] = (640, 480)
    persons_per_image: tuple[int, int] = (1, 4)
    person_height: tuple[float, float] = (0.35, 0.8)  # fraction of image height
    duplicate_rate: float = 1.5
    miss_rate: float = 0.0
    fp_rate: float = 0.3        # mean false positives per image
    joint_noise: float = 4.0    # pixels
    noise_gain: float = 10.0    # noise multiplier per unit offset norm
    pose_jitter: float = 0.015  # ground-truth variation, fraction of person height
    offset_scale: float = 1.0
    conf_jitter: float = 0.3
    occlusion_rate: float = 0.0
    gt_box_pad: float = 0.1
    min_separation: float = 1.0  # horizontal gap between people, in person widths
    templates: tuple[str, ...] = tuple(TEMPLATES)
    offset_models: dict = field(default_factory=lambda: dict(DEFAULT_OFFSET_MODELS))

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("seed is mandatory")
        rates = ("duplicate_rate", "miss_rate", "fp_rate", "joint_noise", "noise_gain",
                 "pose_jitter", "offset_scale", "conf_jitter", "occlusion_rate", "gt_box_pad",
                 "min_separation")
        for name in rates:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.miss_rate > 1 or self.occlusion_rate > 1 or self.conf_jitter > 1:
            raise ValueError("miss_rate, occlusion_rate and conf_jitter must be <= 1")
        lo, hi = self.persons_per_image
        if not 0 <= lo <= hi:
            raise ValueError("persons_per_image must be an ordered non-negative range")
        self.image_size = tuple(self.image_size)
        self.persons_per_image = tuple(self.persons_per_image)
        self.person_height = tuple(self.person_height)
        self.templates = tuple(self.templates)
        for t in self.templates:
            if t not in TEMPLATES:
                raise ValueError(f"unknown template {t!r}")
            if t not in self.offset_models:
                raise ValueError(f"no offset model for template {t!r}")

    @classmethod
    def noise_free(cls, seed: int, **kw) -> "SynthConfig":
        base = dict(duplicate_rate=0.0, miss_rate=0.0, fp_rate=0.0, joint_noise=0.0,
                    offset_scale=0.0, conf_jitter=0.0)
        base.update(kw)
        return cls(seed=seed, **base)


@dataclass
class ProposalTruth:
    image_id: str
    person: int        # index into the image's people, -1 for false positives
    template: str
    offset: tuple[float, float, float, float] | None


@dataclass
class SynthData:
    gts: list[ImageAnnotation]
    proposals: list[PoseProposal]
    truth: list[ProposalTruth]   # aligned with ``proposals``
    person_templates: dict       # (image_id, person) -> template name


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _place_people(rng, cfg, W, H):
    n = int(rng.integers(cfg.persons_per_image[0], cfg.persons_per_image[1] + 1))
    placed = []
    for _ in range(n):
        for _attempt in range(50):
            h = rng.uniform(*cfg.person_height) * H
            tmpl = cfg.templates[int(rng.integers(len(cfg.templates)))]
            base = TEMPLATES[tmpl]
            w = (base[:, 0].max() - base[:, 0].min()) * h
            margin = 0.15 * h
            lo_x = margin + w / 2
            hi_x = W - margin - w / 2
            lo_y = margin + 0.15 * h
            hi_y = H - margin - h
            if lo_x >= hi_x or lo_y >= hi_y:
                continue
            cx = rng.uniform(lo_x, hi_x)
            top = rng.uniform(lo_y, hi_y)
            if all(abs(cx - px) >= cfg.min_separation * max(w, pw) for px, pw, *_ in placed):
                placed.append((cx, w, top, h, tmpl))
                break
    return placed


def _gt_person(rng, cfg, cx, top, h, tmpl):
    base = TEMPLATES[tmpl]
    xy = base * h + np.array([cx, top])
    xy = xy + rng.normal(0.0, cfg.pose_jitter * h, size=xy.shape)
    vis = np.ones(len(xy), dtype=bool)
    if cfg.occlusion_rate > 0:
        occl = rng.random(len(xy)) < cfg.occlusion_rate
        occl[list(MPII_SCHEMA.torso)] = False
        vis &= ~occl
    pose = Pose(xy, vis.astype(float), vis, score=1.0)
    head = MPII_SCHEMA.head
    head_size = float(np.hypot(*(base[head[0]] - base[head[1]]))) * h
    return GroundTruth(pose, tight_box(pose, cfg.gt_box_pad), head_size)


def _proposal(rng, cfg, image_id, gt, W, H, model: OffsetGMM):
    if cfg.offset_scale > 0:
        for _ in range(100):
            off = model.sample(1, rng)[0] * cfg.offset_scale
            try:
                box = clip_box(apply_offset(gt.box, off), W, H)
                break
            except InvalidBoxError:
                continue
        else:
            off, box = np.zeros(4), gt.box
    else:
        off, box = np.zeros(4), gt.box
    mag = float(np.linalg.norm(off))
    sigma = cfg.joint_noise * (1.0 + cfg.noise_gain * mag)
    vis = gt.pose.visible
    xy = gt.pose.xy + rng.normal(0.0, 1.0, size=gt.pose.xy.shape) * sigma
    xy = np.clip(xy, [0.0, 0.0], [W, H])
    err = np.linalg.norm(xy - gt.pose.xy, axis=1)
    tau = 0.5 * gt.head_size
    conf = np.exp(-0.5 * (err / tau) ** 2) * (1.0 - cfg.conf_jitter * rng.random(len(err)))
    conf = np.where(vis, conf, 0.0)
    pose = Pose(xy, conf, vis)
    box_conf = np.exp(-0.5 * (mag / 0.15) ** 2) * (1.0 - cfg.conf_jitter * rng.random())
    return PoseProposal(image_id, box, pose.with_score(pose_score(box_conf, pose))), tuple(off)


def _false_positive(rng, cfg, image_id, W, H):
    tmpl = cfg.templates[int(rng.integers(len(cfg.templates)))]
    h = rng.uniform(*cfg.person_height) * H
    base = TEMPLATES[tmpl]
    xy = base * h + np.array([rng.uniform(0, W), rng.uniform(-0.2 * h, H - 0.8 * h)])
    xy = xy + rng.normal(0.0, cfg.joint_noise + 0.05 * h, size=xy.shape)
    xy = np.clip(xy, [0.0, 0.0], [W, H])
    conf = rng.uniform(0.05, 0.35, size=len(xy))
    pose = Pose(xy, conf, np.ones(len(xy), dtype=bool))
    box = clip_box(tight_box(pose, cfg.gt_box_pad), W, H)
    score = pose_score(rng.uniform(0.1, 0.5), pose)
    return PoseProposal(image_id, box, pose.with_score(score)), tmpl


def generate_image(cfg: SynthConfig, index: int):
    rng = image_rng(cfg.seed, index)
    W, H = cfg.image_size
    image_id = f"synth_{index:06d}"
    people, props, truth, templates = [], [], [], {}
    for pi, (cx, _w, top, h, tmpl) in enumerate(_place_people(rng, cfg, W, H)):
        gt = _gt_person(rng, cfg, cx, top, h, tmpl)
        people.append(gt)
        templates[(image_id, pi)] = tmpl
        if rng.random() < cfg.miss_rate:
            continue
        for _ in range(1 + int(rng.poisson(cfg.duplicate_rate))):
            prop, off = _proposal(rng, cfg, image_id, gt, W, H, cfg.offset_models[tmpl])
            props.append(prop)
            truth.append(ProposalTruth(image_id, pi, tmpl, off))
    for _ in range(int(rng.poisson(cfg.fp_rate))):
        prop, tmpl = _false_positive(rng, cfg, image_id, W, H)
        props.append(prop)
        truth.append(ProposalTruth(image_id, -1, tmpl, None))
    return ImageAnnotation(image_id, W, H, tuple(people)), props, truth, templates


def generate_detailed(cfg: SynthConfig) -> SynthData:
    gts, props, truth, templates = [], [], [], {}
    for i in range(cfg.n_images):
        ann, p, t, tm = generate_image(cfg, i)
        gts.append(ann)
        props.extend(p)
        truth.extend(t)
        templates.update(tm)
    return SynthData(gts, props, truth, templates)


def generate(cfg: SynthConfig) -> tuple[list[ImageAnnotation], list[PoseProposal]]:
    data = generate_detailed(cfg)
    return data.gts, data.proposals
