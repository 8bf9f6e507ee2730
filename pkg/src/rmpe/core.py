"""Domain types and box geometry shared by the rest of the package.

Boxes are corner-form ``(x_min, y_min, x_max, y_max)`` in pixels. Poses keep
their joints as small read-only numpy arrays so the NMS and evaluation
kernels can stack them without copying through Python objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class RMPEError(Exception):
    """Base class for errors raised by this package."""

    code = "rmpe_error"


class InvalidBoxError(RMPEError, ValueError):
    code = "invalid_box"


class InvalidPoseError(RMPEError, ValueError):
    code = "invalid_pose"


@dataclass(frozen=True)
class JointSchema:
    """Names and semantic roles of the joints in a dataset."""

    name: str
    joints: tuple[str, ...]
    torso: tuple[int, int]  # (upper, lower) joint indices defining torso length
    head: tuple[int, int]   # (top, neck)

    def __post_init__(self):
        m = len(self.joints)
        for idx in (*self.torso, *self.head):
            if not 0 <= idx < m:
                raise ValueError(f"joint index {idx} out of range for {m} joints")
        if self.torso[0] == self.torso[1]:
            raise ValueError("torso joints must differ")

    @property
    def m(self) -> int:
        return len(self.joints)

    def to_dict(self) -> dict:
        return {"name": self.name, "joints": list(self.joints),
                "torso": list(self.torso), "head": list(self.head)}

    @classmethod
    def from_dict(cls, d: dict) -> "JointSchema":
        return cls(str(d["name"]), tuple(d["joints"]), tuple(d["torso"]), tuple(d["head"]))


# Standard MPII ordering; torso = thorax (7) to pelvis (6).
MPII_SCHEMA = JointSchema(
    name="mpii16",
    joints=(
        "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
        "pelvis", "thorax", "upper_neck", "head_top",
        "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
    ),
    torso=(7, 6),
    head=(9, 8),
)


class Joint(NamedTuple):
    x: float
    y: float
    confidence: float
    visible: bool


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """An ordered set of joints plus a pose-level score.

    ``xy`` has shape ``(m, 2)``, ``conf`` and ``visible`` shape ``(m,)``.
    Invisible joints always carry confidence 0.
    """

    xy: np.ndarray
    conf: np.ndarray
    visible: np.ndarray
    score: float = 0.0

    def __post_init__(self):
        xy = _frozen(self.xy)
        conf = _frozen(self.conf)
        vis = np.array(self.visible, dtype=bool)
        vis.setflags(write=False)
        if xy.ndim != 2 or xy.shape[1] != 2:
            raise InvalidPoseError(f"joint array must be (m, 2), got {xy.shape}")
        if conf.shape != (xy.shape[0],) or vis.shape != conf.shape:
            raise InvalidPoseError("confidence/visibility length does not match joints")
        if not (np.all(np.isfinite(xy)) and np.all(np.isfinite(conf))):
            raise InvalidPoseError("non-finite joint values")
        if np.any(conf < 0):
            raise InvalidPoseError("joint confidence must be >= 0")
        if np.any(conf[~vis] != 0):
            raise InvalidPoseError("invisible joints must have confidence 0")
        if not (math.isfinite(self.score) and self.score >= 0):
            raise InvalidPoseError(f"pose score must be finite and >= 0, got {self.score}")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "conf", conf)
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "score", float(self.score))

    @classmethod
    def from_joints(cls, joints: Iterable[Joint], score: float = 0.0) -> "Pose":
        joints = list(joints)
        return cls(
            xy=[(j.x, j.y) for j in joints],
            conf=[j.confidence for j in joints],
            visible=[j.visible for j in joints],
            score=score,
        )

    @property
    def m(self) -> int:
        return self.xy.shape[0]

    @property
    def joints(self) -> tuple[Joint, ...]:
        return tuple(
            Joint(float(x), float(y), float(c), bool(v))
            for (x, y), c, v in zip(self.xy, self.conf, self.visible)
        )

    def with_score(self, score: float) -> "Pose":
        return Pose(self.xy, self.conf, self.visible, score)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (
            self.score == other.score
            and np.array_equal(self.xy, other.xy)
            and np.array_equal(self.conf, other.conf)
            and np.array_equal(self.visible, other.visible)
        )

    __hash__ = None


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite box coordinates {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBoxError(f"box must have positive width and height, got {vals}")
        for name, v in zip(("x_min", "y_min", "x_max", "y_max"), vals):
            object.__setattr__(self, name, float(v))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def iou(self, other: "BBox") -> float:
        iw = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        ih = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        return inter / (self.area + other.area - inter)


@dataclass(frozen=True)
class BoxOffset:
    """Corner offsets of a box relative to a reference box, in units of the
    reference width (x terms) and height (y terms)."""

    d: tuple[float, float, float, float]

    def __post_init__(self):
        d = tuple(float(v) for v in self.d)
        if len(d) != 4 or not all(math.isfinite(v) for v in d):
            raise ValueError(f"offset must be 4 finite numbers, got {self.d}")
        object.__setattr__(self, "d", d)


@dataclass(frozen=True)
class PoseProposal:
    image_id: str
    box: BBox
    pose: Pose

    @property
    def score(self) -> float:
        return self.pose.score


@dataclass(frozen=True)
class GroundTruth:
    pose: Pose
    box: BBox
    head_size: float

    def __post_init__(self):
        if not (math.isfinite(self.head_size) and self.head_size > 0):
            raise InvalidPoseError(f"head_size must be > 0, got {self.head_size}")


@dataclass(frozen=True)
class ImageAnnotation:
    image_id: str
    width: float
    height: float
    people: tuple[GroundTruth, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image dimensions must be positive")
        object.__setattr__(self, "people", tuple(self.people))

    def contains(self, pose: Pose) -> bool:
        x, y = pose.xy[:, 0], pose.xy[:, 1]
        return bool(np.all((x >= 0) & (x <= self.width) & (y >= 0) & (y <= self.height)))


def extend_box(box: BBox, factor: float) -> BBox:
    """Grow ``box`` about its center so each side becomes ``(1 + factor)`` times longer."""
    if not factor >= 0:
        raise ValueError(f"factor must be >= 0, got {factor}")
    cx, cy = box.center
    hw = 0.5 * box.width * (1.0 + factor)
    hh = 0.5 * box.height * (1.0 + factor)
    return BBox(cx - hw, cy - hh, cx + hw, cy + hh)


def clip_box(box: BBox, width: float, height: float) -> BBox:
    return BBox(max(box.x_min, 0.0), max(box.y_min, 0.0),
                min(box.x_max, float(width)), min(box.y_max, float(height)))


def box_offset(det: BBox, gt: BBox) -> BoxOffset:
    w, h = gt.width, gt.height
    return BoxOffset((
        (det.x_min - gt.x_min) / w,
        (det.y_min - gt.y_min) / h,
        (det.x_max - gt.x_max) / w,
        (det.y_max - gt.y_max) / h,
    ))


def apply_offset(gt: BBox, off: BoxOffset | Sequence[float]) -> BBox:
    """Inverse of :func:`box_offset`; raises ``InvalidBoxError`` on a degenerate result."""
    d = off.d if isinstance(off, BoxOffset) else tuple(off)
    w, h = gt.width, gt.height
    return BBox(gt.x_min + d[0] * w, gt.y_min + d[1] * h,
                gt.x_max + d[2] * w, gt.y_max + d[3] * h)


def pose_score(box_confidence: float, pose: Pose) -> float:
    """Pose-level score: detector box confidence times mean joint confidence."""
    return float(box_confidence) * float(np.mean(pose.conf))


def tight_box(pose: Pose, pad: float = 0.0) -> BBox:
    """Bounding box of the visible joints, padded by ``pad`` times its size."""
    pts = pose.xy[pose.visible] if pose.visible.any() else pose.xy
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    box = BBox(lo[0], lo[1], max(hi[0], lo[0] + 1e-6), max(hi[1], lo[1] + 1e-6))
    return extend_box(box, pad) if pad else box
