"""Affine spatial transform, its exact inverse, and gradients through the inversion.

All points live in the normalized ``[-1, 1]`` frame used by spatial transformer
grids. A forward map sends target coordinates to source coordinates,
``p_s = A @ p_t + t``; the de-transform sends them back, ``p_t = G @ p_s + g``
with ``G = inv(A)`` and ``g = -G @ t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BBox, RMPEError

EPS_SING = 1e-8


class SingularMapError(RMPEError, ValueError):
    code = "singular_map"


def _mat(a, shape) -> np.ndarray:
    a = np.array(a, dtype=float)
    if a.shape != shape:
        raise ValueError(f"expected shape {shape}, got {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AffineMap:
    A: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _mat(self.A, (2, 2)))
        object.__setattr__(self, "t", _mat(self.t, (2,)))

    @classmethod
    def identity(cls) -> "AffineMap":
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_theta(cls, theta) -> "AffineMap":
        """Build from the 2x3 block ``[theta1 theta2 theta3]``."""
        theta = np.asarray(theta, dtype=float).reshape(2, 3)
        return cls(theta[:, :2], theta[:, 2])

    @property
    def theta(self) -> np.ndarray:
        return np.column_stack([self.A, self.t])

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.A))

    def is_singular(self, eps: float = EPS_SING) -> bool:
        return abs(self.det) <= eps


@dataclass(frozen=True, eq=False)
class DetransformMap:
    G: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "G", _mat(self.G, (2, 2)))
        object.__setattr__(self, "g", _mat(self.g, (2,)))

    @property
    def gamma(self) -> np.ndarray:
        return np.column_stack([self.G, self.g])


@dataclass(frozen=True, eq=False)
class GradPacket:
    """Upstream gradients of a scalar loss with respect to ``G`` and ``g``."""

    dJ_dG: np.ndarray
    dJ_dg: np.ndarray

    def __post_init__(self):
        dG = _mat(self.dJ_dG, (2, 2))
        dg = _mat(self.dJ_dg, (2,))
        if not (np.all(np.isfinite(dG)) and np.all(np.isfinite(dg))):
            raise ValueError("gradients must be finite")
        object.__setattr__(self, "dJ_dG", dG)
        object.__setattr__(self, "dJ_dg", dg)


def stn_apply(amap: AffineMap, p):
    """Map target point(s) ``p`` (shape ``(2,)`` or ``(n, 2)``) to source coordinates."""
    p = np.asarray(p, dtype=float)
    return p @ amap.A.T + amap.t


def sdtn_apply(dmap: DetransformMap, p):
    p = np.asarray(p, dtype=float)
    return p @ dmap.G.T + dmap.g


def _checked_inverse(amap: AffineMap, eps: float) -> np.ndarray:
    if amap.is_singular(eps):
        raise SingularMapError(f"|det(A)| = {abs(amap.det):.3g} <= {eps:g}")
    return np.linalg.inv(amap.A)


def sdtn_invert(amap: AffineMap, eps: float = EPS_SING) -> DetransformMap:
    G = _checked_inverse(amap, eps)
    return DetransformMap(G, -G @ amap.t)


def sdtn_backprop(amap: AffineMap, grads: GradPacket, eps: float = EPS_SING):
    """Pull gradients w.r.t. the de-transform ``(G, g)`` back to the forward map ``(A, t)``.

    ``g = -G t`` depends on ``A`` through ``G``, so the gradient reaching ``G``
    is the upstream ``dJ/dG`` plus the path through ``g``: ``-dJ/dg t^T``.
    With ``dG = -G dA G`` this gives ``dJ/dA = -G^T (dJ/dG - dJ/dg t^T) G^T``
    and ``dJ/dt = -G^T dJ/dg``.

    Returns ``(dJ_dA, dJ_dt)``.
    """
    G = _checked_inverse(amap, eps)
    dG_total = grads.dJ_dG - np.outer(grads.dJ_dg, amap.t)
    dJ_dA = -G.T @ dG_total @ G.T
    dJ_dt = -G.T @ grads.dJ_dg
    return dJ_dA, dJ_dt


def linear_loss(C_G, c_g):
    """Scalar test loss ``J = <C_G, G> + <c_g, g>`` as a function of ``(A, t)``."""
    C_G = np.asarray(C_G, dtype=float)
    c_g = np.asarray(c_g, dtype=float)

    def loss(A, t):
        d = sdtn_invert(AffineMap(A, t))
        return float(np.sum(C_G * d.G) + c_g @ d.g)

    return loss


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Element-wise central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=float)
    grad = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def random_affine(rng: np.random.Generator, min_abs_det: float = 0.1) -> AffineMap:
    """Draw a random well-conditioned map (rejecting near-singular ones)."""
    while True:
        A = rng.uniform(-2.0, 2.0, size=(2, 2))
        if abs(np.linalg.det(A)) >= min_abs_det:
            return AffineMap(A, rng.uniform(-1.0, 1.0, size=2))


def gradcheck(trials: int = 100, h: float = 1e-6, seed: int = 0) -> float:
    """Max element-wise relative error of :func:`sdtn_backprop` against central differences.

    The relative error uses ``max(1, |analytic|)`` as denominator.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        amap = random_affine(rng)
        C_G = rng.normal(size=(2, 2))
        c_g = rng.normal(size=2)
        dA, dt = sdtn_backprop(amap, GradPacket(C_G, c_g))
        loss = linear_loss(C_G, c_g)
        fd_A = central_difference(lambda A: loss(A, amap.t), amap.A, h)
        fd_t = central_difference(lambda t: loss(amap.A, t), amap.t, h)
        for an, fd in ((dA, fd_A), (dt, fd_t)):
            err = np.abs(an - fd) / np.maximum(1.0, np.abs(an))
            worst = max(worst, float(err.max()))
    return worst


def roundtrip_error(trials: int = 1000, points_per_axis: int = 4, seed: int = 0) -> float:
    """Max ``|sdtn(stn(p)) - p|`` over random maps and a regular grid in ``[-1, 1]^2``."""
    rng = np.random.default_rng(seed)
    ax = np.linspace(-1.0, 1.0, points_per_axis)
    grid = np.stack(np.meshgrid(ax, ax), axis=-1).reshape(-1, 2)
    worst = 0.0
    for _ in range(trials):
        amap = random_affine(rng)
        back = sdtn_apply(sdtn_invert(amap), stn_apply(amap, grid))
        worst = max(worst, float(np.abs(back - grid).max()))
    return worst


# Pixel <-> normalized frame helpers. The normalized frame maps a box to [-1, 1]^2.

def pixel_to_normalized(box: BBox, p):
    p = np.asarray(p, dtype=float)
    c = np.array(box.center)
    half = np.array([box.width, box.height]) / 2.0
    return (p - c) / half


def normalized_to_pixel(box: BBox, q):
    q = np.asarray(q, dtype=float)
    c = np.array(box.center)
    half = np.array([box.width, box.height]) / 2.0
    return q * half + c
