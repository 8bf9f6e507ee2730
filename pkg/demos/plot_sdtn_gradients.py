"""
Transforming a pose crop and mapping it back
============================================

A spatial transformer crops a person into a canonical frame; after the pose
is estimated there, the de-transformer maps the joints back. This script
walks through that round trip and checks the analytic gradients of the
de-transformer against finite differences.
"""

import numpy as np

from rmpe.affine import (AffineMap, GradPacket, central_difference, linear_loss,
                         normalized_to_pixel, pixel_to_normalized, sdtn_apply, sdtn_backprop,
                         sdtn_invert, stn_apply)
from rmpe.core import BBox

##############################################################################
# A crop that zooms in by 2x around a point left of center, with a small
# rotation. Coordinates live in the normalized [-1, 1] frame.

angle = np.deg2rad(10)
rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
fwd = AffineMap(0.5 * rot, np.array([-0.3, 0.1]))
back = sdtn_invert(fwd)
print("forward A:\n", fwd.A, "\ninverse G:\n", back.G, "\ng:", back.g)

##############################################################################
# Joints predicted in the crop go back to the image frame exactly.

joints_in_crop = np.array([[0.0, -0.8], [0.1, -0.2], [-0.2, 0.5], [0.25, 0.6]])
in_image = sdtn_apply(back, joints_in_crop)
print("round-trip error:", np.abs(stn_apply(fwd, in_image) - joints_in_crop).max())

##############################################################################
# The normalized frame is relative to the detected person box; converting
# to pixels and back is lossless.

box = BBox(120, 40, 320, 440)
px = normalized_to_pixel(box, in_image)
print("joints in pixels:\n", px.round(1))
print("pixel round trip:", np.abs(pixel_to_normalized(box, px) - in_image).max())

##############################################################################
# Gradients. Take a linear loss on the de-transformer parameters, push its
# upstream gradient through ``sdtn_backprop`` and compare with central
# differences on the forward parameters (A, t).

rng = np.random.default_rng(0)
C_G, c_g = rng.normal(size=(2, 2)), rng.normal(size=2)
dA, dt = sdtn_backprop(fwd, GradPacket(C_G, c_g))
loss = linear_loss(C_G, c_g)

def loss_of_theta(theta):
    m = AffineMap.from_theta(theta)
    return loss(m.A, m.t)


numeric = central_difference(loss_of_theta, fwd.theta, 1e-6)
analytic = np.column_stack([dA, dt])
print("analytic :\n", analytic.round(6))
print("numerical:\n", numeric.round(6))
print("max abs difference:", np.abs(analytic - numeric).max())
