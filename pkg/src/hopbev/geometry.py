"""Planar rigid-transform algebra for ego-frame alignment.

Everything here is plain float64 numpy. A ``Transform2D`` maps coordinates
expressed in a *source* frame into a *target* frame; ``pose_relative`` builds
the map between two ego poses, and ``transform_boxes`` applies it to box sets
(centers as points, velocities as vectors, yaw shifted by the rotation angle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Normalize an angle (scalar or array) to (-pi, pi].

    Values already inside the interval pass through bit-exactly, so repeated
    normalization never drifts.
    """
    return a - TWO_PI * np.ceil((a - math.pi) / TWO_PI)


@dataclass(frozen=True)
class Transform2D:
    """Rigid SE(2) map: p_target = R(angle) @ p_source + (tx, ty)."""

    angle: float
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, rotation, translation, tol=1e-9):
        """Build from an explicit 2x2 rotation matrix, validating it.

        Raises ValueError if the matrix is not orthonormal with det +1
        within ``tol``.
        """
        r = np.asarray(rotation, dtype=np.float64)
        if r.shape != (2, 2):
            raise ValueError(f"rotation must be 2x2, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(2), atol=tol):
            raise ValueError("rotation matrix is not orthonormal")
        if abs(float(np.linalg.det(r)) - 1.0) > tol:
            raise ValueError("rotation matrix determinant is not +1")
        angle = math.atan2(float(r[1, 0]), float(r[0, 0]))
        t = np.asarray(translation, dtype=np.float64).reshape(2)
        return cls(float(wrap_angle(angle)), float(t[0]), float(t[1]))

    @property
    def rotation(self):
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s], [s, c]], dtype=np.float64)

    @property
    def translation(self):
        return np.array([self.tx, self.ty], dtype=np.float64)

    def apply(self, points):
        """Map points (..., 2) from the source frame to the target frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_vectors(self, vectors):
        """Rotate free vectors (..., 2); translation does not apply."""
        v = np.asarray(vectors, dtype=np.float64)
        return v @ self.rotation.T


def compose(a: Transform2D, b: Transform2D) -> Transform2D:
    """Transform equal to applying ``b`` first, then ``a``."""
    t = a.apply(b.translation)
    return Transform2D(float(wrap_angle(a.angle + b.angle)), float(t[0]), float(t[1]))


def invert(a: Transform2D) -> Transform2D:
    c, s = math.cos(a.angle), math.sin(a.angle)
    # R^T @ (-t)
    tx = -(c * a.tx + s * a.ty)
    ty = -(-s * a.tx + c * a.ty)
    return Transform2D(float(wrap_angle(-a.angle)), tx, ty)


def pose_relative(target, source) -> Transform2D:
    """Map from the source pose's ego frame into the target pose's ego frame.

    Poses expose ``px``, ``py``, ``heading`` (world position and heading).
    ``pose_relative(p, p)`` is the identity; applying the result to a point's
    source-frame coordinates yields its target-frame coordinates.
    """
    to_world_src = Transform2D(source.heading, source.px, source.py)
    to_world_tgt = Transform2D(target.heading, target.px, target.py)
    return compose(invert(to_world_tgt), to_world_src)


def transform_boxes(boxes, transform: Transform2D):
    """Apply a rigid transform to a sequence of boxes.

    Centers map as points, (vx, vy) as vectors, yaw shifts by the rotation
    angle (renormalized to (-pi, pi]); z, sizes, class and track id are
    untouched. Returns a new list; inputs are not mutated.
    """
    if transform.angle == 0.0 and transform.tx == 0.0 and transform.ty == 0.0:
        # Identity short-circuit keeps the static-world case bit-exact.
        return [replace(b) for b in boxes]
    out = []
    for b in boxes:
        cx, cy = transform.apply(np.array([b.x, b.y]))
        vx, vy = transform.apply_vectors(np.array([b.vx, b.vy]))
        out.append(
            replace(
                b,
                x=float(cx),
                y=float(cy),
                yaw=float(wrap_angle(b.yaw + transform.angle)),
                vx=float(vx),
                vy=float(vy),
            )
        )
    return out
