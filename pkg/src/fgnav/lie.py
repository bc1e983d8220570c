"""SE(2) / SE(3) rigid transforms and their tangent-space maps.

Conventions used throughout the package:

* tangent vectors stack translation before rotation: ``[dx, dy, dtheta]``
  for SE(2) and ``[rho, phi]`` (two 3-vectors) for SE(3);
* perturbations act on the right, ``p * exp(delta)``, and every retraction
  and factor Jacobian in the package follows that convention;
* ``between(a, b) = inverse(a) * b``.

Rotations are kept as matrices. Every composition re-orthonormalizes the
product with one Newton-Schulz polar step, which projects a nearly
orthonormal matrix onto the closest rotation and keeps drift at the
round-off level indefinitely.

``log`` rejects rotations at (or numerically indistinguishable from)
angle pi instead of picking a branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_TWO_PI = 2.0 * math.pi


class SingularLogError(ValueError):
    """Raised when log() is evaluated at a rotation of angle pi."""


class NonPlanarPoseError(ValueError):
    """Raised when project_se2() receives a pose that is not planar."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    t = math.remainder(theta, _TWO_PI)
    if t <= -math.pi:
        t += _TWO_PI
    return t


def skew(v) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    # One Newton-Schulz polar step; input must already be close to
    # orthonormal, which holds for products of rotations.
    return r @ (1.5 * np.eye(3) - 0.5 * (r.T @ r))


# ---------------------------------------------------------------------------
# SO(3) helpers


def _so3_exp(phi: np.ndarray) -> np.ndarray:
    theta2 = float(phi @ phi)
    k = skew(phi)
    if theta2 < 1e-16:
        return np.eye(3) + k + 0.5 * (k @ k)
    theta = math.sqrt(theta2)
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * k
        + ((1.0 - math.cos(theta)) / theta2) * (k @ k)
    )


def _so3_log(r: np.ndarray) -> np.ndarray:
    s_vec = 0.5 * _vee(r - r.T)  # norm equals sin(theta)
    s = float(np.linalg.norm(s_vec))
    c = max(-1.0, min(1.0, 0.5 * (float(np.trace(r)) - 1.0)))
    theta = math.atan2(s, c)
    if math.pi - theta < 1e-9:
        raise SingularLogError("rotation angle at pi, log is not unique")
    if theta < 1e-8:
        return s_vec * (1.0 + theta * theta / 6.0)
    return s_vec * (theta / s)


def _so3_left_v(phi: np.ndarray) -> np.ndarray:
    """V(phi) = I + (1-cos)/t^2 K + (t-sin)/t^3 K^2 (translation part of exp)."""
    theta2 = float(phi @ phi)
    k = skew(phi)
    # naive (1-cos)/t^2 and (t-sin)/t^3 lose half their digits below t ~ 1e-2,
    # so use the half-angle identity for a and a wide Taylor branch for b
    if theta2 < 1e-4:
        a = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
        b = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
    else:
        theta = math.sqrt(theta2)
        half = 0.5 * theta
        sc = math.sin(half) / half
        a = 0.5 * sc * sc
        b = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) + a * k + b * (k @ k)


def _so3_left_v_inv(phi: np.ndarray) -> np.ndarray:
    theta2 = float(phi @ phi)
    k = skew(phi)
    # c cancels to t^2/12; the trig form is only safe once t^2 dominates rounding
    if theta2 < 1e-4:
        c = 1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    else:
        theta = math.sqrt(theta2)
        half = 0.5 * theta
        c = (1.0 - half / math.tan(half)) / theta2
    return np.eye(3) - 0.5 * k + c * (k @ k)


# ---------------------------------------------------------------------------
# Groups


@dataclass(frozen=True)
class Pose2:
    """Planar rigid transform (x, y, theta), theta wrapped to (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @staticmethod
    def identity() -> "Pose2":
        return Pose2(0.0, 0.0, 0.0)

    @staticmethod
    def exp(v) -> "Pose2":
        """Exponential map of [dx, dy, dtheta]."""
        dx, dy, w = float(v[0]), float(v[1]), float(v[2])
        if abs(w) < 1e-7:
            a = 1.0 - w * w / 6.0
            b = 0.5 * w - w ** 3 / 24.0
        else:
            a = math.sin(w) / w
            sc = math.sin(0.5 * w) / (0.5 * w)
            b = 0.5 * w * sc * sc  # (1-cos)/w without cancellation
        return Pose2(a * dx - b * dy, b * dx + a * dy, w)

    def log(self) -> np.ndarray:
        """Inverse of exp. Rejects theta at pi."""
        w = self.theta
        if math.pi - abs(w) < 1e-12:
            raise SingularLogError("rotation angle at pi, log is not unique")
        if abs(w) < 1e-7:
            a = 1.0 - w * w / 6.0
            b = 0.5 * w - w ** 3 / 24.0
        else:
            a = math.sin(w) / w
            sc = math.sin(0.5 * w) / (0.5 * w)
            b = 0.5 * w * sc * sc
        den = a * a + b * b
        dx = (a * self.x + b * self.y) / den
        dy = (-b * self.x + a * self.y) / den
        return np.array([dx, dy, w])

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.theta)

    def between(self, other: "Pose2") -> "Pose2":
        return self.inverse().compose(other)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def act(self, p) -> np.ndarray:
        """Transform a 2D point from the local frame to the parent frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]])

    def adjoint(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.y], [s, c, -self.x], [0.0, 0.0, 1.0]])

    def tangent_dim(self) -> int:
        return 3


class Pose3:
    """Rigid transform in 3D: rotation matrix plus translation vector."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation=None, translation=None, *, _skip_check: bool = False):
        r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
        if not _skip_check:
            if r.shape != (3, 3):
                raise ValueError(f"rotation must be 3x3, got {r.shape}")
            if t.shape != (3,):
                raise ValueError(f"translation must be a 3-vector, got {t.shape}")
            err = float(np.abs(r.T @ r - np.eye(3)).max())
            if err > 1e-6:
                raise ValueError(f"rotation is not orthonormal (|R^T R - I| = {err:.2e})")
            if err > 1e-12:
                r = _orthonormalize(r)
        self.rotation = r
        self.translation = t

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(np.eye(3), np.zeros(3), _skip_check=True)

    @staticmethod
    def exp(v) -> "Pose3":
        """Exponential map of [rho, phi]."""
        v = np.asarray(v, dtype=float)
        phi = v[3:6]
        return Pose3(_so3_exp(phi), _so3_left_v(phi) @ v[0:3], _skip_check=True)

    def log(self) -> np.ndarray:
        phi = _so3_log(self.rotation)
        rho = _so3_left_v_inv(phi) @ self.translation
        return np.concatenate([rho, phi])

    def compose(self, other: "Pose3") -> "Pose3":
        r = _orthonormalize(self.rotation @ other.rotation)
        t = self.rotation @ other.translation + self.translation
        return Pose3(r, t, _skip_check=True)

    def inverse(self) -> "Pose3":
        rt = self.rotation.T
        return Pose3(rt.copy(), -(rt @ self.translation), _skip_check=True)

    def between(self, other: "Pose3") -> "Pose3":
        rt = self.rotation.T
        r = _orthonormalize(rt @ other.rotation)
        t = rt @ (other.translation - self.translation)
        return Pose3(r, t, _skip_check=True)

    def act(self, p) -> np.ndarray:
        """Transform a 3D point from the local frame to the parent frame."""
        return self.rotation @ np.asarray(p, dtype=float) + self.translation

    def adjoint(self) -> np.ndarray:
        ad = np.zeros((6, 6))
        ad[0:3, 0:3] = self.rotation
        ad[0:3, 3:6] = skew(self.translation) @ self.rotation
        ad[3:6, 3:6] = self.rotation
        return ad

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[0:3, 0:3] = self.rotation
        m[0:3, 3] = self.translation
        return m

    def tangent_dim(self) -> int:
        return 6

    def __repr__(self) -> str:
        return f"Pose3(t={self.translation}, R={self.rotation.tolist()})"


# ---------------------------------------------------------------------------
# Generic entry points (dispatch on value type / tangent length)


def exp(v):
    """Tangent vector to group element: length 3 -> Pose2, length 6 -> Pose3."""
    v = np.asarray(v, dtype=float)
    if v.shape == (3,):
        return Pose2.exp(v)
    if v.shape == (6,):
        return Pose3.exp(v)
    raise ValueError(f"tangent must have length 3 or 6, got shape {v.shape}")


def log(p) -> np.ndarray:
    return p.log()


def compose(a, b):
    return a.compose(b)


def inverse(p):
    return p.inverse()


def between(a, b):
    """Relative transform inverse(a) * b."""
    return a.between(b)


def project_se2(p: Pose3, tol: float = 1e-6) -> Pose2:
    """Drop a planar Pose3 to Pose2. Rejects non-planar input beyond tol."""
    r, t = p.rotation, p.translation
    off = max(
        abs(float(t[2])),
        abs(float(r[2, 0])),
        abs(float(r[2, 1])),
        abs(float(r[0, 2])),
        abs(float(r[1, 2])),
        abs(float(r[2, 2]) - 1.0),
    )
    if off > tol:
        raise NonPlanarPoseError(f"pose is not planar (deviation {off:.2e} > tol {tol:.0e})")
    return Pose2(float(t[0]), float(t[1]), math.atan2(float(r[1, 0]), float(r[0, 0])))


def se2_view(p) -> Pose2:
    """Planar reading (x, y, yaw) of a pose, without a planarity check.

    Factor residuals use this to interpret nearly planar Pose3 estimates in
    SE(2); the strict contract lives in project_se2.
    """
    if isinstance(p, Pose2):
        return p
    r, t = p.rotation, p.translation
    return Pose2(float(t[0]), float(t[1]), math.atan2(float(r[1, 0]), float(r[0, 0])))


def embed_se3(p: Pose2) -> Pose3:
    """Lift a Pose2 into the z = 0 plane of SE(3)."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose3(r, np.array([p.x, p.y, 0.0]), _skip_check=True)


# ---------------------------------------------------------------------------
# Tangent-space Jacobians
#
# left_jacobian(xi) is J_l with exp(xi + d) ~= exp(J_l(xi) d) * exp(xi);
# the right-hand versions follow from J_r(xi) = J_l(-xi). They are computed
# from the series J_l = sum ad^n / (n+1)! which converges for every input
# we produce (residual magnitudes stay well below pi).


def _algebra_adjoint(xi: np.ndarray) -> np.ndarray:
    if xi.shape == (3,):
        return np.array(
            [[0.0, -xi[2], xi[1]], [xi[2], 0.0, -xi[0]], [0.0, 0.0, 0.0]]
        )
    ad = np.zeros((6, 6))
    ad[0:3, 0:3] = skew(xi[3:6])
    ad[0:3, 3:6] = skew(xi[0:3])
    ad[3:6, 3:6] = skew(xi[3:6])
    return ad


def left_jacobian(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    ad = _algebra_adjoint(xi)
    n = ad.shape[0]
    total = np.eye(n)
    term = np.eye(n)
    for k in range(1, 60):
        term = (term @ ad) / (k + 1.0)
        total = total + term
        if float(np.abs(term).max()) < 1e-17:
            break
    return total

def left_jacobian_inverse(xi) -> np.ndarray:
    return np.linalg.inv(left_jacobian(xi))


def right_jacobian_inverse(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    return left_jacobian_inverse(-xi)
