"""Residual catalog for estimation, prediction and planning.

Every factor supplies a raw residual, analytic Jacobian blocks with respect
to a right perturbation of each connected variable, and a whitening model
(per-dimension standard deviations or a full covariance). Factors carry two
pieces of direction metadata used by :func:`apply_mode_masks`:

* ``component``: which stage of the pipeline the factor belongs to;
* ``directed_sources``: which of its variables act as information sources
  in the directed modes. A source variable feeds the residual but its
  Jacobian block is masked out of the linear system, so it receives no
  update through this factor.

Hinge-type factors (limits, obstacle clearance) return a zero residual and
zero Jacobian on their inactive branch.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

from .lie import (
    Pose2,
    Pose3,
    left_jacobian_inverse,
    right_jacobian_inverse,
    se2_view,
    skew,
)


class Component(IntEnum):
    ESTIMATION = 0
    PREDICTION = 1
    PLANNING = 2


class Mode(Enum):
    UNDIRECTED = "undirected"
    DIRECTED = "directed"
    DECOUPLED = "decoupled"
    COOPERATIVE = "cooperative"


class Direction(Enum):
    """Information flow of a dynamic obstacle factor."""

    TO_PLANNING = "to_planning"      # prediction is the source, planning reacts
    TO_PREDICTION = "to_prediction"  # planning is the source, prediction reacts


@dataclass(frozen=True)
class ModeConfig:
    mode: Mode
    cooperation_weight: float = 1.0

    def __post_init__(self):
        if not isinstance(self.mode, Mode):
            object.__setattr__(self, "mode", Mode(self.mode))
        if self.cooperation_weight < 0:
            raise ValueError("cooperation_weight must be >= 0")


class NoiseSpec:
    """Per-dimension standard deviations; positive."""

    def __init__(self, sigmas):
        arr = np.atleast_1d(np.asarray(sigmas, dtype=float))
        if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
            raise ValueError("noise sigmas must be positive and finite")
        self.sigmas = arr

    @classmethod
    def from_covariance(cls, cov) -> "NoiseSpec":
        """Full covariance; whitening uses the inverse Cholesky factor."""
        cov = np.asarray(cov, dtype=float)
        lower = np.linalg.cholesky(cov)
        spec = cls.__new__(cls)
        spec.sigmas = None
        spec._sqrt_info = np.linalg.inv(lower)
        return spec

    def sqrt_info(self, dim: int) -> np.ndarray:
        if self.sigmas is None:
            w = self._sqrt_info
            if w.shape != (dim, dim):
                raise ValueError(f"covariance is {w.shape}, factor dim is {dim}")
            return w
        s = self.sigmas
        if s.shape == (1,):
            s = np.full(dim, s[0])
        if s.shape != (dim,):
            raise ValueError(f"expected {dim} sigmas, got {s.shape}")
        return 1.0 / s


def _sqrt_info(noise, dim: int) -> np.ndarray:
    if isinstance(noise, NoiseSpec):
        return noise.sqrt_info(dim)
    return NoiseSpec(noise).sqrt_info(dim)


def propagate_unicycle(x: Pose2, v: float, omega: float, dt: float) -> Pose2:
    """One step of the planar unicycle with midpoint heading.

    x_{+} = x + v dt cos(theta + omega dt / 2)
    y_{+} = y + v dt sin(theta + omega dt / 2)
    theta_{+} = theta + omega dt
    """
    psi = x.theta + 0.5 * omega * dt
    return Pose2(
        x.x + v * dt * math.cos(psi),
        x.y + v * dt * math.sin(psi),
        x.theta + omega * dt,
    )


def com_pose(motion: Pose3, com_ref: Pose3) -> Pose3:
    """Object centre pose at step k from the motion since the reference step."""
    return motion.compose(com_ref)


class Factor:
    """Base class: keys, whitening, masks and direction metadata."""

    __slots__ = ("keys", "dim", "sqrt_info", "mask", "directed_sources",
                 "component", "cooperative_only")

    def __init__(self, keys, noise, dim, component=Component.ESTIMATION,
                 directed_sources=None, cooperative_only=False, weight=1.0):
        self.keys = tuple(keys)
        self.dim = int(dim)
        w = _sqrt_info(noise, self.dim)
        if weight != 1.0:
            if weight < 0:
                raise ValueError("factor weight must be >= 0")
            w = w * weight
        self.sqrt_info = w
        self.mask = (False,) * len(self.keys)
        if directed_sources is None:
            directed_sources = (False,) * len(self.keys)
        self.directed_sources = tuple(bool(b) for b in directed_sources)
        if len(self.directed_sources) != len(self.keys):
            raise ValueError("directed_sources length must match keys")
        self.component = component
        self.cooperative_only = bool(cooperative_only)

    # subclasses implement these two
    def residual(self, values) -> np.ndarray:
        raise NotImplementedError

    def linearize_raw(self, values):
        """Return (residual, [jacobian per key])."""
        raise NotImplementedError

    def jacobians(self, values) -> list[np.ndarray]:
        return self.linearize_raw(values)[1]

    def whitened_residual(self, values) -> np.ndarray:
        r = self.residual(values)
        w = self.sqrt_info
        return w * r if w.ndim == 1 else w @ r

    def whitened_linearization(self, values):
        """Whitened residual plus per-key blocks; masked keys yield None."""
        r, jacs = self.linearize_raw(values)
        w = self.sqrt_info
        if w.ndim == 1:
            rw = w * r
            wc = w[:, None]
            blocks = [
                (k, None) if m else (k, wc * j)
                for k, j, m in zip(self.keys, jacs, self.mask)
            ]
        else:
            rw = w @ r
            blocks = [
                (k, None) if m else (k, w @ j)
                for k, j, m in zip(self.keys, jacs, self.mask)
            ]
        return rw, blocks

    def with_mask(self, mask) -> "Factor":
        mask = tuple(bool(b) for b in mask)
        if len(mask) != len(self.keys):
            raise ValueError("mask length must match keys")
        out = copy.copy(self)
        out.mask = mask
        return out


def apply_mode_masks(factors, mode) -> list[Factor]:
    """Instantiate one operating mode over a tagged factor set.

    Undirected and Decoupled clear all masks (Decoupled achieves its
    one-way flow by solving in stages instead). Directed masks each
    factor's declared source variables. Cooperative does the same and
    additionally keeps the factors marked cooperative-only, which the
    other modes drop.
    """
    cfg = mode if isinstance(mode, ModeConfig) else ModeConfig(Mode(mode))
    masked = cfg.mode in (Mode.DIRECTED, Mode.COOPERATIVE)
    out = []
    for f in factors:
        if f.cooperative_only and cfg.mode is not Mode.COOPERATIVE:
            continue
        target = f.directed_sources if masked else (False,) * len(f.keys)
        out.append(f.with_mask(target) if f.mask != target else f)
    return out


# ---------------------------------------------------------------------------
# Estimation factors


class PriorFactor(Factor):
    """r = log(prior^-1 * x) for poses, r = x - prior for vectors."""

    __slots__ = ("prior", "_prior_inv", "_is_pose")

    def __init__(self, key, prior, noise, **kw):
        if isinstance(prior, (Pose2, Pose3)):
            dim = prior.tangent_dim()
            self._is_pose = True
            self._prior_inv = prior.inverse()
        else:
            prior = np.asarray(prior, dtype=float)
            dim = prior.shape[0]
            self._is_pose = False
            self._prior_inv = None
        self.prior = prior
        super().__init__((key,), noise, dim, **kw)

    def residual(self, values):
        x = values[self.keys[0]]
        if self._is_pose:
            return self._prior_inv.compose(x).log()
        return np.asarray(x, dtype=float) - self.prior

    def linearize_raw(self, values):
        if not self._is_pose:
            return self.residual(values), [np.eye(self.dim)]
        r = self.residual(values)
        return r, [right_jacobian_inverse(r)]


class BetweenFactor(Factor):
    """Relative-pose measurement: r = log(z^-1 * a^-1 * b).

    This is the odometry factor when z is an odometry reading, and the
    constant-step planning link in the small built-in example.
    """

    __slots__ = ("measured", "_meas_inv")

    def __init__(self, key_a, key_b, measured, noise, **kw):
        super().__init__((key_a, key_b), noise, measured.tangent_dim(), **kw)
        self.measured = measured
        self._meas_inv = measured.inverse()

    def residual(self, values):
        rel = values[self.keys[0]].between(values[self.keys[1]])
        return self._meas_inv.compose(rel).log()

    def linearize_raw(self, values):
        a = values[self.keys[0]]
        b = values[self.keys[1]]
        rel = a.between(b)
        r = self._meas_inv.compose(rel).log()
        jr_inv = right_jacobian_inverse(r)
        j_b = jr_inv
        j_a = -jr_inv @ rel.inverse().adjoint()
        return r, [j_a, j_b]


def odometry_factor(pose_prev, pose_next, measured, noise, **kw) -> BetweenFactor:
    return BetweenFactor(pose_prev, pose_next, measured, noise, **kw)


class PointMeasurementFactor(Factor):
    """Body-frame point observation: r = X^-1 * m - z."""

    __slots__ = ("measured",)

    def __init__(self, pose_key, point_key, measured, noise, **kw):
        super().__init__((pose_key, point_key), noise, 3, **kw)
        self.measured = np.asarray(measured, dtype=float)

    def residual(self, values):
        x: Pose3 = values[self.keys[0]]
        m = values[self.keys[1]]
        return x.rotation.T @ (m - x.translation) - self.measured

    def linearize_raw(self, values):
        x: Pose3 = values[self.keys[0]]
        m = values[self.keys[1]]
        rt = x.rotation.T
        p = rt @ (m - x.translation)
        r = p - self.measured
        j_x = np.hstack([-np.eye(3), skew(p)])
        return r, [j_x, rt.copy()]


class HybridMotionFactor(Factor):
    """Dynamic point observation through an object motion.

    r = X_k^-1 * (H_{e,k} * m_e) - z_k, where m_e is the point's world
    position at the object's reference step and H_{e,k} the world-frame
    motion since then. The shared reference point couples all observations
    of one object; the parameterization assumes the reference position is
    estimated alongside the motions.
    """

    __slots__ = ("measured",)

    def __init__(self, pose_key, motion_key, point_key, measured, noise, **kw):
        super().__init__((pose_key, motion_key, point_key), noise, 3, **kw)
        self.measured = np.asarray(measured, dtype=float)

    def residual(self, values):
        x: Pose3 = values[self.keys[0]]
        h: Pose3 = values[self.keys[1]]
        m = values[self.keys[2]]
        return x.rotation.T @ (h.act(m) - x.translation) - self.measured

    def linearize_raw(self, values):
        x: Pose3 = values[self.keys[0]]
        h: Pose3 = values[self.keys[1]]
        m = np.asarray(values[self.keys[2]], dtype=float)
        rt = x.rotation.T
        w = h.act(m)
        p = rt @ (w - x.translation)
        r = p - self.measured
        j_x = np.hstack([-np.eye(3), skew(p)])
        rot = rt @ h.rotation
        j_h = np.hstack([rot, rot @ (-skew(m))])
        return r, [j_x, j_h, rot]


class ObjectSmoothingFactor(Factor):
    """Constant relative motion of an object's centre over three steps.

    With C_i = H_i * C_ref, r = log((C_1^-1 C_2)^-1 (C_2^-1 C_3)).
    Zero whenever the centre chain repeats the same relative transform.
    """

    __slots__ = ("com_ref", "_ad_ref_inv")

    def __init__(self, motion_keys, com_ref: Pose3, noise, **kw):
        if len(motion_keys) != 3:
            raise ValueError("smoothing factor needs exactly three motion keys")
        super().__init__(tuple(motion_keys), noise, 6, **kw)
        self.com_ref = com_ref
        self._ad_ref_inv = com_ref.inverse().adjoint()

    def _chain(self, values):
        c1 = values[self.keys[0]].compose(self.com_ref)
        c2 = values[self.keys[1]].compose(self.com_ref)
        c3 = values[self.keys[2]].compose(self.com_ref)
        a = c1.between(c2)
        b = c2.between(c3)
        return a, b

    def residual(self, values):
        a, b = self._chain(values)
        return a.between(b).log()

    def linearize_raw(self, values):
        a, b = self._chain(values)
        m = a.between(b)
        r = m.log()
        jr_inv = right_jacobian_inverse(r)
        jl_inv = jr_inv @ m.inverse().adjoint()
        ad_b_inv = b.inverse().adjoint()
        ad_a_inv = a.inverse().adjoint()
        j1 = jr_inv @ ad_b_inv @ self._ad_ref_inv
        j2 = -(jl_inv @ (np.eye(6) + ad_a_inv)) @ self._ad_ref_inv
        j3 = jr_inv @ self._ad_ref_inv
        return r, [j1, j2, j3]


# ---------------------------------------------------------------------------
# Planning factors


def _planar_chain(value) -> np.ndarray | None:
    """d(se2 perturbation)/d(se3 perturbation) for a planar Pose3.

    For a planar pose the se(3) directions (tx, ty, yaw) coincide with the
    se(2) ones and the out-of-plane directions have no first-order effect
    on the planar view, so the chain is a component selection.
    """
    if isinstance(value, Pose2):
        return None
    p = np.zeros((3, 6))
    p[0, 0] = 1.0
    p[1, 1] = 1.0
    p[2, 5] = 1.0
    return p


class MotionModelFactor(Factor):
    """Unicycle propagation consistency over one planning step.

    Rows 0..2: log of the SE(2) error between the next pose and the
    propagation of the current pose with the next velocity. Rows 3..4:
    v_next - (v_prev + a dt). Poses are read in SE(2); a Pose3 at the
    estimation boundary is interpreted through its planar view.
    """

    __slots__ = ("dt",)

    def __init__(self, pose_a, pose_b, vel_a, vel_b, acc_a, dt, noise, **kw):
        kw.setdefault("component", Component.PLANNING)
        super().__init__((pose_a, pose_b, vel_a, vel_b, acc_a), noise, 5, **kw)
        self.dt = float(dt)

    def residual(self, values):
        xa = se2_view(values[self.keys[0]])
        xb = se2_view(values[self.keys[1]])
        va = np.asarray(values[self.keys[2]], dtype=float)
        vb = np.asarray(values[self.keys[3]], dtype=float)
        aa = np.asarray(values[self.keys[4]], dtype=float)
        g = propagate_unicycle(xa, vb[0], vb[1], self.dt)
        rp = xb.between(g).log()
        rv = vb - (va + aa * self.dt)
        return np.concatenate([rp, rv])

    def linearize_raw(self, values):
        raw_a = values[self.keys[0]]
        raw_b = values[self.keys[1]]
        xa = se2_view(raw_a)
        xb = se2_view(raw_b)
        va = np.asarray(values[self.keys[2]], dtype=float)
        vb = np.asarray(values[self.keys[3]], dtype=float)
        aa = np.asarray(values[self.keys[4]], dtype=float)
        dt = self.dt
        v, om = float(vb[0]), float(vb[1])

        g = propagate_unicycle(xa, v, om, dt)
        e = xb.between(g)
        rp = e.log()
        rv = vb - (va + aa * dt)
        r = np.concatenate([rp, rv])

        jr_inv = right_jacobian_inverse(rp)
        jl_inv = jr_inv @ e.inverse().adjoint()

        psi = xa.theta + 0.5 * om * dt
        cp, sp = math.cos(psi), math.sin(psi)
        rg_t = g.rotation().T
        ra = xa.rotation()

        # current pose: world displacement R_a dt_xy, heading shift d_theta
        s = np.zeros((3, 3))
        s[0:2, 0:2] = rg_t @ ra
        s[0:2, 2] = rg_t @ np.array([-sp, cp]) * (v * dt)
        s[2, 2] = 1.0
        j_pose_a = jr_inv @ s

        # next velocity through the propagation
        t = np.zeros((3, 2))
        t[0:2, 0] = rg_t @ np.array([cp, sp]) * dt
        t[0:2, 1] = rg_t @ np.array([-sp, cp]) * (0.5 * v * dt * dt)
        t[2, 1] = dt
        j_vb_pose = jr_inv @ t

        j_pose_b = -jl_inv

        chain_a = _planar_chain(raw_a)
        if chain_a is not None:
            j_pose_a = j_pose_a @ chain_a
        chain_b = _planar_chain(raw_b)
        if chain_b is not None:
            j_pose_b = j_pose_b @ chain_b

        z23 = np.zeros((2, j_pose_a.shape[1]))
        j_a_full = np.vstack([j_pose_a, z23])
        j_b_full = np.vstack([j_pose_b, np.zeros((2, j_pose_b.shape[1]))])
        j_va = np.vstack([np.zeros((3, 2)), -np.eye(2)])
        j_vb = np.vstack([j_vb_pose, np.eye(2)])
        j_aa = np.vstack([np.zeros((3, 2)), -dt * np.eye(2)])
        return r, [j_a_full, j_b_full, j_va, j_vb, j_aa]


class LimitFactor(Factor):
    """Per-component hinge on box bounds: active only outside [lower, upper]."""

    __slots__ = ("lower", "upper")

    def __init__(self, key, lower, upper, noise, **kw):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if lower.shape != upper.shape or np.any(lower > upper):
            raise ValueError("invalid bounds")
        kw.setdefault("component", Component.PLANNING)
        super().__init__((key,), noise, lower.shape[0], **kw)
        self.lower = lower
        self.upper = upper

    def residual(self, values):
        v = np.asarray(values[self.keys[0]], dtype=float)
        return np.maximum(0.0, v - self.upper) + np.minimum(0.0, v - self.lower)

    def linearize_raw(self, values):
        v = np.asarray(values[self.keys[0]], dtype=float)
        r = np.maximum(0.0, v - self.upper) + np.minimum(0.0, v - self.lower)
        g = np.where(v > self.upper, 1.0, np.where(v < self.lower, 1.0, 0.0))
        return r, [np.diag(g)]


class CostFactor(Factor):
    """Quadratic effort penalty: r = a."""

    __slots__ = ()

    def __init__(self, key, dim, noise, **kw):
        kw.setdefault("component", Component.PLANNING)
        super().__init__((key,), noise, dim, **kw)

    def residual(self, values):
        return np.asarray(values[self.keys[0]], dtype=float).copy()

    def linearize_raw(self, values):
        return self.residual(values), [np.eye(self.dim)]


class ConstantAccelerationFactor(Factor):
    """Control smoothness: r = a_k - a_{k-1}."""

    __slots__ = ()

    def __init__(self, acc_prev, acc_next, dim, noise, **kw):
        kw.setdefault("component", Component.PLANNING)
        super().__init__((acc_prev, acc_next), noise, dim, **kw)

    def residual(self, values):
        prev = np.asarray(values[self.keys[0]], dtype=float)
        nxt = np.asarray(values[self.keys[1]], dtype=float)
        return nxt - prev

    def linearize_raw(self, values):
        return self.residual(values), [-np.eye(self.dim), np.eye(self.dim)]


class GoalFactor(Factor):
    """SE(2) pull toward the local goal: r = log(goal^-1 * x)."""

    __slots__ = ("goal", "_goal_inv")

    def __init__(self, pose_key, goal: Pose2, noise, **kw):
        kw.setdefault("component", Component.PLANNING)
        super().__init__((pose_key,), noise, 3, **kw)
        self.goal = goal
        self._goal_inv = goal.inverse()

    def residual(self, values):
        return self._goal_inv.compose(se2_view(values[self.keys[0]])).log()

    def linearize_raw(self, values):
        raw = values[self.keys[0]]
        r = self._goal_inv.compose(se2_view(raw)).log()
        j = right_jacobian_inverse(r)
        chain = _planar_chain(raw)
        if chain is not None:
            j = j @ chain
        return r, [j]


# ---------------------------------------------------------------------------
# Obstacle factors


def _position_and_jacobian(value, com_ref: Pose3 | None):
    """Workspace xy position of a variable plus its 2-row Jacobian."""
    if com_ref is not None:
        h: Pose3 = value
        centre = h.act(com_ref.translation)
        j = np.hstack([h.rotation, h.rotation @ (-skew(com_ref.translation))])
        return centre[0:2], j[0:2, :]
    if isinstance(value, Pose2):
        j = np.zeros((2, 3))
        j[:, 0:2] = value.rotation()
        return value.translation(), j
    p: Pose3 = value
    j = np.zeros((2, 6))
    j[:, 0:3] = p.rotation[0:2, :]
    return p.translation[0:2], j


class StaticObstacleFactor(Factor):
    """Hinge on signed-distance clearance: r = max(0, d_safe - esdf(p)).

    Applies to a robot pose directly or to an object motion through the
    object's reference centre pose. Positions outside the distance grid
    read as distance zero, i.e. maximally unsafe.
    """

    __slots__ = ("esdf", "d_safe", "com_ref")

    def __init__(self, key, esdf, d_safe, noise, com_ref: Pose3 | None = None, **kw):
        kw.setdefault("component", Component.PLANNING)
        super().__init__((key,), noise, 1, **kw)
        self.esdf = esdf
        self.d_safe = float(d_safe)
        self.com_ref = com_ref

    def residual(self, values):
        p, _ = _position_and_jacobian(values[self.keys[0]], self.com_ref)
        d = self.esdf.query(p[0], p[1])
        return np.array([max(0.0, self.d_safe - d)])

    def linearize_raw(self, values):
        value = values[self.keys[0]]
        p, j_pos = _position_and_jacobian(value, self.com_ref)
        d = self.esdf.query(p[0], p[1])
        if d >= self.d_safe:
            return np.zeros(1), [np.zeros((1, j_pos.shape[1]))]
        g = self.esdf.gradient(p[0], p[1])
        return np.array([self.d_safe - d]), [(-g @ j_pos).reshape(1, -1)]


class DynamicObstacleFactor(Factor):
    """Hinge on the planar range between a planned pose and a predicted centre.

    r = max(0, d_safe - ||t_pose - t_centre||). ``direction`` selects the
    source side that is masked in the directed modes: TO_PLANNING treats
    the predicted motion as given, TO_PREDICTION (the cooperative variant)
    treats the planned pose as given and asks the prediction to make room.
    """

    __slots__ = ("com_ref", "d_safe", "direction")

    def __init__(self, pose_key, motion_key, com_ref: Pose3, d_safe, noise,
                 direction: Direction = Direction.TO_PLANNING, weight=1.0, **kw):
        if direction is Direction.TO_PLANNING:
            kw.setdefault("component", Component.PLANNING)
            kw.setdefault("directed_sources", (False, True))
        else:
            kw.setdefault("component", Component.PREDICTION)
            kw.setdefault("directed_sources", (True, False))
            kw.setdefault("cooperative_only", True)
        super().__init__((pose_key, motion_key), noise, 1, weight=weight, **kw)
        self.com_ref = com_ref
        self.d_safe = float(d_safe)
        self.direction = direction

    def _geometry(self, values):
        p_xy, j_pose = _position_and_jacobian(values[self.keys[0]], None)
        c_xy, j_motion = _position_and_jacobian(
            values[self.keys[1]], self.com_ref)
        diff = p_xy - c_xy
        rng = float(np.hypot(diff[0], diff[1]))
        return diff, rng, j_pose, j_motion

    def residual(self, values):
        _, rng, _, _ = self._geometry(values)
        return np.array([max(0.0, self.d_safe - rng)])

    def linearize_raw(self, values):
        diff, rng, j_pose, j_motion = self._geometry(values)
        if rng >= self.d_safe:
            return np.zeros(1), [
                np.zeros((1, j_pose.shape[1])),
                np.zeros((1, j_motion.shape[1])),
            ]
        u = diff / rng if rng > 1e-12 else np.array([1.0, 0.0])
        return (
            np.array([self.d_safe - rng]),
            [(-u @ j_pose).reshape(1, -1), (u @ j_motion).reshape(1, -1)],
        )
