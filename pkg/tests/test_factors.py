"""Factor residual and Jacobian tests.

Every analytic Jacobian is checked against central finite differences on
the retraction, over seeded random sweeps. Hinge factors are sampled away
from their activation boundary so the differences are one-sided.
"""

import math

import numpy as np
import pytest

from fgnav.graph import (
    acceleration,
    dynamic_point,
    object_motion,
    retract_value,
    robot_pose,
    static_point,
    tangent_dim,
    velocity,
)
from fgnav.factors import (
    BetweenFactor,
    Component,
    ConstantAccelerationFactor,
    CostFactor,
    Direction,
    DynamicObstacleFactor,
    Factor,
    GoalFactor,
    HybridMotionFactor,
    LimitFactor,
    Mode,
    ModeConfig,
    MotionModelFactor,
    NoiseSpec,
    ObjectSmoothingFactor,
    PointMeasurementFactor,
    PriorFactor,
    StaticObstacleFactor,
    apply_mode_masks,
    com_pose,
    odometry_factor,
    propagate_unicycle,
)
from fgnav.lie import Pose2, Pose3, embed_se3
from fgnav.worldmap import EsdfGrid, OccupancyGrid


def rand_pose2(rng, t_scale=1.0):
    return Pose2(rng.normal(0, t_scale), rng.normal(0, t_scale),
                 rng.uniform(-2.5, 2.5))


def rand_pose3(rng, t_scale=1.0, r_scale=0.5):
    xi = np.concatenate([rng.normal(0, t_scale, 3), rng.normal(0, r_scale, 3)])
    return Pose3.exp(xi)


def numeric_jacobians(factor, values, h=1e-6):
    jacs = []
    for key in factor.keys:
        v0 = values[key]
        n = tangent_dim(v0)
        jac = np.zeros((factor.dim, n))
        for i in range(n):
            step = np.zeros(n)
            step[i] = h
            vp = dict(values)
            vp[key] = retract_value(v0, step)
            vm = dict(values)
            vm[key] = retract_value(v0, -step)
            jac[:, i] = (factor.residual(vp) - factor.residual(vm)) / (2 * h)
        jacs.append(jac)
    return jacs


def check_jacobians(factor, values, atol=1e-5):
    r, jacs = factor.linearize_raw(values)
    np.testing.assert_allclose(r, factor.residual(values), atol=1e-13)
    numeric = numeric_jacobians(factor, values)
    for idx, (got, want) in enumerate(zip(jacs, numeric)):
        assert got.shape == want.shape
        np.testing.assert_allclose(
            got, want, atol=atol,
            err_msg=f"{type(factor).__name__} jacobian for key {idx}")


# ---------------------------------------------------------------------------
# whitening and masks


def test_noise_spec_vector_and_scalar():
    f = PriorFactor(velocity(0), np.zeros(2), [0.5, 0.25])
    assert np.array_equal(f.sqrt_info, [2.0, 4.0])
    f2 = PriorFactor(velocity(0), np.zeros(2), 0.1)
    assert np.allclose(f2.sqrt_info, [10.0, 10.0])
    vals = {velocity(0): np.array([1.0, -1.0])}
    assert np.allclose(f.whitened_residual(vals), [2.0, -4.0])


def test_noise_spec_full_covariance():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    cov = a @ a.T + 3 * np.eye(3)
    spec = NoiseSpec.from_covariance(cov)
    w = spec.sqrt_info(3)
    assert np.allclose(w @ cov @ w.T, np.eye(3), atol=1e-12)
    f = PriorFactor(robot_pose(0), Pose2.identity(), spec)
    vals = {robot_pose(0): Pose2(0.3, -0.2, 0.1)}
    assert np.allclose(f.whitened_residual(vals), w @ f.residual(vals))


def test_noise_spec_rejects_bad_sigmas():
    with pytest.raises(ValueError):
        NoiseSpec([0.1, -0.2])
    with pytest.raises(ValueError):
        NoiseSpec(0.0)
    with pytest.raises(ValueError):
        PriorFactor(velocity(0), np.zeros(2), [0.1, 0.2, 0.3])


def test_mask_produces_none_blocks():
    f = BetweenFactor(robot_pose(0), robot_pose(1), Pose2(1, 0, 0),
                      [0.1, 0.1, 0.1])
    vals = {robot_pose(0): Pose2(0, 0, 0), robot_pose(1): Pose2(2, 1, 0.3)}
    masked = f.with_mask((True, False))
    _, blocks = masked.whitened_linearization(vals)
    assert blocks[0][1] is None
    assert blocks[1][1] is not None
    # the original factor is untouched
    _, orig = f.whitened_linearization(vals)
    assert orig[0][1] is not None
    # residuals are identical either way
    assert np.array_equal(masked.whitened_residual(vals),
                          f.whitened_residual(vals))


def test_apply_mode_masks():
    plain = BetweenFactor(robot_pose(0), robot_pose(1), Pose2(1, 0, 0), 0.1)
    spanning = BetweenFactor(robot_pose(1), robot_pose(2), Pose2(1, 0, 0), 0.1,
                             directed_sources=(True, False),
                             component=Component.PLANNING)
    coop = BetweenFactor(robot_pose(2), robot_pose(3), Pose2(1, 0, 0), 0.1,
                         directed_sources=(True, False), cooperative_only=True)
    tagged = [plain, spanning, coop]

    undirected = apply_mode_masks(tagged, Mode.UNDIRECTED)
    assert len(undirected) == 2
    assert all(f.mask == (False, False) for f in undirected)

    directed = apply_mode_masks(tagged, Mode.DIRECTED)
    assert len(directed) == 2
    assert directed[0].mask == (False, False)
    assert directed[1].mask == (True, False)

    decoupled = apply_mode_masks(tagged, Mode.DECOUPLED)
    assert len(decoupled) == 2
    assert all(f.mask == (False, False) for f in decoupled)

    coop_mode = apply_mode_masks(tagged, ModeConfig(Mode.COOPERATIVE, 0.5))
    assert len(coop_mode) == 3
    assert coop_mode[2].mask == (True, False)

    # masks from a previous application are cleared, not accumulated
    again = apply_mode_masks(directed, Mode.UNDIRECTED)
    assert all(f.mask == (False, False) for f in again)


def test_mode_config_accepts_strings():
    cfg = ModeConfig("cooperative", 2.0)
    assert cfg.mode is Mode.COOPERATIVE
    with pytest.raises(ValueError):
        ModeConfig("sideways")
    with pytest.raises(ValueError):
        ModeConfig(Mode.DIRECTED, -1.0)


def test_factor_weight_scales_information():
    key = robot_pose(0)
    vals = {key: Pose2(0.5, 0.0, 0.0)}
    full = PriorFactor(key, Pose2.identity(), 0.1)
    half = PriorFactor(key, Pose2.identity(), 0.1, weight=0.5)
    zero = PriorFactor(key, Pose2.identity(), 0.1, weight=0.0)
    assert np.allclose(half.whitened_residual(vals),
                       0.5 * full.whitened_residual(vals))
    assert np.all(zero.whitened_residual(vals) == 0.0)
    _, blocks = zero.whitened_linearization(vals)
    assert np.all(blocks[0][1] == 0.0)


# ---------------------------------------------------------------------------
# estimation factors


def test_prior_pose2_exact_values():
    f = PriorFactor(robot_pose(0), Pose2(1.0, 2.0, 0.5), [0.1, 0.1, 0.05])
    vals = {robot_pose(0): Pose2(1.0, 2.0, 0.5)}
    assert np.allclose(f.residual(vals), 0.0, atol=1e-15)


def test_prior_vector():
    f = PriorFactor(velocity(3), np.array([1.0, 0.5]), [0.1, 0.1])
    vals = {velocity(3): np.array([1.2, 0.1])}
    assert np.allclose(f.residual(vals), [0.2, -0.4])
    check_jacobians(f, vals)


@pytest.mark.parametrize("pose_type", ["se2", "se3"])
def test_prior_jacobians(pose_type):
    rng = np.random.default_rng(1)
    for _ in range(25):
        if pose_type == "se2":
            prior, x = rand_pose2(rng), rand_pose2(rng)
        else:
            prior, x = rand_pose3(rng), rand_pose3(rng)
        f = PriorFactor(robot_pose(0), prior, 0.2)
        check_jacobians(f, {robot_pose(0): x})


@pytest.mark.parametrize("pose_type", ["se2", "se3"])
def test_between_jacobians(pose_type):
    rng = np.random.default_rng(2)
    for _ in range(25):
        if pose_type == "se2":
            a, b, z = rand_pose2(rng), rand_pose2(rng), rand_pose2(rng, 0.3)
        else:
            a, b, z = rand_pose3(rng), rand_pose3(rng), rand_pose3(rng, 0.3)
        f = BetweenFactor(robot_pose(0), robot_pose(1), z, 0.1)
        check_jacobians(f, {robot_pose(0): a, robot_pose(1): b})


def test_between_zero_residual_on_consistent_chain():
    rng = np.random.default_rng(3)
    a = rand_pose3(rng)
    z = rand_pose3(rng, 0.3)
    f = odometry_factor(robot_pose(0), robot_pose(1), z, 0.1)
    vals = {robot_pose(0): a, robot_pose(1): a.compose(z)}
    assert np.allclose(f.residual(vals), 0.0, atol=1e-14)


def test_between_near_identity_relative_rotation():
    # relative rotations of ~1e-6 sit where naive log coefficients cancel;
    # residuals there must still be smooth enough for FD to match analytic
    rng = np.random.default_rng(31)
    for _ in range(10):
        a = rand_pose3(rng)
        twist = np.zeros(6)
        twist[:2] = rng.uniform(-0.5, 0.5, 2)
        twist[5] = 1e-6 * rng.uniform(0.5, 2.0)
        b = a.compose(Pose3.exp(twist))
        z = Pose3.exp(np.array([twist[0], twist[1], 0, 0, 0, 0]))
        f = BetweenFactor(robot_pose(0), robot_pose(1), z, 0.1)
        check_jacobians(f, {robot_pose(0): a, robot_pose(1): b})


def test_point_measurement_values_and_jacobians():
    x = Pose3.exp(np.array([0.0, 0.0, 0.0, 0.0, 0.0, math.pi / 2]))
    m = np.array([0.0, 2.0, 0.5])
    # body frame: rotate world by -90deg yaw
    f = PointMeasurementFactor(robot_pose(0), static_point(4),
                               np.array([2.0, 0.0, 0.5]), 0.1)
    vals = {robot_pose(0): x, static_point(4): m}
    assert np.allclose(f.residual(vals), 0.0, atol=1e-14)

    rng = np.random.default_rng(4)
    for _ in range(25):
        vals = {
            robot_pose(0): rand_pose3(rng),
            static_point(4): rng.normal(0, 2, 3),
        }
        check_jacobians(f, vals)


def test_hybrid_motion_reduces_to_point_measurement_at_identity():
    rng = np.random.default_rng(5)
    x = rand_pose3(rng)
    m = rng.normal(0, 2, 3)
    z = rng.normal(0, 1, 3)
    hyb = HybridMotionFactor(robot_pose(0), object_motion(7, 2),
                             dynamic_point(7, 0), z, 0.1)
    pnt = PointMeasurementFactor(robot_pose(0), dynamic_point(7, 0), z, 0.1)
    vals = {
        robot_pose(0): x,
        object_motion(7, 2): Pose3.identity(),
        dynamic_point(7, 0): m,
    }
    vals_p = {robot_pose(0): x, dynamic_point(7, 0): m}
    assert np.allclose(hyb.residual(vals), pnt.residual(vals_p), atol=1e-14)
    jh = hyb.jacobians(vals)
    jp = pnt.jacobians(vals_p)
    assert np.allclose(jh[0], jp[0], atol=1e-12)
    assert np.allclose(jh[2], jp[1], atol=1e-12)


def test_hybrid_motion_jacobians():
    rng = np.random.default_rng(6)
    f = HybridMotionFactor(robot_pose(1), object_motion(3, 5),
                           dynamic_point(3, 1), np.zeros(3), 0.1)
    for _ in range(25):
        vals = {
            robot_pose(1): rand_pose3(rng),
            object_motion(3, 5): rand_pose3(rng),
            dynamic_point(3, 1): rng.normal(0, 2, 3),
        }
        check_jacobians(f, vals)


def test_object_smoothing_zero_for_constant_motion():
    rng = np.random.default_rng(7)
    c_ref = rand_pose3(rng)
    c1 = rand_pose3(rng)
    delta = rand_pose3(rng, 0.3, 0.2)
    c2 = c1.compose(delta)
    c3 = c2.compose(delta)
    keys = (object_motion(0, 1), object_motion(0, 2), object_motion(0, 3))
    f = ObjectSmoothingFactor(keys, c_ref, 0.05)
    ref_inv = c_ref.inverse()
    vals = {
        keys[0]: c1.compose(ref_inv),
        keys[1]: c2.compose(ref_inv),
        keys[2]: c3.compose(ref_inv),
    }
    assert np.allclose(f.residual(vals), 0.0, atol=1e-13)


def test_object_smoothing_jacobians():
    rng = np.random.default_rng(8)
    keys = (object_motion(0, 1), object_motion(0, 2), object_motion(0, 3))
    for _ in range(25):
        f = ObjectSmoothingFactor(keys, rand_pose3(rng), 0.05)
        vals = {k: rand_pose3(rng, 0.8, 0.3) for k in keys}
        check_jacobians(f, vals)


def test_object_smoothing_needs_three_keys():
    with pytest.raises(ValueError):
        ObjectSmoothingFactor((object_motion(0, 1), object_motion(0, 2)),
                              Pose3.identity(), 0.05)


# ---------------------------------------------------------------------------
# planning factors


def test_propagate_unicycle_straight_and_turn():
    x = Pose2(1.0, 2.0, 0.0)
    straight = propagate_unicycle(x, 2.0, 0.0, 0.1)
    assert np.allclose([straight.x, straight.y, straight.theta], [1.2, 2.0, 0.0])
    # pure rotation keeps position
    spin = propagate_unicycle(x, 0.0, 1.5, 0.1)
    assert np.allclose([spin.x, spin.y, spin.theta], [1.0, 2.0, 0.15])
    # midpoint heading for an arc
    arc = propagate_unicycle(Pose2(0, 0, 0), 1.0, math.pi, 1.0)
    assert np.allclose([arc.x, arc.y], [0.0, 1.0], atol=1e-12)


def test_motion_model_zero_when_consistent():
    va = np.array([0.8, 0.3])
    aa = np.array([0.5, -0.2])
    dt = 0.1
    vb = va + aa * dt
    xa = Pose2(0.2, -0.1, 0.4)
    xb = propagate_unicycle(xa, vb[0], vb[1], dt)
    keys = (robot_pose(0), robot_pose(1), velocity(0), velocity(1),
            acceleration(0))
    f = MotionModelFactor(*keys, dt=dt, noise=1e-3)
    vals = {keys[0]: xa, keys[1]: xb, keys[2]: va, keys[3]: vb, keys[4]: aa}
    assert np.allclose(f.residual(vals), 0.0, atol=1e-14)
    assert f.component is Component.PLANNING


@pytest.mark.parametrize("boundary", [False, True])
def test_motion_model_jacobians(boundary):
    rng = np.random.default_rng(9)
    keys = (robot_pose(0), robot_pose(1), velocity(0), velocity(1),
            acceleration(0))
    f = MotionModelFactor(*keys, dt=0.1, noise=1e-3)
    for _ in range(25):
        xa = rand_pose2(rng)
        vals = {
            keys[0]: embed_se3(xa) if boundary else xa,
            keys[1]: rand_pose2(rng),
            keys[2]: rng.normal(0, 1, 2),
            keys[3]: rng.normal(0, 1, 2),
            keys[4]: rng.normal(0, 1, 2),
        }
        check_jacobians(f, vals)


def test_limit_factor_branches():
    f = LimitFactor(velocity(0), np.array([-1.0, -2.0]), np.array([1.0, 2.0]),
                    1e-2)
    inside = {velocity(0): np.array([0.3, -1.5])}
    assert np.all(f.residual(inside) == 0.0)
    assert np.all(f.jacobians(inside)[0] == 0.0)

    above = {velocity(0): np.array([1.5, 0.0])}
    assert np.allclose(f.residual(above), [0.5, 0.0])
    below = {velocity(0): np.array([0.0, -2.7])}
    assert np.allclose(f.residual(below), [0.0, -0.7])

    rng = np.random.default_rng(10)
    for _ in range(25):
        v = rng.uniform(-4, 4, 2)
        # stay away from the kinks so central differences are valid
        if np.any(np.abs(np.abs(v) - [1.0, 2.0]) < 1e-4):
            continue
        check_jacobians(f, {velocity(0): v})


def test_cost_and_constant_acceleration():
    ca = CostFactor(acceleration(0), 2, 0.5)
    vals = {acceleration(0): np.array([0.3, -0.1])}
    assert np.allclose(ca.residual(vals), [0.3, -0.1])
    check_jacobians(ca, vals)

    sm = ConstantAccelerationFactor(acceleration(0), acceleration(1), 2, 0.1)
    vals2 = {acceleration(0): np.array([0.3, -0.1]),
             acceleration(1): np.array([0.5, 0.2])}
    assert np.allclose(sm.residual(vals2), [0.2, 0.3])
    check_jacobians(sm, vals2)


@pytest.mark.parametrize("boundary", [False, True])
def test_goal_factor(boundary):
    rng = np.random.default_rng(11)
    goal = Pose2(2.0, 1.0, 0.3)
    f = GoalFactor(robot_pose(9), goal, 0.1)
    at_goal = {robot_pose(9): embed_se3(goal) if boundary else goal}
    assert np.allclose(f.residual(at_goal), 0.0, atol=1e-14)
    for _ in range(20):
        x = rand_pose2(rng)
        vals = {robot_pose(9): embed_se3(x) if boundary else x}
        check_jacobians(f, vals)


# ---------------------------------------------------------------------------
# obstacle factors


def disk_esdf():
    grid = OccupancyGrid.empty(40, 40, 0.1, origin=(-2.0, -2.0))
    grid.mark_disk(0.0, 0.0, 0.25)
    return EsdfGrid.from_occupancy(grid)


def test_static_obstacle_inactive_when_clear():
    esdf = disk_esdf()
    f = StaticObstacleFactor(robot_pose(0), esdf, 0.4, 0.05)
    vals = {robot_pose(0): Pose2(1.5, 1.5, 0.2)}
    assert np.all(f.residual(vals) == 0.0)
    r, jacs = f.linearize_raw(vals)
    assert np.all(r == 0.0) and np.all(jacs[0] == 0.0)


def _interior_point(rng, esdf, d_safe):
    """Sample an active, cell-interior query position."""
    while True:
        x = float(rng.uniform(-1.2, 1.2))
        y = float(rng.uniform(-1.2, 1.2))
        d = esdf.query(x, y)
        if not (1e-3 < d and d < d_safe - 1e-3):
            continue
        fx = ((x + 2.0) / 0.1) % 1.0
        fy = ((y + 2.0) / 0.1) % 1.0
        if 0.05 < fx < 0.95 and 0.05 < fy < 0.95:
            return x, y


@pytest.mark.parametrize("variant", ["pose2", "pose3", "motion"])
def test_static_obstacle_jacobians(variant):
    rng = np.random.default_rng(12)
    esdf = disk_esdf()
    d_safe = 0.6
    com_ref = None
    key = robot_pose(0)
    if variant == "motion":
        com_ref = rand_pose3(rng, 0.05, 0.2)
        key = object_motion(0, 0)
    f = StaticObstacleFactor(key, esdf, d_safe, 0.05, com_ref=com_ref)
    for _ in range(20):
        x, y = _interior_point(rng, esdf, d_safe)
        theta = float(rng.uniform(-3, 3))
        if variant == "pose2":
            value = Pose2(x, y, theta)
        elif variant == "pose3":
            value = embed_se3(Pose2(x, y, theta))
        else:
            # motion placing the reference centre at the sampled spot
            centre = Pose3.exp(
                np.array([x, y, 0.3, 0.1, -0.2, theta * 0.2]))
            value = centre.compose(com_ref.inverse())
            px, py = centre.translation[0], centre.translation[1]
            d = esdf.query(px, py)
            if not (1e-3 < d < d_safe - 1e-3):
                continue
        vals = {key: value}
        if f.residual(vals)[0] <= 1e-3:
            continue
        check_jacobians(f, vals, atol=2e-5)


def test_dynamic_obstacle_residual_and_direction():
    com_ref = Pose3.identity()
    f = DynamicObstacleFactor(robot_pose(0), object_motion(1, 0), com_ref,
                              d_safe=1.0, noise=0.05)
    assert f.direction is Direction.TO_PLANNING
    assert f.directed_sources == (False, True)
    assert not f.cooperative_only
    assert f.component is Component.PLANNING

    g = DynamicObstacleFactor(robot_pose(0), object_motion(1, 0), com_ref,
                              d_safe=1.0, noise=0.05,
                              direction=Direction.TO_PREDICTION)
    assert g.directed_sources == (True, False)
    assert g.cooperative_only
    assert g.component is Component.PREDICTION

    vals = {
        robot_pose(0): Pose2(0.6, 0.0, 0.0),
        object_motion(1, 0): Pose3.identity(),
    }
    assert np.allclose(f.residual(vals), [0.4])
    far = {
        robot_pose(0): Pose2(3.0, 0.0, 0.0),
        object_motion(1, 0): Pose3.identity(),
    }
    assert np.all(f.residual(far) == 0.0)


@pytest.mark.parametrize("pose3", [False, True])
def test_dynamic_obstacle_jacobians(pose3):
    rng = np.random.default_rng(13)
    d_safe = 1.0
    com_ref = rand_pose3(rng, 0.1, 0.2)
    f = DynamicObstacleFactor(robot_pose(0), object_motion(1, 0), com_ref,
                              d_safe=d_safe, noise=0.05)
    checked = 0
    while checked < 20:
        pose = rand_pose2(rng, 0.6)
        motion = rand_pose3(rng, 0.4, 0.3)
        vals = {
            robot_pose(0): embed_se3(pose) if pose3 else pose,
            object_motion(1, 0): motion,
        }
        r = f.residual(vals)[0]
        if not (1e-3 < r < d_safe - 1e-3):
            continue
        check_jacobians(f, vals, atol=2e-5)
        checked += 1


def test_com_pose_composition():
    rng = np.random.default_rng(14)
    h = rand_pose3(rng)
    c = rand_pose3(rng)
    assert np.allclose(com_pose(h, c).matrix(), h.compose(c).matrix())


def test_factor_base_rejects_bad_metadata():
    with pytest.raises(ValueError):
        PriorFactor(robot_pose(0), Pose2.identity(), 0.1,
                    directed_sources=(True, False))
    with pytest.raises(ValueError):
        PriorFactor(robot_pose(0), Pose2.identity(), 0.1, weight=-2.0)
    f = PriorFactor(robot_pose(0), Pose2.identity(), 0.1)
    with pytest.raises(ValueError):
        f.with_mask((True, True))
    with pytest.raises(NotImplementedError):
        Factor((robot_pose(0),), 0.1, 1).residual({})
