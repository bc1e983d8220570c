"""Per-step assembly and solution of the joint navigation graph.

Every control step rebuilds one factor graph out of three fragments: a
fixed-lag estimation window (robot poses, landmarks, object motions), a
constant-motion prediction chain per tracked object, and an N-step local
plan. Mode masks regulate how information flows between the fragments;
the optimized first acceleration is the control command.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .factors import (
    BetweenFactor,
    Component,
    ConstantAccelerationFactor,
    CostFactor,
    Direction,
    DynamicObstacleFactor,
    GoalFactor,
    HybridMotionFactor,
    LimitFactor,
    Mode,
    ModeConfig,
    MotionModelFactor,
    ObjectSmoothingFactor,
    PointMeasurementFactor,
    PriorFactor,
    StaticObstacleFactor,
    apply_mode_masks,
    com_pose,
    propagate_unicycle,
)
from .graph import (
    FactorGraph,
    OptimizerConfig,
    SingularSystemError,
    Values,
    VarKind,
    VariableKey,
    acceleration,
    dynamic_point,
    object_motion,
    robot_pose,
    static_point,
    velocity,
)
from .lie import Pose2, Pose3, se2_view


@dataclass(frozen=True)
class NoiseTable:
    """Sigmas used when assembling the step graph, one entry per factor kind."""

    prior_pose: tuple = (0.05, 0.05, 0.05, 0.02, 0.02, 0.02)
    odometry: tuple = (0.02, 0.02, 0.02, 0.01, 0.01, 0.01)
    point: float = 0.1
    global_pose: tuple = (0.05, 0.05, 0.05, 0.02, 0.02, 0.02)
    smoothing: tuple = (0.02, 0.02, 0.02, 0.01, 0.01, 0.01)
    motion_reg: float = 10.0
    motion_model: tuple = (1e-4,) * 5
    limit: float = 1e-3
    effort: float = 2.0
    accel_smooth: float = 0.5
    goal: tuple = (0.1, 0.1, 0.3)
    static_obstacle: float = 2e-3
    dynamic_obstacle: float = 5e-3


def _default_optimizer() -> OptimizerConfig:
    return OptimizerConfig(max_iters=100, abs_tol=1e-9, rel_tol=1e-12)


@dataclass(frozen=True)
class PipelineConfig:
    horizon: int = 30
    dt: float = 0.1
    lag_window: int = 8
    mode: ModeConfig = field(default_factory=lambda: ModeConfig(Mode.DIRECTED))
    robot_radius: float = 0.3
    object_radius: float = 0.3
    safety_offset: float = 0.1
    v_limits: tuple = (-0.3, 1.0)
    w_limit: float = 1.5
    a_limit: float = 1.0
    aw_limit: float = 2.0
    # hinges engage this far inside the hard requirement so the active set is
    # stable at the optimum instead of flickering on the boundary
    hinge_margin: float = 0.05
    limit_margin: float = 5e-4
    goal_lookahead: float = 2.0
    noise: NoiseTable = field(default_factory=NoiseTable)
    optimizer: OptimizerConfig = field(default_factory=_default_optimizer)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.lag_window < 1:
            raise ValueError("lag_window must be >= 1")
        if not isinstance(self.mode, ModeConfig):
            object.__setattr__(self, "mode", ModeConfig(Mode(self.mode)))


@dataclass
class StepInput:
    """Measurements arriving at one time-step (ids are pre-associated)."""

    odometry: Pose3 | None = None
    static_points: list = field(default_factory=list)
    dynamic_points: list = field(default_factory=list)
    global_pose: Pose3 | None = None


@dataclass
class StepOutput:
    step: int
    estimate: Pose3
    trajectory: dict
    object_motions: dict
    object_coms: dict
    predicted_coms: dict
    planned_poses: list
    planned_velocities: list
    planned_accelerations: list
    command: np.ndarray
    local_goal: Pose2
    diverged: bool
    stats: dict


def select_local_goal(path, current: Pose2, lookahead: float) -> Pose2:
    """Farthest path point within `lookahead` arc-length of the closest one."""
    if not path:
        raise ValueError("path is empty")
    pts = np.array([[p.x, p.y] for p in path])
    dist = np.hypot(pts[:, 0] - current.x, pts[:, 1] - current.y)
    i = int(np.argmin(dist))
    seg = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    j = i
    while j + 1 < len(path) and s[j + 1] - s[i] <= lookahead:
        j += 1
    return path[j]


def _pose_error(gt, est):
    e = gt.between(est)
    if isinstance(e, Pose2):
        return math.hypot(e.x, e.y), abs(e.theta)
    t = float(np.linalg.norm(e.translation))
    r = float(np.linalg.norm(e.log()[3:]))
    return t, r


def compute_motion_error(estimated, ground_truth):
    """Mean per-step pose error of a centre trajectory: (ME_r deg, ME_t m)."""
    if len(estimated) != len(ground_truth):
        raise ValueError("sequence lengths differ")
    if not estimated:
        raise ValueError("sequences are empty")
    t_sum = 0.0
    r_sum = 0.0
    for gt, est in zip(ground_truth, estimated):
        t, r = _pose_error(gt, est)
        t_sum += t
        r_sum += r
    n = len(estimated)
    return math.degrees(r_sum / n), t_sum / n


def _clamp(v, lo, hi):
    return min(max(v, lo), hi)


class Pipeline:
    """Sequential estimation-prediction-planning state machine.

    One instance drives one run: call step(k, input, local_goal) with
    k = 0, 1, 2, ... and execute the returned command verbatim.
    """

    def __init__(self, config: PipelineConfig, esdf, initial_pose: Pose3):
        self.config = config
        self.esdf = esdf
        self._step = -1
        self._values: dict[VariableKey, object] = {}
        # (retain_step, factor); retain_step None = kept while object tracked
        self._est_factors: list = []
        self._landmarks: set[int] = set()
        self._first_seen: dict[int, int] = {}
        self._com_ref: dict[int, Pose3] = {}
        self._motion_steps: dict[int, list[int]] = {}
        self._always_fixed: set[VariableKey] = set()
        self._vel = np.zeros(2)
        self._last_acc = np.zeros(2)
        self._plan: dict[int, tuple] = {}
        self._pred: dict[int, dict[int, Pose3]] = {}
        self._values[robot_pose(0)] = initial_pose
        self._est_factors.append(
            (0, PriorFactor(robot_pose(0), initial_pose, config.noise.prior_pose)))

    # -- estimation fragment -------------------------------------------

    def _extend_estimation(self, k: int, inp: StepInput) -> None:
        noise = self.config.noise
        if k > 0:
            if inp.odometry is None:
                raise ValueError("odometry required for every step after the first")
            prev = self._values[robot_pose(k - 1)]
            self._values[robot_pose(k)] = prev.compose(inp.odometry)
            self._est_factors.append(
                (k, BetweenFactor(robot_pose(k - 1), robot_pose(k),
                                  inp.odometry, noise.odometry)))
        if inp.global_pose is not None:
            self._est_factors.append(
                (k, PriorFactor(robot_pose(k), inp.global_pose, noise.global_pose)))

        x_hat = self._values[robot_pose(k)]
        for pid, z in inp.static_points:
            key = static_point(pid)
            if key not in self._values:
                self._values[key] = x_hat.act(np.asarray(z, dtype=float))
                self._landmarks.add(pid)
            self._est_factors.append(
                (k, PointMeasurementFactor(robot_pose(k), key, z, noise.point)))

        by_object: dict[int, list] = {}
        for obj, pid, z in inp.dynamic_points:
            by_object.setdefault(obj, []).append((pid, np.asarray(z, dtype=float)))
        for obj, obs in sorted(by_object.items()):
            if obj not in self._first_seen:
                self._start_track(obj, k, obs, x_hat)
            else:
                self._extend_track(obj, k, obs, x_hat)

    def _start_track(self, obj: int, k: int, obs, x_hat: Pose3) -> None:
        noise = self.config.noise
        self._first_seen[obj] = k
        world = []
        for pid, z in obs:
            key = dynamic_point(obj, pid)
            self._values[key] = x_hat.act(z)
            world.append(self._values[key])
            # reference-step anchors stay in the graph for the life of the
            # track: they pin the gauge shared by the motions and the points
            self._est_factors.append(
                (None, PointMeasurementFactor(robot_pose(k), key, z, noise.point)))
        centroid = np.mean(np.asarray(world), axis=0)
        self._com_ref[obj] = Pose3(np.eye(3), centroid)
        # the motion at the reference step is the identity by definition
        h0 = object_motion(obj, k)
        self._values[h0] = Pose3.identity()
        self._always_fixed.add(h0)
        self._motion_steps[obj] = [k]

    def _extend_track(self, obj: int, k: int, obs, x_hat: Pose3) -> None:
        noise = self.config.noise
        steps = self._motion_steps[obj]
        h_key = object_motion(obj, k)
        h_init = self._pred.get(obj, {}).get(k)
        if h_init is None:
            h_init = self._extrapolate_motion(obj, steps[-1], k - steps[-1])
        self._values[h_key] = h_init
        steps.append(k)
        for pid, z in obs:
            p_key = dynamic_point(obj, pid)
            if p_key not in self._values:
                self._values[p_key] = h_init.inverse().act(x_hat.act(z))
            self._est_factors.append(
                (k, HybridMotionFactor(robot_pose(k), h_key, p_key, z, noise.point)))
        self._est_factors.append(
            (k, PriorFactor(h_key, h_init, noise.motion_reg)))
        if len(steps) >= 3 and steps[-3] == k - 2 and steps[-2] == k - 1:
            self._est_factors.append(
                (k, ObjectSmoothingFactor(
                    (object_motion(obj, k - 2), object_motion(obj, k - 1), h_key),
                    self._com_ref[obj], noise.smoothing)))

    def _extrapolate_motion(self, obj: int, last: int, ahead: int) -> Pose3:
        """Constant relative centre motion continued `ahead` steps past `last`."""
        steps = self._motion_steps[obj]
        h_last = self._values[object_motion(obj, last)]
        if len(steps) < 2 or steps[-1] != last or steps[-2] != last - 1:
            return h_last
        c_ref = self._com_ref[obj]
        c_prev = com_pose(self._values[object_motion(obj, last - 1)], c_ref)
        c_last = com_pose(h_last, c_ref)
        step_in_ref = c_ref.compose(c_prev.between(c_last)).compose(c_ref.inverse())
        h = h_last
        for _ in range(ahead):
            h = h.compose(step_in_ref)
        return h

    # -- prediction fragment ---------------------------------------------

    def _tracked_objects(self, k: int) -> list[int]:
        out = []
        for obj, steps in self._motion_steps.items():
            if len(steps) >= 2 and steps[-1] == k and steps[-2] == k - 1:
                out.append(obj)
        return sorted(out)

    def _build_prediction(self, k: int, objects) -> tuple[list, dict]:
        cfg = self.config
        noise = cfg.noise
        d_os = cfg.object_radius + cfg.safety_offset
        factors = []
        new_vals: dict[VariableKey, object] = {}
        for obj in objects:
            c_ref = self._com_ref[obj]
            warm = self._pred.get(obj, {})
            for j in range(1, cfg.horizon + 1):
                key = object_motion(obj, k + j)
                init = warm.get(k + j)
                if init is None:
                    init = self._extrapolate_motion(obj, k, j)
                new_vals[key] = init
            for j in range(1, cfg.horizon + 1):
                keys = (object_motion(obj, k + j - 2),
                        object_motion(obj, k + j - 1),
                        object_motion(obj, k + j))
                sources = (j <= 2, j <= 1, False)
                factors.append(ObjectSmoothingFactor(
                    keys, c_ref, noise.smoothing,
                    component=Component.PREDICTION,
                    directed_sources=sources))
            for j in range(1, cfg.horizon + 1):
                factors.append(StaticObstacleFactor(
                    object_motion(obj, k + j), self.esdf,
                    d_os + cfg.hinge_margin, noise.static_obstacle,
                    com_ref=c_ref, component=Component.PREDICTION))
        return factors, new_vals

    # -- planning fragment -------------------------------------------------

    def _seed_plan_step(self, pose: Pose2, vel, goal: Pose2):
        """One ramp step toward the goal, used to initialize unplanned states.

        Proportional heading control plus saturated speed ramp. Rides the
        bounds minus twice the hinge margin: when the goal is out of reach
        the constrained optimum saturates the limits, and a seed that is
        already there keeps the solve inside the quadratic trust region of
        the tightly weighted propagation rows.
        """
        cfg = self.config
        slack = 2.0 * cfg.limit_margin
        bearing = math.atan2(goal.y - pose.y, goal.x - pose.x)
        dist = math.hypot(goal.x - pose.x, goal.y - pose.y)
        err = math.remainder(bearing - pose.theta, math.tau)
        if dist < 1e-6:
            w_des, v_des = 0.0, 0.0
        else:
            w_des = _clamp(2.0 * err, -cfg.w_limit + slack, cfg.w_limit - slack)
            v_des = _clamp(1.5 * dist, 0.0, cfg.v_limits[1] - slack)
            v_des *= max(0.0, math.cos(err))
        a_cap = (cfg.a_limit - slack) * cfg.dt
        aw_cap = (cfg.aw_limit - slack) * cfg.dt
        dv = _clamp(v_des - vel[0], -a_cap, a_cap)
        dw = _clamp(w_des - vel[1], -aw_cap, aw_cap)
        new_vel = np.array([vel[0] + dv, vel[1] + dw])
        acc = np.array([dv, dw]) / cfg.dt
        pose = propagate_unicycle(pose, new_vel[0], new_vel[1], cfg.dt)
        return pose, new_vel, acc

    def _build_planning(self, k: int, local_goal: Pose2, objects):
        cfg = self.config
        noise = cfg.noise
        factors = []
        new_vals: dict[VariableKey, object] = {}
        pinned = [velocity(k), acceleration(k - 1)]
        new_vals[velocity(k)] = self._vel.copy()
        new_vals[acceleration(k - 1)] = self._last_acc.copy()

        seed_pose = se2_view(self._values[robot_pose(k)])
        seed_vel = self._vel
        for j in range(1, cfg.horizon + 1):
            warm = self._plan.get(k + j)
            if warm is not None:
                pose_j, vel_j, acc_j = warm
            else:
                pose_j, vel_j, acc_j = self._seed_plan_step(
                    seed_pose, seed_vel, local_goal)
            seed_pose, seed_vel = pose_j, np.asarray(vel_j, dtype=float)
            new_vals[robot_pose(k + j)] = pose_j
            new_vals[velocity(k + j)] = seed_vel.copy()
            new_vals[acceleration(k + j - 1)] = np.asarray(acc_j, dtype=float).copy()

        m = cfg.limit_margin
        v_lo = np.array([cfg.v_limits[0] + m, -cfg.w_limit + m])
        v_hi = np.array([cfg.v_limits[1] - m, cfg.w_limit - m])
        a_lo = np.array([-cfg.a_limit + m, -cfg.aw_limit + m])
        a_hi = np.array([cfg.a_limit - m, cfg.aw_limit - m])
        d_rs = cfg.robot_radius + cfg.safety_offset
        d_ros = cfg.robot_radius + cfg.object_radius + cfg.safety_offset
        coop = self.config.mode.cooperation_weight

        for j in range(1, cfg.horizon + 1):
            pose_a = robot_pose(k + j - 1)
            sources = (j == 1, False, False, False, False)
            factors.append(MotionModelFactor(
                pose_a, robot_pose(k + j), velocity(k + j - 1), velocity(k + j),
                acceleration(k + j - 1), cfg.dt, noise.motion_model,
                directed_sources=sources))
            factors.append(LimitFactor(velocity(k + j), v_lo, v_hi, noise.limit))
            factors.append(LimitFactor(acceleration(k + j - 1), a_lo, a_hi, noise.limit))
            factors.append(CostFactor(acceleration(k + j - 1), 2, noise.effort))
            factors.append(ConstantAccelerationFactor(
                acceleration(k + j - 2), acceleration(k + j - 1), 2, noise.accel_smooth))
            factors.append(StaticObstacleFactor(
                robot_pose(k + j), self.esdf, d_rs + cfg.hinge_margin,
                noise.static_obstacle, component=Component.PLANNING))
            for obj in objects:
                c_ref = self._com_ref[obj]
                factors.append(DynamicObstacleFactor(
                    robot_pose(k + j), object_motion(obj, k + j), c_ref,
                    d_ros + cfg.hinge_margin, noise.dynamic_obstacle,
                    direction=Direction.TO_PLANNING))
                factors.append(DynamicObstacleFactor(
                    robot_pose(k + j), object_motion(obj, k + j), c_ref,
                    d_ros + cfg.hinge_margin, noise.dynamic_obstacle,
                    direction=Direction.TO_PREDICTION, weight=coop))
        factors.append(GoalFactor(robot_pose(k + cfg.horizon), local_goal, noise.goal))
        return factors, new_vals, pinned

    # -- assembly and solving ----------------------------------------------

    def _collect_estimation(self, k: int):
        fix_before = k - self.config.lag_window
        keep = []
        factors = []
        for retain, f in self._est_factors:
            if retain is None or retain >= fix_before:
                keep.append((retain, f))
                factors.append(f)
        self._est_factors = keep
        return factors, fix_before

    def _fixed_keys(self, keys, fix_before: int, extra=()):
        fixed = set(extra) | {key for key in keys if key in self._always_fixed}
        lagged = (VarKind.ROBOT_POSE, VarKind.OBJECT_MOTION,
                  VarKind.VELOCITY, VarKind.ACCELERATION)
        for key in keys:
            if key.kind in lagged and key.time_step < fix_before:
                fixed.add(key)
        return fixed

    def _build_graph(self, factors, values, fixed):
        graph = FactorGraph()
        keys = set()
        for f in factors:
            keys.update(f.keys)
        for key in sorted(keys):
            graph.add_variable(key, values[key])
        for key in fixed & keys:
            graph.fix_variable(key)
        for f in factors:
            graph.add_factor(f)
        return graph

    def _relaxed_motion(self, factors, scale=1000.0):
        """Copies with planning propagation rows down-weighted.

        The tight propagation sigma makes the quadratic model valid only in
        a small step radius; a relaxed pre-solve walks the plan into the
        right basin cheaply, after which the exact graph converges in a
        few iterations. The relaxed result is initialization only.
        """
        out = []
        for f in factors:
            if isinstance(f, MotionModelFactor):
                g = copy.copy(f)
                g.sqrt_info = f.sqrt_info / scale
                out.append(g)
            else:
                out.append(f)
        return out

    def _reroll_plan(self, values, k: int):
        """Integrate the solved control profile into fresh plan states.

        Zeroes every propagation residual before the exact solve. This
        matters in the masked modes: the boundary factor reads the current
        pose estimate through a dropped Jacobian column, so any residual
        left on it turns estimation-side moves into unmodeled error jumps
        that stall the accept test.
        """
        cfg = self.config
        out = dict(values.items())
        pose = se2_view(out[robot_pose(k)])
        vel = np.asarray(out[velocity(k)], dtype=float)
        m = cfg.limit_margin
        for j in range(1, cfg.horizon + 1):
            acc = np.asarray(out[acceleration(k + j - 1)], dtype=float)
            acc = np.array([_clamp(acc[0], -cfg.a_limit + m, cfg.a_limit - m),
                            _clamp(acc[1], -cfg.aw_limit + m, cfg.aw_limit - m)])
            nxt = vel + acc * cfg.dt
            nxt = np.array([_clamp(nxt[0], cfg.v_limits[0] + m, cfg.v_limits[1] - m),
                            _clamp(nxt[1], -cfg.w_limit + m, cfg.w_limit - m)])
            acc = (nxt - vel) / cfg.dt
            vel = nxt
            pose = propagate_unicycle(pose, vel[0], vel[1], cfg.dt)
            out[robot_pose(k + j)] = pose
            out[velocity(k + j)] = vel
            out[acceleration(k + j - 1)] = acc
        return Values(out)

    def _solve(self, factors, fixed, plan_step=None):
        graph = self._build_graph(factors, self._values, fixed)
        warm = None
        if any(isinstance(f, MotionModelFactor) for f in factors):
            pre = self._build_graph(self._relaxed_motion(factors),
                                    self._values, fixed)
            coarse = OptimizerConfig(max_iters=40, abs_tol=1e-4, rel_tol=1e-6,
                                     lambda_init=self.config.optimizer.lambda_init)
            warm = pre.optimize(config=coarse).values
            if plan_step is not None:
                warm = self._reroll_plan(warm, plan_step)
        res = graph.optimize(values=warm, config=self.config.optimizer)
        for key in graph.keys():
            self._values[key] = res.values[key]
        return res, graph

    def step(self, k: int, inp: StepInput, local_goal: Pose2) -> StepOutput:
        if k != self._step + 1:
            raise ValueError(f"steps must be consecutive, expected {self._step + 1}")
        self._step = k
        cfg = self.config
        self._extend_estimation(k, inp)
        est_factors, fix_before = self._collect_estimation(k)
        objects = self._tracked_objects(k)
        pred_factors, pred_vals = self._build_prediction(k, objects)
        plan_factors, plan_vals, pinned = self._build_planning(k, local_goal, objects)
        self._values.update(pred_vals)
        self._values.update(plan_vals)

        est_keys = set()
        for f in est_factors:
            est_keys.update(f.keys)

        diverged = False
        stats = {"mode": cfg.mode.mode.value}
        try:
            if cfg.mode.mode is Mode.DECOUPLED:
                fixed1 = self._fixed_keys(est_keys, fix_before)
                res1, _ = self._solve(apply_mode_masks(est_factors, cfg.mode), fixed1)
                joint = apply_mode_masks(
                    est_factors + pred_factors + plan_factors, cfg.mode)
                keys = set()
                for f in joint:
                    keys.update(f.keys)
                fixed2 = self._fixed_keys(keys, fix_before, extra=pinned) | est_keys
                res2, graph = self._solve(joint, fixed2, plan_step=k)
                diverged = res1.diverged or res2.diverged
                stats.update(
                    iterations=res1.iterations + res2.iterations,
                    final_error=res2.final_error,
                    converged=res1.converged and res2.converged,
                    reason=res2.reason)
            else:
                joint = apply_mode_masks(
                    est_factors + pred_factors + plan_factors, cfg.mode)
                keys = set()
                for f in joint:
                    keys.update(f.keys)
                fixed = self._fixed_keys(keys, fix_before, extra=pinned)
                res, graph = self._solve(joint, fixed, plan_step=k)
                diverged = res.diverged
                stats.update(iterations=res.iterations,
                             final_error=res.final_error,
                             converged=res.converged, reason=res.reason)
            stats["num_factors"] = graph.num_factors()
            stats["num_variables"] = graph.num_variables()
        except SingularSystemError as exc:
            diverged = True
            stats.update(converged=False, reason=f"singular: {exc}",
                         iterations=0, final_error=float("nan"))

        return self._emit(k, objects, diverged, local_goal, stats)

    # -- outputs -----------------------------------------------------------

    def _emit(self, k, objects, diverged, local_goal, stats) -> StepOutput:
        cfg = self.config
        if diverged:
            command = np.zeros(2)
        else:
            command = np.asarray(self._values[acceleration(k)], dtype=float).copy()

        planned_poses, planned_vels, planned_accs = [], [], []
        self._plan = {}
        for j in range(1, cfg.horizon + 1):
            pose = self._values[robot_pose(k + j)]
            vel = np.asarray(self._values[velocity(k + j)], dtype=float)
            acc = np.asarray(self._values[acceleration(k + j - 1)], dtype=float)
            planned_poses.append(pose)
            planned_vels.append(vel.copy())
            planned_accs.append(acc.copy())
            self._plan[k + j] = (pose, vel.copy(), acc.copy())

        predicted = {}
        for obj in self._motion_steps:
            c_ref = self._com_ref[obj]
            if obj in objects:
                chain = []
                warm = {}
                for j in range(1, cfg.horizon + 1):
                    h = self._values[object_motion(obj, k + j)]
                    warm[k + j] = h
                    chain.append((k + j, com_pose(h, c_ref)))
                self._pred[obj] = warm
            else:
                last = self._motion_steps[obj][-1]
                com = com_pose(self._values[object_motion(obj, last)], c_ref)
                chain = [(k + j, com) for j in range(1, cfg.horizon + 1)]
                self._pred.pop(obj, None)
            predicted[obj] = chain

        motions = {}
        coms = {}
        for obj, steps in self._motion_steps.items():
            c_ref = self._com_ref[obj]
            motions[obj] = {s: self._values[object_motion(obj, s)] for s in steps}
            coms[obj] = {s: com_pose(m, c_ref) for s, m in motions[obj].items()}

        trajectory = {}
        s = 0
        while robot_pose(s) in self._values and s <= k:
            trajectory[s] = self._values[robot_pose(s)]
            s += 1

        # feed-forward execution bookkeeping, mirrors the simulator's clamp
        self._vel = np.array([
            _clamp(self._vel[0] + command[0] * cfg.dt, cfg.v_limits[0], cfg.v_limits[1]),
            _clamp(self._vel[1] + command[1] * cfg.dt, -cfg.w_limit, cfg.w_limit),
        ])
        self._last_acc = command.copy()

        return StepOutput(
            step=k,
            estimate=self._values[robot_pose(k)],
            trajectory=trajectory,
            object_motions=motions,
            object_coms=coms,
            predicted_coms=predicted,
            planned_poses=planned_poses,
            planned_velocities=planned_vels,
            planned_accelerations=planned_accs,
            command=command,
            local_goal=local_goal,
            diverged=diverged,
            stats=stats,
        )
