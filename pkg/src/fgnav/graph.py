"""Factor graph, linearization and nonlinear least-squares solving.

A graph holds typed variables addressed by :class:`VariableKey` and a list
of factors. Each factor produces a residual vector ``r`` and one Jacobian
block per connected variable, both whitened by the factor's noise model;
the MAP objective is the sum of squared whitened residuals.

Directionality is implemented at linearization: a factor may mask any of
its variables, in which case the Jacobian block for that variable is left
out of the linear system (structurally zero) while the residual still
evaluates with the variable's current value. Masked variables therefore
influence other updates through the residual but receive none from that
factor, and the corresponding Gauss-Newton cross terms vanish.

Solving uses Levenberg-Marquardt on the normal equations
``(J^T J + lambda diag(J^T J)) delta = -J^T r`` with multiplicative
damping updates. Variables can be frozen with :meth:`FactorGraph.fix_variable`
(no columns, values still read), which is how the pipeline implements its
fixed-lag window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping, NamedTuple

import numpy as np
import scipy.linalg

from .lie import Pose2, Pose3


class GraphError(Exception):
    pass


class DuplicateVariableError(GraphError):
    pass


class UnknownVariableError(GraphError):
    pass


class SingularSystemError(GraphError):
    pass


class VarKind(IntEnum):
    ROBOT_POSE = 0
    OBJECT_MOTION = 1
    STATIC_POINT = 2
    DYNAMIC_POINT = 3
    VELOCITY = 4
    ACCELERATION = 5


class VariableKey(NamedTuple):
    """Typed variable address.

    ``time_step`` doubles as the point id for the two point kinds, which
    are not time-indexed. ``object_id`` is 0 for ego and static entities.
    """

    kind: VarKind
    object_id: int
    time_step: int

    def __repr__(self) -> str:
        return f"{self.kind.name}(obj={self.object_id}, k={self.time_step})"


def robot_pose(k: int) -> VariableKey:
    return VariableKey(VarKind.ROBOT_POSE, 0, k)


def object_motion(obj: int, k: int) -> VariableKey:
    return VariableKey(VarKind.OBJECT_MOTION, obj, k)


def static_point(pid: int) -> VariableKey:
    return VariableKey(VarKind.STATIC_POINT, 0, pid)


def dynamic_point(obj: int, pid: int) -> VariableKey:
    return VariableKey(VarKind.DYNAMIC_POINT, obj, pid)


def velocity(k: int) -> VariableKey:
    return VariableKey(VarKind.VELOCITY, 0, k)


def acceleration(k: int) -> VariableKey:
    return VariableKey(VarKind.ACCELERATION, 0, k)


def _ordering_rank(key: VariableKey):
    return (key.time_step, int(key.kind), key.object_id)


def tangent_dim(value) -> int:
    if isinstance(value, (Pose2, Pose3)):
        return value.tangent_dim()
    return int(np.asarray(value).shape[0])


def retract_value(value, delta: np.ndarray):
    if isinstance(value, Pose2):
        return value.compose(Pose2.exp(delta))
    if isinstance(value, Pose3):
        return value.compose(Pose3.exp(delta))
    return value + delta


class Values:
    """Mapping from VariableKey to typed value (poses or plain vectors)."""

    __slots__ = ("_data",)

    def __init__(self, data: Mapping[VariableKey, object] | None = None):
        self._data = dict(data) if data else {}

    def __getitem__(self, key: VariableKey):
        return self._data[key]

    def __setitem__(self, key: VariableKey, value):
        self._data[key] = value

    def __contains__(self, key: VariableKey) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def __iter__(self):
        return iter(self._data)

    def keys(self):
        return self._data.keys()

    def items(self):
        return self._data.items()

    def copy(self) -> "Values":
        return Values(self._data)

    def retract(self, deltas: Mapping[VariableKey, np.ndarray]) -> "Values":
        """Apply per-variable tangent updates, returning a new snapshot."""
        out = dict(self._data)
        for key, d in deltas.items():
            out[key] = retract_value(out[key], d)
        return Values(out)


@dataclass
class _Entry:
    """Linearized factor: whitened residual plus active Jacobian blocks."""

    row: int
    residual: np.ndarray
    blocks: list  # list of (VariableKey, ndarray); masked/fixed keys omitted
    factor_index: int


class LinearSystem:
    """Sparse block linearization of a graph at a given point.

    Only unmasked, unfixed Jacobian blocks are stored; a missing block is
    structurally zero. ``cross_block`` therefore returns an exact zero
    matrix for variable pairs that no stored factor couples.
    """

    def __init__(self, ordering, dims, entries, nrows):
        self.ordering: list[VariableKey] = ordering
        self.dims: dict[VariableKey, int] = dims
        self.offsets: dict[VariableKey, int] = {}
        off = 0
        for key in ordering:
            self.offsets[key] = off
            off += dims[key]
        self.ncols = off
        self.nrows = nrows
        self.entries: list[_Entry] = entries
        self._hess: np.ndarray | None = None
        self._grad: np.ndarray | None = None

    def total_error(self) -> float:
        return float(sum(e.residual @ e.residual for e in self.entries))

    def _accumulate(self):
        if self._hess is not None:
            return
        h = np.zeros((self.ncols, self.ncols))
        g = np.zeros(self.ncols)
        offs = self.offsets
        for e in self.entries:
            blocks = e.blocks
            n = len(blocks)
            for i in range(n):
                ki, ji = blocks[i]
                oi = offs[ki]
                di = ji.shape[1]
                g[oi:oi + di] += ji.T @ e.residual
                h[oi:oi + di, oi:oi + di] += ji.T @ ji
                for j in range(i + 1, n):
                    kj, jj = blocks[j]
                    oj = offs[kj]
                    dj = jj.shape[1]
                    if oi <= oj:
                        h[oi:oi + di, oj:oj + dj] += ji.T @ jj
                    else:
                        h[oj:oj + dj, oi:oi + di] += jj.T @ ji
        # mirror: off-diagonal coupling was accumulated above the block
        # diagonal only, diagonal blocks are already complete
        diag_of_blocks = np.zeros_like(h)
        for key in self.ordering:
            o, d = offs[key], self.dims[key]
            diag_of_blocks[o:o + d, o:o + d] = h[o:o + d, o:o + d]
        self._hess = h + h.T - diag_of_blocks
        self._grad = g

    def jtj(self) -> np.ndarray:
        self._accumulate()
        return self._hess

    def jtr(self) -> np.ndarray:
        self._accumulate()
        return self._grad

    def cross_block(self, key_a: VariableKey, key_b: VariableKey) -> np.ndarray:
        """J^T J block coupling two variables (exact zeros when uncoupled)."""
        for key in (key_a, key_b):
            if key not in self.offsets:
                raise UnknownVariableError(f"{key} is not an active variable")
        out = np.zeros((self.dims[key_a], self.dims[key_b]))
        for e in self.entries:
            ja = jb = None
            for k, j in e.blocks:
                if k == key_a:
                    ja = j
                if k == key_b:
                    jb = j
            if ja is not None and jb is not None:
                out += ja.T @ jb
        return out

    def dense_jacobian(self) -> np.ndarray:
        j = np.zeros((self.nrows, self.ncols))
        for e in self.entries:
            r0 = e.row
            for k, b in e.blocks:
                o = self.offsets[k]
                j[r0:r0 + b.shape[0], o:o + b.shape[1]] = b
        return j

    def stacked_residual(self) -> np.ndarray:
        r = np.zeros(self.nrows)
        for e in self.entries:
            r[e.row:e.row + e.residual.shape[0]] = e.residual
        return r

    def solve(self, lam: float) -> np.ndarray:
        """Solve (J^T J + lam diag(J^T J)) delta = -J^T r."""
        self._accumulate()
        h = self._hess
        g = self._grad
        d = np.diag(h)
        if np.any(d <= 0.0):
            col = int(np.argmin(d))
            bad = next(
                k for k in self.ordering
                if self.offsets[k] <= col < self.offsets[k] + self.dims[k])
            exc = SingularSystemError(
                f"variable {bad} has no unmasked factor support")
            exc.structural = True    # damping cannot repair a zero diagonal
            raise exc
        a = h + np.diag(lam * d)
        try:
            cf = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
            return scipy.linalg.cho_solve(cf, -g, check_finite=False)
        except np.linalg.LinAlgError as exc:
            err = SingularSystemError(str(exc))
            err.structural = False
            raise err from exc

    def delta_as_dict(self, delta: np.ndarray) -> dict[VariableKey, np.ndarray]:
        return {
            key: delta[self.offsets[key]:self.offsets[key] + self.dims[key]]
            for key in self.ordering
        }

    def write_block_sparsity(self, stream) -> None:
        """Matrix-market style dump of the J^T J block pattern (1 nonzero)."""
        n = len(self.ordering)
        stream.write("%% jtj block sparsity\n")
        stream.write(f"% blocks {n} {n}\n")
        for i, key in enumerate(self.ordering):
            stream.write(
                f"% var {i} kind={key.kind.name} obj={key.object_id} "
                f"k={key.time_step} dim={self.dims[key]}\n")
        coupled: set[tuple[int, int]] = set()
        index = {k: i for i, k in enumerate(self.ordering)}
        for e in self.entries:
            ids = [index[k] for k, _ in e.blocks]
            for a in ids:
                for b in ids:
                    if a <= b:
                        coupled.add((a, b))
        for i in range(n):
            for j in range(i, n):
                stream.write(f"{i} {j} {1 if (i, j) in coupled else 0}\n")


@dataclass
class OptimizerConfig:
    max_iters: int = 100
    lambda_init: float = 1e-4
    lambda_scale: float = 10.0
    lambda_cap: float = 1e7
    abs_tol: float = 1e-8       # on the update norm
    rel_tol: float = 1e-10      # on the relative error decrease


@dataclass
class OptimizeResult:
    values: Values
    iterations: int
    final_error: float
    converged: bool
    reason: str
    accepted_errors: list = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return self.reason == "lambda_cap"


class FactorGraph:
    """Container of variables (with initial values) and factors."""

    def __init__(self):
        self._initial: dict[VariableKey, object] = {}
        self._fixed: set[VariableKey] = set()
        self._factors: list = []

    # -- construction -------------------------------------------------

    def add_variable(self, key: VariableKey, initial) -> None:
        if key in self._initial:
            raise DuplicateVariableError(f"variable {key} already added")
        self._initial[key] = initial

    def add_factor(self, factor) -> int:
        for key in factor.keys:
            if key not in self._initial:
                raise UnknownVariableError(f"factor references unknown variable {key}")
        self._factors.append(factor)
        return len(self._factors) - 1

    def fix_variable(self, key: VariableKey) -> None:
        if key not in self._initial:
            raise UnknownVariableError(f"cannot fix unknown variable {key}")
        self._fixed.add(key)

    # -- introspection -------------------------------------------------

    @property
    def factors(self) -> list:
        return self._factors

    def num_variables(self) -> int:
        return len(self._initial)

    def num_factors(self) -> int:
        return len(self._factors)

    def is_fixed(self, key: VariableKey) -> bool:
        return key in self._fixed

    def keys(self) -> list[VariableKey]:
        return list(self._initial.keys())

    def active_keys(self) -> list[VariableKey]:
        return sorted(
            (k for k in self._initial if k not in self._fixed), key=_ordering_rank
        )

    def initial_values(self) -> Values:
        return Values(self._initial)

    # -- evaluation ----------------------------------------------------

    def total_error(self, values: Values) -> float:
        total = 0.0
        for f in self._factors:
            r = f.whitened_residual(values)
            total += float(r @ r)
        return total

    def linearize(self, values: Values) -> LinearSystem:
        """Whitened block linearization at ``values``.

        Masked and fixed variables get no Jacobian columns; their current
        values still enter every residual.
        """
        ordering = self.active_keys()
        dims = {k: tangent_dim(values[k]) for k in ordering}
        entries: list[_Entry] = []
        row = 0
        for idx, f in enumerate(self._factors):
            r, blocks = f.whitened_linearization(values)
            kept = [
                (k, b)
                for k, b in blocks
                if b is not None and k not in self._fixed
            ]
            entries.append(_Entry(row, r, kept, idx))
            row += r.shape[0]
        return LinearSystem(ordering, dims, entries, row)

    # -- solving ---------------------------------------------------------

    def gauss_newton_step(self, values: Values):
        """One undamped step. Returns (new values, delta dict)."""
        system = self.linearize(values)
        delta = system.solve(0.0)
        d = system.delta_as_dict(delta)
        return values.retract(d), d

    def optimize(self, values: Values | None = None,
                 config: OptimizerConfig | None = None) -> OptimizeResult:
        cfg = config or OptimizerConfig()
        vals = values.copy() if values is not None else self.initial_values()
        err = self.total_error(vals)
        history = [err]
        lam = cfg.lambda_init
        reason = "max_iters"
        converged = False
        iterations = 0
        for it in range(1, cfg.max_iters + 1):
            iterations = it
            system = self.linearize(vals)
            delta = None
            cand = None
            cand_err = math.inf
            while True:
                try:
                    delta = system.solve(lam)
                except SingularSystemError as exc:
                    if getattr(exc, "structural", False):
                        raise
                    if lam <= 0.0:
                        lam = cfg.lambda_init
                    else:
                        lam *= cfg.lambda_scale
                    if lam > cfg.lambda_cap:
                        return OptimizeResult(vals, it, err, False, "lambda_cap", history)
                    continue
                cand = vals.retract(system.delta_as_dict(delta))
                cand_err = self.total_error(cand)
                if cand_err <= err and math.isfinite(cand_err):
                    break
                if float(np.linalg.norm(delta)) < cfg.abs_tol:
                    # the damped step is below the step tolerance and still
                    # not accepted: stationary up to floating-point noise
                    return OptimizeResult(vals, it, err, True, "abs_tol", history)
                lam *= cfg.lambda_scale
                if lam > cfg.lambda_cap:
                    return OptimizeResult(vals, it, err, False, "lambda_cap", history)
            prev_err = err
            vals, err = cand, cand_err
            history.append(err)
            lam = max(lam / cfg.lambda_scale, 1e-12)
            step_norm = float(np.linalg.norm(delta))
            if step_norm < cfg.abs_tol:
                converged, reason = True, "abs_tol"
                break
            if prev_err - err < cfg.rel_tol * max(prev_err, 1e-300):
                converged, reason = True, "rel_tol"
                break
        return OptimizeResult(vals, iterations, err, converged, reason, history)

    def marginal_covariance(self, values: Values, key: VariableKey) -> np.ndarray:
        """Covariance block of one variable from the full (J^T J)^-1.

        Evaluated at the supplied linearization point; call this with
        converged values.
        """
        if key in self._fixed or key not in self._initial:
            raise UnknownVariableError(f"{key} is not an active variable")
        system = self.linearize(values)
        h = system.jtj()
        try:
            cov = np.linalg.inv(h)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError("information matrix is singular") from exc
        o = system.offsets[key]
        d = system.dims[key]
        return cov[o:o + d, o:o + d]


def solve_normal_equations(system: LinearSystem, lam: float) -> np.ndarray:
    """Module-level alias for LinearSystem.solve."""
    return system.solve(lam)
