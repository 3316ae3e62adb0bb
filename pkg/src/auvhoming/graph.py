"""Factor-graph container, keyframe lifecycle, and sparse nonlinear
least-squares optimization.

The graph jointly estimates per-keyframe chaser states (pose + velocity),
per-keyframe IMU biases, per-keyframe target positions, and one shared
target speed and heading. Optimization is full re-linearized
Levenberg-Marquardt over the whole history after every keyframe; the
"real-time" estimate is causal (the latest-keyframe estimate as it stood at
its own insertion time), not computationally incremental.

Linearization is vectorized per factor kind: measurements and variable
indices are cached in stacked arrays so each iteration costs a handful of
batched einsum calls instead of a Python loop over factors. The per-factor
reference path (`Factor.residual_blocks`) implements the same math one
factor at a time and is used for prior factors and for cross-checking.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import factors as fl
from .factors import (
    ChaserState,
    ImuBias,
    NoiseModel,
    PreintegratedImu,
    RangeBearingMeas,
    TargetMotionParams,
)
from .geometry import Pose3, sphere_tangent_basis, wrap_angle


class VariableKind(enum.Enum):
    CHASER_STATE = "chaser_state"
    TARGET_POSITION = "target_position"
    TARGET_SPEED = "target_speed"
    TARGET_HEADING = "target_heading"
    IMU_BIAS = "imu_bias"


@dataclass(frozen=True)
class VariableKey:
    kind: VariableKind
    index: int = 0


class FactorKind(enum.Enum):
    PRIOR = "prior"
    IMU = "imu"
    DEPTH = "depth"
    VELOCITY = "velocity"
    RANGE_BEARING = "range_bearing"
    MOTION_MODEL = "motion_model"


class EstimateKind(enum.Enum):
    REAL_TIME = "real_time"
    SMOOTHED = "smoothed"
    DEAD_RECKONED = "dead_reckoned"


TANGENT_DIM = {
    VariableKind.CHASER_STATE: 9,   # pose tangent (6) then velocity (3)
    VariableKind.TARGET_POSITION: 3,
    VariableKind.TARGET_SPEED: 1,
    VariableKind.TARGET_HEADING: 1,
    VariableKind.IMU_BIAS: 6,
}


# ---------------------------------------------------------------------------
# batched SO(3) helpers (shapes (n,3) / (n,3,3))


def _bskew(v):
    n = v.shape[0]
    K = np.zeros((n, 3, 3))
    K[:, 0, 1] = -v[:, 2]
    K[:, 0, 2] = v[:, 1]
    K[:, 1, 0] = v[:, 2]
    K[:, 1, 2] = -v[:, 0]
    K[:, 2, 0] = -v[:, 1]
    K[:, 2, 1] = v[:, 0]
    return K


def _bso3_exp(w):
    theta = np.linalg.norm(w, axis=1)
    K = _bskew(w)
    K2 = K @ K
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta * theta / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta * theta / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * K2


def _bso3_left_jac(w):
    theta = np.linalg.norm(w, axis=1)
    K = _bskew(w)
    K2 = K @ K
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta * theta / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    b = np.where(small, 1.0 / 6.0 - theta * theta / 120.0,
                 (safe - np.sin(safe)) / (safe ** 3))
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * K2


def _bso3_log(R):
    tr = np.clip((R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2] - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(tr)
    v = np.stack(
        [R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]],
        axis=1,
    )
    small = theta < 1e-8
    near_pi = (math.pi - theta) < 1e-6
    safe_sin = np.where(small | near_pi, 1.0, np.sin(theta))
    scale = np.where(small, 0.5, theta / (2.0 * safe_sin))
    out = v * scale[:, None]
    if near_pi.any():
        from .geometry import so3_log
        for i in np.nonzero(near_pi)[0]:
            out[i] = so3_log(R[i])
    return out


def _bjr_inv(phi):
    theta = np.linalg.norm(phi, axis=1)
    K = _bskew(phi)
    K2 = K @ K
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta * theta / 720.0,
        1.0 / (safe * safe) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    return np.eye(3) + 0.5 * K + c[:, None, None] * K2


def _bchart_gain(d):
    d = np.clip(d, -1.0 + 1e-12, 1.0)
    angle = np.arccos(d)
    small = angle < 1e-4
    a2 = angle * angle
    safe_sin = np.where(small, 1.0, np.sin(angle))
    g = np.where(small, 1.0 + a2 / 6.0 + 7.0 * a2 * a2 / 360.0, angle / safe_sin)
    gp = np.where(
        small,
        -1.0 / 3.0 - 2.0 * a2 / 15.0,
        -(safe_sin - angle * d) / (safe_sin ** 3),
    )
    return g, gp


# ---------------------------------------------------------------------------
# factors


@dataclass
class Factor:
    kind: FactorKind
    keys: tuple
    noise: NoiseModel

    def residual_blocks(self, graph: "FactorGraph"):
        """Unwhitened residual and per-key Jacobian blocks (reference path)."""
        raise NotImplementedError


@dataclass
class DepthFactor(Factor):
    chaser: int = 0
    z_d: float = 0.0

    def residual_blocks(self, graph):
        state = graph.get_chaser_state(self.chaser)
        res, J6 = fl.depth_residual(state, self.z_d)
        J = np.zeros((1, 9))
        J[:, :6] = J6
        return np.array([res]), {self.keys[0]: J}


@dataclass
class VelocityFactor(Factor):
    chaser: int = 0
    z_v: np.ndarray = None

    def residual_blocks(self, graph):
        res, J = fl.velocity_residual(graph.get_chaser_state(self.chaser), self.z_v)
        return res, {self.keys[0]: J}


@dataclass
class RangeBearingFactor(Factor):
    chaser: int = 0
    target: int = 0
    meas: RangeBearingMeas = None

    def residual_blocks(self, graph):
        res, J_c6, J_t = fl.range_bearing_residual(
            graph.get_chaser_state(self.chaser),
            graph.target_positions[self.target],
            self.meas,
        )
        J_c = np.zeros((3, 9))
        J_c[:, :6] = J_c6
        return res, {self.keys[0]: J_c, self.keys[1]: J_t}


@dataclass
class MotionModelFactor(Factor):
    target_i: int = 0
    target_j: int = 0
    dt: float = 0.0

    def residual_blocks(self, graph):
        params = TargetMotionParams(graph.target_speed, graph.target_heading)
        res, J_xi, J_xj, J_v, J_th = fl.motion_model_residual(
            graph.target_positions[self.target_i],
            graph.target_positions[self.target_j],
            params,
            self.dt,
        )
        return res, {
            self.keys[0]: J_xi, self.keys[1]: J_xj,
            self.keys[2]: J_v, self.keys[3]: J_th,
        }


@dataclass
class ImuFactor(Factor):
    chaser_i: int = 0
    chaser_j: int = 0
    delta: PreintegratedImu = None

    def residual_blocks(self, graph):
        res, J = fl.imu_residual(
            graph.get_chaser_state(self.chaser_i),
            graph.get_chaser_state(self.chaser_j),
            graph.get_bias(self.chaser_i),
            graph.get_bias(self.chaser_j),
            self.delta,
            graph.gravity,
        )
        J_ci = np.hstack([J["pose_i"], J["vel_i"]])
        J_cj = np.hstack([J["pose_j"], J["vel_j"]])
        return res, {
            self.keys[0]: J_ci, self.keys[1]: J_cj,
            self.keys[2]: J["bias_i"], self.keys[3]: J["bias_j"],
        }


@dataclass
class ChaserPriorFactor(Factor):
    """15-dim prior on the initial chaser pose, velocity, and IMU bias."""

    chaser: int = 0
    mean_state: ChaserState = None
    mean_bias: ImuBias = None

    def residual_blocks(self, graph):
        state = graph.get_chaser_state(self.chaser)
        bias = graph.get_bias(self.chaser)
        from .geometry import so3_log
        eps_R = so3_log(self.mean_state.pose.rotation.T @ state.pose.rotation)
        res = np.concatenate([
            eps_R,
            state.pose.translation - self.mean_state.pose.translation,
            state.velocity - self.mean_state.velocity,
            bias.as_vector() - self.mean_bias.as_vector(),
        ])
        J_c = np.zeros((15, 9))
        J_c[0:3, 0:3] = fl._so3_right_jacobian_inv(eps_R)
        J_c[3:6, 3:6] = state.pose.rotation
        J_c[6:9, 6:9] = np.eye(3)
        J_b = np.zeros((15, 6))
        J_b[9:15, :] = np.eye(6)
        return res, {self.keys[0]: J_c, self.keys[1]: J_b}


@dataclass
class TargetPriorFactor(Factor):
    target: int = 0
    mean: np.ndarray = None

    def residual_blocks(self, graph):
        res = graph.target_positions[self.target] - self.mean
        return res, {self.keys[0]: np.eye(3)}


@dataclass
class ScalarPriorFactor(Factor):
    """Prior on the shared speed or heading; heading residuals are wrapped."""

    mean: float = 0.0
    wrapped: bool = False

    def residual_blocks(self, graph):
        value = graph.target_heading if self.wrapped else graph.target_speed
        diff = value - self.mean
        if self.wrapped:
            diff = wrap_angle(diff)
        return np.array([diff]), {self.keys[0]: np.eye(1)}


@dataclass
class OptimizeDiagnostics:
    converged: bool
    iterations: int
    final_cost: float
    gradient_norm: float
    message: str = ""

    @property
    def flagged(self) -> bool:
        return not self.converged


@dataclass
class EstimateSet:
    """Per-keyframe estimates of one kind (real-time, smoothed, or the
    dead-reckoned baseline built outside the graph)."""

    kind: EstimateKind
    timestamps: np.ndarray
    chaser_poses: list
    chaser_velocities: np.ndarray
    target_positions: np.ndarray
    speeds: np.ndarray
    headings: np.ndarray
    speed: float
    heading: float
    covariance_diagonals: dict | None = None


@dataclass
class GraphConfig:
    depth_sigma: float = fl.PRESSURE_SIGMA
    dvl_sigma: float = 0.02
    usbl_angle_sigma_per_m: float = fl.USBL_ANGLE_SIGMA_PER_M
    usbl_range_sigma: float = fl.USBL_RANGE_SIGMA
    accel_bias_rw: float = fl.IMU_ACCEL_BIAS_RW
    gyro_bias_rw: float = fl.IMU_GYRO_BIAS_RW
    mm_sigma_xy: float = 1.0
    mm_sigma_z: float = 0.01
    gravity_z: float = -9.81
    realtime_iters: int = 5
    max_iters: int = 100
    gradient_tol: float = 1e-8
    cost_rel_tol: float = 1e-10
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    lambda_min: float = 1e-12
    lambda_max: float = 1e6


class FactorGraph:
    """Single-writer factor graph with batch LM optimization."""

    def __init__(self, config: GraphConfig | None = None):
        self.config = config or GraphConfig()
        self.gravity = np.array([0.0, 0.0, self.config.gravity_z])

        self.chaser_R = np.zeros((0, 3, 3))
        self.chaser_t = np.zeros((0, 3))
        self.chaser_v = np.zeros((0, 3))
        self.biases = np.zeros((0, 6))
        self.target_positions = np.zeros((0, 3))
        self.target_speed = 0.0
        self.target_heading = 0.0
        self.keyframe_times: list[float] = []

        self.factors: list[Factor] = []
        self._col_offsets: dict[VariableKey, int] = {}
        self._chaser_cols: list[int] = []
        self._bias_cols: list[int] = []
        self._target_cols: list[int] = []
        self._speed_col = -1
        self._heading_col = -1
        self._ncols = 0
        self._initialized = False
        self._cache = None
        self._realtime_snapshots: list[tuple] = []
        self.last_diagnostics: OptimizeDiagnostics | None = None

    # -- variables ----------------------------------------------------------

    @property
    def num_keyframes(self) -> int:
        return len(self.keyframe_times)

    def _add_variable(self, key: VariableKey) -> int:
        if key in self._col_offsets:
            raise ValueError(f"variable {key} already exists")
        offset = self._ncols
        self._col_offsets[key] = offset
        self._ncols += TANGENT_DIM[key.kind]
        return offset

    def variables(self) -> dict:
        out = {}
        for key in self._col_offsets:
            out[key] = self.get_value(key)
        return out

    def get_value(self, key: VariableKey):
        if key.kind is VariableKind.CHASER_STATE:
            return self.get_chaser_state(key.index)
        if key.kind is VariableKind.TARGET_POSITION:
            return self.target_positions[key.index].copy()
        if key.kind is VariableKind.TARGET_SPEED:
            return self.target_speed
        if key.kind is VariableKind.TARGET_HEADING:
            return self.target_heading
        if key.kind is VariableKind.IMU_BIAS:
            return self.get_bias(key.index)
        raise KeyError(key)

    def get_chaser_state(self, k: int) -> ChaserState:
        return ChaserState(
            Pose3(self.chaser_R[k].copy(), self.chaser_t[k].copy()),
            self.chaser_v[k].copy(),
        )

    def get_bias(self, k: int) -> ImuBias:
        return ImuBias.from_vector(self.biases[k])

    def invalidate(self):
        """Call after mutating the factor list from outside."""
        self._cache = None

    # -- lifecycle ----------------------------------------------------------

    def initialize_priors(self, chaser0: ChaserState, chaser0_covariance: np.ndarray,
                          target_init, timestamp: float,
                          bias0: ImuBias | None = None):
        """Install prior factors for keyframe 0.

        ``chaser0_covariance`` is 15x15 over (rotation, translation, velocity,
        accel bias, gyro bias); ``target_init`` is the initialization bundle
        produced by the frontend (position, speed, heading, and their prior
        sigmas).
        """
        if self._initialized:
            raise ValueError("graph already initialized")
        bias0 = bias0 or ImuBias()

        self.chaser_R = chaser0.pose.rotation[None].copy()
        self.chaser_t = chaser0.pose.translation[None].copy()
        self.chaser_v = chaser0.velocity[None].copy()
        self.biases = bias0.as_vector()[None].copy()
        self.target_positions = np.asarray(target_init.x_t0, dtype=float)[None].copy()
        self.target_speed = float(target_init.v_bar)
        self.target_heading = wrap_angle(float(target_init.theta_hat))
        self.keyframe_times = [float(timestamp)]

        c_key = VariableKey(VariableKind.CHASER_STATE, 0)
        b_key = VariableKey(VariableKind.IMU_BIAS, 0)
        t_key = VariableKey(VariableKind.TARGET_POSITION, 0)
        v_key = VariableKey(VariableKind.TARGET_SPEED, 0)
        h_key = VariableKey(VariableKind.TARGET_HEADING, 0)
        self._chaser_cols.append(self._add_variable(c_key))
        self._bias_cols.append(self._add_variable(b_key))
        self._target_cols.append(self._add_variable(t_key))
        self._speed_col = self._add_variable(v_key)
        self._heading_col = self._add_variable(h_key)

        self.factors.append(ChaserPriorFactor(
            FactorKind.PRIOR, (c_key, b_key), NoiseModel(chaser0_covariance),
            chaser=0, mean_state=chaser0, mean_bias=bias0,
        ))
        self.factors.append(TargetPriorFactor(
            FactorKind.PRIOR, (t_key,),
            NoiseModel.from_sigmas(target_init.position_sigmas),
            target=0, mean=np.asarray(target_init.x_t0, dtype=float),
        ))
        self.factors.append(ScalarPriorFactor(
            FactorKind.PRIOR, (v_key,), NoiseModel.from_sigmas([target_init.speed_sigma]),
            mean=float(target_init.v_bar), wrapped=False,
        ))
        self.factors.append(ScalarPriorFactor(
            FactorKind.PRIOR, (h_key,), NoiseModel.from_sigmas([target_init.heading_sigma]),
            mean=wrap_angle(float(target_init.theta_hat)), wrapped=True,
        ))
        self._initialized = True
        self._cache = None
        self._snapshot_realtime()

    def predict_initial_values(self, preint: PreintegratedImu, dt: float):
        """Initial guesses for the next keyframe: compose the last optimized
        chaser state with the preintegrated delta, and propagate the target
        through the motion model."""
        if self.num_keyframes == 0:
            raise ValueError("graph is empty")
        k = self.num_keyframes - 1
        R, t, v = self.chaser_R[k], self.chaser_t[k], self.chaser_v[k]
        T = preint.duration
        g = self.gravity
        R_new = R @ preint.delta_rotation
        t_new = t + v * T + 0.5 * g * T * T + R @ preint.delta_position
        v_new = v + g * T + R @ preint.delta_velocity
        chaser = ChaserState(Pose3(R_new, t_new), v_new)
        target = fl.motion_model_predict(
            self.target_positions[k],
            TargetMotionParams(self.target_speed, self.target_heading),
            dt,
        )
        return chaser, target

    def add_keyframe(self, fix: RangeBearingMeas, preint: PreintegratedImu,
                     depth_z: float, vel_world: np.ndarray, dt: float) -> int:
        """Append one keyframe: new chaser/bias/target variables and one
        factor of each measurement kind. Returns the keyframe ordinal."""
        if not self._initialized:
            raise ValueError("initialize_priors must run before add_keyframe")
        if dt <= 0.0:
            raise ValueError("keyframe dt must be positive")
        if fix.timestamp <= self.keyframe_times[-1]:
            raise ValueError("keyframe timestamps must be strictly increasing")

        chaser_guess, target_guess = self.predict_initial_values(preint, dt)
        i = self.num_keyframes - 1
        j = self.num_keyframes

        self.chaser_R = np.concatenate([self.chaser_R, chaser_guess.pose.rotation[None]])
        self.chaser_t = np.concatenate([self.chaser_t, chaser_guess.pose.translation[None]])
        self.chaser_v = np.concatenate([self.chaser_v, chaser_guess.velocity[None]])
        self.biases = np.concatenate([self.biases, self.biases[i][None]])
        self.target_positions = np.concatenate([self.target_positions, target_guess[None]])
        self.keyframe_times.append(float(fix.timestamp))

        c_i = VariableKey(VariableKind.CHASER_STATE, i)
        c_j = VariableKey(VariableKind.CHASER_STATE, j)
        b_i = VariableKey(VariableKind.IMU_BIAS, i)
        b_j = VariableKey(VariableKind.IMU_BIAS, j)
        t_i = VariableKey(VariableKind.TARGET_POSITION, i)
        t_j = VariableKey(VariableKind.TARGET_POSITION, j)
        v_key = VariableKey(VariableKind.TARGET_SPEED, 0)
        h_key = VariableKey(VariableKind.TARGET_HEADING, 0)
        self._chaser_cols.append(self._add_variable(c_j))
        self._bias_cols.append(self._add_variable(b_j))
        self._target_cols.append(self._add_variable(t_j))

        cfg = self.config
        self.factors.append(ImuFactor(
            FactorKind.IMU, (c_i, c_j, b_i, b_j),
            fl.imu_noise_model(preint, cfg.accel_bias_rw, cfg.gyro_bias_rw),
            chaser_i=i, chaser_j=j, delta=preint,
        ))
        self.factors.append(MotionModelFactor(
            FactorKind.MOTION_MODEL, (t_i, t_j, v_key, h_key),
            NoiseModel.from_sigmas([cfg.mm_sigma_xy, cfg.mm_sigma_xy, cfg.mm_sigma_z]),
            target_i=i, target_j=j, dt=dt,
        ))
        self.factors.append(DepthFactor(
            FactorKind.DEPTH, (c_j,), NoiseModel.from_sigmas([cfg.depth_sigma]),
            chaser=j, z_d=float(depth_z),
        ))
        self.factors.append(VelocityFactor(
            FactorKind.VELOCITY, (c_j,), NoiseModel.isotropic(3, cfg.dvl_sigma),
            chaser=j, z_v=np.asarray(vel_world, dtype=float),
        ))
        self.factors.append(RangeBearingFactor(
            FactorKind.RANGE_BEARING, (c_j, t_j),
            fl.usbl_noise_model(fix.range, cfg.usbl_angle_sigma_per_m, cfg.usbl_range_sigma),
            chaser=j, target=j, meas=fix,
        ))
        self._cache = None
        return j

    # -- state vector helpers -------------------------------------------------

    def _snapshot_state(self):
        return (
            self.chaser_R.copy(), self.chaser_t.copy(), self.chaser_v.copy(),
            self.biases.copy(), self.target_positions.copy(),
            self.target_speed, self.target_heading,
        )

    def _restore_state(self, snap):
        (self.chaser_R, self.chaser_t, self.chaser_v,
         self.biases, self.target_positions,
         self.target_speed, self.target_heading) = (
            snap[0].copy(), snap[1].copy(), snap[2].copy(),
            snap[3].copy(), snap[4].copy(), snap[5], snap[6],
        )

    def _apply_delta(self, state, delta):
        """Retract every variable of a state tuple along a global delta."""
        CR, Ct, Cv, B, T, v, th = state
        K = CR.shape[0]
        c_off = np.asarray(self._chaser_cols)
        dc = delta[np.add.outer(c_off, np.arange(9))]          # (K,9)
        w, dt_, dv = dc[:, 0:3], dc[:, 3:6], dc[:, 6:9]
        CR2 = CR @ _bso3_exp(w)
        Ct2 = Ct + np.einsum("nij,nj->ni", CR, np.einsum("nij,nj->ni", _bso3_left_jac(w), dt_))
        Cv2 = Cv + dv
        b_off = np.asarray(self._bias_cols)
        B2 = B + delta[np.add.outer(b_off, np.arange(6))]
        t_off = np.asarray(self._target_cols)
        T2 = T + delta[np.add.outer(t_off, np.arange(3))]
        v2 = v + delta[self._speed_col]
        th2 = wrap_angle(th + delta[self._heading_col])
        return (CR2, Ct2, Cv2, B2, T2, v2, th2)

    # -- batched linearization -------------------------------------------------

    def _build_cache(self):
        """Group factors by kind into stacked measurement/index arrays and
        precompute the sparse scatter patterns."""
        cache = {"m": 0, "kinds": {}, "priors": []}
        row = 0
        groups: dict[FactorKind, list] = {k: [] for k in FactorKind}
        rows_of: dict[int, int] = {}
        for fi, f in enumerate(self.factors):
            rows_of[fi] = row
            row += f.noise.dim
            if f.kind is FactorKind.PRIOR:
                cache["priors"].append((f, rows_of[fi]))
            else:
                groups[f.kind].append((f, rows_of[fi]))
        cache["m"] = row

        def scatter(row0, rdim, col0s, bdims):
            """(rows, cols) index arrays for blocks of shape (n, rdim, sum(bdims))."""
            n = len(row0)
            width = sum(bdims)
            cols = np.zeros((n, width), dtype=np.int64)
            at = 0
            for c0, bd in zip(col0s, bdims):
                cols[:, at:at + bd] = c0[:, None] + np.arange(bd)
                at += bd
            rows = (np.asarray(row0)[:, None, None] + np.arange(rdim)[None, :, None])
            rows = np.broadcast_to(rows, (n, rdim, width))
            cols = np.broadcast_to(cols[:, None, :], (n, rdim, width))
            return rows.ravel(), cols.ravel()

        kinds = {}
        ccols = np.asarray(self._chaser_cols)
        tcols = np.asarray(self._target_cols)
        bcols = np.asarray(self._bias_cols)

        fs = groups[FactorKind.DEPTH]
        if fs:
            idx = np.array([f.chaser for f, _ in fs])
            r0 = [r for _, r in fs]
            kinds["depth"] = {
                "idx": idx,
                "z": np.array([f.z_d for f, _ in fs]),
                "w": np.stack([f.noise.sqrt_info for f, _ in fs]),
                "scatter": scatter(r0, 1, [ccols[idx]], [9]),
                "rows0": np.asarray(r0),
            }
        fs = groups[FactorKind.VELOCITY]
        if fs:
            idx = np.array([f.chaser for f, _ in fs])
            r0 = [r for _, r in fs]
            kinds["velocity"] = {
                "idx": idx,
                "z": np.stack([f.z_v for f, _ in fs]),
                "w": np.stack([f.noise.sqrt_info for f, _ in fs]),
                "scatter": scatter(r0, 3, [ccols[idx]], [9]),
                "rows0": np.asarray(r0),
            }
        fs = groups[FactorKind.RANGE_BEARING]
        if fs:
            ci = np.array([f.chaser for f, _ in fs])
            ti = np.array([f.target for f, _ in fs])
            r0 = [r for _, r in fs]
            zb = np.stack([np.asarray(f.meas.bearing) for f, _ in fs])
            E = np.stack([np.vstack(sphere_tangent_basis(b)) for b in zb])
            kinds["range_bearing"] = {
                "ci": ci, "ti": ti,
                "zr": np.array([f.meas.range for f, _ in fs]),
                "zb": zb, "E": E,
                "w": np.stack([f.noise.sqrt_info for f, _ in fs]),
                "scatter": scatter(r0, 3, [ccols[ci], tcols[ti]], [9, 3]),
                "rows0": np.asarray(r0),
            }
        fs = groups[FactorKind.MOTION_MODEL]
        if fs:
            ti = np.array([f.target_i for f, _ in fs])
            tj = np.array([f.target_j for f, _ in fs])
            r0 = [r for _, r in fs]
            n = len(fs)
            kinds["motion_model"] = {
                "ti": ti, "tj": tj,
                "dt": np.array([f.dt for f, _ in fs]),
                "w": np.stack([f.noise.sqrt_info for f, _ in fs]),
                "scatter": scatter(
                    r0, 3,
                    [tcols[ti], tcols[tj],
                     np.full(n, self._speed_col), np.full(n, self._heading_col)],
                    [3, 3, 1, 1]),
                "rows0": np.asarray(r0),
            }
        fs = groups[FactorKind.IMU]
        if fs:
            ci = np.array([f.chaser_i for f, _ in fs])
            cj = np.array([f.chaser_j for f, _ in fs])
            r0 = [r for _, r in fs]
            kinds["imu"] = {
                "ci": ci, "cj": cj,
                "dR": np.stack([f.delta.delta_rotation for f, _ in fs]),
                "dv": np.stack([f.delta.delta_velocity for f, _ in fs]),
                "dp": np.stack([f.delta.delta_position for f, _ in fs]),
                "T": np.array([f.delta.duration for f, _ in fs]),
                "w": np.stack([f.noise.sqrt_info for f, _ in fs]),
                "scatter": scatter(r0, 15, [ccols[ci], ccols[cj], bcols[ci], bcols[cj]],
                                   [9, 9, 6, 6]),
                "rows0": np.asarray(r0),
            }
        cache["kinds"] = kinds
        self._cache = cache
        return cache

    def _kind_residuals(self, state, want_jac):
        """Yield (name, rows0, whitened residual (n,d), whitened J (n,d,w) or
        None, scatter) for every batched kind."""
        cache = self._cache or self._build_cache()
        CR, Ct, Cv, B, T, v, th = state
        eye3 = np.eye(3)

        k = cache["kinds"].get("depth")
        if k is not None:
            idx = k["idx"]
            res = (Ct[idx, 2] - k["z"])[:, None]
            J = None
            if want_jac:
                J = np.zeros((len(idx), 1, 9))
                J[:, 0, 3:6] = CR[idx, 2, :]
            yield "depth", k, res, J

        k = cache["kinds"].get("velocity")
        if k is not None:
            idx = k["idx"]
            res = Cv[idx] - k["z"]
            J = None
            if want_jac:
                J = np.zeros((len(idx), 3, 9))
                J[:, :, 6:9] = eye3
            yield "velocity", k, res, J

        k = cache["kinds"].get("range_bearing")
        if k is not None:
            ci, ti = k["ci"], k["ti"]
            R = CR[ci]
            p = np.einsum("nji,nj->ni", R, T[ti] - Ct[ci])
            r = np.linalg.norm(p, axis=1)
            u = p / r[:, None]
            d = np.sum(u * k["zb"], axis=1)
            Eu = np.einsum("nij,nj->ni", k["E"], u)
            g, gp = _bchart_gain(d)
            res = np.concatenate([g[:, None] * Eu, (r - k["zr"])[:, None]], axis=1)
            J = None
            if want_jac:
                deps_du = gp[:, None, None] * (Eu[:, :, None] * k["zb"][:, None, :]) \
                    + g[:, None, None] * k["E"]
                du_dp = (eye3[None] - u[:, :, None] * u[:, None, :]) / r[:, None, None]
                dres_dp = np.concatenate(
                    [np.einsum("nij,njk->nik", deps_du, du_dp), u[:, None, :]], axis=1)
                dp_dpose = np.concatenate([_bskew(p), -np.broadcast_to(eye3, p.shape[:1] + (3, 3))], axis=2)
                J = np.zeros((len(ci), 3, 12))
                J[:, :, 0:6] = np.einsum("nij,njk->nik", dres_dp, dp_dpose)
                J[:, :, 9:12] = np.einsum("nij,nkj->nik", dres_dp, R)
            yield "range_bearing", k, res, J

        k = cache["kinds"].get("motion_model")
        if k is not None:
            ti, tj, dt = k["ti"], k["tj"], k["dt"]
            c, s = math.cos(th), math.sin(th)
            step = v * dt
            pred = T[ti].copy()
            pred[:, 0] += c * step
            pred[:, 1] += s * step
            res = pred - T[tj]
            J = None
            if want_jac:
                n = len(ti)
                J = np.zeros((n, 3, 8))
                J[:, :, 0:3] = eye3
                J[:, :, 3:6] = -eye3
                J[:, 0, 6] = c * dt
                J[:, 1, 6] = s * dt
                J[:, 0, 7] = -s * v * dt
                J[:, 1, 7] = c * v * dt
            yield "motion_model", k, res, J

        k = cache["kinds"].get("imu")
        if k is not None:
            ci, cj, Td = k["ci"], k["cj"], k["T"]
            g = self.gravity
            Ri, Rj = CR[ci], CR[cj]
            M = np.einsum("nji,njk->nik", Ri, Rj)                      # Ri^T Rj
            E_R = np.einsum("nji,njk->nik", k["dR"], M)
            eps_R = _bso3_log(E_R)
            dp_w = Ct[cj] - Ct[ci] - Cv[ci] * Td[:, None] - 0.5 * g * (Td * Td)[:, None]
            dv_w = Cv[cj] - Cv[ci] - g * Td[:, None]
            loc_p = np.einsum("nji,nj->ni", Ri, dp_w)
            loc_v = np.einsum("nji,nj->ni", Ri, dv_w)
            eps_t = loc_p - k["dp"]
            eps_v = loc_v - k["dv"]
            eps_b = B[cj] - B[ci]
            res = np.concatenate([eps_R, eps_t, eps_v, eps_b], axis=1)
            J = None
            if want_jac:
                n = len(ci)
                Jr_inv = _bjr_inv(eps_R)
                RiT = Ri.transpose(0, 2, 1)
                J = np.zeros((n, 15, 30))
                # chaser_i block: pose (0:6), velocity (6:9)
                J[:, 0:3, 0:3] = -np.einsum("nij,nkj->nik", Jr_inv, M)  # -Jr_inv @ Rj^T Ri
                J[:, 3:6, 0:3] = _bskew(loc_p)
                J[:, 3:6, 3:6] = -eye3
                J[:, 6:9, 0:3] = _bskew(loc_v)
                J[:, 3:6, 6:9] = -Td[:, None, None] * RiT
                J[:, 6:9, 6:9] = -RiT
                # chaser_j block: pose (9:15), velocity (15:18)
                J[:, 0:3, 9:12] = Jr_inv
                J[:, 3:6, 12:15] = M
                J[:, 6:9, 15:18] = RiT
                # bias blocks
                J[:, 9:15, 18:24] = -np.eye(6)
                J[:, 9:15, 24:30] = np.eye(6)
            yield "imu", k, res, J

    def _assemble(self, state, want_jac):
        """Whitened residual vector (and sparse Jacobian) at a state."""
        cache = self._cache or self._build_cache()
        m = cache["m"]
        b = np.zeros(m)
        data_parts, row_parts, col_parts = [], [], []

        for _, k, res, J in self._kind_residuals(state, want_jac):
            w = k["w"]
            res_w = np.einsum("nij,nj->ni", w, res)
            rows0 = k["rows0"]
            d = res_w.shape[1]
            b[(rows0[:, None] + np.arange(d)).ravel()] = res_w.ravel()
            if want_jac:
                J_w = np.einsum("nij,njk->nik", w, J)
                rows, cols = k["scatter"]
                data_parts.append(J_w.ravel())
                row_parts.append(rows)
                col_parts.append(cols)

        snap = self._snapshot_state()
        try:
            self._restore_state(state)
            for f, r0 in cache["priors"]:
                res, blocks = f.residual_blocks(self)
                res_w = f.noise.whiten(np.atleast_1d(res))
                d = len(res_w)
                b[r0:r0 + d] = res_w
                if want_jac:
                    for key, Jb in blocks.items():
                        Jb_w = f.noise.sqrt_info @ Jb
                        c0 = self._col_offsets[key]
                        bd = Jb_w.shape[1]
                        rr, cc = np.meshgrid(np.arange(r0, r0 + d),
                                             np.arange(c0, c0 + bd), indexing="ij")
                        data_parts.append(Jb_w.ravel())
                        row_parts.append(rr.ravel())
                        col_parts.append(cc.ravel())
        finally:
            self._restore_state(snap)

        if not want_jac:
            return None, b
        A = scipy.sparse.coo_matrix(
            (np.concatenate(data_parts),
             (np.concatenate(row_parts), np.concatenate(col_parts))),
            shape=(m, self._ncols),
        ).tocsr()
        return A, b

    def cost(self, state=None) -> float:
        """Sum of squared Mahalanobis residuals over every factor."""
        if state is None:
            state = self._snapshot_state()
        _, b = self._assemble(state, want_jac=False)
        return float(b @ b)

    # -- optimization -----------------------------------------------------------

    def _lm(self, max_iters: int) -> OptimizeDiagnostics:
        cfg = self.config
        state = self._snapshot_state()
        A, b = self._assemble(state, want_jac=True)
        cost = float(b @ b)
        lam = cfg.lambda_init
        grad_norm = float("inf")
        message = ""
        converged = False
        iters = 0

        for iters in range(1, max_iters + 1):
            grad = 2.0 * (A.T @ b)
            grad_norm = float(np.max(np.abs(grad))) if grad.size else 0.0
            if grad_norm < cfg.gradient_tol:
                converged = True
                message = "gradient below tolerance"
                break
            H = (A.T @ A).tocsc()
            eye = scipy.sparse.identity(self._ncols, format="csc")
            accepted = False
            while True:
                try:
                    lu = scipy.sparse.linalg.splu(H + lam * eye, permc_spec="NATURAL")
                    delta = lu.solve(-0.5 * grad)
                except RuntimeError:
                    delta = None
                if delta is not None and np.all(np.isfinite(delta)):
                    trial = self._apply_delta(state, delta)
                    _, b_t = self._assemble(trial, want_jac=False)
                    new_cost = float(b_t @ b_t)
                    if new_cost < cost:
                        rel = (cost - new_cost) / max(cost, 1e-300)
                        state = trial
                        cost = new_cost
                        lam = max(lam / cfg.lambda_factor, cfg.lambda_min)
                        accepted = True
                        if rel < cfg.cost_rel_tol:
                            converged = True
                            message = "relative cost decrease below tolerance"
                        break
                if lam >= cfg.lambda_max:
                    message = "damping exhausted (rank-deficient or stalled system)"
                    break
                lam = min(lam * cfg.lambda_factor, cfg.lambda_max)
            if not accepted:
                # either converged-by-stall or genuinely stuck; a stall at
                # small gradient is normal convergence
                converged = converged or grad_norm < math.sqrt(cfg.gradient_tol)
                if not message:
                    message = "no acceptable step found"
                break
            if converged:
                break
            A, b = self._assemble(state, want_jac=True)

        self._restore_state(state)
        diag = OptimizeDiagnostics(
            converged=converged or grad_norm < cfg.gradient_tol,
            iterations=iters,
            final_cost=cost,
            gradient_norm=grad_norm,
            message=message or "iteration budget reached",
        )
        self.last_diagnostics = diag
        return diag

    def step_realtime(self) -> OptimizeDiagnostics:
        """Bounded LM pass after a keyframe insertion; records the causal
        estimate of the newest keyframe."""
        diag = self._lm(self.config.realtime_iters)
        self._snapshot_realtime()
        return diag

    def _snapshot_realtime(self):
        k = self.num_keyframes - 1
        self._realtime_snapshots.append((
            self.keyframe_times[k],
            self.get_chaser_state(k),
            self.target_positions[k].copy(),
            self.target_speed,
            self.target_heading,
        ))

    def optimize(self, mode: EstimateKind,
                 with_covariances: bool = False) -> tuple[EstimateSet, OptimizeDiagnostics]:
        """Produce an estimate set.

        SMOOTHED runs LM to convergence over the full history and reports
        every keyframe from the final iterate. REAL_TIME reports the causal
        snapshots recorded by step_realtime (one per keyframe).
        """
        if mode is EstimateKind.SMOOTHED:
            diag = self._lm(self.config.max_iters)
            times = np.array(self.keyframe_times)
            K = self.num_keyframes
            est = EstimateSet(
                kind=mode,
                timestamps=times,
                chaser_poses=[Pose3(self.chaser_R[k].copy(), self.chaser_t[k].copy())
                              for k in range(K)],
                chaser_velocities=self.chaser_v.copy(),
                target_positions=self.target_positions.copy(),
                speeds=np.full(K, self.target_speed),
                headings=np.full(K, self.target_heading),
                speed=self.target_speed,
                heading=self.target_heading,
            )
            if with_covariances:
                est.covariance_diagonals = self.marginal_diagonals()
            return est, diag
        if mode is EstimateKind.REAL_TIME:
            snaps = self._realtime_snapshots
            if len(snaps) != self.num_keyframes:
                raise ValueError(
                    "real-time estimates need one step_realtime call per keyframe")
            diag = self.last_diagnostics or OptimizeDiagnostics(True, 0, self.cost(), 0.0)
            est = EstimateSet(
                kind=mode,
                timestamps=np.array([s[0] for s in snaps]),
                chaser_poses=[s[1].pose for s in snaps],
                chaser_velocities=np.array([s[1].velocity for s in snaps]),
                target_positions=np.array([s[2] for s in snaps]),
                speeds=np.array([s[3] for s in snaps]),
                headings=np.array([s[4] for s in snaps]),
                speed=snaps[-1][3],
                heading=snaps[-1][4],
            )
            return est, diag
        raise ValueError(f"optimize cannot produce {mode}")

    def marginal_diagonals(self) -> dict:
        """Diagonal covariance blocks per variable from the undamped
        information matrix (expensive; off by default)."""
        A, _ = self._assemble(self._snapshot_state(), want_jac=True)
        H = (A.T @ A).tocsc()
        lu = scipy.sparse.linalg.splu(H, permc_spec="NATURAL")
        out = {}
        for key, c0 in self._col_offsets.items():
            dim = TANGENT_DIM[key.kind]
            diag = np.zeros(dim)
            for j in range(dim):
                e = np.zeros(self._ncols)
                e[c0 + j] = 1.0
                diag[j] = lu.solve(e)[c0 + j]
            out[key] = diag
        return out
