"""Measurement models, residuals, analytic Jacobians, and noise models.

Every residual here is a pure function of variable values and a fixed
measurement. Jacobians are taken with respect to the local tangent
parameterizations defined in :mod:`auvhoming.geometry`: chaser poses use the
right-multiplicative 6-vector update (rotation first), everything else is
additive. The zero of each residual is the exact consistency point: feeding a
residual the noiseless variable values that generated its measurement yields
zeros to machine precision (IMU integration truncation excepted).

Residual stacking for the acoustic range-bearing factor is
``(bearing_az, bearing_zen, range)`` so the rows line up with the noise
standard deviations ``(sigma_azimuth, sigma_zenith, sigma_range)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Pose3,
    bearing_boxminus,
    skew,
    so3_exp,
    so3_log,
    sphere_tangent_basis,
)

# Sensor noise constants (standard AUV-grade units: densities per sqrt(Hz),
# sigmas in SI). Angular USBL noise grows linearly with range.
IMU_ACCEL_NOISE_DENSITY = 5.9898e-2   # (m/s^2)/sqrt(Hz)
IMU_GYRO_NOISE_DENSITY = 1.0471e-5    # (rad/s)/sqrt(Hz)
IMU_ACCEL_BIAS_RW = 5.0411e-2         # (m/s^3)/sqrt(Hz)
IMU_GYRO_BIAS_RW = 3.3936e-4          # (rad/s^2)/sqrt(Hz)
PRESSURE_SIGMA = 0.01                 # m
USBL_ANGLE_SIGMA_PER_M = 0.0175       # rad per meter of range
USBL_RANGE_SIGMA = 0.1                # m
GRAVITY = np.array([0.0, 0.0, -9.81])  # ENU world frame


@dataclass(frozen=True)
class ChaserState:
    """Chaser rigid-body pose plus world-frame linear velocity."""

    pose: Pose3
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class TargetMotionParams:
    """Shared constant-motion parameters of the target: speed and heading."""

    speed: float
    heading: float


@dataclass(frozen=True)
class RangeBearingMeas:
    """Body-frame acoustic fix: range (m), unit bearing, receipt time (s)."""

    range: float
    bearing: np.ndarray
    timestamp: float


@dataclass(frozen=True)
class ImuSample:
    accel: np.ndarray   # body frame, m/s^2 (specific force, includes gravity)
    gyro: np.ndarray    # body frame, rad/s
    timestamp: float


@dataclass(frozen=True)
class ImuBias:
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.accel_bias, self.gyro_bias])

    @staticmethod
    def from_vector(v: np.ndarray) -> "ImuBias":
        v = np.asarray(v, dtype=float)
        return ImuBias(v[:3].copy(), v[3:].copy())


@dataclass(frozen=True)
class PreintegratedImu:
    """Relative-motion summary of an IMU sample bundle between two keyframes.

    covariance is 9x9 over (rotation, position, velocity) tangent errors.
    """

    delta_rotation: np.ndarray
    delta_velocity: np.ndarray
    delta_position: np.ndarray
    duration: float
    covariance: np.ndarray
    linearization_bias: ImuBias


class NoiseModel:
    """Gaussian noise wrapper around a symmetric positive-definite covariance.

    Provides the whitening transform W = L^-1 (covariance = L L^T) so that
    ||W r||^2 equals the squared Mahalanobis norm of a residual r.
    """

    def __init__(self, covariance: np.ndarray):
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        L = np.linalg.cholesky(cov)  # raises LinAlgError if not PD
        self.covariance = cov
        self.sqrt_info = np.linalg.inv(L)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @staticmethod
    def from_sigmas(sigmas) -> "NoiseModel":
        s = np.asarray(sigmas, dtype=float)
        return NoiseModel(np.diag(s * s))

    @staticmethod
    def isotropic(dim: int, sigma: float) -> "NoiseModel":
        return NoiseModel(np.eye(dim) * sigma * sigma)

    def whiten(self, residual: np.ndarray) -> np.ndarray:
        return self.sqrt_info @ residual

    def mahalanobis_sq(self, residual: np.ndarray) -> float:
        w = self.whiten(np.asarray(residual, dtype=float))
        return float(w @ w)


# ---------------------------------------------------------------------------
# frame adjustments


def usbl_to_body(pose_estimate: Pose3, fix_world: np.ndarray) -> np.ndarray:
    """Convert a relayed world-frame fix (target-to-chaser vector) into the
    chaser body frame as a chaser-to-target vector.

    The fix is a free vector, so only the rotation part of the inverse pose
    acts on it: negate, then rotate into the body frame.
    """
    return -(pose_estimate.rotation.T @ np.asarray(fix_world, dtype=float))


def dvl_to_world(rotation_estimate: np.ndarray, v_body: np.ndarray) -> np.ndarray:
    """Rotate a body-frame velocity into the world frame."""
    return np.asarray(rotation_estimate, dtype=float) @ np.asarray(v_body, dtype=float)


# ---------------------------------------------------------------------------
# range and bearing


def predict_range_bearing(chaser: ChaserState, target: np.ndarray):
    """Predicted range and unit bearing of the target in the chaser body frame."""
    p = chaser.pose.rotation.T @ (np.asarray(target, dtype=float) - chaser.pose.translation)
    r = np.linalg.norm(p)
    if r < 1e-12:
        raise ValueError("chaser and target positions coincide; bearing undefined")
    return float(r), p / r


def _chart_gain(d: float) -> tuple[float, float]:
    """g(d) = angle/sin(angle) and its derivative, with d = cos(angle)."""
    d = min(1.0, max(-1.0, d))
    angle = math.acos(d)
    if angle < 1e-4:
        a2 = angle * angle
        g = 1.0 + a2 / 6.0 + 7.0 * a2 * a2 / 360.0
        gp = -1.0 / 3.0 - 2.0 * a2 / 15.0
        return g, gp
    s = math.sin(angle)
    g = angle / s
    gp = -(s - angle * d) / (s * s * s)
    return g, gp


def range_bearing_residual(chaser: ChaserState, target: np.ndarray, z: RangeBearingMeas):
    """Residual (bearing_az, bearing_zen, range) and its Jacobians.

    Returns (residual[3], J_chaser[3x6] over the pose tangent,
    J_target[3x3]). The bearing rows differentiate the sphere chart at the
    measured bearing; near the antipode of the measurement the chart is
    singular and the Jacobians lose meaning along with the residual.
    """
    R = chaser.pose.rotation
    p = R.T @ (np.asarray(target, dtype=float) - chaser.pose.translation)
    r = float(np.linalg.norm(p))
    if r < 1e-12:
        raise ValueError("chaser and target positions coincide; bearing undefined")
    u = p / r
    zb = np.asarray(z.bearing, dtype=float)

    eps_b = bearing_boxminus(u, zb)
    residual = np.array([eps_b[0], eps_b[1], r - z.range])

    # d eps_b / du through the chart at zb
    e_az, e_zen = sphere_tangent_basis(zb)
    E = np.vstack([e_az, e_zen])
    d = float(np.clip(np.dot(u, zb), -1.0, 1.0))
    g, gp = _chart_gain(d)
    deps_du = gp * np.outer(E @ u, zb) + g * E          # 2x3
    du_dp = (np.eye(3) - np.outer(u, u)) / r            # 3x3
    dr_dp = u.reshape(1, 3)                             # 1x3
    dres_dp = np.vstack([deps_du @ du_dp, dr_dp])       # 3x3

    # p = R^T (x - t); right-multiplicative pose increment (w, dt):
    # dp/dw = skew(p), dp/ddt = -I, dp/dx = R^T
    dp_dpose = np.hstack([skew(p), -np.eye(3)])
    J_chaser = dres_dp @ dp_dpose
    J_target = dres_dp @ R.T
    return residual, J_chaser, J_target


def usbl_noise_model(rng: float, angle_sigma_per_m: float = USBL_ANGLE_SIGMA_PER_M,
                     range_sigma: float = USBL_RANGE_SIGMA) -> NoiseModel:
    """Diagonal range-bearing noise: angular sigmas grow linearly with range."""
    if rng <= 0.0:
        raise ValueError("range must be positive")
    s_ang = angle_sigma_per_m * rng
    return NoiseModel.from_sigmas([s_ang, s_ang, range_sigma])


# ---------------------------------------------------------------------------
# target motion model


def motion_model_predict(x_ti: np.ndarray, params: TargetMotionParams, dt: float) -> np.ndarray:
    """Constant-speed, constant-heading, constant-depth position prediction."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    step = params.speed * dt
    return np.asarray(x_ti, dtype=float) + np.array(
        [math.cos(params.heading) * step, math.sin(params.heading) * step, 0.0]
    )


def motion_model_residual(x_ti: np.ndarray, x_tj: np.ndarray,
                          params: TargetMotionParams, dt: float):
    """Residual of the constant-motion prediction and its exact Jacobians.

    Returns (residual[3], J_xi[3x3], J_xj[3x3], J_v[3x1], J_theta[3x1]).
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    c, s = math.cos(params.heading), math.sin(params.heading)
    residual = motion_model_predict(x_ti, params, dt) - np.asarray(x_tj, dtype=float)
    J_xi = np.eye(3)
    J_xj = -np.eye(3)
    J_v = np.array([[c * dt], [s * dt], [0.0]])
    J_theta = np.array([[-s * params.speed * dt], [c * params.speed * dt], [0.0]])
    return residual, J_xi, J_xj, J_v, J_theta


# ---------------------------------------------------------------------------
# depth and velocity priors


def depth_residual(chaser: ChaserState, z_d: float):
    """Depth residual (world z minus measurement) and its 1x6 pose Jacobian.

    The translation block of the Jacobian is the third row of the rotation
    matrix, which equals (-sin(pitch), cos(pitch) sin(roll),
    cos(pitch) cos(roll)) in the yaw/pitch/roll factorization.
    """
    residual = float(chaser.pose.translation[2] - z_d)
    J = np.zeros((1, 6))
    J[0, 3:] = chaser.pose.rotation[2, :]
    return residual, J


def velocity_residual(chaser: ChaserState, z_v: np.ndarray):
    """Velocity residual and its 3x9 Jacobian over (pose tangent, velocity)."""
    residual = chaser.velocity - np.asarray(z_v, dtype=float)
    J = np.hstack([np.zeros((3, 6)), np.eye(3)])
    return residual, J


# ---------------------------------------------------------------------------
# IMU preintegration


def imu_preintegrate(samples, bias: ImuBias, gravity: np.ndarray = GRAVITY,
                     accel_noise_density: float = IMU_ACCEL_NOISE_DENSITY,
                     gyro_noise_density: float = IMU_GYRO_NOISE_DENSITY,
                     window: tuple[float, float] | None = None) -> PreintegratedImu:
    """Midpoint-integrate an IMU sample bundle into a relative-motion delta.

    Samples are zero-order-held at the window edges and midpoint-averaged
    between consecutive samples. ``window`` fixes the exact integration
    interval (defaults to the sample span); passing it keeps the bundled
    duration consistent with the keyframe spacing. The 9x9 covariance over
    (rotation, position, velocity) is propagated from the white-noise
    densities. Gravity is removed in the world frame through the running
    delta rotation, so the caller compensates it again when comparing states.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("imu_preintegrate needs at least one sample")
    times = np.array([s.timestamp for s in samples])
    if np.any(np.diff(times) <= 0.0):
        raise ValueError("IMU sample timestamps must be strictly increasing")
    if window is None:
        t0, t1 = float(times[0]), float(times[-1])
        if len(samples) == 1:
            raise ValueError("a single sample needs an explicit window")
    else:
        t0, t1 = float(window[0]), float(window[1])
    if t1 <= t0:
        raise ValueError("integration window must have positive duration")

    # (dt, accel, gyro) segments: edge segments hold the nearest sample,
    # interior segments take the midpoint of the bracketing samples.
    segments = []
    cut = np.clip(times, t0, t1)
    if cut[0] > t0:
        segments.append((cut[0] - t0, samples[0].accel, samples[0].gyro))
    for k in range(len(samples) - 1):
        dt = cut[k + 1] - cut[k]
        if dt <= 0.0:
            continue
        a = 0.5 * (np.asarray(samples[k].accel) + np.asarray(samples[k + 1].accel))
        w = 0.5 * (np.asarray(samples[k].gyro) + np.asarray(samples[k + 1].gyro))
        segments.append((dt, a, w))
    if cut[-1] < t1:
        segments.append((t1 - cut[-1], samples[-1].accel, samples[-1].gyro))

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    cov = np.zeros((9, 9))
    var_a = accel_noise_density * accel_noise_density
    var_g = gyro_noise_density * gyro_noise_density

    for dt, a_raw, w_raw in segments:
        a = np.asarray(a_raw, dtype=float) - bias.accel_bias
        w = np.asarray(w_raw, dtype=float) - bias.gyro_bias
        inc = so3_exp(w * dt)

        # error-state transition over (rotation, position, velocity)
        A = np.eye(9)
        A[0:3, 0:3] = inc.T
        A[3:6, 0:3] = -0.5 * dR @ skew(a) * dt * dt
        A[3:6, 6:9] = np.eye(3) * dt
        A[6:9, 0:3] = -dR @ skew(a) * dt
        B = np.zeros((9, 6))
        B[0:3, 0:3] = _so3_right_jacobian(w * dt) * dt
        B[3:6, 3:6] = 0.5 * dR * dt * dt
        B[6:9, 3:6] = dR * dt
        Q = np.diag([var_g / dt] * 3 + [var_a / dt] * 3)
        cov = A @ cov @ A.T + B @ Q @ B.T

        dp = dp + dv * dt + 0.5 * (dR @ a) * dt * dt
        dv = dv + (dR @ a) * dt
        dR = dR @ inc

    cov = 0.5 * (cov + cov.T) + np.eye(9) * 1e-14
    return PreintegratedImu(dR, dv, dp, t1 - t0, cov, bias)


def _so3_right_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) - a * K + b * (K @ K)


def _so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    t2 = theta * theta
    c = 1.0 / t2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + c * (K @ K)


def imu_residual(x_ci: ChaserState, x_cj: ChaserState, bias_i: ImuBias, bias_j: ImuBias,
                 delta: PreintegratedImu, gravity: np.ndarray = GRAVITY):
    """15-vector preintegrated-odometry residual and its Jacobian blocks.

    Residual order is (rotation[3], position[3], velocity[3], bias[6]); the
    rotation block is the log of the rotation discrepancy, position and
    velocity are expressed in the frame of the first state with gravity
    removed, and the bias block is the random walk bias_j - bias_i.

    The preintegrated deltas are treated as constants at their linearization
    bias (re-preintegrate when the bias estimate moves), so the first nine
    residual rows have zero bias Jacobians.

    Returns (residual[15], jacobians) with jacobians a dict keyed by
    'pose_i', 'vel_i', 'pose_j', 'vel_j', 'bias_i', 'bias_j'.
    """
    if delta.duration <= 0.0:
        raise ValueError("preintegrated duration must be positive")
    T = delta.duration
    g = np.asarray(gravity, dtype=float)
    Ri, ti, vi = x_ci.pose.rotation, x_ci.pose.translation, x_ci.velocity
    Rj, tj, vj = x_cj.pose.rotation, x_cj.pose.translation, x_cj.velocity

    E_R = delta.delta_rotation.T @ Ri.T @ Rj
    eps_R = so3_log(E_R)
    dp_world = tj - ti - vi * T - 0.5 * g * T * T
    dv_world = vj - vi - g * T
    eps_t = Ri.T @ dp_world - delta.delta_position
    eps_v = Ri.T @ dv_world - delta.delta_velocity
    eps_b = bias_j.as_vector() - bias_i.as_vector()
    residual = np.concatenate([eps_R, eps_t, eps_v, eps_b])

    Jr_inv = _so3_right_jacobian_inv(eps_R)
    RjTRi = Rj.T @ Ri

    J_pose_i = np.zeros((15, 6))
    J_pose_i[0:3, 0:3] = -Jr_inv @ RjTRi
    J_pose_i[3:6, 0:3] = skew(Ri.T @ dp_world)
    J_pose_i[3:6, 3:6] = -np.eye(3)
    J_pose_i[6:9, 0:3] = skew(Ri.T @ dv_world)

    J_vel_i = np.zeros((15, 3))
    J_vel_i[3:6, :] = -T * Ri.T
    J_vel_i[6:9, :] = -Ri.T

    J_pose_j = np.zeros((15, 6))
    J_pose_j[0:3, 0:3] = Jr_inv
    J_pose_j[3:6, 3:6] = Ri.T @ Rj

    J_vel_j = np.zeros((15, 3))
    J_vel_j[6:9, :] = Ri.T

    J_bias_i = np.zeros((15, 6))
    J_bias_i[9:15, :] = -np.eye(6)
    J_bias_j = np.zeros((15, 6))
    J_bias_j[9:15, :] = np.eye(6)

    return residual, {
        "pose_i": J_pose_i, "vel_i": J_vel_i,
        "pose_j": J_pose_j, "vel_j": J_vel_j,
        "bias_i": J_bias_i, "bias_j": J_bias_j,
    }


def imu_noise_model(delta: PreintegratedImu,
                    accel_bias_rw: float = IMU_ACCEL_BIAS_RW,
                    gyro_bias_rw: float = IMU_GYRO_BIAS_RW) -> NoiseModel:
    """15x15 noise of the preintegrated factor: propagated covariance plus
    bias random walk scaled by the bundle duration."""
    cov = np.zeros((15, 15))
    cov[:9, :9] = delta.covariance
    rw = np.array([accel_bias_rw] * 3 + [gyro_bias_rw] * 3)
    cov[9:, 9:] = np.diag(rw * rw * delta.duration)
    cov += np.eye(15) * 1e-16
    return NoiseModel(cov)
