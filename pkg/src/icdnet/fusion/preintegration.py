"""IMU preintegration between keyframes (midpoint rule, first-order covariance)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..core import ContractError, ImuStream, rot_to_quat, right_jacobian, skew, so3_exp

GAP_FACTOR = 5.0


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time noise densities (per sqrt(Hz)) and bias random-walk rates."""

    accel_noise_density: float = 2e-3
    gyro_noise_density: float = 2e-4
    accel_random_walk: float = 1e-4
    gyro_random_walk: float = 1e-5


@dataclass(frozen=True)
class PreintegratedImu:
    delta_p: np.ndarray
    delta_v: np.ndarray
    delta_R: np.ndarray
    covariance: np.ndarray      # 9x9, ordered (p, v, theta)
    duration: float
    bias_a: np.ndarray          # linearisation point
    bias_g: np.ndarray
    J_p_ba: np.ndarray
    J_p_bg: np.ndarray
    J_v_ba: np.ndarray
    J_v_bg: np.ndarray
    J_R_bg: np.ndarray
    noise: NoiseParams
    t_start: float = 0.0

    @property
    def delta_q(self) -> np.ndarray:
        return rot_to_quat(self.delta_R)

    @property
    def t_end(self) -> float:
        return self.t_start + self.duration


def preintegrate(imu: ImuStream, bias_a=None, bias_g=None, gravity=None,
                 noise: NoiseParams | None = None) -> PreintegratedImu:
    """Integrate bias-corrected measurements in the body frame of the first sample.

    Each interval uses the average of its two end-point gyro readings for the
    rotation step and the average of the two rotated accelerometer readings for
    the translational step. Gravity does not enter the deltas; it is kept for
    the residual.
    """
    del gravity  # deltas are gravity-free; the residual applies it
    noise = noise or NoiseParams()
    ba = np.zeros(3) if bias_a is None else np.asarray(bias_a, dtype=float)
    bg = np.zeros(3) if bias_g is None else np.asarray(bias_g, dtype=float)
    t, f, w = imu.t, imu.f, imu.w
    if len(t) < 2:
        raise ContractError("preintegration needs at least two samples")
    dts = np.diff(t)
    nominal = float(np.median(dts))
    if np.any(dts > GAP_FACTOR * nominal):
        warnings.warn(f"IMU gap of {dts.max():.4f} s exceeds {GAP_FACTOR}x nominal spacing", RuntimeWarning)

    dp = np.zeros(3)
    dv = np.zeros(3)
    R = np.eye(3)
    P = np.zeros((9, 9))
    Jpa = np.zeros((3, 3))
    Jpg = np.zeros((3, 3))
    Jva = np.zeros((3, 3))
    Jvg = np.zeros((3, 3))
    JRg = np.zeros((3, 3))
    I3 = np.eye(3)
    qa2 = noise.accel_noise_density**2
    qg2 = noise.gyro_noise_density**2
    for k in range(len(dts)):
        dt = dts[k]
        w_mid = 0.5 * (w[k] + w[k + 1]) - bg
        dR = so3_exp(w_mid * dt)
        R_next = R @ dR
        f0 = f[k] - ba
        f1 = f[k + 1] - ba
        a_mid = 0.5 * (R @ f0 + R_next @ f1)
        acc_b = 0.5 * (f0 + f1)

        # first-order error propagation (p, v, theta) and bias Jacobians
        Ra = R @ skew(acc_b)
        Jr = right_jacobian(w_mid * dt)
        A = np.eye(9)
        A[0:3, 3:6] = I3 * dt
        A[0:3, 6:9] = -0.5 * Ra * dt * dt
        A[3:6, 6:9] = -Ra * dt
        A[6:9, 6:9] = dR.T
        Bq = np.zeros((9, 6))
        Bq[0:3, 0:3] = 0.5 * R * dt * dt
        Bq[3:6, 0:3] = R * dt
        Bq[6:9, 3:6] = Jr * dt
        Q = np.diag(np.r_[np.full(3, qa2 / dt), np.full(3, qg2 / dt)])
        P = A @ P @ A.T + Bq @ Q @ Bq.T

        # bias Jacobians differentiate the same midpoint update used for the deltas
        JRg_next = dR.T @ JRg - Jr * dt
        da_ba = -0.5 * (R + R_next)
        da_bg = -0.5 * (R @ skew(f0) @ JRg + R_next @ skew(f1) @ JRg_next)
        Jpa = Jpa + Jva * dt + 0.5 * da_ba * dt * dt
        Jpg = Jpg + Jvg * dt + 0.5 * da_bg * dt * dt
        Jva = Jva + da_ba * dt
        Jvg = Jvg + da_bg * dt
        JRg = JRg_next

        dp = dp + dv * dt + 0.5 * a_mid * dt * dt
        dv = dv + a_mid * dt
        R = R_next

    P = 0.5 * (P + P.T)
    return PreintegratedImu(dp, dv, R, P, float(t[-1] - t[0]), ba.copy(), bg.copy(),
                            Jpa, Jpg, Jva, Jvg, JRg, noise, float(t[0]))


def identity_preintegration(t0: float = 0.0, noise: NoiseParams | None = None) -> PreintegratedImu:
    z = np.zeros((3, 3))
    return PreintegratedImu(np.zeros(3), np.zeros(3), np.eye(3), np.zeros((9, 9)), 0.0, np.zeros(3), np.zeros(3),
                            z, z, z, z, z, noise or NoiseParams(), t0)
