"""Whitened residual blocks and their analytic Jacobians.

Jacobians are taken w.r.t. the 15-d tangent increment of a NavState, ordered
(p, theta, v, b_a, b_g), with orientation perturbed on the right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import ContractError, DisplacementPrediction, NavState, Pose, right_jacobian, right_jacobian_inv, skew, so3_exp, so3_log
from .preintegration import PreintegratedImu

P, TH, V, BA, BG = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)
STATE_DIM = 15


def sqrt_information(cov, floor: float = 1e-15) -> np.ndarray:
    """Upper-triangular S with S^T S = inv(cov)."""
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    info = np.linalg.inv(cov + floor * np.eye(n))
    info = 0.5 * (info + info.T)
    return np.linalg.cholesky(info).T


def sqrt_info_diag(sigmas) -> np.ndarray:
    return np.diag(1.0 / np.asarray(sigmas, dtype=float))


# ---------------------------------------------------------------------------
# IMU preintegration
# ---------------------------------------------------------------------------


def residual_preint(si: NavState, sj: NavState, pre: PreintegratedImu, gravity, sqrt_info=None):
    """9-d (p, v, theta) preintegration residual, whitened by the preintegrated covariance.

    Returns (r, J_i, J_j) with J_* of shape (9, 15).
    """
    g = np.asarray(gravity, dtype=float)
    dt = pre.duration
    if abs((sj.t - si.t) - dt) > 1e-6 + 1e-6 * dt:
        raise ContractError("state timestamps do not bracket the preintegration interval")
    Ri, Rj = si.R, sj.R
    RiT = Ri.T
    dba = si.b_a - pre.bias_a
    dbg = si.b_g - pre.bias_g

    X = sj.p - si.p - si.v * dt - 0.5 * g * dt * dt
    Y = sj.v - si.v - g * dt
    phi_b = pre.J_R_bg @ dbg
    dR_corr = pre.delta_R @ so3_exp(phi_b)
    r_p = RiT @ X - (pre.delta_p + pre.J_p_ba @ dba + pre.J_p_bg @ dbg)
    r_v = RiT @ Y - (pre.delta_v + pre.J_v_ba @ dba + pre.J_v_bg @ dbg)
    E = dR_corr.T @ RiT @ Rj
    r_th = so3_log(E)
    r = np.concatenate([r_p, r_v, r_th])

    Ji = np.zeros((9, STATE_DIM))
    Jj = np.zeros((9, STATE_DIM))
    Jr_inv = right_jacobian_inv(r_th)
    Ji[0:3, P] = -RiT
    Ji[0:3, TH] = skew(RiT @ X)
    Ji[0:3, V] = -RiT * dt
    Ji[0:3, BA] = -pre.J_p_ba
    Ji[0:3, BG] = -pre.J_p_bg
    Jj[0:3, P] = RiT
    Ji[3:6, TH] = skew(RiT @ Y)
    Ji[3:6, V] = -RiT
    Ji[3:6, BA] = -pre.J_v_ba
    Ji[3:6, BG] = -pre.J_v_bg
    Jj[3:6, V] = RiT
    Ji[6:9, TH] = -Jr_inv @ Rj.T @ Ri
    Ji[6:9, BG] = -Jr_inv @ so3_exp(r_th).T @ right_jacobian(phi_b) @ pre.J_R_bg
    Jj[6:9, TH] = Jr_inv

    S = sqrt_information(pre.covariance) if sqrt_info is None else sqrt_info
    return S @ r, S @ Ji, S @ Jj


def residual_bias_walk(si: NavState, sj: NavState, pre: PreintegratedImu):
    """6-d random-walk residual b_j - b_i, whitened by the walk rate over the interval."""
    dt = max(pre.duration, 1e-9)
    s = np.r_[np.full(3, 1.0 / (pre.noise.accel_random_walk * np.sqrt(dt))),
              np.full(3, 1.0 / (pre.noise.gyro_random_walk * np.sqrt(dt)))]
    r = s * np.r_[sj.b_a - si.b_a, sj.b_g - si.b_g]
    Ji = np.zeros((6, STATE_DIM))
    Jj = np.zeros((6, STATE_DIM))
    Ji[0:3, BA] = -np.diag(s[:3])
    Ji[3:6, BG] = -np.diag(s[3:])
    Jj[0:3, BA] = np.diag(s[:3])
    Jj[3:6, BG] = np.diag(s[3:])
    return r, Ji, Jj


# ---------------------------------------------------------------------------
# pose observation, prior
# ---------------------------------------------------------------------------


def residual_pose_obs(s: NavState, obs: Pose, sqrt_info):
    """6-d whitened (position, orientation log-map) difference to an observed pose."""
    r_p = s.p - obs.p
    r_th = so3_log(obs.R.T @ s.R)
    J = np.zeros((6, STATE_DIM))
    J[0:3, P] = np.eye(3)
    J[3:6, TH] = right_jacobian_inv(r_th)
    S = np.asarray(sqrt_info)
    return S @ np.concatenate([r_p, r_th]), S @ J


def residual_prior(s: NavState, mean: NavState, sqrt_info):
    """15-d whitened deviation from a Gaussian prior on the full state."""
    r_th = so3_log(mean.R.T @ s.R)
    r = np.concatenate([s.p - mean.p, r_th, s.v - mean.v, s.b_a - mean.b_a, s.b_g - mean.b_g])
    J = np.eye(STATE_DIM)
    J[TH, TH] = right_jacobian_inv(r_th)
    S = np.asarray(sqrt_info)
    return S @ r, S @ J


# ---------------------------------------------------------------------------
# network-derived factors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NnVelocityFactor:
    keyframe: int
    v_nn: np.ndarray
    info: np.ndarray    # diagonal 3x3 information

    def __post_init__(self):
        info = np.asarray(self.info, dtype=float)
        if info.shape == (3,):
            info = np.diag(info)
        if info.shape != (3, 3) or np.any(np.diag(info) <= 0) or np.any(info - np.diag(np.diag(info))):
            raise ContractError("NN velocity information must be diagonal with positive entries")
        object.__setattr__(self, "info", info)
        object.__setattr__(self, "v_nn", np.asarray(self.v_nn, dtype=float))

    @property
    def sqrt_info(self) -> np.ndarray:
        return np.diag(np.sqrt(np.diag(self.info)))


@dataclass(frozen=True)
class SmoothnessFactor:
    i: int
    j: int
    dt: float
    info_accel: np.ndarray

    def __post_init__(self):
        info = np.asarray(self.info_accel, dtype=float)
        if info.shape == (3,):
            info = np.diag(info)
        if self.dt <= 0:
            raise ContractError("smoothness factor needs dt > 0")
        if np.any(np.diag(info) <= 0):
            raise ContractError("acceleration information must be positive")
        object.__setattr__(self, "info_accel", info)


def nn_factor_from_prediction(pred: DisplacementPrediction, dt_keyframe: float, keyframe: int = -1,
                              rotation=None) -> NnVelocityFactor:
    """Velocity = displacement / interval; information = diag(1 / variance).

    ``rotation`` optionally maps the predicted displacement into the estimator frame.
    """
    if not dt_keyframe > 0:
        raise ContractError("dt_keyframe must be positive")
    var = np.exp(np.asarray(pred.log_var, dtype=float))
    if np.any(var <= 0) or not np.all(np.isfinite(var)):
        raise ContractError("prediction variance must be positive and finite")
    d = np.asarray(pred.d, dtype=float)
    if rotation is not None:
        # information stays diagonal, so the per-axis variances are kept unrotated
        d = np.asarray(rotation) @ d
    return NnVelocityFactor(keyframe, d / dt_keyframe, np.diag(1.0 / var))


def residual_nn_velocity(s: NavState, factor: NnVelocityFactor):
    S = factor.sqrt_info
    J = np.zeros((3, STATE_DIM))
    J[:, V] = S
    return S @ (s.v - factor.v_nn), J


def residual_smoothness(si: NavState, sj: NavState, factor: SmoothnessFactor):
    if not sj.t > si.t:
        raise ContractError("smoothness factor needs t_j > t_i")
    S = np.diag(np.sqrt(np.diag(factor.info_accel)))
    r = S @ (sj.v - si.v) / factor.dt
    Ji = np.zeros((3, STATE_DIM))
    Jj = np.zeros((3, STATE_DIM))
    Ji[:, V] = -S / factor.dt
    Jj[:, V] = S / factor.dt
    return r, Ji, Jj
