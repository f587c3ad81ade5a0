"""Rotation alignment between the network frame and the estimator frame, and
the anchoring chain that turns displacement predictions into positions."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import ContractError, geodesic_angle, quat_to_rot

BOOTSTRAP, PURE_NN = "bootstrap", "pure-nn"


@dataclass(frozen=True)
class AlignmentEstimate:
    R_w_to_slam: np.ndarray
    sample_count: int
    residual_angle: float
    degenerate: bool = False

    @property
    def R(self) -> np.ndarray:
        return self.R_w_to_slam

    def apply(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.R_w_to_slam.T

    @classmethod
    def identity(cls) -> "AlignmentEstimate":
        return cls(np.eye(3), 0, 0.0)


def _as_rotation(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
        raise ContractError("pairs must hold proper 3x3 rotations")
    return R


def procrustes_align(pairs) -> AlignmentEstimate:
    """Rotation R maximising sum_k tr(R^T A_k B_k) for pairs (B_k, A_k).

    Each pair is (R_gt_to_imu, R_imu_to_slam); their product maps the
    ground-truth frame into the estimator frame, so R is the chordal mean of
    those products projected onto SO(3).
    """
    pairs = list(pairs)
    if len(pairs) < 3:
        raise ContractError("procrustes_align needs at least 3 rotation pairs")
    prods = [_as_rotation(a) @ _as_rotation(b) for b, a in pairs]
    M = np.sum(prods, axis=0)
    U, s, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    # rank < 2 leaves the rotation about the dominant axis undetermined
    degenerate = bool(s[1] <= 1e-9 * max(s[0], 1.0))
    resid = float(np.mean([geodesic_angle(R, P) for P in prods]))
    return AlignmentEstimate(R, len(pairs), resid, degenerate)


def pairs_from_trajectories(gt_q, est_q) -> list:
    """Orientation pairs (R_gt^T, R_est) from matching ground-truth and estimated quaternions."""
    Rg = quat_to_rot(np.asarray(gt_q))
    Re = quat_to_rot(np.asarray(est_q))
    return [(g.T, e) for g, e in zip(Rg, Re)]


class AnchorChain:
    """Ring buffer of the most recent ``lag`` network positions.

    The first ``lag`` calls anchor on an estimator position from one window
    earlier; afterwards each position is anchored on the chain's own entry
    from ``lag`` steps before.
    """

    def __init__(self, lag: int = 10):
        if lag < 1:
            raise ContractError("lag must be positive")
        self.lag = lag
        self.buffer: deque = deque(maxlen=lag)
        self.count = 0

    @property
    def mode(self) -> str:
        return BOOTSTRAP if self.count < self.lag else PURE_NN

    def __len__(self):
        return len(self.buffer)

    def _append(self, t, p):
        if self.buffer and t is not None and self.buffer[-1][0] is not None and t <= self.buffer[-1][0]:
            raise ContractError("anchor timestamps must increase")
        self.buffer.append((t, p))
        self.count += 1
        return p

    def bootstrap(self, p_slam_lag, dp_nn, R: AlignmentEstimate | None = None, t: float | None = None):
        if self.mode != BOOTSTRAP:
            raise ContractError("chain already holds a full history; use pure_nn")
        if p_slam_lag is None:
            raise ContractError("bootstrap anchoring needs an estimator position")
        R = R or AlignmentEstimate.identity()
        p = np.asarray(p_slam_lag, dtype=float) + R.R @ np.asarray(dp_nn, dtype=float)
        return self._append(t, p)

    def pure_nn(self, dp_nn, R: AlignmentEstimate | None = None, t: float | None = None):
        if self.mode != PURE_NN:
            raise ContractError(f"only {self.count} of {self.lag} samples so far; use bootstrap")
        R = R or AlignmentEstimate.identity()
        p = self.buffer[0][1] + R.R @ np.asarray(dp_nn, dtype=float)
        return self._append(t, p)

    def step(self, dp_nn, R: AlignmentEstimate | None = None, p_slam_lag=None, t: float | None = None):
        if self.mode == BOOTSTRAP:
            return self.bootstrap(p_slam_lag, dp_nn, R, t)
        return self.pure_nn(dp_nn, R, t)


def anchor_bootstrap(chain: AnchorChain, p_slam_lag, dp_nn, R: AlignmentEstimate | None = None, t=None):
    return chain.bootstrap(p_slam_lag, dp_nn, R, t)


def anchor_pure_nn(chain: AnchorChain, dp_nn, R: AlignmentEstimate | None = None, t=None):
    return chain.pure_nn(dp_nn, R, t)


def anchor_predictions(predictions, slam, R: AlignmentEstimate | None = None, lag: int = 10):
    """Absolute positions at each prediction's window end.

    ``slam`` supplies bootstrap anchors at each window start (a Trajectory);
    ``lag`` should equal window length times prediction rate.
    """
    chain = AnchorChain(lag)
    t_out, p_out = [], []
    for pr in sorted(predictions, key=lambda p: p.window_end):
        anchor = slam.interp_position(pr.window_start) if chain.mode == BOOTSTRAP else None
        t_out.append(pr.window_end)
        p_out.append(chain.step(pr.d, R, anchor, pr.window_end))
    return np.array(t_out), np.array(p_out)
