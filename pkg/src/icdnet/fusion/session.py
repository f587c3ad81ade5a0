"""Run the sliding-window estimator over a recorded or simulated dataset."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..core import ContractError, ImuStream, NavState, Pose, Trajectory, quat_normalize, quat_to_rot, rot_to_quat
from .preintegration import NoiseParams, preintegrate
from .problem import FactorGraphProblem, PoseObsFactor, PreintFactor, PriorFactor, slide_window
from .residuals import SmoothnessFactor, nn_factor_from_prediction, sqrt_info_diag
from .solver import SolverConfig, solve

log = logging.getLogger(__name__)

# acceleration information of one g standard deviation per axis
ACCEL_INFO_1G = (1.0 / 9.81**2,) * 3


@dataclass(frozen=True)
class FusionConfig:
    keyframe_interval: float = 0.1
    window_size: int = 10
    gravity: tuple = (0.0, 0.0, -9.81)
    noise: NoiseParams = field(default_factory=NoiseParams)
    obs_sigma_pos: float = 0.01
    obs_sigma_rot: float = 0.005
    obs_time_tol: float = 5e-4
    prior_sigmas: tuple = (0.02, 0.01, 0.05, 0.02, 1e-3)   # p, theta, v, b_a, b_g
    init_sigmas: tuple = (0.01, 0.005, 1.0, 0.1, 0.01)
    use_nn: bool = True
    smoothness: bool = True
    omega_accel: tuple = ACCEL_INFO_1G
    nn_anchor: str = "mid"          # keyframe nearest the window start, middle or end
    nn_huber: float | None = None
    nn_rotation: tuple | None = None
    align_with_gt: bool = False
    align_duration: float = 2.0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.nn_anchor not in ("start", "mid", "end"):
            raise ContractError("nn_anchor must be start, mid or end")
        if self.keyframe_interval <= 0 or self.window_size < 2:
            raise ContractError("invalid keyframe interval or window size")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["noise"] = dict(self.noise.__dict__)
        d["solver"] = self.solver.to_dict()
        for k in ("gravity", "prior_sigmas", "init_sigmas", "omega_accel"):
            d[k] = [float(x) for x in d[k]]
        if d["nn_rotation"] is not None:
            d["nn_rotation"] = [list(map(float, r)) for r in d["nn_rotation"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown fusion config keys: {sorted(unknown)}")
        if "noise" in d:
            d["noise"] = NoiseParams(**d["noise"])
        if "solver" in d:
            d["solver"] = SolverConfig(**d["solver"])
        for k in ("gravity", "prior_sigmas", "init_sigmas", "omega_accel"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        if d.get("nn_rotation") is not None:
            d["nn_rotation"] = tuple(tuple(float(x) for x in r) for r in d["nn_rotation"])
        return cls(**d)


def _sqrt_state_info(sigmas) -> np.ndarray:
    p, th, v, ba, bg = sigmas
    return sqrt_info_diag(np.r_[np.full(3, p), np.full(3, th), np.full(3, v), np.full(3, ba), np.full(3, bg)])


@dataclass
class FusionResult:
    trajectory: Trajectory
    keyframe_states: list
    solver_rows: list
    n_nn_factors: int
    n_nn_dropped: int
    n_nonconverged: int
    alignment: object = None


def propagate(state: NavState, pre, gravity) -> NavState:
    g = np.asarray(gravity)
    R = state.R
    dt = pre.duration
    p = state.p + state.v * dt + 0.5 * g * dt * dt + R @ pre.delta_p
    v = state.v + g * dt + R @ pre.delta_v
    q = quat_normalize(rot_to_quat(R @ pre.delta_R))
    return NavState(state.t + dt, Pose(p, q), v, state.b_a, state.b_g)


def _nearest(times, t):
    k = int(np.searchsorted(times, t))
    cands = [c for c in (k - 1, k) if 0 <= c < len(times)]
    return min(cands, key=lambda c: abs(times[c] - t)) if cands else None


def run_fusion(imu: ImuStream, obs: Trajectory, cfg: FusionConfig | None = None, predictions=None,
               gt: Trajectory | None = None) -> FusionResult:
    """Estimate keyframe states online; the reported trajectory is the newest
    state's estimate right after each window solve.

    ``predictions`` is a sequence of DisplacementPrediction; they enter as NN
    velocity factors once their window has ended, attached to the keyframe
    selected by ``cfg.nn_anchor``. When ``cfg.align_with_gt`` is set, NN
    factors wait until the frame alignment from the first
    ``cfg.align_duration`` seconds is available.
    """
    from ..alignment import procrustes_align

    cfg = cfg or FusionConfig()
    if len(obs) == 0:
        raise ContractError("fusion needs at least one pose observation to initialise")
    g = np.asarray(cfg.gravity)
    dt_imu = imu.dt
    step = max(1, int(round(cfg.keyframe_interval / dt_imu)))

    # first keyframe: first IMU sample that coincides with an observation
    i0 = None
    for k, t in enumerate(imu.t):
        j = _nearest(obs.t, t)
        if j is not None and abs(obs.t[j] - t) <= cfg.obs_time_tol:
            i0 = k
            break
    if i0 is None:
        raise ContractError("no observation coincides with an IMU sample")
    kf_idx = np.arange(i0, len(imu), step)
    kf_t = imu.t[kf_idx]
    use_nn = cfg.use_nn and predictions is not None
    preds = sorted(predictions or [], key=lambda p: p.window_end)
    nn_rot = np.asarray(cfg.nn_rotation) if cfg.nn_rotation is not None else None
    align_pairs, alignment = [], None
    if use_nn and cfg.align_with_gt:
        if gt is None or gt.q is None:
            raise ContractError("alignment requires ground-truth orientations")
        gt_R = quat_to_rot(gt.q)

    problem = FactorGraphProblem(gravity=g, max_size=cfg.window_size,
                                 prior_sqrt_info=_sqrt_state_info(cfg.prior_sigmas),
                                 nn_huber=cfg.nn_huber)
    obs_sqrt = sqrt_info_diag(np.r_[np.full(3, cfg.obs_sigma_pos), np.full(3, cfg.obs_sigma_rot)])
    j0 = _nearest(obs.t, kf_t[0])
    q0 = obs.q[j0] if obs.q is not None else np.array([1.0, 0, 0, 0])
    s0 = NavState(float(kf_t[0]), Pose(obs.p[j0], quat_normalize(q0)))
    problem.add_state(0, s0)
    problem.prior = PriorFactor(0, s0, _sqrt_state_info(cfg.init_sigmas))
    problem.pose_obs.append(PoseObsFactor(0, Pose(obs.p[j0], quat_normalize(q0)), obs_sqrt))

    out_t, out_p, out_q, rows = [], [], [], []
    n_nn = n_drop = n_bad = 0
    next_pred = 0

    def record(key, res_states):
        s = res_states[key]
        out_t.append(s.t)
        out_p.append(s.p)
        out_q.append(s.pose.q)

    res = solve(problem, cfg.solver)
    problem.states = res.states
    rows.extend({**r, "keyframe": 0} for r in res.report)
    record(0, problem.states)

    for key in range(1, len(kf_idx)):
        prev = problem.states[key - 1]
        a, b = kf_idx[key - 1], kf_idx[key]
        pre = preintegrate(imu[a:b + 1], prev.b_a, prev.b_g, g, cfg.noise)
        new = propagate(prev, pre, g)
        new = NavState(float(kf_t[key]), new.pose, new.v, new.b_a, new.b_g)
        slide_window(problem, key, new)
        problem.preint.append(PreintFactor(key - 1, key, pre))
        j = _nearest(obs.t, kf_t[key])
        if j is not None and abs(obs.t[j] - kf_t[key]) <= cfg.obs_time_tol:
            qo = obs.q[j] if obs.q is not None else new.pose.q
            problem.pose_obs.append(PoseObsFactor(key, Pose(obs.p[j], quat_normalize(qo)), obs_sqrt))
        if use_nn and cfg.smoothness:
            problem.smooth.append(SmoothnessFactor(key - 1, key, float(kf_t[key] - kf_t[key - 1]), np.diag(cfg.omega_accel)))

        ready = alignment is not None or not cfg.align_with_gt
        while use_nn and next_pred < len(preds) and preds[next_pred].window_end <= kf_t[key] + cfg.obs_time_tol:
            pr = preds[next_pred]
            next_pred += 1
            if not ready:
                n_drop += 1
                continue
            t_anchor = {"start": pr.window_start, "mid": 0.5 * (pr.window_start + pr.window_end),
                        "end": pr.window_end}[cfg.nn_anchor]
            anchor = _nearest(kf_t[:key + 1], t_anchor)
            if anchor is None or anchor not in problem.states:
                n_drop += 1
                continue
            rot = alignment.R if alignment is not None else nn_rot
            problem.nn.append(nn_factor_from_prediction(pr, pr.window_end - pr.window_start, anchor, rot))
            n_nn += 1

        res = solve(problem, cfg.solver)
        if not res.converged:
            n_bad += 1
            log.warning("keyframe %d: solver stopped without convergence (%s)", key, res.reason)
        problem.states = res.states
        rows.extend({**r, "keyframe": key} for r in res.report)
        record(key, problem.states)

        if use_nn and cfg.align_with_gt and alignment is None:
            s = problem.states[key]
            k_gt = _nearest(gt.t, s.t)
            align_pairs.append((gt_R[k_gt].T, s.R))
            if s.t - kf_t[0] >= cfg.align_duration and len(align_pairs) >= 3:
                alignment = procrustes_align(align_pairs)
                log.info("frame alignment from %d pairs, residual %.4f rad", len(align_pairs),
                         alignment.residual_angle)

    traj = Trajectory(np.array(out_t), np.array(out_p), np.array(out_q))
    return FusionResult(traj, [problem.states[k] for k in sorted(problem.states)], rows, n_nn, n_drop, n_bad,
                        alignment)


def with_overrides(cfg: FusionConfig, **kw) -> FusionConfig:
    return replace(cfg, **kw)
