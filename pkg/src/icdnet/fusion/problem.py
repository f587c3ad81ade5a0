"""Sliding-window factor graph over keyframe NavStates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import ContractError, NavState, Pose
from .preintegration import PreintegratedImu
from .residuals import (
    STATE_DIM,
    NnVelocityFactor,
    SmoothnessFactor,
    residual_bias_walk,
    residual_nn_velocity,
    residual_pose_obs,
    residual_preint,
    residual_prior,
    residual_smoothness,
    sqrt_information,
)


@dataclass
class PreintFactor:
    i: int
    j: int
    pre: PreintegratedImu
    sqrt_info: np.ndarray = None

    def __post_init__(self):
        if self.sqrt_info is None:
            self.sqrt_info = sqrt_information(self.pre.covariance)


@dataclass
class PoseObsFactor:
    keyframe: int
    pose: Pose
    sqrt_info: np.ndarray


@dataclass
class PriorFactor:
    keyframe: int
    mean: NavState
    sqrt_info: np.ndarray


def _huber_scale(r, delta):
    """IRLS weight sqrt for a Huber loss on the block norm."""
    n = np.linalg.norm(r)
    if delta is None or n <= delta:
        return 1.0
    return np.sqrt(delta / n)


@dataclass
class FactorGraphProblem:
    """Keyframe states keyed by integer id plus the factors linking them.

    Ids grow monotonically; the oldest state is the smallest id.
    """

    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    max_size: int = 10
    states: dict = field(default_factory=dict)
    preint: list = field(default_factory=list)
    pose_obs: list = field(default_factory=list)
    nn: list = field(default_factory=list)
    smooth: list = field(default_factory=list)
    prior: PriorFactor | None = None
    prior_sqrt_info: np.ndarray = field(default_factory=lambda: np.diag(np.r_[
        np.full(3, 1e2), np.full(3, 1e2), np.full(3, 10.0), np.full(3, 10.0), np.full(3, 1e3)]))
    nn_huber: float | None = None

    # -- structure ---------------------------------------------------------
    @property
    def ids(self) -> list:
        return sorted(self.states)

    def index(self) -> dict:
        return {k: n for n, k in enumerate(self.ids)}

    def factor_ids(self):
        for f in self.preint:
            yield "preint", (f.i, f.j)
        for f in self.pose_obs:
            yield "pose", (f.keyframe,)
        for f in self.nn:
            yield "nn", (f.keyframe,)
        for f in self.smooth:
            yield "smooth", (f.i, f.j)
        if self.prior is not None:
            yield "prior", (self.prior.keyframe,)

    def validate(self) -> None:
        if len(self.states) > self.max_size:
            raise ContractError(f"window holds {len(self.states)} states, max is {self.max_size}")
        for kind, refs in self.factor_ids():
            for r in refs:
                if r not in self.states:
                    raise ContractError(f"{kind} factor references keyframe {r} outside the window")

    def add_state(self, key: int, state: NavState) -> None:
        if self.states and key <= max(self.states):
            raise ContractError("keyframe ids must increase")
        self.states[key] = state

    def remove_oldest(self) -> int:
        old = min(self.states)
        del self.states[old]
        self.preint = [f for f in self.preint if old not in (f.i, f.j)]
        self.pose_obs = [f for f in self.pose_obs if f.keyframe != old]
        self.nn = [f for f in self.nn if f.keyframe != old]
        self.smooth = [f for f in self.smooth if old not in (f.i, f.j)]
        if self.prior is not None and self.prior.keyframe == old:
            self.prior = None
        return old

    # -- evaluation ---------------------------------------------------------
    def blocks(self, states: dict):
        """Yield (kind, residual, [(keyframe, jacobian), ...]) for every factor."""
        g = self.gravity
        for f in self.preint:
            r, Ji, Jj = residual_preint(states[f.i], states[f.j], f.pre, g, f.sqrt_info)
            yield "preint", r, [(f.i, Ji), (f.j, Jj)]
            r, Ji, Jj = residual_bias_walk(states[f.i], states[f.j], f.pre)
            yield "bias", r, [(f.i, Ji), (f.j, Jj)]
        for f in self.pose_obs:
            r, J = residual_pose_obs(states[f.keyframe], f.pose, f.sqrt_info)
            yield "pose", r, [(f.keyframe, J)]
        for f in self.nn:
            r, J = residual_nn_velocity(states[f.keyframe], f)
            w = _huber_scale(r, self.nn_huber)
            yield "nn", r * w, [(f.keyframe, J * w)]
        for f in self.smooth:
            r, Ji, Jj = residual_smoothness(states[f.i], states[f.j], f)
            yield "smooth", r, [(f.i, Ji), (f.j, Jj)]
        if self.prior is not None:
            r, J = residual_prior(states[self.prior.keyframe], self.prior.mean, self.prior.sqrt_info)
            yield "prior", r, [(self.prior.keyframe, J)]

    def cost(self, states: dict | None = None) -> float:
        states = self.states if states is None else states
        return float(sum(r @ r for _, r, _ in self.blocks(states)))

    def cost_by_kind(self, states: dict | None = None) -> dict:
        states = self.states if states is None else states
        out = {}
        for kind, r, _ in self.blocks(states):
            out[kind] = out.get(kind, 0.0) + float(r @ r)
        return out

    def linearize(self, states: dict):
        """Stacked residual vector and dense Jacobian (m x 15K)."""
        idx = {k: n for n, k in enumerate(sorted(states))}
        rs, rows = [], []
        for _, r, jacs in self.blocks(states):
            rs.append(r)
            rows.append(jacs)
        m = sum(len(r) for r in rs)
        J = np.zeros((m, STATE_DIM * len(idx)))
        off = 0
        for r, jacs in zip(rs, rows):
            for key, Jb in jacs:
                c = STATE_DIM * idx[key]
                J[off:off + len(r), c:c + STATE_DIM] += Jb
            off += len(r)
        return (np.concatenate(rs) if rs else np.zeros(0)), J


def retract_all(states: dict, delta: np.ndarray) -> dict:
    out = {}
    for n, k in enumerate(sorted(states)):
        out[k] = states[k].retract(delta[STATE_DIM * n:STATE_DIM * (n + 1)])
    return out


def slide_window(problem: FactorGraphProblem, key: int, state: NavState) -> FactorGraphProblem:
    """Append a keyframe and, if that overflows the window, drop the oldest one.

    The dropped state's factors go with it; the new oldest state receives a
    Gaussian prior at its current estimate with ``problem.prior_sqrt_info``.
    The problem is modified in place and returned.
    """
    problem.add_state(key, state)
    while len(problem.states) > problem.max_size:
        problem.remove_oldest()
        oldest = min(problem.states)
        problem.prior = PriorFactor(oldest, problem.states[oldest], problem.prior_sqrt_info)
    return problem
