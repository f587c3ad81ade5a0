"""Synthetic flights: ground truth, IMU measurements and camera-rate pose observations.

Attitude follows a multirotor-style thrust model: the body z axis points along
``a - g + c * v`` (``c`` is a linear drag coefficient, ``tilt_drag``) and the
heading follows a per-kind yaw profile. The drag term makes the vehicle lean
into its direction of travel, so horizontal velocity leaves a trace in the
body-frame specific force.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from .core import ContractError, ImuStream, Trajectory, quat_mul, quat_to_rot, rot_to_quat, rotvec_to_quat

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])
KINDS = ("hover", "constant-velocity", "circle", "aggressive-spline")

# YAML section -> field names; used for reading and writing nested scenario files
SECTIONS = {
    "trajectory": ("kind", "position", "velocity", "radius", "period", "phase", "yaw", "yaw_mode",
                   "waypoint_interval", "peak_accel", "yaw_amplitude", "vertical_amplitude", "tilt_drag"),
    "imu": ("imu_rate", "accel_noise_density", "gyro_noise_density", "accel_bias_instability",
            "gyro_bias_instability", "accel_bias", "gyro_bias", "accel_scale", "gyro_scale",
            "misalignment"),
    "observations": ("obs_rate", "obs_noise_pos", "obs_noise_rot", "blackouts", "blackout_mode",
                     "corrupted_noise_pos", "corrupted_noise_rot"),
}


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    duration: float = 20.0
    # trajectory
    kind: str = "hover"
    position: tuple = (0.0, 0.0, 1.0)
    velocity: tuple = (1.0, 0.0, 0.0)
    radius: float = 2.0
    period: float = 4.0
    phase: float = 0.0
    yaw: float = 0.0
    yaw_mode: str = "fixed"
    waypoint_interval: float = 1.5
    peak_accel: float = 2.5 * 9.81
    yaw_amplitude: float = 1.5
    vertical_amplitude: float = 0.5
    tilt_drag: float = 0.3
    # imu
    imu_rate: float = 1000.0
    accel_noise_density: float = 2e-3
    gyro_noise_density: float = 2e-4
    accel_bias_instability: float = 1e-4
    gyro_bias_instability: float = 1e-5
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    accel_scale: tuple = (0.0, 0.0, 0.0)     # fractional scale-factor errors per axis
    gyro_scale: tuple = (0.0, 0.0, 0.0)
    misalignment: tuple = (0.0, 0.0, 0.0)    # rotation vector, body to sensor axes
    # observations
    obs_rate: float = 30.0
    obs_noise_pos: float = 0.01
    obs_noise_rot: float = 0.005
    blackouts: tuple = ()
    blackout_mode: str = "absent"
    corrupted_noise_pos: float = 1.0
    corrupted_noise_rot: float = 0.2

    def __post_init__(self):
        for name in ("position", "velocity", "accel_bias", "gyro_bias", "accel_scale", "gyro_scale", "misalignment"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        bl = tuple(sorted((float(a), float(b)) for a, b in self.blackouts))
        object.__setattr__(self, "blackouts", bl)
        if self.kind not in KINDS:
            raise ContractError(f"unknown trajectory kind {self.kind!r}; expected one of {KINDS}")
        if self.yaw_mode not in ("fixed", "tangent"):
            raise ContractError("yaw_mode must be 'fixed' or 'tangent'")
        if self.blackout_mode not in ("absent", "corrupted"):
            raise ContractError("blackout_mode must be 'absent' or 'corrupted'")
        if self.duration <= 0:
            raise ContractError("duration must be positive")
        prev_end = -np.inf
        for a, b in bl:
            if not (0.0 <= a < b <= self.duration):
                raise ContractError(f"blackout ({a}, {b}) outside [0, {self.duration}]")
            if a < prev_end:
                raise ContractError("blackout intervals overlap")
            prev_end = b

    def to_dict(self) -> dict:
        flat = asdict(self)
        flat["blackouts"] = [list(b) for b in self.blackouts]
        for k in ("position", "velocity", "accel_bias", "gyro_bias", "accel_scale", "gyro_scale", "misalignment"):
            flat[k] = list(flat[k])
        out = {"seed": flat.pop("seed"), "duration": flat.pop("duration")}
        for sec, names in SECTIONS.items():
            out[sec] = {n: flat.pop(n) for n in names}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        flat = {}
        for k, v in d.items():
            if k in SECTIONS:
                if not isinstance(v, dict):
                    raise ContractError(f"section {k!r} must be a mapping")
                for kk, vv in v.items():
                    if kk not in SECTIONS[k]:
                        raise ContractError(f"unknown key {kk!r} in section {k!r}")
                    flat[kk] = vv
            elif k in cls.__dataclass_fields__:
                flat[k] = v
            else:
                raise ContractError(f"unknown scenario key {k!r}")
        return cls(**flat)


def _streams(seed: int):
    names = ("spline", "imu_noise", "bias_walk", "obs_noise")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


def _normalize_rows(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / n, n


def _unit_derivative(u, n, xdot):
    """Time derivative of u = x/|x| given u, |x| and dx/dt (row-wise)."""
    return (xdot - u * np.sum(u * xdot, axis=-1, keepdims=True)) / n


@dataclass
class TruthTrajectory:
    """Analytic flight profile with derivative accessors (all vectorised over time)."""

    cfg: ScenarioConfig
    _pos: object = field(repr=False, default=None)
    _yaw: object = field(repr=False, default=None)

    # translational kinematics: returns the k-th derivative of position
    def _deriv(self, t, k):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        c = self.cfg
        if c.kind == "hover":
            base = np.broadcast_to(np.asarray(c.position), (len(t), 3)).copy()
            return base if k == 0 else np.zeros((len(t), 3))
        if c.kind == "constant-velocity":
            v = np.asarray(c.velocity)
            if k == 0:
                return np.asarray(c.position) + t[:, None] * v
            if k == 1:
                return np.broadcast_to(v, (len(t), 3)).copy()
            return np.zeros((len(t), 3))
        if c.kind == "circle":
            om = 2.0 * np.pi / c.period
            th = om * t + c.phase
            out = np.zeros((len(t), 3))
            # d^k/dt^k [cos, sin] = om^k [cos(th + k pi/2), sin(th + k pi/2)]
            out[:, 0] = c.radius * om**k * np.cos(th + k * np.pi / 2)
            out[:, 1] = c.radius * om**k * np.sin(th + k * np.pi / 2)
            if k == 0:
                out += np.asarray(c.position)
            return out
        return self._pos(t, k) if k > 0 else self._pos(t)

    def position(self, t):
        return self._deriv(t, 0)

    def velocity(self, t):
        return self._deriv(t, 1)

    def acceleration(self, t):
        return self._deriv(t, 2)

    def jerk(self, t):
        return self._deriv(t, 3)

    def yaw(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        c = self.cfg
        if self._yaw is not None:
            return self._yaw(t)
        if c.yaw_mode == "tangent" and c.kind in ("circle", "constant-velocity"):
            v = self.velocity(t)
            return np.unwrap(np.arctan2(v[:, 1], v[:, 0]))
        return np.full(len(t), c.yaw)

    def yaw_rate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        c = self.cfg
        if self._yaw is not None:
            return self._yaw(t, 1)
        if c.yaw_mode == "tangent" and c.kind == "circle":
            return np.full(len(t), 2.0 * np.pi / c.period)
        return np.zeros(len(t))

    def _frame(self, t):
        """Rotation matrices (N,3,3) and their time derivatives."""
        c = self.cfg
        v, a, j = self.velocity(t), self.acceleration(t), self.jerk(t)
        n = a - GRAVITY + c.tilt_drag * v
        ndot = j + c.tilt_drag * a
        z, nn = _normalize_rows(n)
        zdot = _unit_derivative(z, nn, ndot)
        psi, psidot = self.yaw(t), self.yaw_rate(t)
        xc = np.stack([np.cos(psi), np.sin(psi), np.zeros_like(psi)], axis=-1)
        xcdot = psidot[:, None] * np.stack([-np.sin(psi), np.cos(psi), np.zeros_like(psi)], axis=-1)
        m = np.cross(z, xc)
        mdot = np.cross(zdot, xc) + np.cross(z, xcdot)
        y, mn = _normalize_rows(m)
        ydot = _unit_derivative(y, mn, mdot)
        x = np.cross(y, z)
        xdot = np.cross(ydot, z) + np.cross(y, zdot)
        R = np.stack([x, y, z], axis=-1)
        Rdot = np.stack([xdot, ydot, zdot], axis=-1)
        return R, Rdot

    def rotation(self, t):
        return self._frame(t)[0]

    def angular_velocity(self, t):
        """Body-frame angular rate: vee(R^T dR/dt)."""
        R, Rdot = self._frame(t)
        O = np.einsum("nji,njk->nik", R, Rdot)
        return 0.5 * np.stack([O[:, 2, 1] - O[:, 1, 2], O[:, 0, 2] - O[:, 2, 0], O[:, 1, 0] - O[:, 0, 1]], axis=-1)

    def quaternion(self, t):
        R = self.rotation(t)
        q = np.array([rot_to_quat(r) for r in R])
        # keep the sign continuous along the path
        for i in range(1, len(q)):
            if q[i] @ q[i - 1] < 0:
                q[i] = -q[i]
        return q

    def sample(self, times) -> Trajectory:
        times = np.asarray(times, dtype=float)
        return Trajectory(times, self.position(times), self.quaternion(times))


def generate_truth(cfg: ScenarioConfig) -> TruthTrajectory:
    """Build the ground-truth profile; only the spline kind consumes random draws."""
    truth = TruthTrajectory(cfg)
    if cfg.kind != "aggressive-spline":
        return truth
    rng = _streams(cfg.seed)["spline"]
    n_wp = max(6, int(np.ceil(cfg.duration / cfg.waypoint_interval)) + 3)
    tw = (np.arange(n_wp) - 1) * cfg.waypoint_interval
    offsets = rng.normal(size=(n_wp, 3))
    offsets[:, 2] *= 0.0
    yaw_wp = cfg.yaw + np.cumsum(rng.uniform(-cfg.yaw_amplitude, cfg.yaw_amplitude, size=n_wp))
    z_wp = cfg.vertical_amplitude * rng.uniform(-1.0, 1.0, size=n_wp)

    def build(scale):
        wp = np.asarray(cfg.position) + scale * offsets
        wp[:, 2] = cfg.position[2] + z_wp
        return make_interp_spline(tw, wp, k=5)

    # scale horizontal excursions so the peak acceleration hits the target
    grid = np.linspace(0.0, cfg.duration, int(cfg.duration * 200) + 1)
    unit = build(1.0)
    acc_h = np.linalg.norm(unit(grid, 2)[:, :2], axis=1).max()
    scale = cfg.peak_accel / acc_h if acc_h > 0 else 1.0
    truth._pos = build(scale)
    truth._yaw = make_interp_spline(tw, yaw_wp, k=5)
    return truth


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------


def imu_times(cfg: ScenarioConfig) -> np.ndarray:
    n = int(np.floor(cfg.duration * cfg.imu_rate + 1e-9)) + 1
    return np.arange(n) / cfg.imu_rate


def synthesize_imu(truth: TruthTrajectory, cfg: ScenarioConfig) -> ImuStream:
    """Specific force R^T (a - g) and body rate, plus biases and white noise.

    Optional sensor imperfections (zero by default) map the ideal values
    through ``diag(1 + scale) @ M`` where M is the misalignment rotation.
    Discrete white-noise standard deviation is ``density * sqrt(rate)``; bias
    instability is a random walk with standard deviation ``instability * sqrt(dt)``
    per step, added to the configured constant biases.
    """
    t = imu_times(cfg)
    R = truth.rotation(t)
    a = truth.acceleration(t)
    f = np.einsum("nji,nj->ni", R, a - GRAVITY)
    w = truth.angular_velocity(t)
    if any(cfg.accel_scale) or any(cfg.gyro_scale) or any(cfg.misalignment):
        M = quat_to_rot(rotvec_to_quat(np.asarray(cfg.misalignment)))
        f = (f @ M.T) * (1.0 + np.asarray(cfg.accel_scale))
        w = (w @ M.T) * (1.0 + np.asarray(cfg.gyro_scale))
    rs = _streams(cfg.seed)
    dt = 1.0 / cfg.imu_rate
    ba = np.asarray(cfg.accel_bias) + _random_walk(rs["bias_walk"], len(t), cfg.accel_bias_instability * np.sqrt(dt))
    bg = np.asarray(cfg.gyro_bias) + _random_walk(rs["bias_walk"], len(t), cfg.gyro_bias_instability * np.sqrt(dt))
    sa = cfg.accel_noise_density * np.sqrt(cfg.imu_rate)
    sg = cfg.gyro_noise_density * np.sqrt(cfg.imu_rate)
    f = f + ba + (sa * rs["imu_noise"].normal(size=f.shape) if sa > 0 else 0.0)
    w = w + bg + (sg * rs["imu_noise"].normal(size=w.shape) if sg > 0 else 0.0)
    return ImuStream(t, f, w)


def _random_walk(rng, n, step_std):
    if step_std <= 0:
        return np.zeros((n, 3))
    steps = step_std * rng.normal(size=(n, 3))
    steps[0] = 0.0
    return np.cumsum(steps, axis=0)


def observation_times(cfg: ScenarioConfig) -> np.ndarray:
    n = int(np.floor(cfg.duration * cfg.obs_rate + 1e-9)) + 1
    return np.arange(n) / cfg.obs_rate


def in_blackout(t, blackouts) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    mask = np.zeros(t.shape, dtype=bool)
    for a, b in blackouts:
        mask |= (t >= a) & (t <= b)
    return mask


def synthesize_observations(truth: TruthTrajectory, cfg: ScenarioConfig) -> Trajectory:
    """Noisy camera-rate poses. Blackout times are dropped ('absent') or get
    heavy noise the backend is not told about ('corrupted')."""
    t = observation_times(cfg)
    dark = in_blackout(t, cfg.blackouts)
    if cfg.blackout_mode == "absent":
        t = t[~dark]
        dark = dark[~dark]
    p = truth.position(t)
    q = truth.quaternion(t)
    rng = _streams(cfg.seed)["obs_noise"]
    sp = np.where(dark, cfg.corrupted_noise_pos, cfg.obs_noise_pos)[:, None]
    sr = np.where(dark, cfg.corrupted_noise_rot, cfg.obs_noise_rot)[:, None]
    dp = rng.normal(size=p.shape) * sp
    dr = rng.normal(size=p.shape) * sr
    p = p + dp
    q = np.array([quat_mul(qi, rotvec_to_quat(di)) for qi, di in zip(q, dr)]) if len(q) else q
    return Trajectory(t, p, q)


@dataclass
class SimulatedRun:
    cfg: ScenarioConfig
    truth: TruthTrajectory
    imu: ImuStream
    gt: Trajectory
    obs: Trajectory


def simulate(cfg: ScenarioConfig) -> SimulatedRun:
    truth = generate_truth(cfg)
    imu = synthesize_imu(truth, cfg)
    gt = truth.sample(imu.t)
    obs = synthesize_observations(truth, cfg)
    return SimulatedRun(cfg, truth, imu, gt, obs)


def random_training_scenarios(n: int, seed: int, kinds=("constant-velocity", "circle"), duration: float = 12.0,
                              speed_range=(0.3, 3.0), **overrides) -> list[ScenarioConfig]:
    """Randomised fixed-heading flights for building network training sets."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        kind = kinds[i % len(kinds)]
        common = dict(seed=int(rng.integers(2**31)), duration=duration, kind=kind,
                      position=(float(rng.uniform(-5, 5)), float(rng.uniform(-5, 5)), 1.5))
        if kind == "constant-velocity":
            speed = rng.uniform(*speed_range)
            heading = rng.uniform(-np.pi, np.pi)
            vz = rng.uniform(-0.2, 0.2)
            common["velocity"] = (float(speed * np.cos(heading)), float(speed * np.sin(heading)), float(vz))
        elif kind == "circle":
            speed = rng.uniform(*speed_range)
            radius = rng.uniform(1.0, 4.0)
            period = 2.0 * np.pi * radius / speed * (1.0 if rng.random() < 0.5 else -1.0)
            common.update(radius=float(radius), period=float(period), phase=float(rng.uniform(0, 2 * np.pi)))
        common.update(overrides)
        out.append(ScenarioConfig(**common))
    return out
