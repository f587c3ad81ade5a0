"""Shared value types, rotation math and seeded random streams.

Quaternions are Hamilton, stored as ``(w, x, y, z)``, and map body-frame
vectors into the world frame (``v_world = R(q) @ v_body``). Every function
here is pure and works in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_TOL = 1e-9
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class ContractError(ValueError):
    """An input violates a documented precondition."""


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 stream; the same seed always yields the same draws."""
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# SO(3) helpers
# ---------------------------------------------------------------------------


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def vee(m):
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


def so3_exp(phi):
    """Rotation matrix of a rotation vector (Rodrigues)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.sqrt(phi @ phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    s, c = np.sin(theta), np.cos(theta)
    return np.eye(3) + (s / theta) * K + ((1.0 - c) / theta**2) * K @ K


def so3_log(R):
    """Rotation vector of a rotation matrix, angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-6:
        # first-order series; error O(theta^3)
        return 0.5 * vee(R - R.T) * (1.0 + theta**2 / 6.0)
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; use the symmetric part
        q = rot_to_quat(R)
        return quat_to_rotvec(q)
    return vee(R - R.T) * (0.5 * theta / np.sin(theta))


def right_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.sqrt(phi @ phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    t2 = theta * theta
    return np.eye(3) - ((1.0 - np.cos(theta)) / t2) * K + ((theta - np.sin(theta)) / (t2 * theta)) * K @ K


def right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.sqrt(phi @ phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    t2 = theta * theta
    coef = 1.0 / t2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coef * K @ K


def geodesic_angle(Ra, Rb) -> float:
    """Angle of the relative rotation Ra^T Rb."""
    M = np.asarray(Ra).T @ np.asarray(Rb)
    # atan2 of sine and cosine parts stays accurate near 0 and pi, unlike arccos
    s = np.linalg.norm(vee(M))
    c = (np.trace(M) - 1.0) * 0.5
    return float(np.arctan2(s, c))


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------


def check_unit(q, tol: float = QUAT_TOL):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > tol):
        raise ContractError(f"quaternion is not unit norm (|q| = {n})")
    return q


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    """Hamilton product a * b; broadcasts over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_rot(q):
    """Rotation matrix (or stack of them) of unit quaternion(s)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rot_to_quat(R):
    """Unit quaternion with non-negative w for a rotation matrix (Shepperd)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


def rotvec_to_quat(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    if theta < 1e-12:
        return quat_normalize(np.concatenate([[1.0], 0.5 * phi]))
    axis = phi / theta
    return np.concatenate([[np.cos(0.5 * theta)], np.sin(0.5 * theta) * axis])


def quat_to_rotvec(q):
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    n = np.linalg.norm(q[1:])
    if n < 1e-12:
        return 2.0 * q[1:]
    return 2.0 * np.arctan2(n, q[0]) * q[1:] / n


def quat_rotate(q, v):
    """Rotate ``v`` by unit quaternion ``q``: returns R(q) @ v."""
    q = check_unit(q)
    v = np.asarray(v, dtype=float)
    u = q[1:]
    t = 2.0 * np.cross(u, v)
    return v + q[0] * t + np.cross(u, t)


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


def _vec3(x, name):
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ContractError(f"{name} must be a finite 3-vector, got {x!r}")
    return a


@dataclass(frozen=True)
class ImuSample:
    t: float
    f: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.t):
            raise ContractError("sample timestamp must be finite")
        object.__setattr__(self, "f", _vec3(self.f, "f"))
        object.__setattr__(self, "w", _vec3(self.w, "w"))


@dataclass(frozen=True)
class ImuStream:
    """A contiguous IMU recording stored column-wise."""

    t: np.ndarray
    f: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        f = np.asarray(self.f, dtype=float).reshape(-1, 3)
        w = np.asarray(self.w, dtype=float).reshape(-1, 3)
        if not (len(t) == len(f) == len(w)):
            raise ContractError("t, f and w must have the same length")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ContractError("IMU timestamps must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(f)) and np.all(np.isfinite(w))):
            raise ContractError("IMU stream contains non-finite values")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "w", w)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return ImuStream(self.t[k], self.f[k], self.w[k])
        return ImuSample(float(self.t[k]), self.f[k], self.w[k])

    @property
    def dt(self) -> float:
        return float(np.median(np.diff(self.t)))

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        return cls(
            np.array([s.t for s in samples]),
            np.array([s.f for s in samples]),
            np.array([s.w for s in samples]),
        )


@dataclass(frozen=True)
class ImuWindow:
    """``T`` consecutive IMU samples fed to the displacement network."""

    t: np.ndarray
    f: np.ndarray
    w: np.ndarray
    dt_in: float
    T: int = 1000

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        f = np.asarray(self.f, dtype=float).reshape(-1, 3)
        w = np.asarray(self.w, dtype=float).reshape(-1, 3)
        if len(t) != self.T or len(f) != self.T or len(w) != self.T:
            raise ContractError(f"window must hold exactly T={self.T} samples, got {len(t)}")
        gaps = np.diff(t)
        if np.any(gaps <= 0):
            raise ContractError("window timestamps must be strictly increasing")
        if np.any(np.abs(gaps - self.dt_in) > 0.1 * self.dt_in):
            raise ContractError("window sample spacing deviates from dt_in by more than 10%")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "w", w)

    @property
    def start(self) -> float:
        return float(self.t[0])

    @property
    def end(self) -> float:
        return float(self.t[0] + self.T * self.dt_in)

    @classmethod
    def from_stream(cls, stream: ImuStream, start_index: int, T: int = 1000, dt_in: float | None = None):
        sl = slice(start_index, start_index + T)
        dt_in = stream.dt if dt_in is None else dt_in
        return cls(stream.t[sl], stream.f[sl], stream.w[sl], dt_in=dt_in, T=T)


@dataclass(frozen=True)
class DisplacementPrediction:
    d: np.ndarray
    log_var: np.ndarray
    window_start: float
    window_end: float

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)


@dataclass(frozen=True)
class VelocityProfile:
    v: np.ndarray  # (T/2, 3)
    dt_out: float = 0.002

    def displacement(self) -> np.ndarray:
        return self.v.sum(axis=0) * self.dt_out


@dataclass(frozen=True)
class Pose:
    p: np.ndarray
    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())

    def __post_init__(self):
        object.__setattr__(self, "p", _vec3(self.p, "p"))
        q = np.asarray(self.q, dtype=float).reshape(-1)
        if q.shape != (4,):
            raise ContractError(f"q must be a 4-vector (w, x, y, z), got shape {np.shape(self.q)}")
        object.__setattr__(self, "q", check_unit(q))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.q)


@dataclass(frozen=True)
class NavState:
    t: float
    pose: Pose
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "v", _vec3(self.v, "v"))
        object.__setattr__(self, "b_a", _vec3(self.b_a, "b_a"))
        object.__setattr__(self, "b_g", _vec3(self.b_g, "b_g"))

    @property
    def p(self):
        return self.pose.p

    @property
    def R(self):
        return self.pose.R

    def retract(self, delta) -> "NavState":
        """Apply a 15-d tangent increment ordered (p, theta, v, b_a, b_g).

        Orientation is perturbed on the right: R <- R Exp(theta).
        """
        delta = np.asarray(delta, dtype=float)
        q = quat_normalize(quat_mul(self.pose.q, rotvec_to_quat(delta[3:6])))
        return NavState(
            self.t,
            Pose(self.pose.p + delta[0:3], q),
            self.v + delta[6:9],
            self.b_a + delta[9:12],
            self.b_g + delta[12:15],
        )


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed positions with optional orientations (w, x, y, z)."""

    t: np.ndarray
    p: np.ndarray
    q: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        if len(t) != len(p):
            raise ContractError("t and p lengths differ")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ContractError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "p", p)
        if self.q is not None:
            q = np.asarray(self.q, dtype=float).reshape(-1, 4)
            if len(q) != len(t):
                raise ContractError("q length differs from t")
            object.__setattr__(self, "q", q)

    def __len__(self):
        return len(self.t)

    def interp_position(self, times):
        """Linear interpolation of position; raises outside the covered span."""
        times = np.asarray(times, dtype=float)
        if np.any(times < self.t[0] - 1e-12) or np.any(times > self.t[-1] + 1e-12):
            raise ContractError("requested time outside trajectory span")
        return np.stack([np.interp(times, self.t, self.p[:, k]) for k in range(3)], axis=-1)

    def covers(self, a: float, b: float) -> bool:
        return len(self.t) > 0 and self.t[0] - 1e-12 <= a and b <= self.t[-1] + 1e-12
