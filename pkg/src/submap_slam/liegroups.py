"""SO(3), SE(3) and Sim(3) group operations with exp/log maps.

Conventions used throughout the package:

* Quaternions are stored as (w, x, y, z), Hamilton convention, unit norm.
* The Sim(3) tangent is a 7-vector ordered (translation, rotation, log-scale);
  the SE(3) tangent is its first 6 entries.
* Perturbations are right-multiplied: T_new = T * exp(delta).
* A Sim(3) element acts on points as x -> s * R @ x + t.

SE(3) and SO(3) exp/log are routed through the Sim(3) code path with the
scale (and translation) coordinates pinned, so the restrictions agree
bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import LogDomainError

# Below this angle / log-scale the closed-form exp/log coefficients are
# replaced by Taylor expansions (sinc-like terms become 0/0).
SMALL_ANGLE = 1e-5
SMALL_SIGMA = 1e-5

_LOG_PI_MARGIN = 1e-9


def _skew(v):
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two (w, x, y, z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z), Shepperd's method."""
    t = np.trace(m)
    if t > 0:
        r = math.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array(
            [0.5 * r, (m[2, 1] - m[1, 2]) * s, (m[0, 2] - m[2, 0]) * s, (m[1, 0] - m[0, 1]) * s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = math.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
        s = 0.5 / r
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) * s
        q[1 + i] = 0.5 * r
        q[1 + j] = (m[j, i] + m[i, j]) * s
        q[1 + k] = (m[k, i] + m[i, k]) * s
    return q / np.linalg.norm(q)


def quat_rotate(q: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Rotate points (3,) or (N, 3) by a unit quaternion."""
    w = q[0]
    v = q[1:]
    uv = 2.0 * np.cross(v, pts)
    return pts + w * uv + np.cross(v, uv)


def so3_exp_quat(omega: np.ndarray) -> np.ndarray:
    """Rotation-vector exponential, returned as a quaternion."""
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    if theta < SMALL_ANGLE:
        # sin(t/2)/t = 1/2 - t^2/48 + t^4/3840
        imag = 0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0
        real = 1.0 - theta2 / 8.0 + theta2 * theta2 / 384.0
    else:
        imag = math.sin(0.5 * theta) / theta
        real = math.cos(0.5 * theta)
    q = np.array([real, imag * omega[0], imag * omega[1], imag * omega[2]])
    return q / np.linalg.norm(q)


def so3_log_quat(q: np.ndarray) -> np.ndarray:
    """Quaternion -> rotation vector with angle in [0, pi).

    Raises LogDomainError within ``1e-9`` of angle pi, where the axis is
    not unique.
    """
    if q[0] < 0:
        q = -q
    w = q[0]
    n = float(np.linalg.norm(q[1:]))
    if n < SMALL_ANGLE:
        # theta/sin(theta/2) ~ 2/w corrected to third order
        return q[1:] * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    theta = 2.0 * math.atan2(n, w)
    if theta >= math.pi - _LOG_PI_MARGIN:
        raise LogDomainError(f"rotation angle {theta:.12f} too close to pi")
    return q[1:] * (theta / n)


@dataclass(frozen=True, eq=False)
class Rotation3:
    """Unit quaternion rotation; q and -q represent the same element."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        q = q / np.linalg.norm(q)
        q.flags.writeable = False
        object.__setattr__(self, "q", q)

    @staticmethod
    def identity() -> "Rotation3":
        return Rotation3(np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Rotation3":
        return Rotation3(matrix_to_quat(np.asarray(m, dtype=float)))

    @staticmethod
    def exp(omega: np.ndarray) -> "Rotation3":
        return Rotation3(so3_exp_quat(np.asarray(omega, dtype=float)))

    def log(self) -> np.ndarray:
        return so3_log_quat(self.q)

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, np.asarray(pts, dtype=float))

    def compose(self, other: "Rotation3") -> "Rotation3":
        return Rotation3(quat_mul(self.q, other.q))

    def inverse(self) -> "Rotation3":
        return Rotation3(np.array([self.q[0], -self.q[1], -self.q[2], -self.q[3]]))

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        return 2.0 * math.atan2(float(np.linalg.norm(self.q[1:])), abs(float(self.q[0])))

    def approx_equal(self, other: "Rotation3", tol: float = 1e-9) -> bool:
        """Group equality: q and -q compare equal."""
        d = min(np.linalg.norm(self.q - other.q), np.linalg.norm(self.q + other.q))
        return float(d) <= tol


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform: x -> R @ x + t."""

    rotation: Rotation3
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(Rotation3.identity(), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose3":
        m = np.asarray(m, dtype=float)
        return Pose3(Rotation3.from_matrix(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.matrix()
        out[:3, 3] = self.translation
        return out

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.rotation.apply(pts) + self.translation

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(
            self.rotation.compose(other.rotation),
            self.rotation.apply(other.translation) + self.translation,
        )

    def inverse(self) -> "Pose3":
        rinv = self.rotation.inverse()
        return Pose3(rinv, -rinv.apply(self.translation))

    def to_sim3(self) -> "Sim3Transform":
        return Sim3Transform(1.0, self.rotation, self.translation)


@dataclass(frozen=True, eq=False)
class Sim3Transform:
    """Similarity transform: x -> s * R @ x + t, with s > 0."""

    scale: float
    rotation: Rotation3
    translation: np.ndarray

    def __post_init__(self):
        s = float(self.scale)
        if not s > 0:
            raise ValueError(f"scale must be positive, got {s}")
        object.__setattr__(self, "scale", s)
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Sim3Transform":
        return Sim3Transform(1.0, Rotation3.identity(), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Sim3Transform":
        m = np.asarray(m, dtype=float)
        a = m[:3, :3]
        s = float(np.cbrt(np.linalg.det(a)))
        return Sim3Transform(s, Rotation3.from_matrix(a / s), m[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.scale * self.rotation.matrix()
        out[:3, 3] = self.translation
        return out

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * self.rotation.apply(pts) + self.translation

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        return sim3_compose(self, other)

    def inverse(self) -> "Sim3Transform":
        rinv = self.rotation.inverse()
        sinv = 1.0 / self.scale
        return Sim3Transform(sinv, rinv, -sinv * rinv.apply(self.translation))

    def se3_part(self) -> Pose3:
        """Drop the scale, keeping rotation and translation."""
        return Pose3(self.rotation, self.translation)


def sim3_compose(a: Sim3Transform, b: Sim3Transform) -> Sim3Transform:
    """Group law: (a o b)(x) = a(b(x))."""
    return Sim3Transform(
        a.scale * b.scale,
        a.rotation.compose(b.rotation),
        a.scale * a.rotation.apply(b.translation) + a.translation,
    )


def _sim3_w_coeffs(theta: float, sigma: float) -> tuple[float, float, float]:
    """Coefficients (C, A, B) of W = C*I + A*[w]x + B*[w]x^2.

    W carries the tangent translation to the group translation in the
    Sim(3) exponential. Four branches cover the small-angle / small-sigma
    degeneracies with Taylor expansions.
    """
    theta2 = theta * theta
    if abs(sigma) < SMALL_SIGMA:
        c = 1.0 + sigma / 2.0 + sigma * sigma / 6.0
        if theta < SMALL_ANGLE:
            a = 0.5 - theta2 / 24.0 + sigma / 3.0
            b = 1.0 / 6.0 - theta2 / 120.0 + sigma / 8.0
        else:
            # sigma-linear corrections keep the 1e-5 branch boundary smooth
            sin_t, cos_t = math.sin(theta), math.cos(theta)
            a = (1.0 - cos_t) / theta2 + sigma * (sin_t - theta * cos_t) / (theta2 * theta)
            b = (theta - sin_t) / (theta2 * theta) + sigma * (
                theta2 / 2.0 + 1.0 - cos_t - theta * sin_t
            ) / (theta2 * theta2)
    else:
        s = math.exp(sigma)
        c = (s - 1.0) / sigma
        sigma2 = sigma * sigma
        if theta < SMALL_ANGLE:
            a = ((sigma - 1.0) * s + 1.0) / sigma2
            b = (s * (0.5 * sigma2 - sigma + 1.0) - 1.0) / (sigma2 * sigma)
        else:
            denom = sigma2 + theta2
            a = (s * math.sin(theta) * sigma + (1.0 - s * math.cos(theta)) * theta) / (
                theta * denom
            )
            b = (c - ((s * math.cos(theta) - 1.0) * sigma + s * math.sin(theta) * theta) / denom) / theta2
    return c, a, b


def _sim3_w_matrix(omega: np.ndarray, sigma: float) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    c, a, b = _sim3_w_coeffs(theta, sigma)
    hat = _skew(omega)
    return c * np.eye(3) + a * hat + b * (hat @ hat)


def sim3_exp(v: np.ndarray) -> Sim3Transform:
    """Exponential map from the 7-vector (trans, rot, log-scale) tangent."""
    v = np.asarray(v, dtype=float).reshape(7)
    upsilon, omega, sigma = v[:3], v[3:6], float(v[6])
    w = _sim3_w_matrix(omega, sigma)
    return Sim3Transform(math.exp(sigma), Rotation3.exp(omega), w @ upsilon)


def sim3_log(t: Sim3Transform) -> np.ndarray:
    """Logarithm map; requires rotation angle strictly below pi."""
    sigma = math.log(t.scale)
    omega = t.rotation.log()
    w = _sim3_w_matrix(omega, sigma)
    upsilon = np.linalg.solve(w, t.translation)
    return np.concatenate([upsilon, omega, [sigma]])


def se3_exp(v: np.ndarray) -> Pose3:
    """SE(3) exponential from the 6-vector (trans, rot) tangent."""
    v = np.asarray(v, dtype=float).reshape(6)
    s = sim3_exp(np.concatenate([v, [0.0]]))
    return Pose3(s.rotation, s.translation)


def se3_log(p: Pose3) -> np.ndarray:
    return sim3_log(p.to_sim3())[:6]


def sim3_distance(a: Sim3Transform, b: Sim3Transform) -> float:
    """Group metric: norm of log(a^-1 o b)."""
    return float(np.linalg.norm(sim3_log(a.inverse().compose(b))))


def se3_distance(a: Pose3, b: Pose3) -> float:
    return sim3_distance(a.to_sim3(), b.to_sim3())


def sim3_adjoint(t: Sim3Transform) -> np.ndarray:
    """7x7 adjoint: Ad_T such that T exp(x) T^-1 = exp(Ad_T x)."""
    r = t.rotation.matrix()
    tv = t.translation
    out = np.zeros((7, 7))
    out[:3, :3] = t.scale * r
    out[:3, 3:6] = _skew(tv) @ r
    out[:3, 6] = -tv
    out[3:6, 3:6] = r
    out[6, 6] = 1.0
    return out


def sim3_ad(x: np.ndarray) -> np.ndarray:
    """7x7 algebra adjoint ad_x = d/dt Ad_exp(t x) at t = 0."""
    x = np.asarray(x, dtype=float).reshape(7)
    upsilon, omega, sigma = x[:3], x[3:6], x[6]
    out = np.zeros((7, 7))
    out[:3, :3] = _skew(omega) + sigma * np.eye(3)
    out[:3, 3:6] = _skew(upsilon)
    out[:3, 6] = -upsilon
    out[3:6, 3:6] = _skew(omega)
    return out


# Bernoulli numbers B_0.. with B_1 = -1/2 (odd entries > 1 vanish).
_BERNOULLI = [
    1.0, -0.5, 1.0 / 6, 0.0, -1.0 / 30, 0.0, 1.0 / 42, 0.0, -1.0 / 30, 0.0,
    5.0 / 66, 0.0, -691.0 / 2730, 0.0, 7.0 / 6, 0.0, -3617.0 / 510, 0.0,
    43867.0 / 798, 0.0, -174611.0 / 330, 0.0, 854513.0 / 138, 0.0,
    -236364091.0 / 2730, 0.0, 8553103.0 / 6, 0.0, -23749461029.0 / 870, 0.0,
    8615841276005.0 / 14322,
]


def sim3_dexpinv_right(x: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: log(exp(x) exp(d)) ~ x + J @ d for small d.

    Computed with the Bernoulli series J = sum_k B_k/k! (-ad_x)^k, which
    converges for rotation angles below pi.
    """
    m = -sim3_ad(x)
    out = np.eye(7)
    term = np.eye(7)
    for k in range(1, len(_BERNOULLI)):
        term = term @ m / k
        bk = _BERNOULLI[k]
        if bk != 0.0:
            out = out + bk * term
        if np.max(np.abs(term)) < 1e-18:
            break
    return out
