"""Matrix Lie groups used throughout the estimator.

Implements SO(3), SE(3), the extended pose group SE2(3), the pinhole
intrinsics group, and the semi-direct product of SE2(3) with se(3) that
couples navigation states and IMU biases.  All rotations are stored as
3x3 matrices.  Tangent vectors are plain numpy arrays in "vee"
coordinates with the rotational part first:

    so(3):   (w)            3
    se(3):   (w, v)         6
    se2(3):  (w, v1, v2)    9
    in:      (al, be, x, y) 4
    sd:      (se2(3), se(3)) = 15

Every group class exposes the same protocol: ``DIM``, ``identity()``,
``exp(u)``, ``log()``, ``compose(other)``, ``inverse()``, ``adjoint()``
(the group Adjoint as a DIM x DIM matrix), ``hat(u)`` / ``vee(m)`` and
``little_adjoint(u)`` (the algebra adjoint matrix).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-8
_PI_EXCLUSION = 1e-6   # log is refused within this band of angle pi
_PI_ROBUST = 1e-4      # switch to symmetric-part axis extraction
EPS_DEPTH = 1e-9


class LogDomainError(ValueError):
    """Group logarithm requested outside its injectivity radius."""


class DepthError(ValueError):
    """Perspective division by a (near-)zero depth."""


def _vec(x, n: int) -> np.ndarray:
    # fast path: trusted float vectors pass through without a copy
    if isinstance(x, np.ndarray) and x.dtype == np.float64 and x.shape == (n,):
        return x
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.shape[0] != n:
        raise ValueError(f"expected a length-{n} vector, got shape {np.shape(x)}")
    return v


def skew(v) -> np.ndarray:
    """so(3) wedge: maps (x, y, z) to the cross-product matrix."""
    x, y, z = _vec(v, 3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unskew(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _sinc(x: float) -> float:
    # sin(x)/x, stable for all x
    if abs(x) < 1e-4:
        return 1.0 - x * x / 6.0 + x**4 / 120.0
    return np.sin(x) / x


def _one_minus_cos_over_sq(x: float) -> float:
    # (1 - cos x)/x^2 == 0.5 * sinc(x/2)^2, no cancellation
    h = _sinc(0.5 * x)
    return 0.5 * h * h


def _x_minus_sin_over_cube(x: float) -> float:
    # (x - sin x)/x^3
    if abs(x) < 1e-4:
        return 1.0 / 6.0 - x * x / 120.0
    return (x - np.sin(x)) / x**3


def _so3_exp(w: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(w)
    wx = skew(w)
    return (
        np.eye(3)
        + _sinc(angle) * wx
        + _one_minus_cos_over_sq(angle) * (wx @ wx)
    )


def _so3_log(r: np.ndarray) -> np.ndarray:
    cos_angle = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if angle >= np.pi - _PI_EXCLUSION:
        raise LogDomainError(
            f"rotation angle {angle:.9f} within {_PI_EXCLUSION} of pi; "
            "log is not reliable there"
        )
    off = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if angle < _SMALL_ANGLE:
        return off
    if angle > np.pi - _PI_ROBUST:
        # Axis from the symmetric part; sign fixed by the skew part.
        sym = 0.5 * (r + r.T)
        diag = np.diag(sym)
        k = int(np.argmax(diag))
        axis = np.empty(3)
        axis[k] = np.sqrt(max(0.0, (diag[k] - cos_angle) / (1.0 - cos_angle)))
        for j in range(3):
            if j != k:
                axis[j] = sym[k, j] / ((1.0 - cos_angle) * axis[k])
        axis /= np.linalg.norm(axis)
        if np.dot(axis, off) < 0.0:
            axis = -axis
        return angle * axis
    return (angle / np.sin(angle)) * off


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(w)
    wx = skew(w)
    wx2 = wx @ wx
    return (
        np.eye(3)
        + _one_minus_cos_over_sq(angle) * wx
        + _x_minus_sin_over_cube(angle) * wx2
    )


def _so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(w)
    wx = skew(w)
    wx2 = wx @ wx
    if angle < 1e-2:
        coeff = 1.0 / 12.0 + angle * angle / 720.0
    else:
        half = 0.5 * angle
        coeff = (1.0 - half * np.cos(half) / np.sin(half)) / (angle * angle)
    return np.eye(3) - 0.5 * wx + coeff * wx2


def _barfoot_q(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    return _barfoot_q_shared(skew(rho), skew(phi), float(np.linalg.norm(phi)))


def _barfoot_q_shared(rx: np.ndarray, px: np.ndarray, a: float) -> np.ndarray:
    """Coupling block from precomputed skews; a is the rotation angle."""
    if a < 1e-2:
        c1 = 1.0 / 6.0 - a**2 / 120.0 + a**4 / 5040.0
        c2 = -1.0 / 24.0 + a**2 / 720.0 - a**4 / 40320.0
        c3 = -1.0 / 120.0 + a**2 / 5040.0 - a**4 / 362880.0
    else:
        c1 = _x_minus_sin_over_cube(a)
        c2 = (2.0 * np.sin(0.5 * a) ** 2 - 0.5 * a**2) / a**4
        c3 = (a - np.sin(a) - a**3 / 6.0) / a**5
    pxrx = px @ rx
    rxpx = rx @ px
    pxrxpx = pxrx @ px
    q = 0.5 * rx
    q += c1 * (pxrx + rxpx + pxrxpx)
    q -= c2 * (px @ pxrx + rxpx @ px - 3.0 * pxrxpx)
    q -= 0.5 * (c2 - 3.0 * c3) * (pxrxpx @ px + px @ pxrxpx)
    return q


def se3_left_jacobian(u) -> np.ndarray:
    """Left Jacobian of SE(3) for tangent u = (w, v), as a 6x6 matrix."""
    u = _vec(u, 6)
    w, v = u[:3], u[3:]
    j = _so3_left_jacobian(w)
    out = np.zeros((6, 6))
    out[:3, :3] = j
    out[3:, 3:] = j
    out[3:, :3] = _barfoot_q(v, w)
    return out


def se3_left_jacobian_inv(u) -> np.ndarray:
    u = _vec(u, 6)
    w, v = u[:3], u[3:]
    jinv = _so3_left_jacobian_inv(w)
    out = np.zeros((6, 6))
    out[:3, :3] = jinv
    out[3:, 3:] = jinv
    out[3:, :3] = -jinv @ _barfoot_q(v, w) @ jinv
    return out


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) (polar projection via SVD)."""
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0.0:
        out = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return out


@dataclass(frozen=True)
class So3:
    """Rotation matrix wrapper; R maps body vectors into the reference frame."""

    mat: np.ndarray

    DIM = 3

    def __post_init__(self):
        m = self.mat
        if not (isinstance(m, np.ndarray) and m.dtype == np.float64):
            m = np.asarray(m, dtype=float)
            object.__setattr__(self, "mat", m)
        if m.shape != (3, 3):
            raise ValueError("So3 expects a 3x3 matrix")

    def deviation(self) -> float:
        """Max-abs departure of R^T R from the identity."""
        return float(np.abs(self.mat.T @ self.mat - np.eye(3)).max())

    def orthonormalized(self) -> "So3":
        """Polar projection back onto SO(3), applied when drift exceeds 1e-7."""
        if self.deviation() > 1e-7:
            return So3(orthonormalize(self.mat))
        return self

    @classmethod
    def identity(cls) -> "So3":
        return cls(np.eye(3))

    @classmethod
    def exp(cls, w) -> "So3":
        return cls(_so3_exp(_vec(w, 3)))

    def log(self) -> np.ndarray:
        return _so3_log(self.mat)

    def compose(self, other: "So3") -> "So3":
        return So3(self.mat @ other.mat)

    def inverse(self) -> "So3":
        return So3(self.mat.T)

    def adjoint(self) -> np.ndarray:
        return self.mat.copy()

    def act(self, v) -> np.ndarray:
        return self.mat @ _vec(v, 3)

    @staticmethod
    def hat(u) -> np.ndarray:
        return skew(u)

    @staticmethod
    def vee(m) -> np.ndarray:
        return unskew(m)

    @staticmethod
    def little_adjoint(u) -> np.ndarray:
        return skew(u)


@dataclass(frozen=True)
class Se3:
    """Rigid transform (R, t); acts on points as R v + t."""

    rot: So3
    trans: np.ndarray

    DIM = 6

    def __post_init__(self):
        object.__setattr__(self, "trans", _vec(self.trans, 3))

    @classmethod
    def identity(cls) -> "Se3":
        return cls(So3.identity(), np.zeros(3))

    @classmethod
    def exp(cls, u) -> "Se3":
        u = _vec(u, 6)
        w, v = u[:3], u[3:]
        return cls(So3.exp(w), _so3_left_jacobian(w) @ v)

    def log(self) -> np.ndarray:
        w = self.rot.log()
        return np.concatenate([w, _so3_left_jacobian_inv(w) @ self.trans])

    def compose(self, other: "Se3") -> "Se3":
        return Se3(self.rot.compose(other.rot), self.rot.act(other.trans) + self.trans)

    def inverse(self) -> "Se3":
        rinv = self.rot.inverse()
        return Se3(rinv, -rinv.act(self.trans))

    def act(self, v) -> np.ndarray:
        return self.rot.act(v) + self.trans

    def adjoint(self) -> np.ndarray:
        r = self.rot.mat
        out = np.zeros((6, 6))
        out[:3, :3] = r
        out[3:, 3:] = r
        out[3:, :3] = skew(self.trans) @ r
        return out

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rot.mat
        out[:3, 3] = self.trans
        return out

    @classmethod
    def from_matrix(cls, m) -> "Se3":
        m = np.asarray(m, dtype=float)
        return cls(So3(m[:3, :3]), m[:3, 3])

    @staticmethod
    def hat(u) -> np.ndarray:
        u = _vec(u, 6)
        out = np.zeros((4, 4))
        out[:3, :3] = skew(u[:3])
        out[:3, 3] = u[3:]
        return out

    @staticmethod
    def vee(m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        return np.concatenate([unskew(m[:3, :3]), m[:3, 3]])

    @staticmethod
    def little_adjoint(u) -> np.ndarray:
        u = _vec(u, 6)
        out = np.zeros((6, 6))
        out[:3, :3] = skew(u[:3])
        out[3:, 3:] = skew(u[:3])
        out[3:, :3] = skew(u[3:])
        return out


@dataclass(frozen=True)
class Se23:
    """Extended pose (R, a, b), embedded as a 5x5 matrix.

    In the navigation state the first vector carries velocity and the
    second carries position.
    """

    rot: So3
    a: np.ndarray
    b: np.ndarray

    DIM = 9

    def __post_init__(self):
        object.__setattr__(self, "a", _vec(self.a, 3))
        object.__setattr__(self, "b", _vec(self.b, 3))

    @classmethod
    def identity(cls) -> "Se23":
        return cls(So3.identity(), np.zeros(3), np.zeros(3))

    @classmethod
    def exp(cls, u) -> "Se23":
        u = _vec(u, 9)
        w = u[:3]
        j = _so3_left_jacobian(w)
        return cls(So3.exp(w), j @ u[3:6], j @ u[6:9])

    def log(self) -> np.ndarray:
        w = self.rot.log()
        jinv = _so3_left_jacobian_inv(w)
        return np.concatenate([w, jinv @ self.a, jinv @ self.b])

    def compose(self, other: "Se23") -> "Se23":
        return Se23(
            self.rot.compose(other.rot),
            self.rot.act(other.a) + self.a,
            self.rot.act(other.b) + self.b,
        )

    def inverse(self) -> "Se23":
        rinv = self.rot.inverse()
        return Se23(rinv, -rinv.act(self.a), -rinv.act(self.b))

    def adjoint(self) -> np.ndarray:
        r = self.rot.mat
        out = np.zeros((9, 9))
        out[:3, :3] = r
        out[3:6, 3:6] = r
        out[6:9, 6:9] = r
        out[3:6, :3] = skew(self.a) @ r
        out[6:9, :3] = skew(self.b) @ r
        return out

    def matrix(self) -> np.ndarray:
        out = np.eye(5)
        out[:3, :3] = self.rot.mat
        out[:3, 3] = self.a
        out[:3, 4] = self.b
        return out

    @classmethod
    def from_matrix(cls, m) -> "Se23":
        m = np.asarray(m, dtype=float)
        return cls(So3(m[:3, :3]), m[:3, 3], m[:3, 4])

    def proj_first(self) -> Se3:
        """Keep (R, a); a group homomorphism onto SE(3)."""
        return Se3(self.rot, self.a)

    def proj_second(self) -> Se3:
        """Keep (R, b); a group homomorphism onto SE(3)."""
        return Se3(self.rot, self.b)

    @staticmethod
    def hat(u) -> np.ndarray:
        u = _vec(u, 9)
        out = np.zeros((5, 5))
        out[:3, :3] = skew(u[:3])
        out[:3, 3] = u[3:6]
        out[:3, 4] = u[6:9]
        return out

    @staticmethod
    def vee(m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        return np.concatenate([unskew(m[:3, :3]), m[:3, 3], m[:3, 4]])

    @staticmethod
    def little_adjoint(u) -> np.ndarray:
        u = _vec(u, 9)
        wx = skew(u[:3])
        out = np.zeros((9, 9))
        out[:3, :3] = wx
        out[3:6, 3:6] = wx
        out[6:9, 6:9] = wx
        out[3:6, :3] = skew(u[3:6])
        out[6:9, :3] = skew(u[6:9])
        return out


# Algebra projections between se2(3) and se(3) coordinates.
def se23_first_coords(u) -> np.ndarray:
    """(w, v1, v2) -> (w, v1); the algebra counterpart of proj_first."""
    u = _vec(u, 9)
    return u[:6].copy()


def se23_second_coords(u) -> np.ndarray:
    """(w, v1, v2) -> (w, v2); the algebra counterpart of proj_second."""
    u = _vec(u, 9)
    return np.concatenate([u[:3], u[6:9]])


# Row-selection matrices for the same projections, used to assemble Jacobians.
SEL_FIRST = np.zeros((6, 9))
SEL_FIRST[:6, :6] = np.eye(6)
SEL_SECOND = np.zeros((6, 9))
SEL_SECOND[:3, :3] = np.eye(3)
SEL_SECOND[3:, 6:] = np.eye(3)


def _expm1_over(x: float) -> float:
    # (e^x - 1)/x with a 4th-order Taylor fallback near zero
    if abs(x) < 1e-6:
        return 1.0 + x / 2.0 + x * x / 6.0 + x**3 / 24.0
    return np.expm1(x) / x


@dataclass(frozen=True)
class InElement:
    """Pinhole intrinsics (fx, fy, cx, cy) as an upper-triangular matrix group."""

    fx: float
    fy: float
    cx: float
    cy: float

    DIM = 4

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def identity(cls) -> "InElement":
        return cls(1.0, 1.0, 0.0, 0.0)

    @classmethod
    def exp(cls, u) -> "InElement":
        al, be, x, y = _vec(u, 4)
        return cls(np.exp(al), np.exp(be), x * _expm1_over(al), y * _expm1_over(be))

    def log(self) -> np.ndarray:
        al = np.log(self.fx)
        be = np.log(self.fy)
        return np.array([al, be, self.cx / _expm1_over(al), self.cy / _expm1_over(be)])

    def compose(self, other: "InElement") -> "InElement":
        return InElement(
            self.fx * other.fx,
            self.fy * other.fy,
            self.cx + self.fx * other.cx,
            self.cy + self.fy * other.cy,
        )

    def inverse(self) -> "InElement":
        return InElement(1.0 / self.fx, 1.0 / self.fy, -self.cx / self.fx, -self.cy / self.fy)

    def adjoint(self) -> np.ndarray:
        return np.array(
            [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [-self.cx, 0.0, self.fx, 0.0],
                [0.0, -self.cy, 0.0, self.fy],
            ]
        )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @classmethod
    def from_matrix(cls, m) -> "InElement":
        m = np.asarray(m, dtype=float)
        return cls(m[0, 0], m[1, 1], m[0, 2], m[1, 2])

    def apply(self, v) -> np.ndarray:
        """Apply the intrinsics matrix to a homogeneous image point."""
        return self.matrix() @ _vec(v, 3)

    @staticmethod
    def hat(u) -> np.ndarray:
        al, be, x, y = _vec(u, 4)
        return np.array([[al, 0.0, x], [0.0, be, y], [0.0, 0.0, 0.0]])

    @staticmethod
    def vee(m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        return np.array([m[0, 0], m[1, 1], m[0, 2], m[1, 2]])

    @staticmethod
    def little_adjoint(u) -> np.ndarray:
        al, be, x, y = _vec(u, 4)
        out = np.zeros((4, 4))
        out[2, 0] = -x
        out[2, 2] = al
        out[3, 1] = -y
        out[3, 3] = be
        return out


@dataclass(frozen=True)
class SdElement:
    """Semi-direct product element (D, delta) with D in SE2(3), delta in se(3).

    Multiplication follows (A, a)(B, b) = (AB, a + Ad_{chi(A)} b) where
    chi keeps the (rotation, first-vector) SE(3) projection.  delta is
    stored in vee coordinates, gyroscope part first.
    """

    d: Se23
    delta: np.ndarray

    DIM = 15

    def __post_init__(self):
        object.__setattr__(self, "delta", _vec(self.delta, 6))

    @classmethod
    def identity(cls) -> "SdElement":
        return cls(Se23.identity(), np.zeros(6))

    @classmethod
    def exp(cls, u) -> "SdElement":
        u = _vec(u, 15)
        g = u[:9]
        return cls(Se23.exp(g), se3_left_jacobian(se23_first_coords(g)) @ u[9:])

    def log(self) -> np.ndarray:
        g = self.d.log()
        jinv = se3_left_jacobian_inv(se23_first_coords(g))
        return np.concatenate([g, jinv @ self.delta])

    def compose(self, other: "SdElement") -> "SdElement":
        return SdElement(
            self.d.compose(other.d),
            self.delta + self.d.proj_first().adjoint() @ other.delta,
        )

    def inverse(self) -> "SdElement":
        dinv = self.d.inverse()
        return SdElement(dinv, -(dinv.proj_first().adjoint() @ self.delta))

    def adjoint(self) -> np.ndarray:
        ad_b = self.d.proj_first().adjoint()
        out = np.zeros((15, 15))
        out[:9, :9] = self.d.adjoint()
        out[9:, 9:] = ad_b
        out[9:, :9] = Se3.little_adjoint(self.delta) @ ad_b @ SEL_FIRST
        return out

    @staticmethod
    def little_adjoint(u) -> np.ndarray:
        u = _vec(u, 15)
        out = np.zeros((15, 15))
        out[:9, :9] = Se23.little_adjoint(u[:9])
        out[9:, 9:] = Se3.little_adjoint(se23_first_coords(u[:9]))
        out[9:, :9] = Se3.little_adjoint(u[9:]) @ SEL_FIRST
        return out


def perspective_project(v) -> np.ndarray:
    """Scale a camera-frame point onto the unit-depth plane: (x/z, y/z, 1)."""
    v = _vec(v, 3)
    if abs(v[2]) <= EPS_DEPTH:
        raise DepthError(f"depth {v[2]:.3e} is below the {EPS_DEPTH} guard")
    return v / v[2]


def perspective_project_jac(v) -> np.ndarray:
    """Differential of perspective_project; the third row is always zero."""
    v = _vec(v, 3)
    if abs(v[2]) <= EPS_DEPTH:
        raise DepthError(f"depth {v[2]:.3e} is below the {EPS_DEPTH} guard")
    x, y, z = v
    return np.array(
        [
            [1.0 / z, 0.0, -x / z**2],
            [0.0, 1.0 / z, -y / z**2],
            [0.0, 0.0, 0.0],
        ]
    )


def intrinsics_point_jacobian(v) -> np.ndarray:
    """3x4 Jacobian of an intrinsics-tangent perturbation acting on an image point."""
    x, y, z = _vec(v, 3)
    return np.array(
        [
            [x, 0.0, z, 0.0],
            [0.0, y, 0.0, z],
            [0.0, 0.0, 0.0, 0.0],
        ]
    )
