"""State space, dynamics, symmetry action and lift for the VIO system.

State: xi = (T, b, S, K) with
    T  extended pose in SE2(3), first vector = velocity, second = position
    b  IMU bias, gyroscope part first (rad/s, m/s^2)
    S  camera extrinsics, IMU -> camera, in SE(3)
    K  pinhole intrinsics (pixels)

Symmetry group: G = (SE2(3) |x se(3)) x SE(3) x IN, acting on the right.
Tangent coordinate ordering, used for every 25-vector in this package:

    (rho_R 0:3, rho_v 3:6, rho_p 6:9, d_bw 9:12, d_ba 12:15, eps_E 15:21,
     eps_L 21:25)

Gravity convention: ``GravitySpec.e3`` is the direction gravity points in
the global frame (so z-up data uses (0, 0, -1)); the velocity dynamics add
``+ g e3``.  The simulator and all ingestion paths share this object; the
sign is pinned by a closed-loop IMU integration test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import (
    EPS_DEPTH,
    DepthError,
    InElement,
    SdElement,
    Se3,
    Se23,
    SEL_FIRST,
    SEL_SECOND,
    se23_first_coords,
    se23_second_coords,
    skew,
)

CORE_DIM = 25
SL_D = slice(0, 9)
SL_DELTA = slice(9, 15)
SL_E = slice(15, 21)
SL_L = slice(21, 25)


def _vec(x, n):
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.shape[0] != n:
        raise ValueError(f"expected a length-{n} vector, got shape {np.shape(x)}")
    return v


@dataclass(frozen=True)
class GravitySpec:
    """Gravity magnitude and direction (unit vector, global frame)."""

    g: float = 9.81
    e3: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))

    def __post_init__(self):
        e3 = _vec(self.e3, 3)
        if abs(np.linalg.norm(e3) - 1.0) > 1e-9:
            raise ValueError("gravity direction must be a unit vector")
        object.__setattr__(self, "e3", e3)


@dataclass(frozen=True)
class Input:
    """System input u = (w, tau, mu, zeta); w stacks (gyro, accel)."""

    w: np.ndarray
    tau: np.ndarray = field(default_factory=lambda: np.zeros(6))
    mu: np.ndarray = field(default_factory=lambda: np.zeros(6))
    zeta: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        object.__setattr__(self, "w", _vec(self.w, 6))
        object.__setattr__(self, "tau", _vec(self.tau, 6))
        object.__setattr__(self, "mu", _vec(self.mu, 6))
        object.__setattr__(self, "zeta", _vec(self.zeta, 4))

    @classmethod
    def from_imu(cls, gyro, accel) -> "Input":
        """Build from an IMU sample; calibration inputs are zero by model."""
        return cls(w=np.concatenate([_vec(gyro, 3), _vec(accel, 3)]))

    @property
    def gyro(self) -> np.ndarray:
        return self.w[:3]

    @property
    def accel(self) -> np.ndarray:
        return self.w[3:]


@dataclass(frozen=True)
class SystemState:
    t: Se23
    b: np.ndarray
    s: Se3
    k: InElement

    def __post_init__(self):
        object.__setattr__(self, "b", _vec(self.b, 6))

    def pose(self) -> Se3:
        """The (R, p) pose of the platform."""
        return self.t.proj_second()

    def camera_pose(self) -> Se3:
        return self.pose().compose(self.s)


@dataclass(frozen=True)
class SymElement:
    """Element X = ((D, delta), E, L) of the symmetry group."""

    sd: SdElement
    e: Se3
    l: InElement

    DIM = 25

    @classmethod
    def identity(cls) -> "SymElement":
        return cls(SdElement.identity(), Se3.identity(), InElement.identity())

    @classmethod
    def exp(cls, u) -> "SymElement":
        u = _vec(u, 25)
        return cls(SdElement.exp(u[:15]), Se3.exp(u[15:21]), InElement.exp(u[21:25]))

    def log(self) -> np.ndarray:
        return np.concatenate([self.sd.log(), self.e.log(), self.l.log()])

    def compose(self, other: "SymElement") -> "SymElement":
        return SymElement(
            self.sd.compose(other.sd), self.e.compose(other.e), self.l.compose(other.l)
        )

    def inverse(self) -> "SymElement":
        return SymElement(self.sd.inverse(), self.e.inverse(), self.l.inverse())

    def adjoint(self) -> np.ndarray:
        out = np.zeros((25, 25))
        out[:15, :15] = self.sd.adjoint()
        out[15:21, 15:21] = self.e.adjoint()
        out[21:, 21:] = self.l.adjoint()
        return out

    @staticmethod
    def little_adjoint(u) -> np.ndarray:
        u = _vec(u, 25)
        out = np.zeros((25, 25))
        out[:15, :15] = SdElement.little_adjoint(u[:15])
        out[15:21, 15:21] = Se3.little_adjoint(u[15:21])
        out[21:, 21:] = InElement.little_adjoint(u[21:])
        return out


@dataclass(frozen=True)
class DynMatrices:
    w_mat: np.ndarray
    b_mat: np.ndarray
    d_mat: np.ndarray
    g_mat: np.ndarray


def _input_matrix(gyro, accel) -> np.ndarray:
    m = np.zeros((5, 5))
    m[:3, :3] = skew(gyro)
    m[:3, 3] = accel
    return m


def build_dyn_matrices(xi: SystemState, u: Input, grav: GravitySpec) -> DynMatrices:
    d = np.zeros((5, 5))
    d[3, 4] = 1.0
    g = np.zeros((5, 5))
    g[:3, 3] = grav.g * grav.e3
    return DynMatrices(
        w_mat=_input_matrix(u.gyro, u.accel),
        b_mat=_input_matrix(xi.b[:3], xi.b[3:]),
        d_mat=d,
        g_mat=g,
    )


def system_dynamics(xi: SystemState, u: Input, grav: GravitySpec) -> np.ndarray:
    """Left-trivialized state velocity (T^-1 dT, db, S^-1 dS, K^-1 dK) as a 25-vector."""
    dyn = build_dyn_matrices(xi, u, grav)
    tm = xi.t.matrix()
    tinv = xi.t.inverse().matrix()
    body = (dyn.w_mat - dyn.b_mat + dyn.d_mat) + tinv @ (dyn.g_mat - dyn.d_mat) @ tm
    out = np.zeros(25)
    out[SL_D] = Se23.vee(body)
    out[SL_DELTA] = u.tau
    out[SL_E] = u.mu
    out[SL_L] = u.zeta
    return out


def group_action_phi(x: SymElement, xi: SystemState) -> SystemState:
    """Transitive right action of the symmetry group on the state space."""
    b_grp = x.sd.d.proj_first()
    c_grp = x.sd.d.proj_second()
    return SystemState(
        t=xi.t.compose(x.sd.d),
        b=b_grp.inverse().adjoint() @ (xi.b - x.sd.delta),
        s=c_grp.inverse().compose(xi.s).compose(x.e),
        k=xi.k.compose(x.l),
    )


def solve_group_element(xi_from: SystemState, xi_to: SystemState) -> SymElement:
    """The unique X with phi(X, xi_from) = xi_to (the action is free)."""
    d = xi_from.t.inverse().compose(xi_to.t)
    delta = xi_from.b - d.proj_first().adjoint() @ xi_to.b
    e = xi_from.s.inverse().compose(d.proj_second()).compose(xi_to.s)
    l = xi_from.k.inverse().compose(xi_to.k)
    return SymElement(SdElement(d, delta), e, l)


def lift(xi: SystemState, u: Input, grav: GravitySpec) -> np.ndarray:
    """Group-algebra velocity whose flow projects onto the system dynamics."""
    dyn = build_dyn_matrices(xi, u, grav)
    tm = xi.t.matrix()
    tinv = xi.t.inverse().matrix()
    lam1_mat = (dyn.w_mat - dyn.b_mat + dyn.d_mat) + tinv @ (dyn.g_mat - dyn.d_mat) @ tm
    lam1 = Se23.vee(lam1_mat)
    lam2 = Se3.little_adjoint(xi.b) @ se23_first_coords(lam1) - u.tau
    lam3 = xi.s.inverse().adjoint() @ se23_second_coords(lam1) + u.mu
    out = np.zeros(25)
    out[SL_D] = lam1
    out[SL_DELTA] = lam2
    out[SL_E] = lam3
    out[SL_L] = u.zeta
    return out


def lifted_dynamics(
    x: SymElement, u: Input, origin: SystemState, grav: GravitySpec
) -> np.ndarray:
    """Left-trivialized velocity of the lifted system at X."""
    return lift(group_action_phi(x, origin), u, grav)


def measurement_h(xi: SystemState, pf) -> np.ndarray:
    """Pixel coordinates of a global feature point seen by the camera."""
    pf = _vec(pf, 3)
    cam = xi.camera_pose()
    v = cam.inverse().act(pf)
    if v[2] <= EPS_DEPTH:
        raise DepthError(f"feature depth {v[2]:.3e} behind or on the camera plane")
    return xi.k.apply(v / v[2])[:2]


def alpha_action(h: Se23, xi: SystemState, grav: GravitySpec = GravitySpec()) -> SystemState:
    """Change of global reference that keeps the gravity direction fixed.

    h must be (R_H, 0, p_H) with R_H a rotation about the gravity axis.
    """
    if np.linalg.norm(h.a) > 1e-9:
        raise ValueError("reference change must have zero velocity component")
    if np.linalg.norm(h.rot.act(grav.e3) - grav.e3) > 1e-9:
        raise ValueError("reference-change rotation must fix the gravity axis")
    return SystemState(t=h.inverse().compose(xi.t), b=xi.b, s=xi.s, k=xi.k)


def retract(xi: SystemState, tangent) -> SystemState:
    """Move xi along a left-trivialized tangent (component-wise exponential)."""
    t = _vec(tangent, 25)
    return SystemState(
        t=xi.t.compose(Se23.exp(t[SL_D])),
        b=xi.b + t[SL_DELTA],
        s=xi.s.compose(Se3.exp(t[SL_E])),
        k=xi.k.compose(InElement.exp(t[SL_L])),
    )


def local_coords(xi_ref: SystemState, xi: SystemState) -> np.ndarray:
    """Inverse of retract: left-trivialized coordinates of xi about xi_ref."""
    out = np.zeros(25)
    out[SL_D] = xi_ref.t.inverse().compose(xi.t).log()
    out[SL_DELTA] = xi.b - xi_ref.b
    out[SL_E] = xi_ref.s.inverse().compose(xi.s).log()
    out[SL_L] = xi_ref.k.inverse().compose(xi.k).log()
    return out


def phi_origin_jacobian(origin: SystemState) -> np.ndarray:
    """Differential of Z -> phi(Z, origin) at the identity.

    Maps group tangent coordinates to left-trivialized state coordinates;
    its inverse is the differential of the normal-coordinate chart.
    """
    out = np.zeros((25, 25))
    out[SL_D, SL_D] = np.eye(9)
    out[SL_DELTA, SL_D] = Se3.little_adjoint(origin.b) @ SEL_FIRST
    out[SL_DELTA, SL_DELTA] = -np.eye(6)
    out[SL_E, SL_D] = -origin.s.inverse().adjoint() @ SEL_SECOND
    out[SL_E, SL_E] = np.eye(6)
    out[SL_L, SL_L] = np.eye(4)
    return out
