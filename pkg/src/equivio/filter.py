"""Equivariant multi-state-constraint filter.

The filter estimates a symmetry-group element X = ((D, d), E, L) together
with a sliding window of past E elements (stochastic clones), one per
image time.  The state of the platform is recovered as phi(X, origin)
for a fixed origin chosen at initialization.  The covariance lives in
normal coordinates about that origin and is ordered

    core 25 (see symmetry module), then clones oldest-first, 6 each.

Corrections are applied on the left, X <- exp(delta) X, which agrees with
the linear Kalman update in normal coordinates to first order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, expm
from scipy.stats import chi2

from .lie import (
    DepthError,
    InElement,
    Se3,
    Se23,
    So3,
    SdElement,
    _barfoot_q_shared,
    _expm1_over,
    _one_minus_cos_over_sq,
    _sinc,
    _x_minus_sin_over_cube,
    intrinsics_point_jacobian,
    perspective_project,
    perspective_project_jac,
    skew,
)
from .symmetry import (
    CORE_DIM,
    SL_D,
    SL_DELTA,
    SL_E,
    SL_L,
    GravitySpec,
    Input,
    SymElement,
    SystemState,
    group_action_phi,
    lift,
    phi_origin_jacobian,
    solve_group_element,
)
from .triangulate import (
    AnchoredFeature,
    TriangulationError,
    clone_camera_pose,
    triangulate,
    varsigma_inv,
)

CLONE_DIM = 6


@dataclass(frozen=True)
class NoiseSpec:
    """Continuous-time IMU noise densities and the pixel standard deviation.

    sigma_w, sigma_a drive the gyroscope / accelerometer white noise;
    sigma_bw, sigma_ba the bias random walks.  Scalars broadcast to all
    three axes.
    """

    sigma_w: np.ndarray
    sigma_a: np.ndarray
    sigma_bw: np.ndarray
    sigma_ba: np.ndarray
    sigma_px: float = 1.0

    def __post_init__(self):
        for name in ("sigma_w", "sigma_a", "sigma_bw", "sigma_ba"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if v.shape[0] == 1:
                v = np.full(3, v[0])
            if v.shape[0] != 3 or np.any(v < 0.0):
                raise ValueError(f"{name} must be a nonnegative scalar or 3-vector")
            object.__setattr__(self, name, v)
        if self.sigma_px <= 0.0:
            raise ValueError("sigma_px must be positive")

    def qc(self) -> np.ndarray:
        """Continuous noise covariance diag(sw^2, sa^2, sbw^2, sba^2)."""
        return np.diag(
            np.concatenate(
                [self.sigma_w**2, self.sigma_a**2, self.sigma_bw**2, self.sigma_ba**2]
            )
        )


@dataclass(frozen=True)
class FeatureTrack:
    """Time-stamped pixel observations of one feature."""

    id: int
    stamps: np.ndarray
    uv: np.ndarray

    def __post_init__(self):
        stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        if stamps.shape[0] != uv.shape[0]:
            raise ValueError("stamps and uv must have the same length")
        if stamps.shape[0] > 1 and np.any(np.diff(stamps) <= 0.0):
            raise ValueError("track stamps must be strictly increasing")
        object.__setattr__(self, "stamps", stamps)
        object.__setattr__(self, "uv", uv)

    def __len__(self) -> int:
        return self.stamps.shape[0]


@dataclass
class FilterState:
    """Filter mean, clone window and covariance in normal coordinates."""

    origin: SystemState
    xhat: SymElement
    clones: Dict[float, Se3]
    cov: np.ndarray
    stamp: float
    dtheta0: Optional[np.ndarray] = None
    origin_cache: Optional[dict] = None

    def __post_init__(self):
        if self.dtheta0 is None:
            self.dtheta0 = np.linalg.inv(phi_origin_jacobian(self.origin))
        if self.origin_cache is None:
            self.origin_cache = _origin_lin_cache(self.origin)
        n = CORE_DIM + CLONE_DIM * len(self.clones)
        if self.cov.shape != (n, n):
            raise ValueError(f"covariance must be {n}x{n}, got {self.cov.shape}")

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    @property
    def clone_stamps(self) -> List[float]:
        return list(self.clones.keys())

    def clone_slice(self, stamp: float) -> slice:
        idx = self.clone_stamps.index(stamp)
        start = CORE_DIM + CLONE_DIM * idx
        return slice(start, start + CLONE_DIM)

    def state_estimate(self) -> SystemState:
        return group_action_phi(self.xhat, self.origin)


def make_filter_state(
    origin: SystemState, init_cov: np.ndarray, stamp: float = 0.0
) -> FilterState:
    cov = np.asarray(init_cov, dtype=float)
    if cov.ndim == 1:
        cov = np.diag(cov)
    if cov.shape != (CORE_DIM, CORE_DIM):
        raise ValueError("initial covariance must be 25x25 (core only)")
    return FilterState(
        origin=origin, xhat=SymElement.identity(), clones={}, cov=cov.copy(), stamp=stamp
    )


# ---------------------------------------------------------------------------
# Linearization


def _origin_lin_cache(origin: SystemState) -> dict:
    """Origin-dependent constants of the linearization, computed once."""
    return {
        "r_ring": origin.t.rot.mat,
        "rTv": origin.t.rot.mat.T @ origin.t.a,
        "b_ring": origin.b,
        "bw_ring_x": skew(origin.b[:3]),
        "ad_bring": Se3.little_adjoint(origin.b),
        "ad_s_inv": origin.s.inverse().adjoint(),
    }


def state_matrix_A(state: FilterState, u: Input, grav: GravitySpec) -> np.ndarray:
    """Continuous-time state matrix of the linearized error dynamics.

    Hatted quantities come from the group estimate, ringed ones from the
    fixed origin.  The intrinsics rows and columns are zero.
    """
    d_hat = state.xhat.sd.d
    a_rot = d_hat.rot.mat
    a_vec = d_hat.a
    b_vec = d_hat.b
    delta = state.xhat.sd.delta
    da_x = skew(a_vec)
    ad_bhat = np.zeros((6, 6))
    ad_bhat[:3, :3] = a_rot
    ad_bhat[3:, 3:] = a_rot
    ad_bhat[3:, :3] = da_x @ a_rot

    cache = state.origin_cache
    r_ring = cache["r_ring"]
    rTv = cache["rTv"]
    bw_ring_x = cache["bw_ring_x"]
    ad_bring = cache["ad_bring"]
    ad_s_inv = cache["ad_s_inv"]

    gdir = grav.g * (r_ring.T @ grav.e3)
    psi1 = a_rot @ u.gyro + delta[:3]
    psi2 = psi1 - cache["b_ring"][:3]
    psi3 = a_vec - _cross(psi1, b_vec)
    psi4 = a_vec + rTv - _cross(psi2, b_vec)
    theta = np.concatenate([np.zeros(3), gdir])
    big_psi = np.zeros((6, 6))
    big_psi[3:, :3] = skew(gdir)
    m = ad_bhat @ u.w + delta + theta
    ad_m = Se3.little_adjoint(m)

    a = np.zeros((25, 25))
    db_x = skew(b_vec)
    # block 1: top-left 9x9
    a[0:6, 0:6] = big_psi - ad_bring
    a[6:9, 0:3] = skew(rTv) - db_x @ bw_ring_x
    a[6, 3], a[7, 4], a[8, 5] = 1.0, 1.0, 1.0
    # block 2: 9x6 bias coupling
    a[0, 9], a[1, 10], a[2, 11] = 1.0, 1.0, 1.0
    a[3, 12], a[4, 13], a[5, 14] = 1.0, 1.0, 1.0
    a[6:9, 9:12] = db_x
    # blocks 3 and 4: delta rows
    a[9:15, 0:6] = ad_bring @ big_psi - ad_m @ ad_bring
    a[9:15, 9:15] = ad_m
    # blocks 5, 6, 7: extrinsics rows
    m5 = np.zeros((6, 9))
    m5[0:3, 0:3] = -skew(psi1)
    m5[3:6, 0:3] = -skew(psi3) - bw_ring_x @ db_x
    m5[3, 3], m5[4, 4], m5[5, 5] = 1.0, 1.0, 1.0
    m5[3:6, 6:9] = -skew(psi2)
    a[15:21, 0:9] = ad_s_inv @ m5
    m6 = np.zeros((6, 6))
    m6[0, 0], m6[1, 1], m6[2, 2] = 1.0, 1.0, 1.0
    m6[3:6, 0:3] = db_x
    a[15:21, 9:15] = ad_s_inv @ m6
    varrho = np.concatenate([psi2, psi4])
    a[15:21, 15:21] = Se3.little_adjoint(ad_s_inv @ varrho)
    return a


# Noise enters the true dynamics through w_true = w_meas - n_w and through
# the bias random walk db = n_b; columns ordered (n_w 0:3, n_a 3:6, n_bw, n_ba).
_NOISE_INJECTION = np.zeros((25, 12))
_NOISE_INJECTION[0:6, 0:6] = -np.eye(6)
_NOISE_INJECTION[9:15, 6:12] = np.eye(6)


def input_matrix_B(state: FilterState) -> np.ndarray:
    """Jacobian of the error rate with respect to the IMU noise vector."""
    d = state.xhat.sd.d
    dr = d.rot.mat
    da_x_dr = skew(d.a) @ dr
    m = np.zeros((25, 12))
    # group-tangent image of the noise: -Ad_{D}(n_w, n_a, 0) and +Ad_{chi(D)} n_b
    m[0:3, 0:3] = -dr
    m[3:6, 0:3] = -da_x_dr
    m[3:6, 3:6] = -dr
    m[6:9, 0:3] = -skew(d.b) @ dr
    m[9:12, 6:9] = dr
    m[12:15, 6:9] = da_x_dr
    m[12:15, 9:12] = dr
    return state.dtheta0 @ m


def process_noise_Q(
    phi_core: np.ndarray, b_mat: np.ndarray, noise: NoiseSpec, dt: float
) -> np.ndarray:
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    q = phi_core @ b_mat @ noise.qc() @ b_mat.T @ phi_core.T * dt
    return 0.5 * (q + q.T)


def state_transition_phi(a: np.ndarray, dt: float, k: int) -> np.ndarray:
    """Discrete transition over the full state: exp(A dt) core, identity clones."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    n = CORE_DIM + CLONE_DIM * k
    out = np.eye(n)
    out[:CORE_DIM, :CORE_DIM] = expm(a * dt)
    return out


# ---------------------------------------------------------------------------
# Mean propagation (4th-order Munthe-Kaas integrator on the symmetry group).
# The stage evaluations run on raw matrices; the object-based reference
# implementation below is kept for cross-validation in the tests.

_PADE6 = (1.0, 0.5, 5.0 / 44.0, 1.0 / 66.0, 1.0 / 792.0, 1.0 / 15840.0, 1.0 / 665280.0)


def _expm_pade6(a: np.ndarray) -> np.ndarray:
    """Scaling-and-squaring matrix exponential with a (6, 6) Pade kernel."""
    norm = float(np.max(np.sum(np.abs(a), axis=1)))
    s = 0 if norm <= 0.25 else int(np.ceil(np.log2(norm / 0.25)))
    m = a / (2.0**s) if s else a
    eye = np.eye(a.shape[0])
    m2 = m @ m
    m4 = m2 @ m2
    u = m @ (_PADE6[1] * eye + _PADE6[3] * m2 + _PADE6[5] * m4)
    v = _PADE6[0] * eye + _PADE6[2] * m2 + _PADE6[4] * m4 + _PADE6[6] * (m4 @ m2)
    r = np.linalg.solve(v - u, v + u)
    for _ in range(s):
        r = r @ r
    return r


def _little_adjoint25_raw(u: np.ndarray) -> np.ndarray:
    out = np.zeros((25, 25))
    wx = skew(u[0:3])
    out[0:3, 0:3] = wx
    out[3:6, 3:6] = wx
    out[6:9, 6:9] = wx
    out[3:6, 0:3] = skew(u[3:6])
    out[6:9, 0:3] = skew(u[6:9])
    out[9:12, 9:12] = wx
    out[12:15, 12:15] = wx
    out[12:15, 9:12] = skew(u[3:6])
    dx = skew(u[9:12])
    out[9:12, 0:3] = dx
    out[12:15, 0:3] = skew(u[12:15])
    out[12:15, 3:6] = dx
    ex = skew(u[15:18])
    out[15:18, 15:18] = ex
    out[18:21, 18:21] = ex
    out[18:21, 15:18] = skew(u[18:21])
    out[23, 21] = -u[23]
    out[23, 23] = u[21]
    out[24, 22] = -u[24]
    out[24, 24] = u[22]
    return out


def _dexpinv2(om: np.ndarray, v: np.ndarray) -> np.ndarray:
    # truncated inverse differential of exp for the left-trivialized ODE
    ad = _little_adjoint25_raw(om)
    av = ad @ v
    return v + 0.5 * av + (ad @ av) / 12.0


def _mean_step_reference(
    xhat: SymElement, origin: SystemState, u: Input, grav: GravitySpec, dt: float
) -> SymElement:
    def vel(y: SymElement) -> np.ndarray:
        return lift(group_action_phi(y, origin), u, grav)

    g1 = vel(xhat)
    om2 = 0.5 * dt * g1
    g2 = _dexpinv2(om2, vel(xhat.compose(SymElement.exp(om2))))
    om3 = 0.5 * dt * g2
    g3 = _dexpinv2(om3, vel(xhat.compose(SymElement.exp(om3))))
    om4 = dt * g3
    g4 = _dexpinv2(om4, vel(xhat.compose(SymElement.exp(om4))))
    om = (dt / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
    return xhat.compose(SymElement.exp(om))


def _cross(a, b):
    return np.array(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def _raw_from_sym(x: SymElement):
    d = x.sd.d
    return (
        d.rot.mat,
        d.a,
        d.b,
        x.sd.delta,
        x.e.rot.mat,
        x.e.trans,
        np.array([x.l.fx, x.l.fy, x.l.cx, x.l.cy]),
    )


def _sym_from_raw(raw) -> SymElement:
    dr, da, db, delta, er, et, lp = raw
    return SymElement(
        SdElement(Se23(So3(dr), da, db), delta),
        Se3(So3(er), et),
        InElement(lp[0], lp[1], lp[2], lp[3]),
    )


def _origin_raw(origin: SystemState):
    return (
        origin.t.rot.mat,
        origin.t.a,
        origin.t.b,
        origin.b,
        origin.s.rot.mat,
        origin.s.trans,
        np.array([origin.k.fx, origin.k.fy, origin.k.cx, origin.k.cy]),
    )


def _lift_raw(raw, oraw, w6, ge3):
    """lift(phi(X, origin), u) on raw matrices; ge3 = g * e3."""
    dr, da, db, delta, er, et, _ = raw
    r0, v0, _, b0, s0r, s0t, _ = oraw
    # bias state through the action: Ad_{chi(D)^-1}(b0 - delta)
    m = b0 - delta
    bw = dr.T @ m[:3]
    ba = dr.T @ (m[3:] - _cross(da, m[:3]))
    # extrinsics through the action: Theta(D)^-1 S0 E
    rs0 = dr.T @ s0r
    sr = rs0 @ er
    st = rs0 @ et + dr.T @ (s0t - db)
    # current extended pose T0 D
    rc = r0 @ dr
    vc = r0 @ da + v0
    lam = np.zeros(25)
    lam[0:3] = w6[:3] - bw
    lam[3:6] = w6[3:] - ba + rc.T @ ge3
    lam[6:9] = rc.T @ vc
    lam[9:12] = _cross(bw, lam[0:3])
    lam[12:15] = _cross(ba, lam[0:3]) + _cross(bw, lam[3:6])
    lam[15:18] = sr.T @ lam[0:3]
    lam[18:21] = sr.T @ (lam[6:9] - _cross(st, lam[0:3]))
    return lam


def _exp_jl_so3(w: np.ndarray):
    """Rodrigues rotation and SO(3) left Jacobian, sharing the skew powers."""
    angle = float(np.sqrt(w @ w))
    wx = skew(w)
    wx2 = wx @ wx
    eye = np.eye(3)
    r = eye + _sinc(angle) * wx + _one_minus_cos_over_sq(angle) * wx2
    j = eye + _one_minus_cos_over_sq(angle) * wx + _x_minus_sin_over_cube(angle) * wx2
    return r, j, wx


def _exp25_raw(u: np.ndarray):
    w = u[0:3]
    dr, j, wx = _exp_jl_so3(w)
    da = j @ u[3:6]
    db = j @ u[6:9]
    # SE(3) left Jacobian applied to the delta tangent, reusing the skews
    q = _barfoot_q_shared(skew(u[3:6]), wx, float(np.sqrt(w @ w)))
    delta = np.concatenate([j @ u[9:12], q @ u[9:12] + j @ u[12:15]])
    er, je, _ = _exp_jl_so3(u[15:18])
    et = je @ u[18:21]
    al, be, x, y = u[21:25]
    lp = np.array(
        [np.exp(al), np.exp(be), x * _expm1_over(al), y * _expm1_over(be)]
    )
    return dr, da, db, delta, er, et, lp


def _compose_raw(a, b):
    adr, ada, adb, adelta, aer, aet, alp = a
    bdr, bda, bdb, bdelta, ber, bet, blp = b
    dw = adr @ bdelta[:3]
    dv = _cross(ada, dw) + adr @ bdelta[3:]
    return (
        adr @ bdr,
        adr @ bda + ada,
        adr @ bdb + adb,
        adelta + np.concatenate([dw, dv]),
        aer @ ber,
        aer @ bet + aet,
        np.array(
            [
                alp[0] * blp[0],
                alp[1] * blp[1],
                alp[2] + alp[0] * blp[2],
                alp[3] + alp[1] * blp[3],
            ]
        ),
    )


def _mean_step(
    xhat: SymElement, origin: SystemState, u: Input, grav: GravitySpec, dt: float
) -> SymElement:
    raw = _raw_from_sym(xhat)
    oraw = _origin_raw(origin)
    ge3 = grav.g * grav.e3
    w6 = u.w

    g1 = _lift_raw(raw, oraw, w6, ge3)
    om2 = (0.5 * dt) * g1
    g2 = _dexpinv2(om2, _lift_raw(_compose_raw(raw, _exp25_raw(om2)), oraw, w6, ge3))
    om3 = (0.5 * dt) * g2
    g3 = _dexpinv2(om3, _lift_raw(_compose_raw(raw, _exp25_raw(om3)), oraw, w6, ge3))
    om4 = dt * g3
    g4 = _dexpinv2(om4, _lift_raw(_compose_raw(raw, _exp25_raw(om4)), oraw, w6, ge3))
    om = (dt / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
    out = _compose_raw(raw, _exp25_raw(om))
    return _sym_from_raw(out)


def propagate(
    state: FilterState, u: Input, dt: float, noise: NoiseSpec, grav: GravitySpec
) -> FilterState:
    """One IMU step: integrate the lifted system, push the covariance."""
    if not (0.0 < dt <= 0.1):
        raise ValueError(f"dt must lie in (0, 0.1], got {dt}")
    a = state_matrix_A(state, u, grav)
    phi_core = _expm_pade6(a * dt)
    b = input_matrix_B(state)
    q = process_noise_Q(phi_core, b, noise, dt)

    cov = state.cov.copy()
    cov[:CORE_DIM, :] = phi_core @ cov[:CORE_DIM, :]
    cov[:, :CORE_DIM] = cov[:, :CORE_DIM] @ phi_core.T
    cov[:CORE_DIM, :CORE_DIM] += q
    cov = 0.5 * (cov + cov.T)

    xhat = _mean_step(state.xhat, state.origin, u, grav, dt)
    # numerical hygiene: project rotations back onto the group when drifted
    d = xhat.sd.d
    rot = d.rot.orthonormalized()
    erot = xhat.e.rot.orthonormalized()
    if rot is not d.rot or erot is not xhat.e.rot:
        xhat = SymElement(
            SdElement(Se23(rot, d.a, d.b), xhat.sd.delta),
            Se3(erot, xhat.e.trans),
            xhat.l,
        )
    return replace(state, xhat=xhat, cov=cov, stamp=state.stamp + dt)


# ---------------------------------------------------------------------------
# Normal coordinates


def normal_coords(state: FilterState, xi_true: SystemState) -> np.ndarray:
    """Error of the estimate against a true state, in normal coordinates."""
    e = group_action_phi(state.xhat.inverse(), xi_true)
    return solve_group_element(state.origin, e).log()


def apply_error(state: FilterState, eps) -> SystemState:
    """Inverse of normal_coords: the state whose error coordinates are eps."""
    z = SymElement.exp(np.asarray(eps, dtype=float)).compose(state.xhat)
    return group_action_phi(z, state.origin)


# ---------------------------------------------------------------------------
# Clone window


def clone(state: FilterState, stamp: float) -> FilterState:
    """Append a frozen copy of E at an image stamp; duplicate the eps_E block."""
    stamps = state.clone_stamps
    if stamp in state.clones:
        raise ValueError(f"duplicate clone stamp {stamp}")
    if stamps and stamp <= stamps[-1]:
        raise ValueError("clone stamps must be strictly increasing")
    n = state.dim
    cov = np.zeros((n + CLONE_DIM, n + CLONE_DIM))
    cov[:n, :n] = state.cov
    cov[n:, :n] = state.cov[SL_E, :]
    cov[:n, n:] = state.cov[:, SL_E]
    cov[n:, n:] = state.cov[SL_E, SL_E]
    clones = dict(state.clones)
    clones[stamp] = state.xhat.e
    return replace(state, clones=clones, cov=cov, stamp=max(state.stamp, stamp))


def marginalize(state: FilterState, stamps: Iterable[float]) -> FilterState:
    stamps = list(stamps)
    for s in stamps:
        if s not in state.clones:
            raise ValueError(f"unknown clone stamp {s}")
    keep = np.arange(CORE_DIM).tolist()
    clones = {}
    for i, (s, e) in enumerate(state.clones.items()):
        if s in stamps:
            continue
        clones[s] = e
        start = CORE_DIM + CLONE_DIM * i
        keep.extend(range(start, start + CLONE_DIM))
    keep = np.asarray(keep)
    cov = state.cov[np.ix_(keep, keep)]
    return replace(state, clones=clones, cov=0.5 * (cov + cov.T))


# ---------------------------------------------------------------------------
# Measurement model


def feature_jacobians(
    state: FilterState, feat: AnchoredFeature, obs_stamp: float, uv
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Measurement rows for one observation of an anchored feature.

    Returns (ct_rows 2 x dim, cf 2 x 3, residual 2).  The state columns
    touched are the clone at obs_stamp, the anchor clone (same block with
    opposite sign) and the intrinsics block.
    """
    e_obs = state.clones[obs_stamp]
    e_anchor = state.clones[feat.anchor_stamp]
    rel = e_obs.inverse().compose(e_anchor)
    a_f = feat.a_f
    x_c = rel.act(a_f)
    if x_c[2] <= 1e-9:
        raise DepthError(f"camera-frame depth {x_c[2]:.3e} at stamp {obs_stamp}")

    k_ring = state.origin.k
    k_hat_mat = k_ring.compose(state.xhat.l).matrix()
    dpi = perspective_project_jac(x_c)

    q = e_anchor.act(a_f)
    pose_block = (
        k_hat_mat @ dpi @ e_obs.rot.mat.T @ np.hstack([skew(q), -np.eye(3)])
    )[:2]

    z = feat.z
    dz = (1.0 / z[2]) * np.array(
        [
            [1.0, 0.0, -z[0] / z[2]],
            [0.0, 1.0, -z[1] / z[2]],
            [0.0, 0.0, -1.0 / z[2]],
        ]
    )
    cf = (k_hat_mat @ dpi @ rel.rot.mat @ dz)[:2]

    n_hat = state.xhat.l.apply(perspective_project(x_c))
    intr_block = (k_ring.matrix() @ intrinsics_point_jacobian(n_hat))[:2]

    ct = np.zeros((2, state.dim))
    ct[:, state.clone_slice(obs_stamp)] += pose_block
    ct[:, state.clone_slice(feat.anchor_stamp)] -= pose_block
    ct[:, SL_L] = intr_block

    h_pred = (k_hat_mat @ (x_c / x_c[2]))[:2]
    r = np.asarray(uv, dtype=float) - h_pred
    return ct, cf, r


def nullspace_project(
    ct_stack: np.ndarray, cf_stack: np.ndarray, r_stack: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Project the stacked rows onto the left nullspace of the feature Jacobian."""
    m = cf_stack.shape[0]
    if m <= 3:
        raise ValueError("need more than 3 stacked rows to marginalize the feature")
    q, rr = np.linalg.qr(cf_stack, mode="complete")
    diag = np.abs(np.diag(rr[:3, :3]))
    tol = max(cf_stack.shape) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    basis = q[:, rank:]
    return basis.T @ ct_stack, basis.T @ r_stack


_CHI2_CACHE: Dict[Tuple[int, float], float] = {}


def chi2_gate(
    ct: np.ndarray, r: np.ndarray, cov: np.ndarray, sigma_px: float, quantile: float = 0.95
) -> bool:
    """Mahalanobis acceptance test for a projected residual block."""
    dof = r.shape[0]
    if dof == 0:
        return True
    key = (dof, quantile)
    if key not in _CHI2_CACHE:
        _CHI2_CACHE[key] = float(chi2.ppf(quantile, dof))
    s = ct @ cov @ ct.T + sigma_px**2 * np.eye(dof)
    try:
        gamma = float(r @ cho_solve(cho_factor(s), r))
    except np.linalg.LinAlgError:
        return False
    return gamma <= _CHI2_CACHE[key]


def qr_compress(ct: np.ndarray, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Thin-QR reduction of a tall stacked system; posterior is unchanged."""
    if ct.shape[0] <= ct.shape[1]:
        return ct, r
    q, rr = np.linalg.qr(ct, mode="reduced")
    return rr, q.T @ r


def eqf_update(
    state: FilterState, ct: np.ndarray, r: np.ndarray, sigma_px: float
) -> Tuple[FilterState, bool]:
    """Kalman update in normal coordinates with a Joseph-form covariance.

    Returns the new state and False when the innovation covariance is too
    ill-conditioned to invert (the update is then skipped).
    """
    if ct.shape[0] == 0:
        return state, True
    n = state.dim
    s = ct @ state.cov @ ct.T + sigma_px**2 * np.eye(ct.shape[0])
    eig = np.linalg.eigvalsh(s)
    if eig[0] <= 0.0 or eig[-1] / eig[0] > 1e12:
        return state, False
    gain = state.cov @ ct.T @ np.linalg.inv(s)
    delta = gain @ r

    xhat = SymElement.exp(delta[:CORE_DIM]).compose(state.xhat)
    clones = {
        stamp: Se3.exp(delta[sl]).compose(e)
        for (stamp, e), sl in zip(
            state.clones.items(),
            (slice(CORE_DIM + 6 * i, CORE_DIM + 6 * i + 6) for i in range(len(state.clones))),
        )
    }
    ikc = np.eye(n) - gain @ ct
    cov = ikc @ state.cov @ ikc.T + sigma_px**2 * (gain @ gain.T)
    cov = 0.5 * (cov + cov.T)
    return replace(state, xhat=xhat, clones=clones, cov=cov), True


# ---------------------------------------------------------------------------
# Image processing


@dataclass(frozen=True)
class FilterOptions:
    max_clones: int = 11
    min_track_obs: int = 3
    min_parallax_deg: float = 1.0
    gn_max_iters: int = 20
    gn_step_tol: float = 1e-10
    gn_cost_tol: float = 1e-12
    depth_min: float = 0.1
    depth_max: float = 200.0
    gate_quantile: float = 0.95
    sigma_px: float = 1.0
    use_qr_compression: bool = True


@dataclass
class ImageReport:
    stamp: float
    n_tracks: int = 0
    n_updated: int = 0
    n_gated: int = 0
    n_triangulation_failed: int = 0
    n_rows: int = 0
    update_applied: bool = False
    update_skipped_ill_conditioned: bool = False
    innovation: np.ndarray = field(default_factory=lambda: np.zeros(0))


def msc_update(
    state: FilterState,
    tracks: Iterable[FeatureTrack],
    opts: FilterOptions,
    report: Optional[ImageReport] = None,
) -> Tuple[FilterState, ImageReport]:
    """Triangulate, project, gate and apply one batched update.

    All track observations must refer to existing clone stamps (others
    are dropped).  Per-feature failures skip the feature only.
    """
    if report is None:
        report = ImageReport(stamp=state.stamp)
    ct_rows: List[np.ndarray] = []
    r_rows: List[np.ndarray] = []
    k_hat = state.origin.k.compose(state.xhat.l)
    for track in tracks:
        report.n_tracks += 1
        usable = [s for s in track.stamps if s in state.clones]
        if len(usable) < max(opts.min_track_obs, 2):
            report.n_triangulation_failed += 1
            continue
        try:
            feat = triangulate(
                track,
                state.clones,
                state.origin,
                k_hat,
                min_obs=opts.min_track_obs,
                min_parallax_deg=opts.min_parallax_deg,
                max_iters=opts.gn_max_iters,
                step_tol=opts.gn_step_tol,
                cost_tol=opts.gn_cost_tol,
                depth_min=opts.depth_min,
                depth_max=opts.depth_max,
            )
        except (TriangulationError, ValueError):
            report.n_triangulation_failed += 1
            continue
        try:
            blocks = [
                feature_jacobians(state, feat, s, uv)
                for s, uv in zip(track.stamps, track.uv)
                if s in state.clones
            ]
        except DepthError:
            report.n_triangulation_failed += 1
            continue
        ct = np.vstack([b[0] for b in blocks])
        cf = np.vstack([b[1] for b in blocks])
        r = np.concatenate([b[2] for b in blocks])
        ct_p, r_p = nullspace_project(ct, cf, r)
        if not chi2_gate(ct_p, r_p, state.cov, opts.sigma_px, opts.gate_quantile):
            report.n_gated += 1
            continue
        report.n_updated += 1
        ct_rows.append(ct_p)
        r_rows.append(r_p)

    if ct_rows:
        ct_all = np.vstack(ct_rows)
        r_all = np.concatenate(r_rows)
        if opts.use_qr_compression:
            ct_all, r_all = qr_compress(ct_all, r_all)
        report.n_rows = r_all.shape[0]
        report.innovation = r_all
        state, ok = eqf_update(state, ct_all, r_all, opts.sigma_px)
        report.update_applied = ok
        report.update_skipped_ill_conditioned = not ok
    return state, report


def prune_window(
    state: FilterState, opts: FilterOptions, live_stamps: Iterable[float] = ()
) -> FilterState:
    """Marginalize clones with no remaining tracks once the window overflows."""
    live = set(live_stamps)
    removable = [s for s in state.clone_stamps if s not in live]
    excess = len(state.clones) - opts.max_clones
    if excess > 0 and removable:
        state = marginalize(state, removable[:excess])
        excess = len(state.clones) - opts.max_clones
    if excess > 0:
        # window still too large: drop the oldest clones regardless
        state = marginalize(state, state.clone_stamps[:excess])
    return state


def process_image(
    state: FilterState,
    stamp: float,
    tracks: Iterable[FeatureTrack],
    opts: FilterOptions,
    live_stamps: Iterable[float] = (),
) -> Tuple[FilterState, ImageReport]:
    """Clone at an image stamp, update with mature tracks, prune the window.

    ``tracks`` are the tracks ready for an update (lost, or spanning the
    window); ``live_stamps`` are stamps still referenced by ongoing tracks
    and therefore kept when the window overflows.
    """
    if stamp < state.stamp:
        raise ValueError("image stamp precedes the filter time")
    state = clone(state, stamp)
    state, report = msc_update(state, tracks, opts, ImageReport(stamp=stamp))
    return prune_window(state, opts, set(live_stamps) | {stamp}), report


# ---------------------------------------------------------------------------
# Unobservable directions


def unobservable_directions(state: FilterState, grav: GravitySpec) -> np.ndarray:
    """Directions in error coordinates of a global yaw / translation shift.

    Columns: yaw about gravity, then translation along x, y, z.  By the
    compatibility of the reference change with the group action these
    directions are constant in time; measurements carry no information
    along them.
    """
    origin = state.origin
    ad_t_inv = origin.t.inverse().adjoint()
    cam0 = origin.t.proj_second().compose(origin.s)
    ad_cam_inv = cam0.inverse().adjoint()
    ad_b_pi = Se3.little_adjoint(origin.b)
    n = state.dim
    k = len(state.clones)
    out = np.zeros((n, 4))
    gens = [np.concatenate([grav.e3, np.zeros(6)])]
    for j in range(3):
        g = np.zeros(9)
        g[6 + j] = 1.0
        gens.append(g)
    for col, gen in enumerate(gens):
        u_d = -ad_t_inv @ gen
        pose_part = np.concatenate([gen[:3], gen[6:9]])
        out[SL_D, col] = u_d
        out[SL_DELTA, col] = ad_b_pi @ u_d[:6]
        out[SL_E, col] = -ad_cam_inv @ pose_part
        for i in range(k):
            sl = slice(CORE_DIM + 6 * i, CORE_DIM + 6 * i + 6)
            out[sl, col] = -ad_cam_inv @ pose_part
    return out
