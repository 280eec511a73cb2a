"""Multi-view feature triangulation in anchored inverse-depth coordinates.

The anchor is the camera pose of the first observation.  A feature point
a_f expressed in the anchor frame is parametrized as

    z = (z1, z2) = ((a_x / a_z, a_y / a_z), 1 / a_z)

Initialization is a linear multi-view solve; refinement is Gauss-Newton
on z, minimizing reprojection error in normalized image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .lie import InElement, Se3, perspective_project, perspective_project_jac
from .symmetry import SystemState


class TriangulationError(RuntimeError):
    """Feature could not be triangulated; the feature is skipped."""


class InsufficientParallaxError(TriangulationError):
    pass


class BadDepthError(TriangulationError):
    """Negative or out-of-bounds anchor depth."""


class ConvergenceError(TriangulationError):
    pass


def varsigma(a_f) -> np.ndarray:
    """Anchor-frame point -> inverse-depth coordinates."""
    a = np.asarray(a_f, dtype=float)
    return np.array([a[0] / a[2], a[1] / a[2], 1.0 / a[2]])


def varsigma_inv(z) -> np.ndarray:
    """Inverse-depth coordinates -> anchor-frame point."""
    z = np.asarray(z, dtype=float)
    return np.array([z[0] / z[2], z[1] / z[2], 1.0 / z[2]])


def varsigma_inv_jac(z) -> np.ndarray:
    """d a_f / d z, used in the feature Jacobian chain."""
    z = np.asarray(z, dtype=float)
    inv = 1.0 / z[2]
    return inv * np.array(
        [
            [1.0, 0.0, -z[0] * inv],
            [0.0, 1.0, -z[1] * inv],
            [0.0, 0.0, -inv],
        ]
    )


@dataclass(frozen=True)
class AnchoredFeature:
    anchor_stamp: float
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).reshape(3)
        if z[2] <= 0.0:
            raise ValueError("inverse depth must be positive")
        object.__setattr__(self, "z", z)

    @property
    def a_f(self) -> np.ndarray:
        return varsigma_inv(self.z)


def clone_camera_pose(origin: SystemState, e: Se3) -> Se3:
    """Camera pose encoded by a clone element: pose(T0) * S0 * E."""
    return origin.t.proj_second().compose(origin.s).compose(e)


def _linear_init(rot_wc: np.ndarray, pos_wc: np.ndarray, normalized: np.ndarray) -> np.ndarray:
    # Stack u*(r3.X + t3) - (r1.X + t1) = 0 rows over all views; solve for
    # the global point X in least squares.  rot_wc/pos_wc are world->camera.
    m = rot_wc.shape[0]
    rows = np.empty((2 * m, 3))
    rhs = np.empty(2 * m)
    for k in range(2):
        rows[k::2] = normalized[:, k, None] * rot_wc[:, 2, :] - rot_wc[:, k, :]
        rhs[k::2] = pos_wc[:, k] - normalized[:, k] * pos_wc[:, 2]
    sol, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
    return sol


def _max_parallax(rot_cw: np.ndarray, normalized3: np.ndarray) -> float:
    bearings = np.einsum("nij,nj->ni", rot_cw, normalized3)
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)
    cosines = np.clip(bearings @ bearings.T, -1.0, 1.0)
    return float(np.arccos(cosines.min()))


def triangulate(
    track,
    clone_poses: Mapping[float, Se3],
    origin: SystemState,
    intrinsics_hat: InElement,
    *,
    min_obs: int = 3,
    min_parallax_deg: float = 1.0,
    max_iters: int = 20,
    step_tol: float = 1e-10,
    cost_tol: float = 1e-12,
    depth_min: float = 0.1,
    depth_max: float = 200.0,
) -> AnchoredFeature:
    """Triangulate a track against the clone window.

    Only observations whose stamps have clones are used; the anchor is the
    first such observation.  Raises a TriangulationError subclass when the
    geometry or the optimization is not usable.
    """
    stamps = [s for s in track.stamps if s in clone_poses]
    if len(stamps) < min_obs:
        raise ValueError(
            f"track {track.id}: {len(stamps)} usable observations, need {min_obs}"
        )
    kinv = intrinsics_hat.inverse().matrix()
    cams = []
    uv_used = []
    for s, uv in zip(track.stamps, track.uv):
        if s not in clone_poses:
            continue
        cams.append(clone_camera_pose(origin, clone_poses[s]))
        uv_used.append(uv)
    m = len(cams)
    uv_used = np.asarray(uv_used)
    normalized3 = np.column_stack([uv_used, np.ones(m)]) @ kinv.T
    rot_cw = np.stack([c.rot.mat for c in cams])  # camera -> world
    pos_cw = np.stack([c.trans for c in cams])

    if _max_parallax(rot_cw, normalized3) < np.deg2rad(min_parallax_deg):
        raise InsufficientParallaxError(
            f"track {track.id}: parallax below {min_parallax_deg} deg"
        )

    rot_wc = np.transpose(rot_cw, (0, 2, 1))
    pos_wc = -np.einsum("nij,nj->ni", rot_wc, pos_cw)
    anchor = cams[0]
    point = _linear_init(rot_wc, pos_wc, normalized3[:, :2])
    a0 = anchor.inverse().act(point)
    if a0[2] <= 0.0:
        raise BadDepthError(f"track {track.id}: initialized behind the anchor camera")
    z = varsigma(a0)

    # per-view pose relative to the anchor
    rel_r = np.einsum("nij,jk->nik", rot_wc, anchor.rot.mat)
    rel_t = np.einsum("nij,j->ni", rot_wc, anchor.trans) + pos_wc
    obs2 = normalized3[:, :2]

    def residual_and_cost(zc):
        a = varsigma_inv(zc)
        pts = rel_r @ a + rel_t
        if np.any(pts[:, 2] <= 1e-6):
            raise BadDepthError(f"track {track.id}: point behind a view")
        res = obs2 - pts[:, :2] / pts[:, 2:]
        return res, pts, float(np.sum(res**2))

    res, pts, cost = residual_and_cost(z)
    converged = False
    for _ in range(max_iters):
        # stacked -d(proj)/dz: rows interleaved (u, v) per view
        zc_inv = 1.0 / pts[:, 2]
        dproj = np.zeros((m, 2, 3))
        dproj[:, 0, 0] = zc_inv
        dproj[:, 1, 1] = zc_inv
        dproj[:, 0, 2] = -pts[:, 0] * zc_inv**2
        dproj[:, 1, 2] = -pts[:, 1] * zc_inv**2
        jac = -np.einsum("nij,njk,kl->nil", dproj, rel_r, varsigma_inv_jac(z)).reshape(
            2 * m, 3
        )
        step, *_ = np.linalg.lstsq(jac, -res.reshape(-1), rcond=None)
        new_z = z + step
        # halve the step while it leaves the feasible region or raises cost
        ok = False
        for _ in range(8):
            if new_z[2] > 0.0:
                try:
                    new_res, new_pts, new_cost = residual_and_cost(new_z)
                except BadDepthError:
                    new_cost = np.inf
                if new_cost <= cost + 1e-15:
                    ok = True
                    break
            step = 0.5 * step
            new_z = z + step
        if not ok:
            break
        delta_cost = cost - new_cost
        z, res, pts, cost = new_z, new_res, new_pts, new_cost
        if np.linalg.norm(step) < step_tol or delta_cost < cost_tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"track {track.id}: Gauss-Newton did not converge")

    depth = 1.0 / z[2]
    if not (depth_min <= depth <= depth_max):
        raise BadDepthError(
            f"track {track.id}: depth {depth:.2f} m outside ({depth_min}, {depth_max})"
        )
    return AnchoredFeature(anchor_stamp=stamps[0], z=z)
