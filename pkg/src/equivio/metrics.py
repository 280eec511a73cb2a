"""Evaluation metrics: equivariant pose error, ANEES, ATE, convergence."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .lie import Se3, So3


@dataclass
class RunRecord:
    """Stamp-aligned estimate/truth pairs for one run.

    pose_covs are 6x6 marginals over the (rotation, position) components
    of the error coordinates.
    """

    stamps: np.ndarray
    est_poses: List[Se3]
    true_poses: List[Se3]
    pose_covs: np.ndarray  # (n, 6, 6)
    origin_pose: Se3

    def __post_init__(self):
        n = len(self.stamps)
        if not (len(self.est_poses) == len(self.true_poses) == n and self.pose_covs.shape[0] == n):
            raise ValueError("RunRecord fields must have matching lengths")


def associate_stamps(est_stamps, true_stamps, max_dt: float) -> List[Tuple[int, int]]:
    """Nearest-neighbor stamp association within max_dt; unmatched dropped."""
    est_stamps = np.asarray(est_stamps, dtype=float)
    true_stamps = np.asarray(true_stamps, dtype=float)
    pairs = []
    for i, t in enumerate(est_stamps):
        j = int(np.argmin(np.abs(true_stamps - t)))
        if abs(true_stamps[j] - t) <= max_dt:
            pairs.append((i, j))
    return pairs


def equivariant_pose_error(truth: Se3, est: Se3, origin: Se3) -> np.ndarray:
    """log(P0^-1 P Phat^-1 P0): the pose part of the filter error coordinates.

    Left-multiplying truth and estimate by the same rigid transform leaves
    this error unchanged.
    """
    rel = origin.inverse().compose(truth).compose(est.inverse()).compose(origin)
    return rel.log()


def anees(runs: List[RunRecord]) -> Tuple[np.ndarray, np.ndarray, float, int]:
    """Average normalized estimation error squared over Monte Carlo runs.

    Returns (stamps, per-stamp series, time-averaged value, skipped count).
    Stamps with a singular covariance in any run are skipped and counted.
    """
    if not runs:
        raise ValueError("need at least one run")
    n_stamps = min(len(r.stamps) for r in runs)
    dim = 6
    series = np.full(n_stamps, np.nan)
    skipped = 0
    for k in range(n_stamps):
        total = 0.0
        ok = True
        for r in runs:
            eps = equivariant_pose_error(r.true_poses[k], r.est_poses[k], r.origin_pose)
            cov = r.pose_covs[k]
            if np.linalg.cond(cov) > 1e12:
                ok = False
                break
            total += float(eps @ np.linalg.solve(cov, eps))
        if not ok:
            skipped += 1
            continue
        series[k] = total / (len(runs) * dim)
    valid = ~np.isnan(series)
    avg = float(np.mean(series[valid])) if np.any(valid) else np.nan
    return runs[0].stamps[:n_stamps], series, avg, skipped


def anees_trend_slope(stamps, series) -> float:
    """Least-squares slope of the ANEES series, per second."""
    stamps = np.asarray(stamps, dtype=float)
    series = np.asarray(series, dtype=float)
    m = np.isfinite(series)
    if np.sum(m) < 2:
        return np.nan
    coeffs = np.polyfit(stamps[m], series[m], 1)
    return float(coeffs[0])


def ate_rmse(run: RunRecord) -> Tuple[float, float]:
    """Attitude (rad) and position (m) RMSE after initial-state alignment.

    The estimate is left-aligned by the first-stamp relative pose rather
    than a trajectory-wide optimal fit.
    """
    if len(run.stamps) < 2:
        raise ValueError("need at least two aligned stamps")
    align = run.true_poses[0].compose(run.est_poses[0].inverse())
    att_sq = 0.0
    pos_sq = 0.0
    for est, truth in zip(run.est_poses, run.true_poses):
        aligned = align.compose(est)
        r_err = So3(truth.rot.mat.T @ aligned.rot.mat)
        att_sq += float(np.sum(r_err.log() ** 2))
        pos_sq += float(np.sum((aligned.trans - truth.trans) ** 2))
    n = len(run.stamps)
    return float(np.sqrt(att_sq / n)), float(np.sqrt(pos_sq / n))


def classify_convergence(run: RunRecord, pos_threshold_m: float = 1.0) -> bool:
    """True when every aligned position error stays under the threshold."""
    align = run.true_poses[0].compose(run.est_poses[0].inverse())
    for est, truth in zip(run.est_poses, run.true_poses):
        err = np.linalg.norm(align.compose(est).trans - truth.trans)
        if err > pos_threshold_m:
            return False
    return True


def extrinsic_errors(est_s: Se3, true_s: Se3) -> Tuple[float, float]:
    """(rotation angle rad, translation m) of the relative extrinsic pose."""
    rel = true_s.inverse().compose(est_s)
    twist = rel.log()
    return float(np.linalg.norm(twist[:3])), float(np.linalg.norm(rel.trans))
