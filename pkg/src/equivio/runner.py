"""Experiment runners: single filter run, Monte Carlo consistency, sweeps."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import dataio
from .config import Config
from .filter import (
    CLONE_DIM,
    CORE_DIM,
    FeatureTrack,
    FilterState,
    ImageReport,
    clone,
    make_filter_state,
    msc_update,
    propagate,
    prune_window,
    unobservable_directions,
)
from .lie import InElement, Se3, Se23, So3
from .metrics import (
    RunRecord,
    anees,
    anees_trend_slope,
    ate_rmse,
    classify_convergence,
    extrinsic_errors,
)
from .sim import SensorSpec, SimOutput, TrajectorySpec, gen_landmarks, gen_trajectory, simulate, synth_imu, synth_tracks, perturb_calibration
from .symmetry import GravitySpec, Input, SymElement, SystemState, group_action_phi

POSE_MARGINAL_IDX = np.array([0, 1, 2, 6, 7, 8])


@dataclass
class Dataset:
    imu_stamps: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    tracks: List[FeatureTrack]
    gt_stamps: np.ndarray
    gt_rot: np.ndarray
    gt_pos: np.ndarray
    gt_vel: np.ndarray
    gt_bias: np.ndarray
    s_true: Se3
    k_true: InElement
    s_init: Se3
    k_init: InElement


def dataset_from_sim(out: SimOutput, s_init: Optional[Se3] = None, k_init: Optional[InElement] = None) -> Dataset:
    return Dataset(
        imu_stamps=out.imu.stamps,
        gyro=out.imu.gyro,
        accel=out.imu.accel,
        tracks=out.tracks,
        gt_stamps=out.gt_stamps,
        gt_rot=out.gt_rot,
        gt_pos=out.gt_pos,
        gt_vel=out.gt_vel,
        gt_bias=out.gt_bias,
        s_true=out.true_s,
        k_true=out.true_k,
        s_init=out.true_s if s_init is None else s_init,
        k_init=out.true_k if k_init is None else k_init,
    )


def load_dataset(directory: str) -> Dataset:
    stamps, gyro, accel = dataio.read_imu_csv(os.path.join(directory, "imu.csv"))
    tracks = dataio.read_tracks_csv(os.path.join(directory, "tracks.csv"))
    gt = dataio.read_groundtruth_csv(os.path.join(directory, "groundtruth.csv"))
    s_true, k_true, s_init, k_init = dataio.read_calib(os.path.join(directory, "calib.txt"))
    return Dataset(stamps, gyro, accel, tracks, *gt, s_true, k_true, s_init, k_init)


def transform_dataset(ds: Dataset, h: Se3) -> Dataset:
    """Express ground truth in a new global frame: poses become h^-1 * pose.

    IMU and tracks are body/camera-frame quantities and are unchanged.
    """
    hinv_r = h.rot.mat.T
    rot = np.einsum("ij,njk->nik", hinv_r, ds.gt_rot)
    pos = (ds.gt_pos - h.trans) @ h.rot.mat
    vel = ds.gt_vel @ h.rot.mat
    return replace(ds, gt_rot=rot, gt_pos=pos, gt_vel=vel)


def initial_true_state(ds: Dataset) -> SystemState:
    return SystemState(
        t=Se23(So3(ds.gt_rot[0]), ds.gt_vel[0], ds.gt_pos[0]),
        b=ds.gt_bias[0],
        s=ds.s_true,
        k=ds.k_true,
    )


def initial_estimate(ds: Dataset) -> SystemState:
    """First ground-truth navigation row plus the (possibly wrong) initial calib."""
    return SystemState(
        t=Se23(So3(ds.gt_rot[0]), ds.gt_vel[0], ds.gt_pos[0]),
        b=ds.gt_bias[0],
        s=ds.s_init,
        k=ds.k_init,
    )


def _split_long_tracks(tracks: List[FeatureTrack], max_len: int) -> List[FeatureTrack]:
    out = []
    next_id = 0
    for tr in sorted(tracks, key=lambda t: t.id):
        for start in range(0, len(tr), max_len):
            chunk = slice(start, start + max_len)
            if len(tr.stamps[chunk]) < 2:
                continue
            out.append(FeatureTrack(id=next_id, stamps=tr.stamps[chunk], uv=tr.uv[chunk]))
            next_id += 1
    return out


@dataclass
class RunResult:
    stamps: np.ndarray
    est_rot: np.ndarray
    est_pos: np.ndarray
    est_vel: np.ndarray
    est_bias: np.ndarray
    est_extr: List[Se3]
    est_intr: List[InElement]
    pose_covs: np.ndarray
    innovations: List[np.ndarray]
    reports: List[ImageReport]
    audit_before: np.ndarray  # (n_updates, 4) unobservable-direction variances
    audit_after: np.ndarray
    origin: SystemState
    final_state: FilterState
    counts: Dict[str, int]


def run_filter(
    ds: Dataset,
    cfg: Config,
    init_estimate_state: Optional[SystemState] = None,
    init_error_rng: Optional[np.random.Generator] = None,
    audit_unobservable: bool = False,
) -> RunResult:
    """Stream a dataset through the filter.

    The filter origin is the initial estimate; when ``init_error_rng`` is
    given the origin is displaced from the truth by an error drawn from
    the configured prior (the Monte Carlo consistency protocol).
    """
    grav = cfg.gravity()
    noise = cfg.filter_noise()
    opts = cfg.filter_options()
    std = cfg.init_std_vector()

    est0 = initial_estimate(ds) if init_estimate_state is None else init_estimate_state
    if init_error_rng is not None:
        eps = init_error_rng.standard_normal(CORE_DIM) * std
        est0 = group_action_phi(SymElement.exp(eps).inverse(), est0)
    state = make_filter_state(est0, np.diag(std**2), stamp=float(ds.imu_stamps[0]))

    tracks = _split_long_tracks(ds.tracks, opts.max_clones)
    if tracks:
        cam_stamps = np.unique(np.concatenate([t.stamps for t in tracks]))
    else:
        cam_rate = cfg["sim", "cam_rate"]
        n_cam = int(np.floor((ds.imu_stamps[-1] - ds.imu_stamps[0]) * cam_rate)) + 1
        cam_stamps = ds.imu_stamps[0] + np.arange(n_cam) / cam_rate
    cam_stamps = cam_stamps[
        (cam_stamps >= ds.imu_stamps[0]) & (cam_stamps <= ds.imu_stamps[-1])
    ]
    ends: Dict[float, List[FeatureTrack]] = {}
    for tr in tracks:
        ends.setdefault(float(tr.stamps[-1]), []).append(tr)
    # reference counts keep clones alive while unconsumed tracks observe them
    refcount: Dict[float, int] = {}
    for tr in tracks:
        for s in tr.stamps:
            refcount[float(s)] = refcount.get(float(s), 0) + 1
    live_set = {s for s, c in refcount.items() if c > 0}

    def consume(consumed: List[FeatureTrack]) -> None:
        for tr in consumed:
            for s in tr.stamps:
                s = float(s)
                refcount[s] -= 1
                if refcount[s] == 0:
                    live_set.discard(s)

    results = []
    innovations: List[np.ndarray] = []
    reports: List[ImageReport] = []
    audit_before: List[np.ndarray] = []
    audit_after: List[np.ndarray] = []
    counts = {
        "images": 0,
        "updates": 0,
        "gated": 0,
        "triangulation_failed": 0,
        "skipped_ill_conditioned": 0,
    }

    cam_iter = iter(cam_stamps)
    next_cam = next(cam_iter, None)

    def handle_image(st: FilterState, t: float) -> FilterState:
        nonlocal counts
        st = clone(st, t)
        report = ImageReport(stamp=t)
        if audit_unobservable:
            u_dirs = unobservable_directions(st, grav)
            var_before = np.einsum("ij,jk,ki->i", u_dirs.T, st.cov, u_dirs)
        ready = ends.get(t, [])
        st, report = msc_update(st, ready, opts, report)
        if audit_unobservable and report.update_applied and report.n_rows > 0:
            var_after = np.einsum("ij,jk,ki->i", u_dirs.T, st.cov, u_dirs)
            audit_before.append(var_before)
            audit_after.append(var_after)
        consume(ready)
        st = prune_window(st, opts, live_set | {t})
        xi = st.state_estimate()
        pose = xi.t.proj_second()
        results.append(
            (
                t,
                pose.rot.mat,
                pose.trans,
                xi.t.a,
                xi.b,
                xi.s,
                xi.k,
                st.cov[np.ix_(POSE_MARGINAL_IDX, POSE_MARGINAL_IDX)],
            )
        )
        innovations.append(report.innovation)
        reports.append(report)
        counts["images"] += 1
        counts["updates"] += report.n_updated
        counts["gated"] += report.n_gated
        counts["triangulation_failed"] += report.n_triangulation_failed
        counts["skipped_ill_conditioned"] += int(report.update_skipped_ill_conditioned)
        return st

    eps_t = 1e-9
    if next_cam is not None and abs(state.stamp - next_cam) <= eps_t:
        state = handle_image(state, float(next_cam))
        next_cam = next(cam_iter, None)
    for k in range(len(ds.imu_stamps) - 1):
        ta, tb = float(ds.imu_stamps[k]), float(ds.imu_stamps[k + 1])
        u = Input.from_imu(
            0.5 * (ds.gyro[k] + ds.gyro[k + 1]), 0.5 * (ds.accel[k] + ds.accel[k + 1])
        )
        t = state.stamp
        while next_cam is not None and next_cam <= tb + eps_t:
            tc = float(next_cam)
            if tc - t > eps_t:
                state = propagate(state, u, tc - t, noise, grav)
                t = state.stamp
            state = handle_image(state, tc)
            next_cam = next(cam_iter, None)
        if tb - t > eps_t:
            state = propagate(state, u, tb - t, noise, grav)

    n = len(results)
    return RunResult(
        stamps=np.array([r[0] for r in results]),
        est_rot=np.array([r[1] for r in results]).reshape(n, 3, 3),
        est_pos=np.array([r[2] for r in results]).reshape(n, 3),
        est_vel=np.array([r[3] for r in results]).reshape(n, 3),
        est_bias=np.array([r[4] for r in results]).reshape(n, 6),
        est_extr=[r[5] for r in results],
        est_intr=[r[6] for r in results],
        pose_covs=np.array([r[7] for r in results]).reshape(n, 6, 6),
        innovations=innovations,
        reports=reports,
        audit_before=np.asarray(audit_before).reshape(-1, 4),
        audit_after=np.asarray(audit_after).reshape(-1, 4),
        origin=state.origin,
        final_state=state,
        counts=counts,
    )


def run_record(ds: Dataset, result: RunResult) -> RunRecord:
    """Associate estimates with ground truth (nearest stamp, half camera period)."""
    cam_rate = max(1e-9, np.median(np.diff(result.stamps))) if len(result.stamps) > 1 else 0.1
    max_dt = 0.5 * cam_rate
    true_poses = []
    est_poses = []
    covs = []
    stamps = []
    for i, t in enumerate(result.stamps):
        j = int(np.argmin(np.abs(ds.gt_stamps - t)))
        if abs(ds.gt_stamps[j] - t) > max_dt:
            continue
        stamps.append(t)
        true_poses.append(Se3(So3(ds.gt_rot[j]), ds.gt_pos[j]))
        est_poses.append(Se3(So3(result.est_rot[i]), result.est_pos[i]))
        covs.append(result.pose_covs[i])
    origin_pose = result.origin.t.proj_second()
    return RunRecord(
        stamps=np.asarray(stamps),
        est_poses=est_poses,
        true_poses=true_poses,
        pose_covs=np.asarray(covs).reshape(-1, 6, 6),
        origin_pose=origin_pose,
    )


def build_sim_output(cfg: Config, seed: Optional[int] = None, duration: Optional[float] = None) -> SimOutput:
    seed = cfg.seed if seed is None else seed
    s = cfg.values["sim"]
    traj_spec = TrajectorySpec(
        kind=s["kind"],
        amplitudes=s["amplitudes"],
        frequencies=s["frequencies"],
        yaw_rate=s["yaw_rate"],
        duration=s["duration"] if duration is None else duration,
        seed=cfg.seed,  # geometry tied to the master seed, not the run seed
    )
    sensor = SensorSpec(
        imu_rate=s["imu_rate"],
        cam_rate=s["cam_rate"],
        true_s=cfg.true_extrinsics(),
        true_k=cfg.true_intrinsics(),
        image_size=(s["image_width"], s["image_height"]),
        noise=cfg.sim_noise(),
        track_length_max=s["track_length_max"],
    )
    grav = cfg.gravity()
    traj = gen_trajectory(traj_spec)
    imu = synth_imu(traj, grav, sensor.noise, sensor.imu_rate, seed=seed)
    center = traj.position(np.linspace(0.0, traj.duration, 50)).mean(axis=0)
    landmarks = gen_landmarks(s["landmark_count"], s["landmark_box"], center, seed=cfg.seed)
    tracks = synth_tracks(traj, landmarks, sensor, seed=seed)
    stamps = imu.stamps
    rot = np.empty((stamps.shape[0], 3, 3))
    for i, t in enumerate(stamps):
        rot[i] = traj.rotation(t).mat
    return SimOutput(
        gt_stamps=stamps,
        gt_rot=rot,
        gt_vel=traj.velocity(stamps),
        gt_pos=traj.position(stamps),
        gt_bias=imu.bias,
        imu=imu,
        tracks=tracks,
        true_s=sensor.true_s,
        true_k=sensor.true_k,
        landmarks=landmarks,
    )


def _mc_seed(master: int, run_idx: int) -> int:
    return master * 100003 + 7919 * run_idx + 1


def _mc_single(args) -> Tuple[np.ndarray, List, List, np.ndarray, np.ndarray]:
    cfg, run_idx = args
    seed = _mc_seed(cfg.seed, run_idx)
    out = build_sim_output(cfg, seed=seed)
    ds = dataset_from_sim(out)
    rng = (
        np.random.default_rng([seed, 505])
        if cfg["mc", "sample_initial_error"]
        else None
    )
    result = run_filter(ds, cfg, init_error_rng=rng)
    rec = run_record(ds, result)
    return rec.stamps, rec.est_poses, rec.true_poses, rec.pose_covs, rec.origin_pose


def run_mc(cfg: Config, n_runs: int, threads: int = 1):
    """Monte Carlo consistency experiment; returns (records, anees results)."""
    if n_runs < 2:
        raise ValueError("need at least two Monte Carlo runs")
    jobs = [(cfg, i) for i in range(n_runs)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(_mc_single, jobs))
    else:
        raw = [_mc_single(j) for j in jobs]
    records = [
        RunRecord(stamps=s, est_poses=e, true_poses=t, pose_covs=c, origin_pose=o)
        for s, e, t, c, o in raw
    ]
    stamps, series, avg, skipped = anees(records)
    slope = anees_trend_slope(stamps, series)
    return records, stamps, series, avg, slope, skipped


@dataclass
class SweepCell:
    prior_deg: float
    prior_m: float
    err_deg: float
    err_m: float
    sigma_level: float
    runs: int
    failures: int


def _sweep_single(args) -> bool:
    cfg, err_deg, err_m, prior_deg, prior_m, run_idx = args
    seed = _mc_seed(cfg.seed + 17, run_idx * 1000 + int(err_deg) * 7 + int(prior_deg))
    cfg2 = Config(values={k: dict(v) for k, v in cfg.values.items()})
    cfg2.values["init_std"]["extrinsic_rot"] = max(np.deg2rad(prior_deg), 1e-4)
    cfg2.values["init_std"]["extrinsic_trans"] = max(prior_m, 1e-4)
    out = build_sim_output(cfg2, seed=seed, duration=cfg2["sweep", "duration"])
    s_init = perturb_calibration(out.true_s, err_deg, err_m, seed=seed)
    ds = dataset_from_sim(out, s_init=s_init)
    result = run_filter(ds, cfg2)
    rec = run_record(ds, result)
    return classify_convergence(rec, cfg2["sweep", "pos_threshold_m"])


def run_sweep(cfg: Config, runs_per_cell: Optional[int] = None, threads: int = 1) -> List[SweepCell]:
    """Robustness grid over (injected extrinsic error, prior std) cells."""
    grid = cfg.sweep_grid()
    if runs_per_cell is None:
        runs_per_cell = cfg["sweep", "runs_per_cell"]
    cells = []
    jobs = []
    for err_deg, err_m in grid:
        for prior_deg, prior_m in grid:
            for r in range(runs_per_cell):
                jobs.append((cfg, err_deg, err_m, prior_deg, prior_m, r))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_sweep_single, jobs))
    else:
        outcomes = [_sweep_single(j) for j in jobs]
    idx = 0
    for err_deg, err_m in grid:
        for prior_deg, prior_m in grid:
            conv = outcomes[idx : idx + runs_per_cell]
            idx += runs_per_cell
            cells.append(
                SweepCell(
                    prior_deg=prior_deg,
                    prior_m=prior_m,
                    err_deg=err_deg,
                    err_m=err_m,
                    sigma_level=err_deg / prior_deg if prior_deg > 0 else np.inf,
                    runs=runs_per_cell,
                    failures=sum(1 for c in conv if not c),
                )
            )
    return cells
