"""Dataset and result file formats.

All files are comma-separated with a '#'-prefixed header naming columns
and units; stamps are double seconds; rotations are row-major 3x3 blocks
(quaternion conventions are deliberately avoided).  Writers format floats
with repr precision so that write -> read -> write is byte-identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .filter import FeatureTrack
from .lie import InElement, Se3, So3


class DataError(ValueError):
    """Malformed dataset file; carries path and line context."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_rows(path: str, header: str, rows) -> None:
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _read_rows(path: str, n_cols: int):
    rows = []
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split(",")
                if len(parts) != n_cols:
                    raise DataError(
                        f"{path}:{lineno}: expected {n_cols} columns, got {len(parts)}"
                    )
                try:
                    rows.append([float(p) for p in parts])
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    return np.asarray(rows, dtype=float).reshape(-1, n_cols)


IMU_HEADER = "# t (s), wx, wy, wz (rad/s), ax, ay, az (m/s^2)"


def write_imu_csv(path: str, stamps, gyro, accel) -> None:
    rows = np.column_stack([stamps, gyro, accel])
    _write_rows(path, IMU_HEADER, rows)


def read_imu_csv(path: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = _read_rows(path, 7)
    stamps = data[:, 0]
    if stamps.size > 1 and np.any(np.diff(stamps) <= 0.0):
        raise DataError(f"{path}: stamps must be strictly increasing")
    return stamps, data[:, 1:4], data[:, 4:7]


TRACKS_HEADER = "# t (s), feature_id, u, v (pixels, undistorted)"


def write_tracks_csv(path: str, tracks: List[FeatureTrack]) -> None:
    rows = []
    for tr in tracks:
        for s, uv in zip(tr.stamps, tr.uv):
            rows.append((s, float(tr.id), uv[0], uv[1]))
    rows.sort(key=lambda r: (r[0], r[1]))
    _write_rows(path, TRACKS_HEADER, rows)


def read_tracks_csv(path: str) -> List[FeatureTrack]:
    data = _read_rows(path, 4)
    by_id = {}
    for t, fid, u, v in data:
        by_id.setdefault(int(fid), []).append((t, u, v))
    tracks = []
    for fid in sorted(by_id):
        obs = sorted(by_id[fid])
        try:
            tracks.append(
                FeatureTrack(
                    id=fid,
                    stamps=np.array([o[0] for o in obs]),
                    uv=np.array([[o[1], o[2]] for o in obs]),
                )
            )
        except ValueError as exc:
            raise DataError(f"{path}: feature {fid}: {exc}") from None
    return tracks


GT_HEADER = (
    "# t (s), r11..r33 (row-major rotation), px, py, pz (m), vx, vy, vz (m/s), "
    "bwx, bwy, bwz (rad/s), bax, bay, baz (m/s^2)"
)


def write_groundtruth_csv(path: str, stamps, rot, pos, vel, bias) -> None:
    rows = np.column_stack([stamps, np.reshape(rot, (-1, 9)), pos, vel, bias])
    _write_rows(path, GT_HEADER, rows)


def read_groundtruth_csv(path: str):
    data = _read_rows(path, 22)
    stamps = data[:, 0]
    if stamps.size > 1 and np.any(np.diff(stamps) <= 0.0):
        raise DataError(f"{path}: stamps must be strictly increasing")
    rot = data[:, 1:10].reshape(-1, 3, 3)
    return stamps, rot, data[:, 10:13], data[:, 13:16], data[:, 16:22]


def _se3_to_row(s: Se3) -> List[float]:
    return list(s.rot.mat.reshape(-1)) + list(s.trans)


def _se3_from_row(vals) -> Se3:
    vals = np.asarray(vals, dtype=float)
    return Se3(So3(vals[:9].reshape(3, 3)), vals[9:12])


def write_calib(path: str, s_true: Se3, k_true: InElement, s_init: Se3, k_init: InElement) -> None:
    with open(path, "w") as f:
        f.write("# extrinsics: r11..r33 tx ty tz (row-major, IMU->camera); intrinsics: fx fy cx cy (px)\n")
        for name, s, k in (("true", s_true, k_true), ("init", s_init, k_init)):
            f.write(f"S_{name}: " + " ".join(_fmt(v) for v in _se3_to_row(s)) + "\n")
            f.write(
                f"K_{name}: " + " ".join(_fmt(v) for v in (k.fx, k.fy, k.cx, k.cy)) + "\n"
            )


def read_calib(path: str) -> Tuple[Se3, InElement, Se3, InElement]:
    entries = {}
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if ":" not in line:
                    raise DataError(f"{path}:{lineno}: expected 'name: values'")
                name, _, rest = line.partition(":")
                try:
                    entries[name.strip()] = [float(v) for v in rest.split()]
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    for key, n in (("S_true", 12), ("K_true", 4), ("S_init", 12), ("K_init", 4)):
        if key not in entries:
            raise DataError(f"{path}: missing entry {key}")
        if len(entries[key]) != n:
            raise DataError(f"{path}: {key} needs {n} values")
    return (
        _se3_from_row(entries["S_true"]),
        InElement(*entries["K_true"]),
        _se3_from_row(entries["S_init"]),
        InElement(*entries["K_init"]),
    )


EST_HEADER = (
    "# t (s), r11..r33, px, py, pz (m), vx, vy, vz (m/s), bwx, bwy, bwz, bax, bay, baz, "
    "s_r11..s_r33, s_tx, s_ty, s_tz (m), fx, fy, cx, cy (px), "
    "cov upper-triangular 21 entries of the 6x6 pose marginal (rot, pos)"
)

_TRIU = np.triu_indices(6)


def write_estimate_csv(path: str, rows) -> None:
    """rows: iterables of (t, rot 3x3, pos, vel, bias6, s: Se3, k: InElement, pose_cov 6x6)."""
    out = []
    for t, rot, pos, vel, bias, s, k, cov in rows:
        out.append(
            [t]
            + list(np.reshape(rot, 9))
            + list(pos)
            + list(vel)
            + list(bias)
            + _se3_to_row(s)
            + [k.fx, k.fy, k.cx, k.cy]
            + list(np.asarray(cov)[_TRIU])
        )
    _write_rows(path, EST_HEADER, out)


def read_estimate_csv(path: str):
    data = _read_rows(path, 59)
    stamps = data[:, 0]
    rot = data[:, 1:10].reshape(-1, 3, 3)
    pos = data[:, 10:13]
    vel = data[:, 13:16]
    bias = data[:, 16:22]
    extr = [_se3_from_row(r) for r in data[:, 22:34]]
    intr = [InElement(*r) for r in data[:, 34:38]]
    covs = np.empty((data.shape[0], 6, 6))
    for i, packed in enumerate(data[:, 38:59]):
        m = np.zeros((6, 6))
        m[_TRIU] = packed
        covs[i] = m + m.T - np.diag(np.diag(m))
    return stamps, rot, pos, vel, bias, extr, intr, covs


def write_dataset(
    out_dir: str,
    sim_out,
    s_init: Optional[Se3] = None,
    k_init: Optional[InElement] = None,
) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_imu_csv(
        os.path.join(out_dir, "imu.csv"), sim_out.imu.stamps, sim_out.imu.gyro, sim_out.imu.accel
    )
    write_tracks_csv(os.path.join(out_dir, "tracks.csv"), sim_out.tracks)
    write_groundtruth_csv(
        os.path.join(out_dir, "groundtruth.csv"),
        sim_out.gt_stamps,
        sim_out.gt_rot,
        sim_out.gt_pos,
        sim_out.gt_vel,
        sim_out.gt_bias,
    )
    write_calib(
        os.path.join(out_dir, "calib.txt"),
        sim_out.true_s,
        sim_out.true_k,
        sim_out.true_s if s_init is None else s_init,
        sim_out.true_k if k_init is None else k_init,
    )
