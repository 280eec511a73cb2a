"""Deterministic synthetic data: trajectories, IMU samples, feature tracks.

Trajectories are sums of sinusoids per axis with analytic derivatives;
orientation is a yaw profile plus a bounded pitch/roll excitation so that
all IMU axes are exercised and the camera extrinsics are observable.

IMU synthesis inverts the system dynamics,

    gyro  = w_body + b_w + n_w,      accel = R^T (dv - g e3) + b_a + n_a,

so integrating the dynamics with these samples reproduces the trajectory;
a closed-loop test pins the gravity sign convention.  All randomness is
seeded; equal seeds give bit-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .filter import FeatureTrack, NoiseSpec
from .lie import InElement, Se3, So3, skew
from .symmetry import GravitySpec

_EXCITE_AMPLITUDE = np.deg2rad(10.0)  # pitch/roll excitation bound


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str
    amplitudes: np.ndarray
    frequencies: np.ndarray
    yaw_rate: float = 0.3
    duration: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("lissajous", "circle", "sinusoidal-yaw"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        amp = np.asarray(self.amplitudes, dtype=float).reshape(3)
        freq = np.asarray(self.frequencies, dtype=float).reshape(3)
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")
        if np.any(freq <= 0.0):
            raise ValueError("frequencies must be positive")
        object.__setattr__(self, "amplitudes", amp)
        object.__setattr__(self, "frequencies", freq)


class _Sinusoid:
    """c0 + c1 t + a sin(2 pi f t + phase), with derivatives."""

    def __init__(self, a=0.0, f=1.0, phase=0.0, c0=0.0, c1=0.0):
        self.a, self.w, self.phase, self.c0, self.c1 = a, 2.0 * np.pi * f, phase, c0, c1

    def val(self, t):
        return self.c0 + self.c1 * t + self.a * np.sin(self.w * t + self.phase)

    def d1(self, t):
        return self.c1 + self.a * self.w * np.cos(self.w * t + self.phase)

    def d2(self, t):
        return -self.a * self.w**2 * np.sin(self.w * t + self.phase)


class Trajectory:
    """Analytic trajectory: position, velocity, acceleration, attitude, rates."""

    def __init__(self, pos: Sequence[_Sinusoid], roll: _Sinusoid, pitch: _Sinusoid, yaw: _Sinusoid, duration: float):
        self._pos = pos
        self._roll = roll
        self._pitch = pitch
        self._yaw = yaw
        self.duration = duration

    def position(self, t):
        return np.stack([s.val(t) for s in self._pos], axis=-1)

    def velocity(self, t):
        return np.stack([s.d1(t) for s in self._pos], axis=-1)

    def acceleration(self, t):
        return np.stack([s.d2(t) for s in self._pos], axis=-1)

    def _angles(self, t):
        return self._roll.val(t), self._pitch.val(t), self._yaw.val(t)

    def rotation(self, t: float) -> So3:
        r, p, y = self._angles(t)
        return So3(_euler_zyx(r, p, y))

    def angular_velocity(self, t):
        """Body angular rates from the Euler-angle kinematics (ZYX)."""
        r, p, _ = self._angles(t)
        dr, dp, dy = self._roll.d1(t), self._pitch.d1(t), self._yaw.d1(t)
        sr, cr = np.sin(r), np.cos(r)
        sp, cp = np.sin(p), np.cos(p)
        wx = dr - dy * sp
        wy = dp * cr + dy * cp * sr
        wz = -dp * sr + dy * cp * cr
        return np.stack([wx, wy, wz], axis=-1)

    def pose(self, t: float) -> Se3:
        return Se3(self.rotation(t), self.position(t))


def _euler_zyx(roll, pitch, yaw) -> np.ndarray:
    sr, cr = np.sin(roll), np.cos(roll)
    sp, cp = np.sin(pitch), np.cos(pitch)
    sy, cy = np.sin(yaw), np.cos(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def gen_trajectory(spec: TrajectorySpec) -> Trajectory:
    rng = np.random.default_rng(spec.seed)
    amp, freq = spec.amplitudes, spec.frequencies
    if spec.kind == "circle":
        # amplitudes[0] is the radius, amplitudes[2] a vertical bob
        ph = np.pi / 2.0
        pos = [
            _Sinusoid(a=amp[0], f=freq[0], phase=ph),
            _Sinusoid(a=amp[0], f=freq[0]),
            _Sinusoid(a=amp[2], f=freq[2]),
        ]
        # yaw follows the tangent of the circle (linear in time)
        yaw = _Sinusoid(c0=np.pi / 2.0, c1=2.0 * np.pi * freq[0])
    else:
        phases = rng.uniform(0.0, 2.0 * np.pi, 3)
        pos = [_Sinusoid(a=amp[i], f=freq[i], phase=phases[i]) for i in range(3)]
        if spec.kind == "sinusoidal-yaw":
            fy = max(freq[0], 0.02)
            yaw = _Sinusoid(a=spec.yaw_rate / (2.0 * np.pi * fy), f=fy)
        else:
            yaw = _Sinusoid(c1=spec.yaw_rate)
    exc_phase = rng.uniform(0.0, 2.0 * np.pi, 2)
    roll = _Sinusoid(a=_EXCITE_AMPLITUDE, f=1.1 * freq[0] + 0.05, phase=exc_phase[0])
    pitch = _Sinusoid(a=_EXCITE_AMPLITUDE, f=0.9 * freq[1] + 0.07, phase=exc_phase[1])
    return Trajectory(pos, roll, pitch, yaw, spec.duration)


@dataclass(frozen=True)
class SensorSpec:
    imu_rate: float
    cam_rate: float
    true_s: Se3
    true_k: InElement
    image_size: tuple
    noise: NoiseSpec
    track_length_max: int = 11

    def __post_init__(self):
        if self.imu_rate <= 0.0 or self.cam_rate <= 0.0:
            raise ValueError("rates must be positive")
        if self.imu_rate < self.cam_rate:
            raise ValueError("imu_rate must be at least cam_rate")


@dataclass
class ImuData:
    stamps: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    bias: np.ndarray  # true bias at each stamp, (n, 6)


@dataclass
class SimOutput:
    gt_stamps: np.ndarray
    gt_rot: np.ndarray  # (n, 3, 3)
    gt_vel: np.ndarray
    gt_pos: np.ndarray
    gt_bias: np.ndarray
    imu: ImuData
    tracks: List[FeatureTrack]
    true_s: Se3
    true_k: InElement
    landmarks: np.ndarray


def synth_imu(
    traj: Trajectory,
    grav: GravitySpec,
    noise: NoiseSpec,
    rate: float,
    bias0=None,
    seed: int = 0,
    duration: Optional[float] = None,
) -> ImuData:
    duration = traj.duration if duration is None else duration
    n = int(round(duration * rate)) + 1
    dt = 1.0 / rate
    stamps = np.arange(n) * dt
    rng = np.random.default_rng([seed, 101])

    omega = traj.angular_velocity(stamps)
    acc_world = traj.acceleration(stamps) - grav.g * grav.e3
    accel = np.empty((n, 3))
    for i, t in enumerate(stamps):
        accel[i] = traj.rotation(t).mat.T @ acc_world[i]

    bias = np.empty((n, 6))
    bias[0] = np.zeros(6) if bias0 is None else np.asarray(bias0, dtype=float)
    walk = np.concatenate([noise.sigma_bw, noise.sigma_ba]) * np.sqrt(dt)
    steps = rng.standard_normal((n - 1, 6)) * walk
    bias[1:] = bias[0] + np.cumsum(steps, axis=0)

    white_w = rng.standard_normal((n, 3)) * (noise.sigma_w / np.sqrt(dt))
    white_a = rng.standard_normal((n, 3)) * (noise.sigma_a / np.sqrt(dt))
    return ImuData(
        stamps=stamps,
        gyro=omega + bias[:, :3] + white_w,
        accel=accel + bias[:, 3:] + white_a,
        bias=bias,
    )


def synth_tracks(
    traj: Trajectory,
    landmarks: np.ndarray,
    sensor: SensorSpec,
    seed: int = 0,
    duration: Optional[float] = None,
) -> List[FeatureTrack]:
    duration = traj.duration if duration is None else duration
    n_cam = int(round(duration * sensor.cam_rate)) + 1
    stamps = np.arange(n_cam) / sensor.cam_rate
    rng = np.random.default_rng([seed, 202])
    landmarks = np.asarray(landmarks, dtype=float).reshape(-1, 3)
    w, h = sensor.image_size
    kmat = sensor.true_k.matrix()
    sigma = sensor.noise.sigma_px

    active = {}  # landmark index -> (track id, [(stamp, uv)])
    done: List[FeatureTrack] = []
    next_id = 0

    def close(idx):
        tid, obs = active.pop(idx)
        done.append(
            FeatureTrack(
                id=tid,
                stamps=np.array([o[0] for o in obs]),
                uv=np.array([o[1] for o in obs]),
            )
        )

    for t in stamps:
        cam = traj.pose(t).compose(sensor.true_s)
        rinv = cam.rot.mat.T
        pts = (landmarks - cam.trans) @ rinv.T
        px_noise = rng.standard_normal((landmarks.shape[0], 2)) * sigma
        for idx in range(landmarks.shape[0]):
            z = pts[idx, 2]
            visible = z > 0.1
            if visible:
                uv = (kmat @ (pts[idx] / z))[:2] + px_noise[idx]
                visible = 0.0 <= uv[0] < w and 0.0 <= uv[1] < h
            if not visible:
                if idx in active:
                    close(idx)
                continue
            if idx in active and len(active[idx][1]) >= sensor.track_length_max:
                close(idx)
            if idx not in active:
                active[idx] = (next_id, [])
                next_id += 1
            active[idx][1].append((t, uv))
    for idx in list(active):
        close(idx)
    done = [tr for tr in done if len(tr) >= 2]
    done.sort(key=lambda tr: tr.id)
    return done


def gen_landmarks(count: int, box, center, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, 303])
    box = np.asarray(box, dtype=float).reshape(3)
    center = np.asarray(center, dtype=float).reshape(3)
    return center + rng.uniform(-0.5, 0.5, (count, 3)) * box


def perturb_calibration(true_s: Se3, angle_deg: float, trans_m: float, seed: int = 0) -> Se3:
    """Compose an error of exactly the requested magnitudes (in exp coordinates)."""
    if angle_deg < 0.0 or trans_m < 0.0:
        raise ValueError("perturbation magnitudes must be nonnegative")
    rng = np.random.default_rng([seed, 404])
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    delta = np.concatenate([np.deg2rad(angle_deg) * axis, trans_m * direction])
    return true_s.compose(Se3.exp(delta))


def simulate(
    traj_spec: TrajectorySpec,
    sensor: SensorSpec,
    grav: GravitySpec,
    landmark_count: int = 200,
    landmark_box=(10.0, 10.0, 4.0),
    bias0=None,
    seed: int = 0,
) -> SimOutput:
    """Full synthetic dataset: ground truth, IMU, tracks, calibration."""
    traj = gen_trajectory(traj_spec)
    imu = synth_imu(traj, grav, sensor.noise, sensor.imu_rate, bias0=bias0, seed=seed)
    center = traj.position(np.linspace(0.0, traj.duration, 50)).mean(axis=0)
    landmarks = gen_landmarks(landmark_count, landmark_box, center, seed=seed)
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


def default_extrinsics() -> Se3:
    """Forward-looking camera: optical axis along body +x, image right = -y."""
    r = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    return Se3(So3(r), np.array([0.08, 0.02, -0.03]))
