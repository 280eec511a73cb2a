"""Flat key = value configuration with sections; unknown keys are errors."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .filter import FilterOptions, NoiseSpec
from .lie import InElement, Se3, So3
from .symmetry import GravitySpec


class ConfigError(ValueError):
    """Invalid configuration; message names the key and expected units."""


def _parse_float(s: str) -> float:
    return float(s)


def _parse_int(s: str) -> int:
    return int(s)


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_vec(n):
    def parse(s: str):
        vals = [float(v) for v in s.split()]
        if len(vals) != n:
            raise ValueError(f"expected {n} space-separated numbers")
        return np.asarray(vals)

    return parse


def _parse_str(s: str) -> str:
    return s.strip()


# section -> key -> (parser, default, "unit / meaning")
_SCHEMA = {
    "general": {
        "seed": (_parse_int, 42, "master seed, integer"),
    },
    "gravity": {
        "g": (_parse_float, 9.81, "gravity magnitude, m/s^2"),
        "e3": (_parse_vec(3), np.array([0.0, 0.0, -1.0]), "unit gravity direction, global frame"),
    },
    "noise": {
        "sigma_w": (_parse_float, 2e-3, "gyro white noise density, rad/s/sqrt(Hz)"),
        "sigma_a": (_parse_float, 2e-2, "accel white noise density, m/s^2/sqrt(Hz)"),
        "sigma_bw": (_parse_float, 1e-4, "gyro bias random walk, rad/s^2/sqrt(Hz)"),
        "sigma_ba": (_parse_float, 1e-3, "accel bias random walk, m/s^3/sqrt(Hz)"),
        "sigma_px": (_parse_float, 1.0, "pixel measurement std, px"),
    },
    "init_std": {
        "attitude": (_parse_float, 2e-2, "initial attitude std, rad"),
        "velocity": (_parse_float, 5e-2, "initial velocity std, m/s"),
        "position": (_parse_float, 2e-2, "initial position std, m"),
        "gyro_bias": (_parse_float, 5e-3, "initial gyro bias std, rad/s"),
        "accel_bias": (_parse_float, 2e-2, "initial accel bias std, m/s^2"),
        "extrinsic_rot": (_parse_float, 1e-2, "initial extrinsic rotation std, rad"),
        "extrinsic_trans": (_parse_float, 1e-2, "initial extrinsic translation std, m"),
        "intrinsics": (_parse_float, 2e-3, "initial intrinsics std, log-focal / center-over-focal"),
    },
    "filter": {
        "q_scale": (_parse_float, 1.0, "process-noise density multiplier (filter side)"),
        "max_clones": (_parse_int, 11, "sliding window size, clones"),
        "min_track_obs": (_parse_int, 3, "observations required to triangulate"),
        "min_parallax_deg": (_parse_float, 1.0, "triangulation parallax gate, degrees"),
        "gn_max_iters": (_parse_int, 20, "Gauss-Newton iteration cap"),
        "depth_min": (_parse_float, 0.1, "triangulated depth lower bound, m"),
        "depth_max": (_parse_float, 200.0, "triangulated depth upper bound, m"),
        "gate_quantile": (_parse_float, 0.95, "chi-square gate quantile"),
        "qr_compression": (_parse_bool, True, "compress stacked rows before the update"),
    },
    "sim": {
        "noise_scale": (_parse_float, 1.0, "multiplier on all simulated noise (0 = clean data)"),
        "kind": (_parse_str, "lissajous", "trajectory kind: lissajous | circle | sinusoidal-yaw"),
        "amplitudes": (_parse_vec(3), np.array([1.5, 1.2, 0.4]), "trajectory amplitudes, m"),
        "frequencies": (_parse_vec(3), np.array([0.25, 0.2, 0.35]), "trajectory frequencies, Hz"),
        "yaw_rate": (_parse_float, 0.3, "yaw rate, rad/s"),
        "duration": (_parse_float, 60.0, "trajectory duration, s"),
        "imu_rate": (_parse_float, 200.0, "IMU rate, Hz"),
        "cam_rate": (_parse_float, 10.0, "camera rate, Hz"),
        "landmark_count": (_parse_int, 200, "number of landmarks"),
        "landmark_box": (_parse_vec(3), np.array([10.0, 10.0, 4.0]), "landmark box extents, m"),
        "track_length_max": (_parse_int, 11, "maximum track length, frames"),
        "image_width": (_parse_int, 640, "image width, px"),
        "image_height": (_parse_int, 480, "image height, px"),
        "fx": (_parse_float, 400.0, "true focal x, px"),
        "fy": (_parse_float, 400.0, "true focal y, px"),
        "cx": (_parse_float, 320.0, "true center x, px"),
        "cy": (_parse_float, 240.0, "true center y, px"),
        "extrinsic_rotvec": (
            _parse_vec(3),
            np.array([-1.2091995761561452, 1.2091995761561452, -1.2091995761561452]),
            "true extrinsic rotation, axis-angle rad",
        ),
        "extrinsic_trans": (
            _parse_vec(3),
            np.array([0.08, 0.02, -0.03]),
            "true extrinsic translation, m",
        ),
    },
    "mc": {
        "runs": (_parse_int, 25, "Monte Carlo runs"),
        "sample_initial_error": (_parse_bool, True, "draw the initial state error from the prior"),
    },
    "sweep": {
        "angles_deg": (_parse_str, "15 30 45 60 75 90", "injected extrinsic rotation errors, deg"),
        "trans_m": (_parse_str, "0.05 0.1 0.15 0.2 0.25 0.3", "injected extrinsic translation errors, m"),
        "runs_per_cell": (_parse_int, 6, "runs per (prior, error) cell"),
        "pos_threshold_m": (_parse_float, 1.0, "divergence position threshold, m"),
        "duration": (_parse_float, 30.0, "sweep run duration, s"),
    },
}


@dataclass
class Config:
    values: Dict[str, Dict[str, object]]

    def __getitem__(self, key: Tuple[str, str]):
        section, name = key
        return self.values[section][name]

    @property
    def seed(self) -> int:
        return self.values["general"]["seed"]

    def gravity(self) -> GravitySpec:
        return GravitySpec(g=self["gravity", "g"], e3=self["gravity", "e3"])

    def noise(self) -> NoiseSpec:
        n = self.values["noise"]
        return NoiseSpec(n["sigma_w"], n["sigma_a"], n["sigma_bw"], n["sigma_ba"], n["sigma_px"])

    def filter_noise(self) -> NoiseSpec:
        """Densities the filter uses for Q (q_scale applies here, not to the data)."""
        n = self.values["noise"]
        s = self.values["filter"]["q_scale"]
        return NoiseSpec(
            s * n["sigma_w"], s * n["sigma_a"], s * n["sigma_bw"], s * n["sigma_ba"], n["sigma_px"]
        )

    def sim_noise(self) -> NoiseSpec:
        """Densities used when synthesizing data (noise_scale applies here)."""
        n = self.values["noise"]
        s = self.values["sim"]["noise_scale"]
        return NoiseSpec(
            s * n["sigma_w"],
            s * n["sigma_a"],
            s * n["sigma_bw"],
            s * n["sigma_ba"],
            max(s * n["sigma_px"], 1e-12),
        )

    def filter_options(self) -> FilterOptions:
        f = self.values["filter"]
        return FilterOptions(
            max_clones=f["max_clones"],
            min_track_obs=f["min_track_obs"],
            min_parallax_deg=f["min_parallax_deg"],
            gn_max_iters=f["gn_max_iters"],
            depth_min=f["depth_min"],
            depth_max=f["depth_max"],
            gate_quantile=f["gate_quantile"],
            sigma_px=self["noise", "sigma_px"],
            use_qr_compression=f["qr_compression"],
        )

    def init_std_vector(self) -> np.ndarray:
        """Per-coordinate initial std devs in the 25-dim error ordering."""
        s = self.values["init_std"]
        return np.concatenate(
            [
                np.full(3, s["attitude"]),
                np.full(3, s["velocity"]),
                np.full(3, s["position"]),
                np.full(3, s["gyro_bias"]),
                np.full(3, s["accel_bias"]),
                np.full(3, s["extrinsic_rot"]),
                np.full(3, s["extrinsic_trans"]),
                np.full(4, s["intrinsics"]),
            ]
        )

    def true_extrinsics(self) -> Se3:
        return Se3(So3.exp(self["sim", "extrinsic_rotvec"]), self["sim", "extrinsic_trans"])

    def true_intrinsics(self) -> InElement:
        s = self.values["sim"]
        return InElement(s["fx"], s["fy"], s["cx"], s["cy"])

    def sweep_grid(self) -> list:
        angles = [float(v) for v in str(self["sweep", "angles_deg"]).split()]
        trans = [float(v) for v in str(self["sweep", "trans_m"]).split()]
        if len(angles) != len(trans):
            raise ConfigError("sweep.angles_deg and sweep.trans_m must have equal length")
        return list(zip(angles, trans))


def default_config() -> Config:
    values = {
        sec: {key: spec[1] for key, spec in keys.items()} for sec, keys in _SCHEMA.items()
    }
    return Config(values=values)


def parse_config(text: str, path: str = "<config>") -> Config:
    parser = configparser.ConfigParser(
        inline_comment_prefixes=("#",), interpolation=None, delimiters=("=",)
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = default_config()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            parse, _, unit = _SCHEMA[section][key]
            try:
                cfg.values[section][key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"{path}: [{section}] {key} = {raw!r}: {exc} (expected: {unit})"
                ) from None
    _validate(cfg, path)
    return cfg


def load_config(path: str) -> Config:
    try:
        with open(path) as f:
            return parse_config(f.read(), path)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _validate(cfg: Config, path: str) -> None:
    for key, val in cfg.values["init_std"].items():
        if val <= 0.0:
            raise ConfigError(f"{path}: init_std.{key} must be positive")
    for key in ("sigma_px",):
        if cfg.values["noise"][key] <= 0.0:
            raise ConfigError(f"{path}: noise.{key} must be positive (pixels)")
    for key in ("sigma_w", "sigma_a", "sigma_bw", "sigma_ba"):
        if cfg.values["noise"][key] < 0.0:
            raise ConfigError(f"{path}: noise.{key} must be nonnegative")
    if cfg["sim", "imu_rate"] < cfg["sim", "cam_rate"]:
        raise ConfigError(f"{path}: sim.imu_rate must be at least sim.cam_rate (Hz)")
    if not 0.5 < cfg["filter", "gate_quantile"] < 1.0:
        raise ConfigError(f"{path}: filter.gate_quantile must lie in (0.5, 1)")


def dump_config(cfg: Config) -> str:
    out = io.StringIO()
    for section, keys in _SCHEMA.items():
        out.write(f"[{section}]\n")
        for key, (_, _, unit) in keys.items():
            val = cfg.values[section][key]
            if isinstance(val, np.ndarray):
                sval = " ".join(format(float(v), ".17g") for v in val)
            elif isinstance(val, bool):
                sval = "true" if val else "false"
            elif isinstance(val, float):
                sval = format(val, ".17g")
            else:
                sval = str(val)
            out.write(f"{key} = {sval}  # {unit}\n")
        out.write("\n")
    return out.getvalue()
