"""Deterministic simulation: smooth ground-truth trajectories with analytic
derivatives, plus noisy IMU / feature / UWB measurement streams.

IMU samples are stamped on the left edge of their sampling interval but carry
the mid-interval truth values, matching what an integrating gyro/accelerometer
reports and keeping the zero-order-hold round trip tight.  All randomness
flows from one master seed through per-stream child seeds, so adding or
re-ordering streams never perturbs the others.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .mathx import rot_to_quat
from .propagation import ImuSample, NoiseParams
from .ranging import EchoMeasurement, RangeMeasurement, UwbParams
from .vision import CameraExtrinsics

DEFAULT_ANCHORS = np.array([
    [7.0, 6.0, 1.0],
    [-6.0, 6.0, 2.2],
    [0.5, -7.0, 3.0],
])

# camera optical axis along body +x (forward), y right, z down
DEFAULT_CAM_ROT = np.array([
    [0.0, -1.0, 0.0],
    [0.0, 0.0, -1.0],
    [1.0, 0.0, 0.0],
])


@dataclass
class SimConfig:
    seed: int = 1
    duration: float = 60.0
    trajectory: str = "figure8"      # figure8 | circle | waypoints
    imu_rate: float = 200.0
    cam_rate: float = 10.0
    uwb_rate: float = 60.0
    anchors: np.ndarray = field(default_factory=lambda: DEFAULT_ANCHORS.copy())
    n_features: int = 180
    max_feats: int = 180
    sigma_px: float = 0.002
    noise: NoiseParams = field(default_factory=NoiseParams)
    uwb: UwbParams = field(default_factory=lambda: UwbParams(
        lever_arm=np.array([0.05, 0.03, 0.10]), d_bias=-0.75,
        sigma_r=0.15, sigma_e=0.15, sync_threshold=0.05))
    extrinsics: CameraExtrinsics = field(default_factory=lambda: CameraExtrinsics(
        R=DEFAULT_CAM_ROT.copy(), p=np.array([0.01, 0.02, -0.03])))
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 9.81]))
    noise_scale: float = 1.0
    fov_half_tan: float = 1.0
    depth_min: float = 0.4
    depth_max: float = 30.0
    feature_pad_xy: float = 5.0
    feature_pad_z: float = 3.0

    def __post_init__(self):
        if self.imu_rate <= 0 or self.cam_rate <= 0 or self.uwb_rate <= 0:
            raise ValueError("sample rates must be positive")
        self.anchors = np.asarray(self.anchors, dtype=float)
        self.gravity = np.asarray(self.gravity, dtype=float)

    def to_dict(self):
        return {
            "seed": self.seed, "duration": self.duration,
            "trajectory": self.trajectory, "imu_rate": self.imu_rate,
            "cam_rate": self.cam_rate, "uwb_rate": self.uwb_rate,
            "anchors": self.anchors.tolist(),
            "n_features": self.n_features, "max_feats": self.max_feats,
            "sigma_px": self.sigma_px,
            "noise": [self.noise.sigma_g, self.noise.sigma_wg,
                      self.noise.sigma_a, self.noise.sigma_wa],
            "uwb": [self.uwb.lever_arm.tolist(), self.uwb.d_bias,
                    self.uwb.sigma_r, self.uwb.sigma_e, self.uwb.sync_threshold],
            "extrinsics": [self.extrinsics.R.tolist(), self.extrinsics.p.tolist()],
            "gravity": self.gravity.tolist(),
            "noise_scale": self.noise_scale,
            "fov_half_tan": self.fov_half_tan,
            "depth_min": self.depth_min, "depth_max": self.depth_max,
            "feature_pad_xy": self.feature_pad_xy,
            "feature_pad_z": self.feature_pad_z,
        }


def config_hash(config):
    payload = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha1(payload.encode()).hexdigest()[:12]


class GroundTruth:
    """Continuous-time truth: twice-differentiable position and a smooth
    attitude defined by velocity-heading yaw plus small roll/pitch sinusoids.

    ``rotation(t)`` returns the global-to-IMU matrix; ``omega(t)`` the body
    angular rate consistent with it; ``acceleration(t)`` the global linear
    acceleration of the IMU.
    """

    ROLL_AMP = 0.12
    PITCH_AMP = 0.10
    ROLL_FREQ = 2.0 * np.pi * 0.23
    PITCH_FREQ = 2.0 * np.pi * 0.31

    def __init__(self, pos_fn, anchors, features, gravity):
        # pos_fn(t, order) -> position derivative of given order, vectorized in t
        self._pos = pos_fn
        self.anchors = np.asarray(anchors, dtype=float)
        self.features = np.asarray(features, dtype=float)
        self.gravity = np.asarray(gravity, dtype=float)

    def position(self, t):
        return self._pos(t, 0)

    def velocity(self, t):
        return self._pos(t, 1)

    def acceleration(self, t):
        return self._pos(t, 2)

    def _angles(self, t):
        v = self.velocity(t)
        a = self.acceleration(t)
        yaw = np.arctan2(v[1], v[0])
        sq = v[0] * v[0] + v[1] * v[1]
        yaw_rate = (v[0] * a[1] - v[1] * a[0]) / max(sq, 1e-12)
        roll = self.ROLL_AMP * np.sin(self.ROLL_FREQ * t)
        roll_rate = self.ROLL_AMP * self.ROLL_FREQ * np.cos(self.ROLL_FREQ * t)
        pitch = self.PITCH_AMP * np.sin(self.PITCH_FREQ * t + 0.7)
        pitch_rate = self.PITCH_AMP * self.PITCH_FREQ * np.cos(self.PITCH_FREQ * t + 0.7)
        return (roll, pitch, yaw), (roll_rate, pitch_rate, yaw_rate)

    def rotation(self, t):
        (r, p, y), _ = self._angles(t)
        cr, sr = np.cos(r), np.sin(r)
        cp, sp = np.cos(p), np.sin(p)
        cy, sy = np.cos(y), np.sin(y)
        # body-to-global Rz(yaw) Ry(pitch) Rx(roll)
        r_gb = np.array([
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ])
        return r_gb.T

    def omega(self, t):
        (r, p, _), (rd, pd, yd) = self._angles(t)
        cr, sr = np.cos(r), np.sin(r)
        cp, sp = np.cos(p), np.sin(p)
        # ZYX Euler kinematics: body rate from Euler angle rates
        return np.array([
            rd - yd * sp,
            pd * cr + yd * cp * sr,
            -pd * sr + yd * cp * cr,
        ])


def _figure8_pos(duration):
    # lemniscate with sinusoidal height, two cycles over the run
    om = 2.0 * np.pi / (duration / 2.0)
    ax, ay, az = 5.0, 3.0, 0.8

    def pos(t, order):
        u = om * t
        if order == 0:
            return np.array([ax * np.sin(u), ay * np.sin(2 * u),
                             1.2 + az * np.sin(u + 0.4)])
        if order == 1:
            return np.array([ax * om * np.cos(u), 2 * ay * om * np.cos(2 * u),
                             az * om * np.cos(u + 0.4)])
        if order == 2:
            return np.array([-ax * om ** 2 * np.sin(u),
                             -4 * ay * om ** 2 * np.sin(2 * u),
                             -az * om ** 2 * np.sin(u + 0.4)])
        raise ValueError(order)

    return pos


def _circle_pos(duration):
    om = 2.0 * np.pi / (duration / 2.0)
    radius, az = 4.0, 0.7

    def pos(t, order):
        u = om * t
        if order == 0:
            return np.array([radius * np.cos(u), radius * np.sin(u),
                             1.5 + az * np.sin(2 * u)])
        if order == 1:
            return np.array([-radius * om * np.sin(u), radius * om * np.cos(u),
                             2 * az * om * np.cos(2 * u)])
        if order == 2:
            return np.array([-radius * om ** 2 * np.cos(u),
                             -radius * om ** 2 * np.sin(u),
                             -4 * az * om ** 2 * np.sin(2 * u)])
        raise ValueError(order)

    return pos


def _waypoint_pos(duration, seed):
    # perturbed loop: two laps around a jittered circle, periodic cubic spline
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11CE]))
    n_wp = 12
    angles = np.linspace(0.0, 2.0 * np.pi, n_wp, endpoint=False)
    radii = 4.5 + rng.uniform(-1.0, 1.0, n_wp)
    zs = 1.5 + rng.uniform(-0.6, 0.6, n_wp)
    pts = np.stack([radii * np.cos(angles), radii * np.sin(angles), zs], axis=1)
    pts = np.vstack([pts, pts[0]])
    lap = duration / 2.0
    ts = np.linspace(0.0, lap, n_wp + 1)
    spline = CubicSpline(ts, pts, bc_type="periodic")

    def pos(t, order):
        return spline(np.mod(t, lap), order)

    return pos


def gen_trajectory(config):
    """GroundTruth for the configured trajectory, anchors and feature cloud."""
    if config.trajectory == "figure8":
        pos = _figure8_pos(config.duration)
    elif config.trajectory == "circle":
        pos = _circle_pos(config.duration)
    elif config.trajectory == "waypoints":
        pos = _waypoint_pos(config.duration, config.seed)
    else:
        raise ValueError(f"unknown trajectory {config.trajectory!r}")

    # feature cloud uniform in the padded trajectory bounding box
    probe = np.array([pos(t, 0) for t in np.linspace(0, config.duration, 200)])
    lo = probe.min(axis=0) - np.array([config.feature_pad_xy,
                                       config.feature_pad_xy, config.feature_pad_z])
    hi = probe.max(axis=0) + np.array([config.feature_pad_xy,
                                       config.feature_pad_xy, config.feature_pad_z])
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xFEA7]))
    features = rng.uniform(lo, hi, size=(config.n_features, 3))
    return GroundTruth(pos, config.anchors, features, config.gravity)


@dataclass
class SimData:
    config: SimConfig
    gt: GroundTruth
    imu: list
    features_by_stamp: dict       # stamp -> list[(feature_id, uv ndarray)]
    ranges: list
    echoes: list
    cam_stamps: np.ndarray


def _stream_rngs(config):
    children = np.random.SeedSequence(config.seed).spawn(4)
    return {name: np.random.default_rng(seq)
            for name, seq in zip(("imu", "features", "uwb", "init"), children)}


def sample_imu(gt, config, rng=None):
    """IMU stream with bias random walks and discretized white noise."""
    if rng is None:
        rng = _stream_rngs(config)["imu"]
    dt = 1.0 / config.imu_rate
    n = int(round(config.duration * config.imu_rate)) + 1
    scale = config.noise_scale
    sg = config.noise.sigma_g / np.sqrt(dt) * scale
    sa = config.noise.sigma_a / np.sqrt(dt) * scale
    swg = config.noise.sigma_wg * np.sqrt(dt) * scale
    swa = config.noise.sigma_wa * np.sqrt(dt) * scale

    bg = np.zeros(3)
    ba = np.zeros(3)
    samples = []
    for k in range(n):
        t = k * dt
        tm = min(t + 0.5 * dt, config.duration)
        omega = gt.omega(tm) + bg + sg * rng.standard_normal(3)
        accel = (gt.rotation(tm) @ (gt.acceleration(tm) + gt.gravity)
                 + ba + sa * rng.standard_normal(3))
        samples.append(ImuSample(t, omega, accel))
        bg = bg + swg * rng.standard_normal(3)
        ba = ba + swa * rng.standard_normal(3)
    return samples


def visible_features(gt, config, t):
    """Ids and normalized projections of features in view at time t (no noise)."""
    R = gt.rotation(t)
    p = gt.position(t)
    ex = config.extrinsics
    cam = (ex.R @ (R @ (gt.features - p).T)).T + ex.p
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam[:, 0] / z
        v = cam[:, 1] / z
    ok = ((z > config.depth_min) & (z < config.depth_max)
          & (np.abs(u) <= config.fov_half_tan) & (np.abs(v) <= config.fov_half_tan))
    ids = np.nonzero(ok)[0]
    if len(ids) > config.max_feats:
        ids = ids[:config.max_feats]
    return ids, np.stack([u[ids], v[ids]], axis=1)


def sample_features(gt, config, rng=None):
    """Per-frame feature observations with pixel noise; returns dict and stamps."""
    if rng is None:
        rng = _stream_rngs(config)["features"]
    n = int(round(config.duration * config.cam_rate)) + 1
    stamps = np.array([k / config.cam_rate for k in range(n)])
    out = {}
    s_px = config.sigma_px * config.noise_scale
    for t in stamps:
        ids, uv = visible_features(gt, config, t)
        uv = uv + s_px * rng.standard_normal(uv.shape)
        out[t] = [(int(i), uv[k]) for k, i in enumerate(ids)]
    return out, stamps


def sample_uwb(gt, config, rng=None):
    """Robot-anchor ranges and anchor-anchor echoes at the UWB rate."""
    if rng is None:
        rng = _stream_rngs(config)["uwb"]
    n = int(round(config.duration * config.uwb_rate)) + 1
    uwb = config.uwb
    scale = config.noise_scale
    ranges, echoes = [], []
    n_anchor = len(gt.anchors)
    pairs = [(i, j) for i in range(n_anchor) for j in range(i + 1, n_anchor)]
    echo_true = {(i, j): float(np.linalg.norm(gt.anchors[i] - gt.anchors[j]))
                 for i, j in pairs}
    for k in range(n):
        t = k / config.uwb_rate
        R = gt.rotation(t)
        node = gt.position(t) + R.T @ uwb.lever_arm
        for a in range(n_anchor):
            d = (np.linalg.norm(node - gt.anchors[a]) + uwb.d_bias
                 + uwb.sigma_r * scale * rng.standard_normal())
            ranges.append(RangeMeasurement(t, a, max(d, 1e-6)))
        for i, j in pairs:
            d = (echo_true[(i, j)] + uwb.d_bias
                 + uwb.sigma_e * scale * rng.standard_normal())
            echoes.append(EchoMeasurement(t, i, j, max(d, 1e-6)))
    return ranges, echoes


def simulate(config):
    """All measurement streams for one seed, deterministically."""
    gt = gen_trajectory(config)
    rngs = _stream_rngs(config)
    imu = sample_imu(gt, config, rngs["imu"])
    feats, cam_stamps = sample_features(gt, config, rngs["features"])
    ranges, echoes = sample_uwb(gt, config, rngs["uwb"])
    return SimData(config, gt, imu, feats, ranges, echoes, cam_stamps)


# ----- stream files ---------------------------------------------------------

FMT = "%.17g"


def _write_stream(path, kind, chash, header, rows):
    with open(path, "w") as f:
        f.write(f"# stream={kind} config={chash}\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(FMT % x for x in row) + "\n")


def write_streams(data, out_dir):
    """One CSV per stream, each tagged with the stream type and config hash."""
    os.makedirs(out_dir, exist_ok=True)
    chash = config_hash(data.config)
    _write_stream(
        os.path.join(out_dir, "imu.csv"), "imu", chash,
        ["stamp", "wx", "wy", "wz", "ax", "ay", "az"],
        [[s.stamp, *s.omega_m, *s.accel_m] for s in data.imu])
    feat_rows = []
    for t in data.cam_stamps:
        for fid, uv in data.features_by_stamp[t]:
            feat_rows.append([t, fid, uv[0], uv[1]])
    _write_stream(os.path.join(out_dir, "features.csv"), "feature", chash,
                  ["stamp", "feat_id", "u", "v"], feat_rows)
    _write_stream(os.path.join(out_dir, "range.csv"), "range", chash,
                  ["stamp", "anchor_id", "d"],
                  [[m.stamp, m.anchor_id, m.d] for m in data.ranges])
    _write_stream(os.path.join(out_dir, "echo.csv"), "echo", chash,
                  ["stamp", "anchor_i", "anchor_j", "d"],
                  [[m.stamp, m.anchor_i, m.anchor_j, m.d] for m in data.echoes])
    gt_rows = []
    for t in data.cam_stamps:
        q = rot_to_quat(data.gt.rotation(t))
        p = data.gt.position(t)
        v = data.gt.velocity(t)
        gt_rows.append([t, *q, *p, *v])
    _write_stream(os.path.join(out_dir, "groundtruth.csv"), "groundtruth", chash,
                  ["stamp", "qx", "qy", "qz", "qw", "px", "py", "pz",
                   "vx", "vy", "vz"], gt_rows)
    with open(os.path.join(out_dir, "sim_config.json"), "w") as f:
        json.dump(data.config.to_dict(), f, indent=2, sort_keys=True)


def _read_stream(path, kind):
    with open(path) as f:
        head = f.readline().strip()
        if not head.startswith(f"# stream={kind}"):
            raise ValueError(f"{path}: expected stream kind {kind!r}, got {head!r}")
        f.readline()  # column header
        rows = [line.strip().split(",") for line in f if line.strip()]
    return [[float(x) for x in row] for row in rows]


def read_streams(data_dir):
    """Parse measurement files back into stream objects.

    Returns (imu, features_by_stamp, cam_stamps, ranges, echoes, gt_records).
    """
    imu = [ImuSample(r[0], np.array(r[1:4]), np.array(r[4:7]))
           for r in _read_stream(os.path.join(data_dir, "imu.csv"), "imu")]
    feats = {}
    stamps = []
    for r in _read_stream(os.path.join(data_dir, "features.csv"), "feature"):
        t = r[0]
        if t not in feats:
            feats[t] = []
            stamps.append(t)
        feats[t].append((int(r[1]), np.array(r[2:4])))
    ranges = [RangeMeasurement(r[0], int(r[1]), r[2])
              for r in _read_stream(os.path.join(data_dir, "range.csv"), "range")]
    echoes = [EchoMeasurement(r[0], int(r[1]), int(r[2]), r[3])
              for r in _read_stream(os.path.join(data_dir, "echo.csv"), "echo")]
    gt_rows = np.array(_read_stream(os.path.join(data_dir, "groundtruth.csv"),
                                    "groundtruth"))
    return imu, feats, np.array(sorted(stamps)), ranges, echoes, gt_rows
