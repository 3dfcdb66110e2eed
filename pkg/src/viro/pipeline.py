"""Sequential estimation pipeline: propagate on IMU, clone + visual update on
camera frames, synchronized UWB ranging updates after anchor initialization.

Modes:

* ``vio``        - UWB streams ignored entirely.
* ``viro``       - UWB fused, ranging Jacobians at the latest estimates.
* ``fej-viro``   - UWB fused, ranging Jacobians at first estimates.
* ``fej-viro-s`` - fej-viro without the long keyframe window; anchor
  covariance comes from the init solver, cross-covariance seeded zero.

Propagation and the visual update always run with first-estimate
linearization, so the two middle modes differ only in how ranging
measurements are linearized once anchors exist.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import sim as simmod
from .mathx import rot_to_quat, so3_log
from .propagation import propagate
from .ranging import interpolate_echo, interpolate_range, ranging_update
from .state import FilterState, ImuState, apply_correction, clone_current_pose, marginalize
from .uwb_init import InitBuffer, InitError, InitParams, try_initialize
from .vision import FeatureTrack, visual_update

MODES = ("vio", "viro", "fej-viro", "fej-viro-s")


@dataclass
class RunConfig:
    mode: str = "fej-viro"
    sim: simmod.SimConfig = field(default_factory=simmod.SimConfig)
    data_dir: str = None
    init: InitParams = field(default_factory=InitParams)
    # initial 1-sigma per block: theta, bg, v, ba, p
    init_sigmas: tuple = (0.01, 5e-4, 0.02, 5e-3, 0.02)
    seed: int = None
    out_dir: str = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.seed is not None:
            self.sim = replace(self.sim, seed=self.seed)


@dataclass
class RunResult:
    mode: str
    stamps: np.ndarray
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    pth: np.ndarray              # (n, 3, 3) attitude covariance blocks
    ppp: np.ndarray              # (n, 3, 3) position covariance blocks
    truth_q: np.ndarray
    truth_p: np.ndarray
    truth_v: np.ndarray
    init_stamp: float
    init_report: object
    counters: dict
    config: RunConfig
    anchors_true: np.ndarray = None
    state: object = None

    def orientation_errors(self):
        """Per-stamp error rotation vector, truth relative to estimate."""
        from .mathx import quat_to_rot
        out = np.zeros((len(self.stamps), 3))
        for i in range(len(self.stamps)):
            r_true = quat_to_rot(self.truth_q[i])
            r_est = quat_to_rot(self.q[i])
            out[i] = -so3_log(r_true @ r_est.T)
        return out

    def position_errors(self):
        return self.truth_p - self.p


class _StreamSync:
    """Per-key pointer into a stamped stream; yields straddling pairs."""

    def __init__(self, items, key_fn):
        self._by_key = {}
        for m in items:
            self._by_key.setdefault(key_fn(m), []).append(m)
        self._idx = {k: 0 for k in self._by_key}

    def keys(self):
        return sorted(self._by_key)

    def straddle(self, key, t):
        """(alpha, beta) with alpha.stamp <= t < beta.stamp, or exact match."""
        seq = self._by_key.get(key)
        if not seq:
            return None
        i = self._idx[key]
        while i + 1 < len(seq) and seq[i + 1].stamp <= t:
            i += 1
        self._idx[key] = i
        if seq[i].stamp > t:
            return None
        if i + 1 < len(seq):
            return seq[i], seq[i + 1]
        if seq[i].stamp == t:
            return seq[i], None
        return None


class Pipeline:
    def __init__(self, config, data=None):
        self.config = config
        if data is None:
            if config.data_dir is not None:
                data = _load_sim_data(config)
            else:
                data = simmod.simulate(config.sim)
        self.data = data
        self.mode = config.mode
        self.use_uwb = self.mode != "vio"
        self.ranging_fej = self.mode in ("fej-viro", "fej-viro-s")
        self.use_long_window = self.mode != "fej-viro-s"
        self.uwb_params = data.config.uwb
        self.extrinsics = data.config.extrinsics
        self.noise = data.config.noise

        self.state = self._initial_state()
        self.buffer = InitBuffer()
        self.tracks = {}
        self.init_stamp = None
        self.init_report = None
        self.last_kf_pos = None
        self._last_init_attempt = -1
        self.counters = {"visual_tracks": 0, "ranging_rows": 0,
                         "frames": 0, "init_failures": 0}

    # ----- setup -----------------------------------------------------------

    def _initial_state(self):
        gt = self.data.gt
        cfg = self.data.config
        state = FilterState(gravity=cfg.gravity.copy(), stamp=0.0)
        state.imu = ImuState(
            q=rot_to_quat(gt.rotation(0.0)),
            bg=np.zeros(3), v=gt.velocity(0.0).copy(),
            ba=np.zeros(3), p=gt.position(0.0).copy())
        sig = np.repeat(np.asarray(self.config.init_sigmas, dtype=float), 3)
        state.cov = np.diag(sig ** 2)
        err_scale = cfg.noise_scale
        if err_scale > 0:
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 0x1A17]))
            apply_correction(state, err_scale * sig * rng.standard_normal(15))
        state.fej.record(("imu", 0.0), state.imu)
        return state

    # ----- per-frame steps --------------------------------------------------

    def _update_tracks(self, stamp, observations):
        """Feed this frame's observations; return tracks ready for an update."""
        seen = set()
        for fid, uv in observations:
            seen.add(fid)
            track = self.tracks.get(fid)
            if track is None:
                track = FeatureTrack(fid, sigma=self.data.config.sigma_px)
                self.tracks[fid] = track
            track.add(stamp, uv)

        completed = []
        for fid in list(self.tracks):
            track = self.tracks[fid]
            lost = fid not in seen
            full = len(track) >= self.state.max_short
            if (lost and len(track) >= 2) or full:
                completed.append(track)
                del self.tracks[fid]
            elif lost:
                del self.tracks[fid]
        return completed

    def _sync_ranges(self, sync, stamp):
        out = []
        for anchor_id in sync.keys():
            pair = sync.straddle(anchor_id, stamp)
            if pair is None:
                continue
            alpha, beta = pair
            if beta is None:
                d = alpha.d if alpha.stamp == stamp else None
            else:
                d = interpolate_range(alpha, beta, stamp, self.uwb_params)
            if d is not None:
                out.append(type(alpha)(stamp, anchor_id, d))
        return out

    def _sync_echoes(self, sync, stamp):
        out = []
        for pair_key in sync.keys():
            pair = sync.straddle(pair_key, stamp)
            if pair is None:
                continue
            alpha, beta = pair
            if beta is None:
                d = alpha.d if alpha.stamp == stamp else None
            else:
                d = interpolate_echo(alpha, beta, stamp, self.uwb_params)
            if d is not None:
                out.append(type(alpha)(stamp, pair_key[0], pair_key[1], d))
        return out

    def _maybe_keyframe(self, stamp, range_sync):
        p_now = self.state.imu.p
        if (self.last_kf_pos is not None
                and np.linalg.norm(p_now - self.last_kf_pos)
                < self.config.init.keyframe_spacing):
            return
        anchor_ranges = {m.anchor_id: m.d for m in self._sync_ranges(range_sync, stamp)}
        if not anchor_ranges:
            return
        if self.use_long_window:
            if len(self.state.long_window) >= self.config.init.max_keyframes:
                oldest = self.state.long_window[0].stamp
                marginalize(self.state, ("long", oldest))
                self.buffer.drop_keyframe(oldest)
            clone_current_pose(self.state, stamp, "long")
        elif len(self.buffer) >= self.config.init.max_keyframes:
            self.buffer.drop_keyframe(self.buffer.keyframes[0][0])
        self.buffer.add_keyframe(stamp, self.state.imu.q, self.state.imu.p,
                                 anchor_ranges)
        self.last_kf_pos = p_now.copy()

    # ----- main loop --------------------------------------------------------

    def run(self):
        data = self.data
        imu = data.imu
        imu_stamps = np.array([s.stamp for s in imu])
        cam_stamps = data.cam_stamps
        range_sync = _StreamSync(data.ranges, lambda m: m.anchor_id)
        echo_sync = _StreamSync(
            data.echoes,
            lambda m: (min(m.anchor_i, m.anchor_j), max(m.anchor_i, m.anchor_j)))
        echo_cursor = 0
        echoes_sorted = sorted(data.echoes, key=lambda m: m.stamp)

        n = len(cam_stamps)
        rec = {
            "q": np.zeros((n, 4)), "p": np.zeros((n, 3)), "v": np.zeros((n, 3)),
            "pth": np.zeros((n, 3, 3)), "ppp": np.zeros((n, 3, 3)),
            "tq": np.zeros((n, 4)), "tp": np.zeros((n, 3)), "tv": np.zeros((n, 3)),
        }

        prev_idx = 0
        for j, t in enumerate(cam_stamps):
            if j > 0:
                idx = int(np.searchsorted(imu_stamps, t, side="right")) - 1
                batch = imu[prev_idx:idx + 1]
                if len(batch) >= 2:
                    propagate(self.state, batch, self.noise, use_fej=True)
                prev_idx = idx
            self.state.stamp = t

            clone_current_pose(self.state, t, "short")
            completed = self._update_tracks(t, data.features_by_stamp.get(t, []))
            if completed:
                self.counters["visual_tracks"] += visual_update(
                    self.state, completed, self.extrinsics, use_fej=True)

            if self.use_uwb:
                if self.state.anchors:
                    ranges = self._sync_ranges(range_sync, t)
                    echoes = self._sync_echoes(echo_sync, t)
                    if ranges or echoes:
                        self.counters["ranging_rows"] += ranging_update(
                            self.state, ranges, echoes, self.uwb_params,
                            use_fej=self.ranging_fej)
                else:
                    while (echo_cursor < len(echoes_sorted)
                           and echoes_sorted[echo_cursor].stamp <= t):
                        self.buffer.add_echo(echoes_sorted[echo_cursor])
                        echo_cursor += 1
                    self._maybe_keyframe(t, range_sync)
                    report = None
                    if len(self.buffer) > self._last_init_attempt:
                        self._last_init_attempt = len(self.buffer)
                        try:
                            report = try_initialize(
                                self.state, self.buffer, self.uwb_params,
                                self.config.init,
                                use_state_covariance=self.use_long_window)
                        except InitError:
                            # keep the buffer and retry after more keyframes
                            self.counters["init_failures"] += 1
                    if report is not None:
                        self.init_stamp = t
                        self.init_report = report

            self.counters["frames"] += 1
            rec["q"][j] = self.state.imu.q
            rec["p"][j] = self.state.imu.p
            rec["v"][j] = self.state.imu.v
            rec["pth"][j] = self.state.cov[0:3, 0:3]
            rec["ppp"][j] = self.state.cov[12:15, 12:15]
            rec["tq"][j] = rot_to_quat(data.gt.rotation(t))
            rec["tp"][j] = data.gt.position(t)
            rec["tv"][j] = data.gt.velocity(t)

        return RunResult(
            mode=self.mode, stamps=np.asarray(cam_stamps, dtype=float),
            q=rec["q"], p=rec["p"], v=rec["v"], pth=rec["pth"], ppp=rec["ppp"],
            truth_q=rec["tq"], truth_p=rec["tp"], truth_v=rec["tv"],
            init_stamp=self.init_stamp if self.init_stamp is not None else np.nan,
            init_report=self.init_report, counters=dict(self.counters),
            config=self.config, anchors_true=data.gt.anchors.copy(),
            state=self.state)


def run_pipeline(config, data=None):
    return Pipeline(config, data).run()


class _FileGroundTruth:
    """GroundTruth facade over parsed groundtruth.csv rows."""

    def __init__(self, rows, anchors, gravity):
        self._stamps = rows[:, 0]
        self._q = rows[:, 1:5]
        self._p = rows[:, 5:8]
        self._v = rows[:, 8:11]
        self.anchors = anchors
        self.features = np.zeros((0, 3))
        self.gravity = gravity

    def _row(self, t):
        i = int(np.argmin(np.abs(self._stamps - t)))
        return i

    def rotation(self, t):
        from .mathx import quat_to_rot
        return quat_to_rot(self._q[self._row(t)])

    def position(self, t):
        return self._p[self._row(t)]

    def velocity(self, t):
        return self._v[self._row(t)]


def _load_sim_data(config):
    import json
    import os

    with open(os.path.join(config.data_dir, "sim_config.json")) as f:
        raw = json.load(f)
    sim_cfg = sim_config_from_dict(raw)
    imu, feats, cam_stamps, ranges, echoes, gt_rows = simmod.read_streams(
        config.data_dir)
    gt = _FileGroundTruth(gt_rows, sim_cfg.anchors, sim_cfg.gravity)
    return simmod.SimData(sim_cfg, gt, imu, feats, ranges, echoes, cam_stamps)


def sim_config_from_dict(raw):
    from .propagation import NoiseParams
    from .ranging import UwbParams
    from .vision import CameraExtrinsics

    return simmod.SimConfig(
        seed=raw["seed"], duration=raw["duration"],
        trajectory=raw["trajectory"], imu_rate=raw["imu_rate"],
        cam_rate=raw["cam_rate"], uwb_rate=raw["uwb_rate"],
        anchors=np.array(raw["anchors"]),
        n_features=raw["n_features"], max_feats=raw["max_feats"],
        sigma_px=raw["sigma_px"],
        noise=NoiseParams(*raw["noise"]),
        uwb=UwbParams(lever_arm=np.array(raw["uwb"][0]), d_bias=raw["uwb"][1],
                      sigma_r=raw["uwb"][2], sigma_e=raw["uwb"][3],
                      sync_threshold=raw["uwb"][4]),
        extrinsics=CameraExtrinsics(R=np.array(raw["extrinsics"][0]),
                                    p=np.array(raw["extrinsics"][1])),
        gravity=np.array(raw["gravity"]),
        noise_scale=raw["noise_scale"],
        fov_half_tan=raw["fov_half_tan"],
        depth_min=raw["depth_min"], depth_max=raw["depth_max"],
        feature_pad_xy=raw["feature_pad_xy"],
        feature_pad_z=raw["feature_pad_z"],
    )
