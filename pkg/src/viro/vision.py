"""Synthetic-feature visual pipeline: normalized projection, triangulation,
measurement Jacobians, left null-space projection and the EKF update.

Observations are pixel-normalized image coordinates (u, v) = (x/z, y/z) in
the camera frame; there is no intrinsics model and no image front-end, tracks
arrive ready-made from the simulator.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .mathx import skew
from .state import ekf_update

Z_MIN = 0.1     # cheirality floor, meters
B_MIN = 0.05    # minimum triangulation baseline, meters


class VisionError(Exception):
    pass


class CheiralityError(VisionError):
    pass


class TriangulationError(VisionError):
    pass


@dataclass
class CameraExtrinsics:
    """IMU-to-camera rotation and the IMU origin expressed in the camera."""
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        self.p = np.asarray(self.p, dtype=float)


@dataclass
class FeatureTrack:
    feature_id: int
    observations: list = field(default_factory=list)  # (stamp, ndarray[2])
    sigma: float = 0.002

    def add(self, stamp, uv):
        self.observations.append((stamp, np.asarray(uv, dtype=float)))

    def __len__(self):
        return len(self.observations)


def to_camera(p_global, R_clone, p_clone, extrinsics):
    """Feature position in the camera frame for a clone pose (R, p)."""
    return extrinsics.R @ (R_clone @ (np.asarray(p_global) - p_clone)) + extrinsics.p


def project_camera(p_cam, z_min=Z_MIN):
    if p_cam[2] <= z_min:
        raise CheiralityError(f"depth {p_cam[2]:.3f} below {z_min}")
    return np.array([p_cam[0] / p_cam[2], p_cam[1] / p_cam[2]])


def project(p_global, R_clone, p_clone, extrinsics, z_min=Z_MIN):
    """Normalized (u, v) of a global feature seen from a clone pose."""
    return project_camera(to_camera(p_global, R_clone, p_clone, extrinsics), z_min)


def projection_jacobians(R_lin, p_lin, p_f_lin, extrinsics):
    """(H_pose, H_feat) of the projection at a linearization point.

    H_pose is 2x6 over the clone error (theta, p); H_feat is 2x3 over the
    feature position.  Raises CheiralityError behind the z floor.
    """
    p_cam = to_camera(p_f_lin, R_lin, p_lin, extrinsics)
    if p_cam[2] <= Z_MIN:
        raise CheiralityError(f"depth {p_cam[2]:.3f} below {Z_MIN}")
    x, y, z = p_cam
    J_pi = np.array([[1.0 / z, 0.0, -x / (z * z)],
                     [0.0, 1.0 / z, -y / (z * z)]])
    JE = J_pi @ extrinsics.R
    H_pose = np.zeros((2, 6))
    H_pose[:, 0:3] = JE @ skew(R_lin @ (np.asarray(p_f_lin) - p_lin))
    H_pose[:, 3:6] = -JE @ R_lin
    H_feat = JE @ R_lin
    return H_pose, H_feat


def triangulate(track, clone_poses, extrinsics, max_iters=10):
    """Feature position from >= 2 views: midpoint init + Gauss-Newton refine.

    ``clone_poses`` maps stamp -> (R, p).  Returns (p_f, cov) where cov is
    the GN covariance sigma^2 (J^T J)^-1.  Rejects tracks with insufficient
    baseline, near-collinear rays, cheirality failures or divergent GN.
    """
    if len(track) < 2:
        raise TriangulationError("need at least two observations")

    n = len(track)
    A_cam = np.empty((n, 3, 3))     # p_cam_j = A_cam[j] @ p_f + b_cam[j]
    b_cam = np.empty((n, 3))
    uvs = np.empty((n, 2))
    centers = np.empty((n, 3))
    dirs = np.empty((n, 3))
    cam_offset = extrinsics.R.T @ extrinsics.p
    for j, (stamp, uv) in enumerate(track.observations):
        R_clone, p_clone = clone_poses[stamp]
        A = extrinsics.R @ R_clone
        A_cam[j] = A
        b_cam[j] = extrinsics.p - A @ p_clone
        uvs[j] = uv
        centers[j] = p_clone - R_clone.T @ cam_offset
        d = A.T @ np.array([uv[0], uv[1], 1.0])
        dirs[j] = d / np.linalg.norm(d)

    baseline = np.max(np.linalg.norm(centers - centers[0], axis=1))
    if baseline < B_MIN:
        raise TriangulationError(f"baseline {baseline:.3f} below {B_MIN}")

    # midpoint method: sum of projectors orthogonal to each ray
    proj = np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]
    A0 = proj.sum(axis=0)
    b0 = np.einsum("nij,nj->i", proj, centers)
    w = np.linalg.eigvalsh(A0)
    if w[0] < 1e-6 * max(w[-1], 1e-12):
        raise TriangulationError("near-collinear observation rays")
    p_f = np.linalg.solve(A0, b0)

    # Gauss-Newton on the stacked normalized reprojection residual
    sigma = track.sigma
    prev_cost = np.inf
    JtJ = None
    for _ in range(max_iters):
        pc = A_cam @ p_f + b_cam
        z = pc[:, 2]
        if np.any(z <= Z_MIN):
            raise TriangulationError("triangulated point behind a camera")
        pred = pc[:, :2] / z[:, None]
        # rows of d(pred)/d(p_f): (A[:2] - pred * A[2]) / z
        J = (A_cam[:, :2, :] - pred[:, :, None] * A_cam[:, 2:3, :]) / z[:, None, None]
        J = J.reshape(2 * n, 3)
        r = (uvs - pred).reshape(-1)
        cost = float(r @ r)
        JtJ = J.T @ J
        if np.linalg.cond(JtJ) > 1e12:
            raise TriangulationError("degenerate triangulation geometry")
        step = np.linalg.solve(JtJ, J.T @ r)
        if cost > 4.0 * prev_cost + 1e-12:
            raise TriangulationError("Gauss-Newton diverged")
        prev_cost = cost
        p_f = p_f + step
        if np.linalg.norm(step) < 1e-10:
            break
    if not np.all(np.isfinite(p_f)):
        raise TriangulationError("non-finite triangulation")
    return p_f, sigma * sigma * np.linalg.inv(JtJ)


def nullspace_project(H_x, H_f, r):
    """Left null-space projection eliminating the feature error.

    Returns (H_x_proj, r_proj) with 2n-3 rows for an n-view track.
    """
    Q, _ = np.linalg.qr(H_f, mode="complete")
    N = Q[:, 3:]
    return N.T @ H_x, N.T @ r


def _clone_lookup(state, use_fej):
    cur, lin = {}, {}
    for c in state.short_window:
        cur[c.stamp] = (c.rot(), c.p)
        if use_fej:
            fc = state.fej.get(("short", c.stamp))
            lin[c.stamp] = (fc.rot(), fc.p)
        else:
            lin[c.stamp] = cur[c.stamp]
    return cur, lin


def build_track_system(state, track, extrinsics, use_fej=True, lookups=None):
    """Per-track (H_proj, r_proj, sigma) after feature elimination.

    Triangulates from the current clone estimates, evaluates Jacobians at the
    first-estimate clone poses (triangulated feature position is by
    construction its own first estimate), projects the feature out.
    """
    cur, lin = lookups if lookups is not None else _clone_lookup(state, use_fej)
    obs = [(s, uv) for s, uv in track.observations if s in cur]
    if len(obs) < 2:
        raise TriangulationError("track observations not covered by window")
    tr = FeatureTrack(track.feature_id, obs, track.sigma)
    p_f, _ = triangulate(tr, cur, extrinsics)

    n = state.err_dim
    H_x_rows, H_f_rows, r_rows = [], [], []
    for stamp, uv in obs:
        R_l, p_l = lin[stamp]
        H_pose, H_feat = projection_jacobians(R_l, p_l, p_f, extrinsics)
        R_c, p_c = cur[stamp]
        pred = project(p_f, R_c, p_c, extrinsics)
        h = np.zeros((2, n))
        off = state.clone_offset("short", stamp)
        h[:, off:off + 6] = H_pose
        H_x_rows.append(h)
        H_f_rows.append(H_feat)
        r_rows.append(uv - pred)
    H_x = np.vstack(H_x_rows)
    H_f = np.vstack(H_f_rows)
    r = np.concatenate(r_rows)
    H_proj, r_proj = nullspace_project(H_x, H_f, r)
    return H_proj, r_proj, track.sigma


def build_slam_track_system(state, track, extrinsics, use_fej=True):
    """Rows for a track whose feature persists in the state (no projection)."""
    cur, lin = _clone_lookup(state, use_fej)
    feat = next(f for f in state.features if f.id == track.feature_id)
    f_lin = state.fej.get(("feature", feat.id)) if use_fej else feat.p
    n = state.err_dim
    f_off = state.feature_offset(feat.id)
    rows, r_rows = [], []
    for stamp, uv in track.observations:
        if stamp not in cur:
            continue
        R_l, p_l = lin[stamp]
        H_pose, H_feat = projection_jacobians(R_l, p_l, f_lin, extrinsics)
        R_c, p_c = cur[stamp]
        pred = project(feat.p, R_c, p_c, extrinsics)
        h = np.zeros((2, n))
        off = state.clone_offset("short", stamp)
        h[:, off:off + 6] = H_pose
        h[:, f_off:f_off + 3] = H_feat
        rows.append(h)
        r_rows.append(uv - pred)
    if not rows:
        raise TriangulationError("no usable observations for SLAM track")
    return np.vstack(rows), np.concatenate(r_rows)


def compress_system(H, r, sigma):
    """QR compression when the stacked rows exceed the error dimension."""
    if H.shape[0] <= H.shape[1]:
        return H, r
    Q, R = np.linalg.qr(H, mode="reduced")
    keep = np.any(np.abs(R) > 1e-12, axis=1)
    return R[keep], (Q.T @ r)[keep]


def visual_update(state, tracks, extrinsics, use_fej=True, gate=True):
    """Chi-square gated MSCKF update from a batch of completed tracks.

    Tracks whose ids live in ``state.features`` follow the persistent-feature
    path; everything else is triangulated and projected.  Returns the number
    of tracks that survived gating and entered the update.
    """
    slam_ids = {f.id for f in state.features}
    lookups = _clone_lookup(state, use_fej)
    accepted_H, accepted_r, accepted_var = [], [], []
    for track in tracks:
        try:
            if track.feature_id in slam_ids:
                H_t, r_t = build_slam_track_system(state, track, extrinsics, use_fej)
            else:
                H_t, r_t, _ = build_track_system(state, track, extrinsics, use_fej,
                                                 lookups=lookups)
        except VisionError:
            continue
        if H_t.shape[0] == 0:
            continue
        var = track.sigma ** 2
        if gate:
            S = H_t @ state.cov @ H_t.T + var * np.eye(H_t.shape[0])
            gamma = float(r_t @ np.linalg.solve(S, r_t))
            if gamma > chi2.ppf(0.95, H_t.shape[0]):
                continue
        accepted_H.append(H_t)
        accepted_r.append(r_t)
        accepted_var.append(np.full(H_t.shape[0], var))

    if not accepted_H:
        return 0
    H = np.vstack(accepted_H)
    r = np.concatenate(accepted_r)
    var = np.concatenate(accepted_var)
    if len(set(v for v in var)) == 1 and H.shape[0] > H.shape[1]:
        H, r = compress_system(H, r, var[0])
        var = np.full(H.shape[0], var[0])
    ekf_update(state, H, r, np.diag(var))
    return len(accepted_H)
