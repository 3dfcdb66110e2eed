"""UWB measurement models, squared-range Jacobians, time synchronization and
the EKF ranging update.

The update residual is formed on the squared de-biased distance,
r = (d - d_bias)^2 - ||p_r_hat - p_a_hat||^2, whose Jacobian rows are linear
in the involved points.  The squared-measurement noise is the first-order
propagation sigma_d2 = 2 (d_hat - d_bias) sigma_r.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .mathx import skew
from .state import ekf_update

COINCIDENT_EPS = 1e-9


class RangingError(Exception):
    pass


class DegenerateGeometry(RangingError):
    pass


@dataclass
class RangeMeasurement:
    stamp: float
    anchor_id: int
    d: float

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("range measurement must be positive")


@dataclass
class EchoMeasurement:
    stamp: float
    anchor_i: int
    anchor_j: int
    d: float

    def __post_init__(self):
        if self.anchor_i == self.anchor_j:
            raise ValueError("echo measurement needs two distinct anchors")
        if self.d <= 0:
            raise ValueError("echo measurement must be positive")


@dataclass
class UwbParams:
    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_bias: float = 0.0
    sigma_r: float = 0.15
    sigma_e: float = 0.15
    sync_threshold: float = 0.05

    def __post_init__(self):
        self.lever_arm = np.asarray(self.lever_arm, dtype=float)
        if self.sigma_r <= 0 or self.sigma_e <= 0:
            raise ValueError("ranging noise densities must be positive")


def ranging_node_position(R, p, params):
    """Global position of the on-robot ranging node for IMU pose (R, p)."""
    return p + R.T @ params.lever_arm


def predict_range(R, p, anchor_p, params):
    """|| p_I + R^T lever - p_a || + d_bias for the global-to-IMU rotation R."""
    return float(np.linalg.norm(ranging_node_position(R, p, params) - anchor_p)
                 + params.d_bias)


def predict_echo(anchor_i_p, anchor_j_p, params, anchor_i=0, anchor_j=1):
    if anchor_i == anchor_j:
        raise RangingError("echo prediction needs two distinct anchors")
    return float(np.linalg.norm(np.asarray(anchor_i_p) - np.asarray(anchor_j_p))
                 + params.d_bias)


def squared_range_jacobians(R_lin, p_lin, anchor_lin, params):
    """Rows of d((d-bias)^2) w.r.t. (theta, p_I, p_a) at the linearization pose.

    Returns (row_theta, row_p, row_anchor), each a length-3 array.  Raises
    DegenerateGeometry when the anchor coincides with the ranging node (the
    gradient vanishes and the measurement carries no direction).
    """
    u = ranging_node_position(R_lin, p_lin, params) - np.asarray(anchor_lin)
    if np.linalg.norm(u) < COINCIDENT_EPS:
        raise DegenerateGeometry("anchor coincides with ranging node")
    row_p = 2.0 * u
    row_anchor = -2.0 * u
    row_theta = -2.0 * u @ R_lin.T @ skew(params.lever_arm)
    return row_theta, row_p, row_anchor


def echo_jacobians(anchor_i_lin, anchor_j_lin):
    """Rows of d((d_e-bias)^2) w.r.t. (p_ai, p_aj); they sum to zero."""
    diff = np.asarray(anchor_i_lin) - np.asarray(anchor_j_lin)
    if np.linalg.norm(diff) < COINCIDENT_EPS:
        raise DegenerateGeometry("coincident anchors")
    return 2.0 * diff, -2.0 * diff


def interpolate_range(meas_alpha, meas_beta, t_k, params):
    """Linear interpolation of two same-anchor ranges onto t_k.

    Returns the interpolated distance or None when either time offset exceeds
    the sync threshold (the measurement pair is discarded).
    """
    if meas_alpha.anchor_id != meas_beta.anchor_id:
        raise RangingError("interpolation requires a single anchor id")
    t_a, t_b = meas_alpha.stamp, meas_beta.stamp
    if t_a >= t_b:
        raise RangingError("interpolation interval is empty")
    if not (t_a <= t_k < t_b):
        raise RangingError(f"t_k={t_k} outside [{t_a}, {t_b})")
    if (t_k - t_a) > params.sync_threshold or (t_b - t_k) > params.sync_threshold:
        return None
    w = (t_k - t_a) / (t_b - t_a)
    return float(meas_alpha.d + w * (meas_beta.d - meas_alpha.d))


def interpolate_echo(meas_alpha, meas_beta, t_k, params):
    """Same interpolation rule for anchor pair echoes."""
    pair_a = frozenset((meas_alpha.anchor_i, meas_alpha.anchor_j))
    pair_b = frozenset((meas_beta.anchor_i, meas_beta.anchor_j))
    if pair_a != pair_b:
        raise RangingError("interpolation requires a single anchor pair")
    t_a, t_b = meas_alpha.stamp, meas_beta.stamp
    if t_a >= t_b:
        raise RangingError("interpolation interval is empty")
    if not (t_a <= t_k < t_b):
        raise RangingError(f"t_k={t_k} outside [{t_a}, {t_b})")
    if (t_k - t_a) > params.sync_threshold or (t_b - t_k) > params.sync_threshold:
        return None
    w = (t_k - t_a) / (t_b - t_a)
    return float(meas_alpha.d + w * (meas_beta.d - meas_alpha.d))


def build_ranging_system(state, ranges, echoes, params, use_fej=True):
    """Stacked (H, r, noise_variances) for synchronized UWB measurements.

    Jacobians are evaluated at the first estimates when ``use_fej`` is on
    (IMU pose from the ledger's latest propagation epoch, anchors at their
    initialization values); residuals always use the current estimates.
    Degenerate-geometry measurements are skipped.
    """
    if not state.anchors:
        raise RangingError("ranging update requires initialized anchors")
    n = state.err_dim

    if use_fej:
        imu_lin = state.fej.latest_imu()
        R_lin, p_lin = imu_lin.rot(), imu_lin.p
        anchor_lin = {a.id: state.fej.get(("anchor", a.id)) for a in state.anchors}
    else:
        R_lin, p_lin = state.imu.rot(), state.imu.p
        anchor_lin = {a.id: a.p for a in state.anchors}

    R_cur, p_cur = state.imu.rot(), state.imu.p
    node_cur = ranging_node_position(R_cur, p_cur, params)

    rows, residuals, variances = [], [], []
    for m in ranges:
        anchor = state.get_anchor(m.anchor_id)
        try:
            row_th, row_p, row_a = squared_range_jacobians(
                R_lin, p_lin, anchor_lin[m.anchor_id], params)
        except DegenerateGeometry:
            continue
        h = np.zeros(n)
        h[0:3] = row_th
        h[12:15] = row_p
        off = state.anchor_offset(m.anchor_id)
        h[off:off + 3] = row_a
        d_pred = np.linalg.norm(node_cur - anchor.p)
        residuals.append((m.d - params.d_bias) ** 2 - d_pred ** 2)
        variances.append((2.0 * d_pred * params.sigma_r) ** 2)
        rows.append(h)

    for m in echoes:
        ai = state.get_anchor(m.anchor_i)
        aj = state.get_anchor(m.anchor_j)
        try:
            row_i, row_j = echo_jacobians(anchor_lin[m.anchor_i],
                                          anchor_lin[m.anchor_j])
        except DegenerateGeometry:
            continue
        h = np.zeros(n)
        oi = state.anchor_offset(m.anchor_i)
        oj = state.anchor_offset(m.anchor_j)
        h[oi:oi + 3] = row_i
        h[oj:oj + 3] = row_j
        d_pred = np.linalg.norm(ai.p - aj.p)
        residuals.append((m.d - params.d_bias) ** 2 - d_pred ** 2)
        variances.append((2.0 * d_pred * params.sigma_e) ** 2)
        rows.append(h)

    if not rows:
        return np.zeros((0, n)), np.zeros(0), np.zeros(0)
    return np.vstack(rows), np.array(residuals), np.array(variances)


_GATE_1DOF = chi2.ppf(0.95, 1)


def ranging_update(state, ranges, echoes, params, use_fej=True, gate=True):
    """Chi-square gated EKF update with squared-range residuals.

    Returns the number of measurement rows applied (0 means no-op: everything
    gated out or skipped).
    """
    H, r, var = build_ranging_system(state, ranges, echoes, params, use_fej)
    if H.shape[0] == 0:
        return 0
    if gate:
        keep = []
        P = state.cov
        for i in range(H.shape[0]):
            s = H[i] @ P @ H[i] + var[i]
            if r[i] * r[i] / s <= _GATE_1DOF:
                keep.append(i)
        if not keep:
            return 0
        H, r, var = H[keep], r[keep], var[keep]
    ekf_update(state, H, r, np.diag(var))
    return H.shape[0]
