"""Stacked filter state, joint covariance, first-estimate ledger.

Error-state ordering (fixed):

    [ imu(15) | features(3 each) | anchors(3 each) | short clones(6 each) | long clones(6 each) ]

with the IMU block split as [theta 0:3 | bg 3:6 | v 6:9 | ba 9:12 | p 12:15]
and each clone as [theta 0:3 | p 3:6].  Features, anchors and clones keep
insertion order inside their segments.
"""

from dataclasses import dataclass, field

import numpy as np

from .mathx import quat_from_rotvec, quat_multiply, quat_normalize, quat_to_rot

IMU_DIM = 15
CLONE_DIM = 6

TH = slice(0, 3)
BG = slice(3, 6)
V = slice(6, 9)
BA = slice(9, 12)
P = slice(12, 15)


class StateError(Exception):
    pass


@dataclass
class ImuState:
    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def rot(self):
        """Global-to-IMU rotation matrix."""
        return quat_to_rot(self.q)

    def copy(self):
        return ImuState(self.q.copy(), self.bg.copy(), self.v.copy(),
                        self.ba.copy(), self.p.copy())


@dataclass
class ClonePose:
    q: np.ndarray
    p: np.ndarray
    stamp: float

    def rot(self):
        return quat_to_rot(self.q)

    def copy(self):
        return ClonePose(self.q.copy(), self.p.copy(), self.stamp)


@dataclass
class AnchorState:
    id: int
    p: np.ndarray


@dataclass
class SlamFeature:
    id: int
    p: np.ndarray


class FejLedger:
    """First-estimate values per state block.

    Keys are tuples such as ("imu", stamp), ("short", stamp), ("long", stamp),
    ("anchor", id), ("feature", id).  An entry is written exactly once;
    rewriting raises.  Marginalized blocks stay in the ledger flagged inactive
    so they remain auditable.
    """

    def __init__(self):
        self._entries = {}
        self._latest_imu_key = None

    def record(self, key, value):
        if key in self._entries:
            raise StateError(f"FEJ entry for {key} already recorded")
        if isinstance(value, (ImuState, ClonePose)):
            value = value.copy()
        else:
            value = np.array(value, dtype=float, copy=True)
        self._entries[key] = {"value": value, "active": True}
        if key[0] == "imu":
            self._latest_imu_key = key

    def get(self, key):
        return self._entries[key]["value"]

    def has(self, key):
        return key in self._entries

    def has_imu(self):
        return self._latest_imu_key is not None

    def latest_imu(self):
        if self._latest_imu_key is None:
            raise StateError("no IMU first estimate recorded")
        return self._entries[self._latest_imu_key]["value"]

    def mark_inactive(self, key):
        if key in self._entries:
            self._entries[key]["active"] = False

    def is_active(self, key):
        return self._entries[key]["active"]

    def __len__(self):
        return len(self._entries)


@dataclass
class FilterState:
    imu: ImuState = field(default_factory=ImuState)
    features: list = field(default_factory=list)
    anchors: list = field(default_factory=list)
    short_window: list = field(default_factory=list)
    long_window: list = field(default_factory=list)
    cov: np.ndarray = field(default_factory=lambda: np.zeros((IMU_DIM, IMU_DIM)))
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 9.81]))
    stamp: float = 0.0
    fej: FejLedger = field(default_factory=FejLedger)
    max_short: int = 11

    # ----- layout ---------------------------------------------------------

    @property
    def err_dim(self):
        return (IMU_DIM + 3 * len(self.features) + 3 * len(self.anchors)
                + CLONE_DIM * (len(self.short_window) + len(self.long_window)))

    def feature_offset(self, feature_id):
        for i, f in enumerate(self.features):
            if f.id == feature_id:
                return IMU_DIM + 3 * i
        raise StateError(f"feature {feature_id} not in state")

    def anchor_offset(self, anchor_id):
        for i, a in enumerate(self.anchors):
            if a.id == anchor_id:
                return IMU_DIM + 3 * len(self.features) + 3 * i
        raise StateError(f"anchor {anchor_id} not in state")

    def _short_base(self):
        return IMU_DIM + 3 * len(self.features) + 3 * len(self.anchors)

    def _long_base(self):
        return self._short_base() + CLONE_DIM * len(self.short_window)

    def clone_offset(self, window, stamp):
        clones = self.short_window if window == "short" else self.long_window
        base = self._short_base() if window == "short" else self._long_base()
        for i, c in enumerate(clones):
            if c.stamp == stamp:
                return base + CLONE_DIM * i
        raise StateError(f"{window} clone at {stamp} not in state")

    def get_anchor(self, anchor_id):
        for a in self.anchors:
            if a.id == anchor_id:
                return a
        raise StateError(f"anchor {anchor_id} not in state")

    # ----- invariants -----------------------------------------------------

    def symmetrize(self):
        self.cov = 0.5 * (self.cov + self.cov.T)

    def check_valid(self, psd_tol=1e-9):
        n = self.err_dim
        if self.cov.shape != (n, n):
            raise StateError(f"covariance shape {self.cov.shape} != ({n},{n})")
        asym = np.max(np.abs(self.cov - self.cov.T))
        scale = max(np.max(np.abs(self.cov)), 1e-300)
        if asym > 1e-9 * scale + 1e-15:
            raise StateError(f"covariance asymmetry {asym:.3e}")
        w = np.linalg.eigvalsh(0.5 * (self.cov + self.cov.T))
        if w[0] < -psd_tol * max(np.trace(self.cov), 1e-300):
            raise StateError(f"covariance not PSD, min eig {w[0]:.3e}")

    def copy(self):
        out = FilterState(
            imu=self.imu.copy(),
            features=[SlamFeature(f.id, f.p.copy()) for f in self.features],
            anchors=[AnchorState(a.id, a.p.copy()) for a in self.anchors],
            short_window=[c.copy() for c in self.short_window],
            long_window=[c.copy() for c in self.long_window],
            cov=self.cov.copy(),
            gravity=self.gravity.copy(),
            stamp=self.stamp,
            fej=self.fej,  # ledger is shared history, not duplicated
            max_short=self.max_short,
        )
        return out

    # ----- snapshot record (external interface) ---------------------------

    def to_record(self):
        """Flat text-serializable snapshot: stamp, pose, velocity, biases, anchors."""
        rec = {
            "stamp": self.stamp,
            "qx": self.imu.q[0], "qy": self.imu.q[1],
            "qz": self.imu.q[2], "qw": self.imu.q[3],
            "px": self.imu.p[0], "py": self.imu.p[1], "pz": self.imu.p[2],
            "vx": self.imu.v[0], "vy": self.imu.v[1], "vz": self.imu.v[2],
            "bgx": self.imu.bg[0], "bgy": self.imu.bg[1], "bgz": self.imu.bg[2],
            "bax": self.imu.ba[0], "bay": self.imu.ba[1], "baz": self.imu.ba[2],
        }
        for a in self.anchors:
            rec[f"anchor{a.id}_x"] = a.p[0]
            rec[f"anchor{a.id}_y"] = a.p[1]
            rec[f"anchor{a.id}_z"] = a.p[2]
        return rec


# ----- operations ----------------------------------------------------------


def clone_current_pose(state, stamp, target="short"):
    """Stochastic cloning of the current IMU pose into a window.

    The new clone duplicates {q, p}; its covariance rows/columns duplicate the
    current pose block's.  A full short window marginalizes its oldest entry
    first; a full long window drops its oldest keyframe.
    """
    if target not in ("short", "long"):
        raise StateError(f"unknown clone target {target!r}")
    clones = state.short_window if target == "short" else state.long_window
    if clones and stamp <= clones[-1].stamp:
        raise StateError(f"non-monotone clone stamp {stamp} <= {clones[-1].stamp}")
    if target == "short" and len(clones) >= state.max_short:
        marginalize(state, ("short", clones[0].stamp))
        clones = state.short_window

    n = state.err_dim
    # rows of the current pose block inside the error state
    sel = np.concatenate([np.arange(0, 3), np.arange(12, 15)])
    insert_at = state._long_base() + (CLONE_DIM * len(state.long_window)
                                      if target == "long" else 0)
    if target == "short":
        insert_at = state._short_base() + CLONE_DIM * len(state.short_window)

    new = np.zeros((n + CLONE_DIM, n + CLONE_DIM))
    old_idx = _index_map(n, insert_at, CLONE_DIM)
    new[np.ix_(old_idx, old_idx)] = state.cov
    block = np.arange(insert_at, insert_at + CLONE_DIM)
    new[np.ix_(block, old_idx)] = state.cov[sel, :]
    new[np.ix_(old_idx, block)] = state.cov[:, sel]
    new[np.ix_(block, block)] = state.cov[np.ix_(sel, sel)]
    state.cov = new

    clone = ClonePose(state.imu.q.copy(), state.imu.p.copy(), stamp)
    clones.append(clone)
    state.fej.record((target, stamp), clone)
    state.symmetrize()
    return state


def _index_map(old_n, insert_at, width):
    """Indices of the old entries inside the grown matrix."""
    return np.concatenate([np.arange(0, insert_at),
                           np.arange(insert_at + width, old_n + width)])


def augment_anchors(state, anchors):
    """Insert anchor blocks with covariance (Paa diagonal, Pxa cross terms).

    ``anchors`` is a list of (anchor_id, position, Paa, Pxa) where Pxa is the
    cross-covariance of the *existing* error state (err_dim x 3) against the
    anchor error.  Existing covariance entries are untouched; anchor/anchor
    cross blocks between distinct new anchors are zero.
    """
    if state.anchors:
        raise StateError("state already has anchors")
    n = state.err_dim
    for anchor_id, p, paa, pxa in anchors:
        paa = np.asarray(paa, dtype=float)
        pxa = np.asarray(pxa, dtype=float)
        if paa.shape != (3, 3) or pxa.shape != (n, 3):
            raise StateError("anchor covariance block dimension mismatch")
        if np.max(np.abs(paa - paa.T)) > 1e-9 * max(np.max(np.abs(paa)), 1e-300):
            raise StateError("Paa not symmetric")
        if np.linalg.eigvalsh(0.5 * (paa + paa.T))[0] < -1e-12 * max(np.trace(paa), 1e-300):
            raise StateError("Paa not positive semidefinite")

    k = len(anchors)
    insert_at = IMU_DIM + 3 * len(state.features)
    old_idx = _index_map(n, insert_at, 3 * k)
    new = np.zeros((n + 3 * k, n + 3 * k))
    new[np.ix_(old_idx, old_idx)] = state.cov
    for i, (anchor_id, p, paa, pxa) in enumerate(anchors):
        blk = np.arange(insert_at + 3 * i, insert_at + 3 * i + 3)
        new[np.ix_(old_idx, blk)] = pxa
        new[np.ix_(blk, old_idx)] = pxa.T
        new[np.ix_(blk, blk)] = paa
        state.anchors.append(AnchorState(anchor_id, np.array(p, dtype=float)))
        state.fej.record(("anchor", anchor_id), np.asarray(p))
    state.cov = new
    state.symmetrize()
    return state


def augment_feature(state, feature_id, p, pff, pxf):
    """Insert one SLAM feature block (persistent-feature path)."""
    n = state.err_dim
    pff = np.asarray(pff, dtype=float)
    pxf = np.asarray(pxf, dtype=float)
    if pff.shape != (3, 3) or pxf.shape != (n, 3):
        raise StateError("feature covariance block dimension mismatch")
    insert_at = IMU_DIM + 3 * len(state.features)
    old_idx = _index_map(n, insert_at, 3)
    new = np.zeros((n + 3, n + 3))
    new[np.ix_(old_idx, old_idx)] = state.cov
    blk = np.arange(insert_at, insert_at + 3)
    new[np.ix_(old_idx, blk)] = pxf
    new[np.ix_(blk, old_idx)] = pxf.T
    new[np.ix_(blk, blk)] = pff
    state.cov = new
    state.features.append(SlamFeature(feature_id, np.array(p, dtype=float)))
    state.fej.record(("feature", feature_id), np.asarray(p))
    state.symmetrize()
    return state


def marginalize(state, block_id):
    """Delete a clone or feature block; covariance keeps the principal submatrix."""
    kind = block_id[0]
    if kind == "imu":
        raise StateError("cannot marginalize the current IMU state")
    if kind == "feature":
        off = state.feature_offset(block_id[1])
        width = 3
        state.features = [f for f in state.features if f.id != block_id[1]]
    elif kind in ("short", "long"):
        off = state.clone_offset(kind, block_id[1])
        width = CLONE_DIM
        clones = state.short_window if kind == "short" else state.long_window
        kept = [c for c in clones if c.stamp != block_id[1]]
        if kind == "short":
            state.short_window = kept
        else:
            state.long_window = kept
    else:
        raise StateError(f"cannot marginalize block kind {kind!r}")
    keep = np.concatenate([np.arange(0, off), np.arange(off + width, state.cov.shape[0])])
    state.cov = state.cov[np.ix_(keep, keep)]
    state.fej.mark_inactive(block_id)
    return state


def marginalize_long_window(state):
    for clone in list(state.long_window):
        marginalize(state, ("long", clone.stamp))
    return state


def apply_correction(state, delta):
    """Retract an error-state correction onto the state.

    Positions/velocities/biases are additive; orientations use
    R_new = so3_exp(-dtheta) @ R_est, applied on the quaternion directly.
    """
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (state.err_dim,):
        raise StateError(f"correction length {delta.shape} != {state.err_dim}")
    if not np.all(np.isfinite(delta)):
        raise StateError("non-finite correction")

    state.imu.q = quat_normalize(
        quat_multiply(quat_from_rotvec(-delta[TH]), state.imu.q))
    state.imu.bg = state.imu.bg + delta[BG]
    state.imu.v = state.imu.v + delta[V]
    state.imu.ba = state.imu.ba + delta[BA]
    state.imu.p = state.imu.p + delta[P]

    off = IMU_DIM
    for f in state.features:
        f.p = f.p + delta[off:off + 3]
        off += 3
    for a in state.anchors:
        a.p = a.p + delta[off:off + 3]
        off += 3
    for c in state.short_window + state.long_window:
        c.q = quat_normalize(quat_multiply(quat_from_rotvec(-delta[off:off + 3]), c.q))
        c.p = c.p + delta[off + 3:off + 6]
        off += CLONE_DIM
    return state


def ekf_update(state, H, r, noise_cov):
    """Standard EKF update with Joseph-form covariance (expanded to avoid
    forming I - KH).

    H rows live on the full error-state layout; noise_cov is the measurement
    covariance (m x m, typically diagonal).
    """
    H = np.atleast_2d(H)
    r = np.atleast_1d(r)
    P = state.cov
    HP = H @ P
    S = HP @ H.T + noise_cov
    S = 0.5 * (S + S.T)
    K = np.linalg.solve(S, HP).T
    apply_correction(state, K @ r)
    state.cov = P - K @ HP - HP.T @ K.T + K @ S @ K.T
    state.symmetrize()
    return state
