"""Long-short-window UWB anchor initialization.

Bootstrap each anchor from the linear system on squared ranges, refine all
anchors jointly with damped Gauss-Newton on the range + echo cost, build the
anchor covariance blocks by Givens-compressing the stacked range Jacobians
against the window poses, then augment the filter state.
"""

from dataclasses import dataclass, field

import numpy as np

from .mathx import quat_to_rot, skew
from .state import augment_anchors, marginalize_long_window

COND_MAX = 1e8
GN_MAX_ITERS = 20
GN_STEP_TOL = 1e-8


class InitError(Exception):
    pass


class IllConditioned(InitError):
    pass


class InitFailed(InitError):
    pass


@dataclass
class InitParams:
    n_min: int = 50
    keyframe_spacing: float = 0.3
    cond_max: float = COND_MAX
    max_keyframes: int = 90


@dataclass
class AnchorInitResult:
    anchor_id: int
    p: np.ndarray
    paa: np.ndarray
    pxa: np.ndarray


@dataclass
class InitReport:
    anchors: list                 # AnchorInitResult per anchor
    iterations: int
    final_cost: float
    bootstrap_residuals: dict     # anchor_id -> |D - ||p||^2| consistency
    stamp: float = 0.0

    def rows(self):
        out = []
        for a in self.anchors:
            out.append({
                "anchor_id": a.anchor_id,
                "x": a.p[0], "y": a.p[1], "z": a.p[2],
                "paa_xx": a.paa[0, 0], "paa_yy": a.paa[1, 1],
                "paa_zz": a.paa[2, 2],
                "iterations": self.iterations,
                "final_cost": self.final_cost,
                "bootstrap_residual": self.bootstrap_residuals.get(a.anchor_id,
                                                                   float("nan")),
            })
        return out


@dataclass
class InitBuffer:
    """Keyframe poses with synchronized ranges plus raw inter-anchor echoes.

    Keyframes are pose snapshots spaced by travelled distance; in long-window
    mode each snapshot has a matching clone in the filter state (same stamp).
    """
    keyframes: list = field(default_factory=list)   # (stamp, q, p)
    ranges: dict = field(default_factory=dict)      # stamp -> {anchor_id: d}
    echoes: dict = field(default_factory=dict)      # (i, j) -> [d, ...]

    def add_keyframe(self, stamp, q, p, anchor_ranges):
        self.keyframes.append((stamp, np.array(q, copy=True), np.array(p, copy=True)))
        self.ranges[stamp] = dict(anchor_ranges)

    def add_echo(self, echo):
        key = (min(echo.anchor_i, echo.anchor_j), max(echo.anchor_i, echo.anchor_j))
        self.echoes.setdefault(key, []).append(echo.d)

    def drop_keyframe(self, stamp):
        self.keyframes = [k for k in self.keyframes if k[0] != stamp]
        self.ranges.pop(stamp, None)

    def __len__(self):
        return len(self.keyframes)


def linear_bootstrap(node_positions, distances, params, cond_max=COND_MAX):
    """Rough anchor position from the linear system on squared ranges.

    Solves A [x y z D]^T = b with rows [-2x_r, -2y_r, -2z_r, 1] and
    b = (d - bias)^2 - ||p_r||^2.  Returns (position, consistency_residual)
    where the residual is |D - ||p||^2|.  Raises IllConditioned when A is too
    poorly conditioned to trust (caller keeps accumulating).
    """
    node_positions = np.asarray(node_positions, dtype=float)
    distances = np.asarray(distances, dtype=float)
    n = len(distances)
    if n < 4:
        raise InitError(f"need at least 4 ranges, have {n}")
    A = np.hstack([-2.0 * node_positions, np.ones((n, 1))])
    b = (distances - params.d_bias) ** 2 - np.sum(node_positions ** 2, axis=1)
    cond = np.linalg.cond(A)
    if cond > cond_max:
        raise IllConditioned(f"cond(A) = {cond:.3e} exceeds {cond_max:.1e}")
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    p = x[:3]
    return p, float(abs(x[3] - p @ p))


def _joint_residual_jacobian(positions, anchor_ids, range_data, echo_data, params):
    """Stacked weighted residuals/Jacobian (dr/dx) for the joint cost."""
    idx = {a: i for i, a in enumerate(anchor_ids)}
    dim = 3 * len(anchor_ids)
    res_parts, jac_parts = [], []
    for a in anchor_ids:
        pa = positions[idx[a]]
        nodes = np.array([p_r for p_r, _ in range_data[a]])
        ds = np.array([d for _, d in range_data[a]])
        diff = pa - nodes
        rng = np.maximum(np.linalg.norm(diff, axis=1), 1e-12)
        res_parts.append((ds - params.d_bias - rng) / params.sigma_r)
        block = np.zeros((len(ds), dim))
        block[:, 3 * idx[a]:3 * idx[a] + 3] = -diff / rng[:, None] / params.sigma_r
        jac_parts.append(block)
    for (i, j_id), ds in echo_data.items():
        pi, pj = positions[idx[i]], positions[idx[j_id]]
        diff = pi - pj
        rng = max(np.linalg.norm(diff), 1e-12)
        u = diff / rng
        ds = np.asarray(ds, dtype=float)
        res_parts.append((ds - params.d_bias - rng) / params.sigma_e)
        block = np.zeros((len(ds), dim))
        block[:, 3 * idx[i]:3 * idx[i] + 3] = -u / params.sigma_e
        block[:, 3 * idx[j_id]:3 * idx[j_id] + 3] = u / params.sigma_e
        jac_parts.append(block)
    return np.concatenate(res_parts), np.vstack(jac_parts)


def refine_joint(initial, range_data, echo_data, params):
    """Damped Gauss-Newton on the joint cost over all anchors.

    ``initial`` maps anchor_id -> position guess; ``range_data`` maps
    anchor_id -> [(node_position, d), ...]; ``echo_data`` maps (i, j) ->
    [d, ...].  Returns (positions dict, info dict with iterations, cost and
    the solver covariance = inverse of the weighted normal matrix).
    """
    anchor_ids = sorted(initial)
    x = np.array([initial[a] for a in anchor_ids], dtype=float)
    if not np.all(np.isfinite(x)):
        raise InitFailed("non-finite initial guess")

    r, J = _joint_residual_jacobian(x, anchor_ids, range_data, echo_data, params)
    cost = float(r @ r)
    iters = 0
    bad_streak = 0
    for iters in range(1, GN_MAX_ITERS + 1):
        JtJ = J.T @ J
        try:
            step = -np.linalg.solve(JtJ, J.T @ r)
        except np.linalg.LinAlgError as exc:
            raise InitFailed(f"singular normal matrix: {exc}") from exc
        step = step.reshape(-1, 3)

        # step-halving line search as divergence protection
        alpha = 1.0
        improved = False
        for _ in range(8):
            x_try = x + alpha * step
            r_try, J_try = _joint_residual_jacobian(
                x_try, anchor_ids, range_data, echo_data, params)
            cost_try = float(r_try @ r_try)
            if cost_try <= cost:
                improved = True
                break
            alpha *= 0.5
        if improved:
            x, r, J, cost = x_try, r_try, J_try, cost_try
            bad_streak = 0
        else:
            bad_streak += 1
            if bad_streak >= 3:
                raise InitFailed("Gauss-Newton diverged (3 rejected steps)")
        if np.linalg.norm(alpha * step) < GN_STEP_TOL:
            break

    JtJ = J.T @ J
    solver_cov = np.linalg.inv(JtJ)
    positions = {a: x[i].copy() for i, a in enumerate(anchor_ids)}
    info = {"iterations": iters, "cost": cost, "solver_cov": solver_cov,
            "anchor_ids": anchor_ids}
    return positions, info


def _givens_compress(Ha, Hx):
    """Orthogonal triangularization of Ha via Givens rotations.

    Applies the same rotations to Hx; returns (Ha1 (3x3), Hx1 (3xN)).
    """
    Ha = Ha.copy()
    Hx = Hx.copy()
    n = Ha.shape[0]
    for col in range(3):
        for row in range(n - 1, col, -1):
            a, b = Ha[row - 1, col], Ha[row, col]
            if b == 0.0:
                continue
            r = np.hypot(a, b)
            c, s = a / r, b / r
            rot = np.array([[c, s], [-s, c]])
            Ha[[row - 1, row]] = rot @ Ha[[row - 1, row]]
            Hx[[row - 1, row]] = rot @ Hx[[row - 1, row]]
    return Ha[:3], Hx[:3]


def range_rows_for_anchor(state, buffer, anchor_p, uwb_params, anchor_id):
    """Stacked (H_x, H_a) rows of the plain range model over the window clones.

    H_x spans the full current error state with nonzeros only on the clone
    blocks the keyframes live in (long window, falling back to short-window
    clones at matching stamps).
    """
    n = state.err_dim
    hx_rows, ha_rows = [], []
    for stamp, q_snap, p_snap in buffer.keyframes:
        d = buffer.ranges.get(stamp, {}).get(anchor_id)
        if d is None:
            continue
        clone = None
        window = None
        for c in state.long_window:
            if c.stamp == stamp:
                clone, window = c, "long"
                break
        if clone is None:
            for c in state.short_window:
                if c.stamp == stamp:
                    clone, window = c, "short"
                    break
        if clone is None:
            continue
        R = clone.rot()
        p_r = clone.p + R.T @ uwb_params.lever_arm
        e = anchor_p - p_r
        rng = np.linalg.norm(e)
        if rng < 1e-9:
            continue
        u = e / rng
        hx = np.zeros(n)
        off = state.clone_offset(window, stamp)
        hx[off:off + 3] = u @ R.T @ skew(uwb_params.lever_arm)
        hx[off + 3:off + 6] = -u
        hx_rows.append(hx)
        ha_rows.append(u)
    if len(ha_rows) < 4:
        raise InitError(f"anchor {anchor_id}: not enough in-state keyframe ranges")
    return np.vstack(hx_rows), np.vstack(ha_rows)


def init_covariance(state, buffer, refined, uwb_params):
    """Anchor covariance blocks from the window poses (Eq.-style compression).

    For each anchor, Givens rotations zero out the excess rows of H_a; with
    the rotated top block H_a1 and the matching H_x1,

        Paa = H_a1^-1 (H_x1 Pxx H_x1^T + sigma_r^2 I) H_a1^-T
        Pxa = -Pxx H_x1^T H_a1^-T
    """
    results = []
    Pxx = state.cov
    for anchor_id, p_a in sorted(refined.items()):
        Hx, Ha = range_rows_for_anchor(state, buffer, p_a, uwb_params, anchor_id)
        Ha1, Hx1 = _givens_compress(Ha, Hx)
        if abs(np.linalg.det(Ha1)) < 1e-12 or np.linalg.cond(Ha1) > 1e12:
            raise InitFailed(f"anchor {anchor_id}: H_a1 singular")
        Ha1_inv = np.linalg.inv(Ha1)
        mid = Hx1 @ Pxx @ Hx1.T + uwb_params.sigma_r ** 2 * np.eye(3)
        paa = Ha1_inv @ mid @ Ha1_inv.T
        paa = 0.5 * (paa + paa.T)
        pxa = -Pxx @ Hx1.T @ Ha1_inv.T
        results.append(AnchorInitResult(anchor_id, np.asarray(p_a), paa, pxa))
    return results


def try_initialize(state, buffer, uwb_params, init_params,
                   use_state_covariance=True):
    """Run the full initialization once enough keyframes accumulated.

    Returns an InitReport on success, None when not ready (too few keyframes
    or a still-ill-conditioned bootstrap; the buffer keeps accumulating).
    Raises InitFailed on an unrecoverable solve failure (caller stays VIO).
    """
    if len(buffer) < init_params.n_min:
        return None

    anchor_ids = sorted({a for r in buffer.ranges.values() for a in r})
    range_data = {a: [] for a in anchor_ids}
    for stamp, q_snap, p_snap in buffer.keyframes:
        pose = _keyframe_pose(state, stamp, q_snap, p_snap)
        if pose is None:
            continue
        R, p = pose
        p_r = p + R.T @ uwb_params.lever_arm
        for a, d in buffer.ranges.get(stamp, {}).items():
            range_data[a].append((p_r, d))

    guesses = {}
    bootstrap_residuals = {}
    try:
        for a in anchor_ids:
            nodes = np.array([pr for pr, _ in range_data[a]])
            ds = np.array([d for _, d in range_data[a]])
            guesses[a], bootstrap_residuals[a] = linear_bootstrap(
                nodes, ds, uwb_params, init_params.cond_max)
    except IllConditioned:
        return None

    positions, info = refine_joint(guesses, range_data, buffer.echoes, uwb_params)

    if use_state_covariance:
        results = init_covariance(state, buffer, positions, uwb_params)
    else:
        # short-window variant: solver covariance, zero cross-covariance
        results = []
        ids = info["anchor_ids"]
        for i, a in enumerate(ids):
            paa = info["solver_cov"][3 * i:3 * i + 3, 3 * i:3 * i + 3]
            paa = 0.5 * (paa + paa.T)
            results.append(AnchorInitResult(
                a, positions[a], paa, np.zeros((state.err_dim, 3))))

    augment_anchors(state, [(r.anchor_id, r.p, r.paa, r.pxa) for r in results])
    marginalize_long_window(state)
    return InitReport(results, info["iterations"], info["cost"],
                      bootstrap_residuals, stamp=state.stamp)


def _keyframe_pose(state, stamp, q_snap, p_snap):
    """Current estimate of a keyframe pose: in-state clone when present,
    otherwise the buffered snapshot (short-window-only variant)."""
    for c in state.long_window:
        if c.stamp == stamp:
            return c.rot(), c.p
    for c in state.short_window:
        if c.stamp == stamp:
            return c.rot(), c.p
    return quat_to_rot(q_snap), p_snap
