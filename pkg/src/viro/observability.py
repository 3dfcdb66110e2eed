"""Numerical observability analysis for the 24-dim inertial + one-feature +
two-anchor system.

The observability matrix stacks H_k Phi_{k,1} over time: per step two visual
rows, two robot-anchor ranging rows and one inter-anchor echo row.  Three
linearization regimes are supported:

* ideal  - every Jacobian and every transition factor at the true states;
* actual - fresh estimation error drawn for each linearization request,
  emulating re-linearization at ever-changing estimates (prediction and
  corrected estimate per epoch are drawn independently, which is what breaks
  the transition chain);
* fej    - one first estimate per epoch, shared by the measurement Jacobian
  and the adjacent transition factors, so the chain stays consistent.
"""

from dataclasses import dataclass, field

import numpy as np

from .mathx import skew, so3_exp
from .propagation import phi_imu_step
from .ranging import UwbParams, squared_range_jacobians, echo_jacobians
from .vision import CameraExtrinsics, projection_jacobians

DIM = 24
TH = slice(0, 3)
V = slice(6, 9)
P = slice(12, 15)
F = slice(15, 18)
A1 = slice(18, 21)
A2 = slice(21, 24)

RANK_TOL = 1e-8


@dataclass
class AnalysisSetup:
    """Geometry of the analysis system: one overhead feature, two anchors."""
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 9.81]))
    lever_arm: np.ndarray = field(default_factory=lambda: np.array([0.05, 0.03, 0.10]))
    p_f: np.ndarray = field(default_factory=lambda: np.array([0.8, -0.5, 10.0]))
    p_a1: np.ndarray = field(default_factory=lambda: np.array([7.0, 6.0, 1.0]))
    p_a2: np.ndarray = field(default_factory=lambda: np.array([-6.0, 6.0, 2.2]))
    sigma_pos: float = 0.05
    sigma_rot: float = 0.01
    # identity mount: camera optical axis up, so the overhead feature stays in view
    extrinsics: CameraExtrinsics = field(default_factory=CameraExtrinsics)

    def uwb(self):
        return UwbParams(lever_arm=self.lever_arm)


@dataclass
class ObservabilityReport:
    mode: str
    n_steps: int
    residuals: np.ndarray         # length 4: N1 columns then N2
    rank: int
    singular_values: np.ndarray
    degenerate: bool = False

    @property
    def n1_residual(self):
        return float(np.max(self.residuals[:3]))

    @property
    def n2_residual(self):
        return float(self.residuals[3])

    def rows(self):
        return [{
            "mode": self.mode,
            "direction": name,
            "residual": float(res),
            "rank": self.rank,
            "sigma_max": float(self.singular_values[0]),
            "sigma_tail": float(self.singular_values[-1]),
            "degenerate": int(self.degenerate),
        } for name, res in zip(("N1_x", "N1_y", "N1_z", "N2"), self.residuals)]


def nullspace_candidates(R1, v1, p1, p_f, p_a1, p_a2, gravity):
    """Candidate unobservable directions: global translation (3) and rotation
    about gravity (1), evaluated at the initial linearization states."""
    g = np.asarray(gravity, dtype=float)
    N1 = np.zeros((DIM, 3))
    N1[P] = np.eye(3)
    N1[F] = np.eye(3)
    N1[A1] = np.eye(3)
    N1[A2] = np.eye(3)
    N2 = np.zeros(DIM)
    N2[TH] = R1 @ g
    N2[V] = -skew(v1) @ g
    N2[P] = -skew(p1) @ g
    N2[F] = -skew(p_f) @ g
    N2[A1] = -skew(p_a1) @ g
    N2[A2] = -skew(p_a2) @ g
    return N1, N2


def measurement_rows(R, p, p_f, p_a1, p_a2, setup):
    """Stacked H_k (5 x 24): visual pair, two ranging rows, one echo row."""
    H = np.zeros((5, DIM))
    H_pose, H_feat = projection_jacobians(R, p, p_f, setup.extrinsics)
    H[0:2, TH] = H_pose[:, 0:3]
    H[0:2, P] = H_pose[:, 3:6]
    H[0:2, F] = H_feat
    uwb = setup.uwb()
    for i, (pa, sl) in enumerate(((p_a1, A1), (p_a2, A2))):
        row_th, row_p, row_a = squared_range_jacobians(R, p, pa, uwb)
        H[2 + i, TH] = row_th
        H[2 + i, P] = row_p
        H[2 + i, sl] = row_a
    row_i, row_j = echo_jacobians(p_a1, p_a2)
    H[4, A1] = row_i
    H[4, A2] = row_j
    return H


class _Linearizer:
    """Provides linearization states per epoch for the three regimes."""

    def __init__(self, traj, setup, mode, seed):
        self.traj = traj
        self.setup = setup
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self._epoch_cache = {}
        if mode == "ideal":
            self.p_f = setup.p_f.copy()
            self.p_a1 = setup.p_a1.copy()
            self.p_a2 = setup.p_a2.copy()
        else:
            self.p_f = self._point(setup.p_f)
            self.p_a1 = self._point(setup.p_a1)
            self.p_a2 = self._point(setup.p_a2)

    def _point(self, p):
        return p + self.setup.sigma_pos * self.rng.standard_normal(3)

    def _noisy_state(self, k):
        R, v, p = self.traj[k]
        dth = self.setup.sigma_rot * self.rng.standard_normal(3)
        return (so3_exp(-dth) @ R,
                v + self.setup.sigma_pos * self.rng.standard_normal(3),
                p + self.setup.sigma_pos * self.rng.standard_normal(3))

    def prediction(self, k):
        """First estimate at epoch k (one per epoch in fej mode)."""
        if self.mode == "ideal":
            return self.traj[k]
        if self.mode == "fej":
            if k not in self._epoch_cache:
                self._epoch_cache[k] = self._noisy_state(k)
            return self._epoch_cache[k]
        return self._noisy_state(k)

    def corrected(self, k):
        """Post-update estimate at epoch k (chain start of the next factor)."""
        if self.mode in ("ideal", "fej"):
            return self.prediction(k)
        return self._noisy_state(k)

    def points(self, k):
        if self.mode == "actual":
            return (self._point(self.setup.p_f), self._point(self.setup.p_a1),
                    self._point(self.setup.p_a2))
        return self.p_f, self.p_a1, self.p_a2


def trajectory_states(gt, n_steps, dt, t0=0.0):
    """(R, v, p) samples of a GroundTruth-like provider at the analysis rate."""
    return [(gt.rotation(t0 + k * dt), gt.velocity(t0 + k * dt),
             gt.position(t0 + k * dt)) for k in range(n_steps)]


def build_observability_matrix(traj, setup=None, mode="ideal", n_steps=50,
                               dt=0.4, seed=0):
    """Assemble O and report null-space residuals, rank and singular values.

    ``traj`` is either a list of (R, v, p) tuples or a GroundTruth-like
    object with rotation/velocity/position methods.
    """
    setup = setup or AnalysisSetup()
    if hasattr(traj, "rotation"):
        traj = trajectory_states(traj, n_steps, dt)
    n_steps = min(n_steps, len(traj))
    if n_steps < 2:
        raise ValueError("need at least two steps")

    motion = max(np.linalg.norm(traj[k][2] - traj[0][2]) for k in range(n_steps))
    degenerate = motion < 1e-6

    lin = _Linearizer(traj, setup, mode, seed)
    dt_eff = dt

    blocks = []
    Phi = np.eye(DIM)
    prev_end = None
    for k in range(n_steps):
        if k > 0:
            Ra, va, pa = prev_end
            Rb, vb, pb = lin.prediction(k)
            step = np.eye(DIM)
            step[:15, :15] = phi_imu_step(Ra, va, pa, Rb, vb, pb, dt_eff,
                                          setup.gravity)
            Phi = step @ Phi
        R, _, p = lin.prediction(k)
        p_f, p_a1, p_a2 = lin.points(k)
        blocks.append(measurement_rows(R, p, p_f, p_a1, p_a2, setup) @ Phi)
        prev_end = lin.corrected(k)
    O = np.vstack(blocks)

    # candidate directions evaluated at the initial linearization states
    R1, v1, p1 = lin.prediction(0) if mode != "ideal" else traj[0]
    N1, N2 = nullspace_candidates(R1, v1, p1, lin.p_f, lin.p_a1, lin.p_a2,
                                  setup.gravity)
    N = np.column_stack([N1, N2])
    N = N / np.linalg.norm(N, axis=0, keepdims=True)

    sv = np.linalg.svd(O, compute_uv=False)
    residuals = np.linalg.norm(O @ N, axis=0) / sv[0]
    rank = int(np.sum(sv > RANK_TOL * sv[0]))
    return ObservabilityReport(mode, n_steps, residuals, rank, sv, degenerate)


def fej_restoration_check(traj, setup=None, n_steps=50, dt=0.4, seed=0):
    """FEJ linearization restores all four directions under injected error."""
    return build_observability_matrix(traj, setup, mode="fej",
                                      n_steps=n_steps, dt=dt, seed=seed)
