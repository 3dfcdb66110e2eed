"""IMU mean propagation (RK4, zero-order hold) and analytical covariance
propagation.

The per-interval state transition matrix is built in closed form from the
linearization states at the interval endpoints:

    phi_11 = R_b R_a^T
    phi_31 = -skew(v_b - v_a + g dt) R_a^T
    phi_51 = -skew(p_b - p_a - v_a dt + 0.5 g dt^2) R_a^T
    phi_53 = dt I

with first-order quadrature for the bias columns.  Written this way the
per-interval factors compose telescopically, which is what keeps the
unobservable subspace intact when the endpoints are taken from first
estimates instead of the latest corrected ones.
"""

from dataclasses import dataclass

import numpy as np

from .mathx import quat_multiply, quat_normalize, quat_to_rot, rot_of_quat_raw, skew
from .state import BA, BG, IMU_DIM, P, TH, V


class PropagationError(Exception):
    pass


@dataclass
class ImuSample:
    stamp: float
    omega_m: np.ndarray
    accel_m: np.ndarray


@dataclass
class NoiseParams:
    sigma_g: float = 1.7e-4
    sigma_wg: float = 2.0e-5
    sigma_a: float = 2.0e-3
    sigma_wa: float = 3.0e-3

    def __post_init__(self):
        for name in ("sigma_g", "sigma_wg", "sigma_a", "sigma_wa"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Phi:
    """State transition over one propagation interval.

    Only the 15x15 IMU block differs from identity; every clone, feature and
    anchor block is exactly identity with zero cross terms.
    """
    imu_block: np.ndarray
    dim: int

    def expand(self):
        full = np.eye(self.dim)
        full[:IMU_DIM, :IMU_DIM] = self.imu_block
        return full


def _check_samples(samples):
    if not samples:
        raise PropagationError("empty IMU sample batch")
    stamps = [s.stamp for s in samples]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise PropagationError("non-monotone IMU stamps")


def _quat_dot(q, omega):
    # q encodes the global-to-IMU rotation; R_dot = -skew(omega) R
    wx, wy, wz = omega
    x, y, z, w = q
    return 0.5 * np.array([
        -wx * w - wy * z + wz * y,
        wx * z - wy * w - wz * x,
        -wx * y + wy * x - wz * w,
        wx * x + wy * y + wz * z,
    ])


def _imu_derivative(q, v, omega, accel, gravity):
    R = rot_of_quat_raw(q)
    return _quat_dot(q, omega), R.T @ accel - gravity, v


def rk4_step(imu, omega, accel, gravity, dt):
    """One RK4 step of the inertial kinematics with constant inputs.

    Returns (q, v, p) at the end of the interval; biases are constant over a
    step (their random walk enters through the process noise only).
    """
    omega = omega - imu.bg
    accel = accel - imu.ba
    q0, v0, p0 = imu.q, imu.v, imu.p

    k1q, k1v, k1p = _imu_derivative(q0, v0, omega, accel, gravity)
    k2q, k2v, k2p = _imu_derivative(q0 + 0.5 * dt * k1q, v0 + 0.5 * dt * k1v,
                                    omega, accel, gravity)
    k3q, k3v, k3p = _imu_derivative(q0 + 0.5 * dt * k2q, v0 + 0.5 * dt * k2v,
                                    omega, accel, gravity)
    k4q, k4v, k4p = _imu_derivative(q0 + dt * k3q, v0 + dt * k3v,
                                    omega, accel, gravity)

    q = quat_normalize(q0 + (dt / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q))
    v = v0 + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    p = p0 + (dt / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
    return q, v, p


def propagate_mean(state, samples):
    """Advance the IMU state through an ordered batch of samples (in place).

    Sample i's measurements are held constant over [t_i, t_{i+1}]; the final
    sample only terminates the batch.  Other state blocks are untouched.
    """
    _check_samples(samples)
    for a, b in zip(samples, samples[1:]):
        dt = b.stamp - a.stamp
        q, v, p = rk4_step(state.imu, a.omega_m, a.accel_m, state.gravity, dt)
        state.imu.q, state.imu.v, state.imu.p = q, v, p
    state.stamp = samples[-1].stamp
    return state


def phi_imu_step(R_a, v_a, p_a, R_b, v_b, p_b, dt, gravity):
    """Closed-form 15x15 transition block between two linearization states."""
    phi = np.eye(IMU_DIM)
    phi11 = R_b @ R_a.T
    dvg = v_b - v_a + gravity * dt
    dpg = p_b - p_a - v_a * dt + 0.5 * gravity * dt * dt
    RaT = R_a.T

    phi[TH, TH] = phi11
    phi[TH, BG] = -0.5 * dt * (phi11 + np.eye(3))
    phi[V, TH] = -skew(dvg) @ RaT
    phi[V, BG] = 0.5 * dt * skew(dvg) @ RaT
    phi[V, BA] = -0.5 * dt * (RaT + R_b.T)
    phi[P, TH] = -skew(dpg) @ RaT
    phi[P, BG] = (dt / 3.0) * skew(dpg) @ RaT
    phi[P, V] = dt * np.eye(3)
    phi[P, BA] = -(dt * dt / 6.0) * (2.0 * RaT + R_b.T)
    return phi


def _qd_step(noise, dt):
    qd = np.zeros((IMU_DIM, IMU_DIM))
    qd[TH, TH] = noise.sigma_g ** 2 * dt * np.eye(3)
    qd[BG, BG] = noise.sigma_wg ** 2 * dt * np.eye(3)
    qd[V, V] = noise.sigma_a ** 2 * dt * np.eye(3)
    qd[BA, BA] = noise.sigma_wa ** 2 * dt * np.eye(3)
    return qd


def _integrate_with_phi(imu, samples, gravity, noise, fej_start):
    """Single pass: RK4 mean + composed closed-form Phi + accumulated Qd.

    Mutates ``imu``; the linearization chain starts at ``fej_start`` when
    given (first estimate at the batch start) and flows through the
    propagated means afterwards, so consecutive batches telescope.
    """
    lin = fej_start if fej_start is not None else imu
    R_prev = quat_to_rot(lin.q)
    v_prev, p_prev = lin.v.copy(), lin.p.copy()

    phi_acc = np.eye(IMU_DIM)
    qd_acc = np.zeros((IMU_DIM, IMU_DIM))
    for a, b in zip(samples, samples[1:]):
        dt = b.stamp - a.stamp
        q, v, p = rk4_step(imu, a.omega_m, a.accel_m, gravity, dt)
        imu.q, imu.v, imu.p = q, v, p
        R_new = quat_to_rot(q)
        step = phi_imu_step(R_prev, v_prev, p_prev, R_new, v, p, dt, gravity)
        phi_acc = step @ phi_acc
        qd_acc = step @ qd_acc @ step.T + _qd_step(noise, dt)
        R_prev, v_prev, p_prev = R_new, v, p

    return phi_acc, 0.5 * (qd_acc + qd_acc.T)


def compute_phi_qd(state, samples, noise, fej_start=None):
    """Composed (Phi, Qd) over a sample batch, without touching the state.

    The mean is re-integrated internally on a scratch copy.  When
    ``fej_start`` (an ImuState holding the first estimate at the batch start)
    is given, the first interval linearizes there instead of at the current
    estimate.
    """
    _check_samples(samples)
    imu = state.imu.copy()
    phi_acc, qd_acc = _integrate_with_phi(imu, samples, state.gravity, noise, fej_start)
    return Phi(imu_block=phi_acc, dim=state.err_dim), qd_acc


def propagate_covariance(state, phi, qd):
    """P <- Phi P Phi^T + Qd exploiting the identity clone/anchor blocks."""
    n = state.err_dim
    if phi.dim != n:
        raise PropagationError(f"Phi dimension {phi.dim} != state {n}")
    if qd.shape != (IMU_DIM, IMU_DIM) and qd.shape != (n, n):
        raise PropagationError(f"Qd shape {qd.shape} unsupported")
    F = phi.imu_block
    P = state.cov
    PII = P[:IMU_DIM, :IMU_DIM]
    PIx = P[:IMU_DIM, IMU_DIM:]
    new = P.copy()
    new[:IMU_DIM, :IMU_DIM] = F @ PII @ F.T
    new[:IMU_DIM, IMU_DIM:] = F @ PIx
    new[IMU_DIM:, :IMU_DIM] = (F @ PIx).T
    if qd.shape == (n, n):
        new += qd
    else:
        new[:IMU_DIM, :IMU_DIM] += qd
    state.cov = new
    state.symmetrize()
    return state


def propagate(state, samples, noise, use_fej=True):
    """Full propagation used by the pipeline: mean + covariance + FEJ ledger.

    Records the propagated prediction as the first estimate of the new epoch.
    """
    _check_samples(samples)
    fej_start = None
    if use_fej and state.fej.has_imu():
        fej_start = state.fej.latest_imu()
    phi_block, qd = _integrate_with_phi(state.imu, samples, state.gravity,
                                        noise, fej_start)
    state.stamp = samples[-1].stamp
    phi = Phi(imu_block=phi_block, dim=state.err_dim)
    propagate_covariance(state, phi, qd)
    state.fej.record(("imu", state.stamp), state.imu)
    return phi, qd
