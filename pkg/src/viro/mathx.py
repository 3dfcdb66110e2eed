"""SO(3) and quaternion kernels shared by every other module.

Conventions (pinned here, relied on everywhere else):

* Quaternions are Hamilton, stored as ``[x, y, z, w]``.
* ``quat_to_rot(q)`` returns the direction-cosine matrix of the rotation the
  quaternion encodes, so the quaternion stored in the filter state maps
  global-frame vectors into the IMU frame: ``x_imu = quat_to_rot(q) @ x_global``.
* Orientation error/retraction: ``R_true = so3_exp(-dtheta) @ R_est``.  All
  Jacobians and null-space expressions in this package assume exactly this
  retraction; it is exercised by the finite-difference oracles in the tests.
"""

import numpy as np

SMALL_ANGLE = 1e-8


def skew(v):
    """Cross-product matrix: skew(v) @ w == np.cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize zero/non-finite quaternion")
    return q / n


def quat_multiply(q1, q2):
    """Hamilton product q1 * q2, both [x, y, z, w]."""
    x1, y1, z1, w1 = q1
    x2, y2, z2, w2 = q2
    return np.array([
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
    ])


def quat_conjugate(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_from_rotvec(phi):
    """Unit quaternion of the rotation so3_exp(phi)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    if angle < SMALL_ANGLE:
        # second-order expansion of sin(a/2)/a and cos(a/2)
        xyz = phi * (0.5 - angle * angle / 48.0)
        w = 1.0 - angle * angle / 8.0
    else:
        xyz = phi * (np.sin(0.5 * angle) / angle)
        w = np.cos(0.5 * angle)
    return quat_normalize(np.array([xyz[0], xyz[1], xyz[2], w]))


def rot_of_quat_raw(q):
    """Rotation matrix of a not-necessarily-normalized quaternion (scale-free)."""
    x, y, z, w = q
    n2 = x * x + y * y + z * z + w * w
    s = 2.0 / n2
    xx, yy, zz = s * x * x, s * y * y, s * z * z
    xy, xz, yz = s * x * y, s * x * z, s * y * z
    wx, wy, wz = s * w * x, s * w * y, s * w * z
    return np.array([
        [1.0 - yy - zz, xy - wz, xz + wy],
        [xy + wz, 1.0 - xx - zz, yz - wx],
        [xz - wy, yz + wx, 1.0 - xx - yy],
    ])


def quat_to_rot(q, tol=1e-6):
    """Rotation matrix of a unit quaternion.

    Raises ValueError if the input norm deviates from 1 by more than ``tol``.
    """
    q = np.asarray(q, dtype=float)
    n = np.sqrt(q @ q)
    if abs(n - 1.0) > tol:
        raise ValueError(f"quaternion norm {n:.3e} is not unit")
    return rot_of_quat_raw(q)


def rot_to_quat(rot):
    """Inverse of quat_to_rot (Shepperd's method); returns w >= 0."""
    m = np.asarray(rot, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    q = quat_normalize(np.array([x, y, z, w]))
    if q[3] < 0.0:
        q = -q
    return q


def so3_exp(theta):
    """Rodrigues formula; Taylor branch below SMALL_ANGLE radians."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    tx = skew(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) + tx + 0.5 * (tx @ tx)
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * tx + b * (tx @ tx)


def so3_log(rot):
    """Rotation vector of R; inverse of so3_exp for angles below pi."""
    m = np.asarray(rot, dtype=float)
    cos_angle = np.clip((m[0, 0] + m[1, 1] + m[2, 2] - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    axis_raw = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    if angle < SMALL_ANGLE:
        return 0.5 * axis_raw
    if angle > np.pi - 1e-7:
        # near pi the off-diagonal difference vanishes; recover axis from R + I
        b = (m + np.eye(3)) * 0.5
        axis = np.sqrt(np.clip(np.diag(b), 0.0, None))
        k = int(np.argmax(axis))
        if axis[k] > 0.0:
            axis = b[:, k] / axis[k]
            axis = axis / np.linalg.norm(axis)
        signs = np.sign(axis_raw)
        if np.any(signs != 0):
            # pick a sign consistent with the (tiny) antisymmetric part
            if np.dot(axis, axis_raw) < 0:
                axis = -axis
        return angle * axis
    return (0.5 * angle / np.sin(angle)) * axis_raw


def is_rotation(rot, tol=1e-10):
    rot = np.asarray(rot, dtype=float)
    return (
        np.allclose(rot.T @ rot, np.eye(3), atol=tol)
        and abs(np.linalg.det(rot) - 1.0) <= tol
    )
