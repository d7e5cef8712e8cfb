"""Unit-quaternion helpers, w-x-y-z component order throughout.

Conventions: right-handed frames, y up, z forward. ``from_yaw_pitch_roll``
composes intrinsic rotations yaw (about +y), then pitch (about +x), then
roll (about +z); see docs/pose_conventions.md for a worked example.
"""

import numpy as np

from .errors import ParameterError

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q) -> np.ndarray:
    """Scale to unit norm; the zero quaternion falls back to identity."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        return IDENTITY.copy()
    return q / n


def canonicalize(q) -> np.ndarray:
    """Flip sign so w >= 0; q and -q encode the same rotation."""
    q = np.asarray(q, dtype=np.float64)
    return -q if q[0] < 0 else q.copy()


def conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = np.asarray(a, dtype=np.float64)
    bw, bx, by, bz = np.asarray(b, dtype=np.float64)
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion."""
    w, x, y, z = normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def from_matrix(R) -> np.ndarray:
    """Unit quaternion of a proper rotation matrix (largest-pivot branch)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return canonicalize(normalize(q))


def from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ParameterError("rotation axis must be nonzero")
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def from_yaw_pitch_roll(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Intrinsic yaw (about +y), pitch (about +x), roll (about +z), radians."""
    qy = from_axis_angle([0.0, 1.0, 0.0], yaw)
    qx = from_axis_angle([1.0, 0.0, 0.0], pitch)
    qz = from_axis_angle([0.0, 0.0, 1.0], roll)
    return multiply(multiply(qy, qx), qz)


def rotate(q, v) -> np.ndarray:
    """Rotate 3-vectors (shape (3,) or (n, 3)) by a unit quaternion."""
    R = to_matrix(q)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        return R @ v
    return v @ R.T


def angle_between(q1, q2) -> float:
    """Rotation angle in radians between two unit quaternions.

    Uses the chord length of sign-aligned quaternions, which stays accurate
    for very small angles where an arccos of the dot product would not.
    """
    q1 = normalize(q1)
    q2 = normalize(q2)
    if np.dot(q1, q2) < 0:
        q2 = -q2
    chord = np.linalg.norm(q1 - q2)
    return 2.0 * np.arcsin(min(1.0, 0.5 * chord))
