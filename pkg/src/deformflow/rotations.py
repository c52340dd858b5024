"""Axis-angle rotations: exponential map, its differential, quaternion blending."""
import numpy as np

SMALL_ANGLE = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _coefficients(theta: np.ndarray):
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3) with Taylor fallback near 0."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t**2)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - np.sin(t)) / t**3)
    return a, b, c


def rotation_from_axis_angle(aa) -> np.ndarray:
    """Exponential map from axis-angle vector(s) to rotation matrices.

    Below 1e-6 rad the map uses I + K + K^2 / 2, which is differentiable at 0.
    Accepts (3,) or (n, 3).
    """
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)
    k = skew(aa)
    k2 = k @ k
    small = theta < SMALL_ANGLE
    a, b, _ = _coefficients(theta)
    a = np.where(small, 1.0, a)[..., None, None]
    b = np.where(small, 0.5, b)[..., None, None]
    return np.eye(3) + a * k + b * k2


def left_jacobian(aa) -> np.ndarray:
    """Left Jacobian of SO(3): d/dw [R(w) e] = -[R(w) e]_x J(w)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)
    k = skew(aa)
    _, b, c = _coefficients(theta)
    return np.eye(3) + b[..., None, None] * k + c[..., None, None] * (k @ k)


def canonicalize_axis_angle(aa) -> np.ndarray:
    """Equivalent axis-angle vectors with magnitude in [0, pi]."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    over = theta > np.pi
    if not np.any(over):
        return aa
    wrapped = np.mod(theta, 2 * np.pi)
    wrapped = np.where(wrapped > np.pi, wrapped - 2 * np.pi, wrapped)
    scale = np.where(over, wrapped / np.where(theta > 0, theta, 1.0), 1.0)
    return aa * scale


def quaternion_from_axis_angle(aa) -> np.ndarray:
    """Unit quaternions (w, x, y, z)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    s = np.where(small, 0.5 - theta**2 / 48.0, np.sin(t / 2) / t)
    q = np.concatenate([np.cos(theta / 2)[..., None], s[..., None] * aa], axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def rotation_from_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def blend_quaternions(q: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted quaternion average per row.

    ``q`` is (m, K, 4), ``w`` is (m, K). Each quaternion is sign-aligned with
    the heaviest-weight one before summing, then the sum is normalized.
    """
    heavy = np.argmax(w, axis=1)
    ref = q[np.arange(len(q)), heavy]
    sign = np.where(np.einsum("mki,mi->mk", q, ref) < 0, -1.0, 1.0)
    acc = np.einsum("mk,mki->mi", w * sign, q)
    return acc / np.linalg.norm(acc, axis=1, keepdims=True)
