"""
Camera Module
Pinhole intrinsics, world-to-camera poses and the small rotation toolkit
shared by the renderer, the appearance encoder and bundle adjustment
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from modules.errors import RejectedInputError


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix so that hat(w) @ v == cross(w, v)"""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy],
                     [wz, 0.0, -wx],
                     [-wy, wx, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Axis-angle vector to rotation matrix"""
    return Rotation.from_rotvec(np.asarray(w, dtype=np.float64)).as_matrix()


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to axis-angle vector"""
    return Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_rotvec()


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0"""
    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    q = np.array([w, x, y, z])
    if q[0] < 0.0:
        q = -q
    return q


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; the input is normalised first"""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm == 0.0:
        raise RejectedInputError(f"quaternion {q} cannot be normalised")
    w, x, y, z = q / norm
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def quaternions_to_rotations(q: np.ndarray) -> np.ndarray:
    """Batched (n, 4) unit quaternions (w, x, y, z) to (n, 3, 3) rotations.

    Written out explicitly because the rasterizer differentiates this exact
    polynomial form; it assumes the quaternions are already unit length.
    """
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[:, 0, 1] = 2.0 * (x * y - w * z)
    R[:, 0, 2] = 2.0 * (x * z + w * y)
    R[:, 1, 0] = 2.0 * (x * y + w * z)
    R[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[:, 1, 2] = 2.0 * (y * z - w * x)
    R[:, 2, 0] = 2.0 * (x * z - w * y)
    R[:, 2, 1] = 2.0 * (y * z + w * x)
    R[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def rotation_grad_to_quaternion(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull dL/dR (n, 3, 3) back through quaternions_to_rotations"""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = dR
    dw = 2.0 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
                - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2.0 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2.0 * x * g[:, 1, 1]
                - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2.0 * x * g[:, 2, 2])
    dy = 2.0 * (-2.0 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
                + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2.0 * y * g[:, 2, 2])
    dz = 2.0 * (-2.0 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
                - 2.0 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=1)


@dataclass
class PinholeCamera:
    """Pinhole intrinsics in pixels; pixel (row, col) has its center at (col + 0.5, row + 0.5)"""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise RejectedInputError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise RejectedInputError(f"image size must be at least 1x1, got {self.width}x{self.height}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {'fx': self.fx, 'fy': self.fy, 'cx': self.cx, 'cy': self.cy,
                'width': int(self.width), 'height': int(self.height)}

    @classmethod
    def from_dict(cls, data: dict) -> "PinholeCamera":
        return cls(float(data['fx']), float(data['fy']), float(data['cx']), float(data['cy']),
                   int(data['width']), int(data['height']))


@dataclass
class CameraPose:
    """World-to-camera rigid transform: x_cam = R @ x_world + t"""
    R: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    def validate(self, tol: float = 1e-9) -> None:
        if not (np.all(np.isfinite(self.R)) and np.all(np.isfinite(self.t))):
            raise RejectedInputError("pose contains non-finite values")
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > tol:
            raise RejectedInputError("pose rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > tol:
            raise RejectedInputError("pose rotation has determinant != 1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates"""
        return -self.R.T @ self.t

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points (n, 3) into the camera frame"""
        return points @ self.R.T + self.t

    def compose_left(self, w: np.ndarray, v: np.ndarray) -> "CameraPose":
        """Apply the increment [Exp(w) | v] on the left of this pose"""
        dR = so3_exp(w)
        return CameraPose(dR @ self.R, dR @ self.t + v)

    def copy(self) -> "CameraPose":
        return CameraPose(self.R.copy(), self.t.copy())

    def encode(self) -> np.ndarray:
        """Seven-number encoding [qw, qx, qy, qz, tx, ty, tz] used by the appearance encoder"""
        return np.concatenate([rotation_to_quaternion(self.R), self.t])

    def to_tum(self) -> Tuple[np.ndarray, np.ndarray]:
        """Camera-to-world translation and (qx, qy, qz, qw) as stored in TUM files"""
        R_cw = self.R.T
        w, x, y, z = rotation_to_quaternion(R_cw)
        return self.center, np.array([x, y, z, w])

    @classmethod
    def from_tum(cls, position: np.ndarray, quat_xyzw: np.ndarray) -> "CameraPose":
        qx, qy, qz, qw = quat_xyzw
        R_cw = quaternion_to_rotation([qw, qx, qy, qz])
        R = R_cw.T
        return cls(R, -R @ np.asarray(position, dtype=np.float64))

    @classmethod
    def look_at(cls, eye: np.ndarray, target: np.ndarray,
                up: np.ndarray = (0.0, 1.0, 0.0)) -> "CameraPose":
        """Camera at `eye` looking at `target`, image y axis pointing away from `up`"""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise RejectedInputError("look_at: viewing direction is parallel to up")
        right /= norm
        down = np.cross(forward, right)
        R_cw = np.stack([right, down, forward], axis=1)
        R = R_cw.T
        return cls(R, -R @ eye)
