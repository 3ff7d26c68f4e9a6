from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

# OpenGL (x right, y up, looking down -z) to OpenCV (x right, y down, looking down +z)
GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; `pose` is the 4x4 world-from-camera transform (OpenCV axes)."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray = field(repr=False)
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be below far ({self.far})")
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {pose.shape}")
        object.__setattr__(self, "pose", pose)

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) @ self.rotation

    def pixel_rays(self, rows: np.ndarray, cols: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Unit world-space rays through the centers of the given pixels."""
        x = (cols + 0.5 - self.cx) / self.fx
        y = (rows + 0.5 - self.cy) / self.fy
        R = self.rotation
        d0 = R[0, 0] * x + R[0, 1] * y + R[0, 2]
        d1 = R[1, 0] * x + R[1, 1] * y + R[1, 2]
        d2 = R[2, 0] * x + R[2, 1] * y + R[2, 2]
        dirs = np.stack([d0, d1, d2], axis=-1)
        dirs = dirs / np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)[..., None]
        origins = np.broadcast_to(self.center, dirs.shape)
        return origins, dirs

    def rays(self) -> Tuple[np.ndarray, np.ndarray]:
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return self.pixel_rays(rows.astype(np.float64), cols.astype(np.float64))

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "pose": self.pose.tolist(),
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        return cls(**{**data, "pose": np.asarray(data["pose"], dtype=np.float64)})


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> np.ndarray:
    """World-from-camera pose (OpenCV axes) placing the camera at `eye` facing `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.sqrt(np.sum(forward * forward))
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right = right / np.sqrt(np.sum(right * right))
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = eye
    return pose
