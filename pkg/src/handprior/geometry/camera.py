"""Pinhole camera and projection.

Pixel centers sit at integer coordinates: column ``u`` and row ``v`` of pixel
``(row, col)`` are ``(col, row)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import BehindCamera, ValidationError
from .transforms import RigidTransform


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 64
    height: int = 64
    pose: RigidTransform = field(default_factory=RigidTransform.identity)  # world -> camera

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValidationError("image must be at least 8x8")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_camera(self, points_world: np.ndarray) -> np.ndarray:
        return self.pose.apply(points_world)

    def project_world(self, points_world: np.ndarray) -> np.ndarray:
        return project(self.to_camera(points_world), self)

    def moved(self, g: RigidTransform) -> "Camera":
        """The same camera rigidly carried along by the world motion ``g``."""
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      self.pose.compose(g.inverse()))

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "pose": self.pose.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), RigidTransform.from_json(d["pose"]))


def project(x_cam: np.ndarray, camera: Camera) -> np.ndarray:
    """Camera-space point(s) to pixel coordinates ``(u, v)``."""
    x = np.asarray(x_cam, dtype=np.float64)
    z = x[..., 2]
    if np.any(z <= 0):
        raise BehindCamera("point at or behind the image plane")
    u = camera.fx * x[..., 0] / z + camera.cx
    v = camera.fy * x[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World->camera transform with +z toward ``target``, +y pointing image-down."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = target - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    return RigidTransform(R, -R @ eye)
