"""Rigid transforms and rotation construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateAxes, ValidationError, ZeroAxis

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class RigidTransform:
    """x -> R @ x + t, lengths in meters."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("non-finite rigid transform")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or np.linalg.det(R) < 0:
            raise ValidationError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a (3,) point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def to_json(self) -> dict:
        return {"R": [float(v) for v in self.rotation.reshape(-1)],
                "t": [float(v) for v in self.translation]}

    @classmethod
    def from_json(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["R"], dtype=np.float64).reshape(3, 3), np.array(d["t"], dtype=np.float64))


def axis_angle_to_matrix(v: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; ``v`` is axis * angle (radians)."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.eye(3)
    k = v / angle
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    if angle < 1e-12:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # near pi: axis from the symmetric part
        M = (R + np.eye(3)) / 2.0
        axis = M[np.argmax(np.diag(M))]
        axis = axis / np.linalg.norm(axis)
        return axis * angle
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w / (2.0 * np.sin(angle)) * angle


_WORLD_UP = np.array([0.0, 0.0, 1.0])
_WORLD_X = np.array([1.0, 0.0, 0.0])


def rotation_from_decoupled_axes(r1, r2=None) -> np.ndarray:
    """Rotation whose columns are (e1, e2, e1 x e2) built from two shape-aligned axes.

    ``r1`` is normalized; ``r2`` is Gram-Schmidt orthogonalized against it. For
    one-axis symmetric categories pass ``r2=None``: the frame is completed with
    the orthogonalized world up axis, or world x when ``r1`` is (anti)parallel
    to up within 1e-4 rad.
    """
    r1 = np.asarray(r1, dtype=np.float64)
    n1 = np.linalg.norm(r1)
    if n1 <= 1e-8:
        raise ZeroAxis("first rotation axis has (near) zero length")
    e1 = r1 / n1
    if r2 is None:
        if np.sin(_angle_between(e1, _WORLD_UP)) <= 1e-4:
            r2 = _WORLD_X
        else:
            r2 = _WORLD_UP
    else:
        r2 = np.asarray(r2, dtype=np.float64)
        n2 = np.linalg.norm(r2)
        if n2 <= 1e-8 or np.sin(_angle_between(e1, r2 / n2)) <= 1e-4:
            raise DegenerateAxes("rotation axes are parallel")
    u = r2 - (r2 @ e1) * e1
    e2 = u / np.linalg.norm(u)
    # one re-orthogonalization pass keeps R^T R = I at 1e-15 level
    e2 = e2 - (e2 @ e1) * e1
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(e1, e2)
    return np.stack([e1, e2, e3], axis=1)


def _angle_between(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), abs(a @ b)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_rigid(rng: np.random.Generator, scale: float = 1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-scale, scale, size=3))


def perturb_transform(T: RigidTransform, rng: np.random.Generator,
                      max_angle_deg: float = 5.0, max_translation: float = 0.005) -> RigidTransform:
    """Left-multiply by a small rotation (<= max_angle per axis) and shift (<= max_translation per axis).

    The rotation acts about the transform's own origin so that the object stays
    in place up to the translation budget.
    """
    angles = np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg, size=3))
    dR = (axis_angle_to_matrix([angles[0], 0, 0]) @ axis_angle_to_matrix([0, angles[1], 0])
          @ axis_angle_to_matrix([0, 0, angles[2]]))
    dt = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform(dR @ T.rotation, T.translation + dt)
