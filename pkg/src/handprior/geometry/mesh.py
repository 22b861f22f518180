"""Triangle meshes: topology checks, surface sampling, OBJ I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import EmptyMesh, NonManifold, ValidationError

# documentation constant: vertex count of the licensed parametric hand this proxy replaces
MANO_VERTEX_COUNT = 778


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64, meters
    faces: np.ndarray  # (F, 3) int64, counter-clockwise seen from outside

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValidationError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def signed_volume(self) -> float:
        tri = self.triangles()
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            raise EmptyMesh("mesh has no vertices")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, T) -> "TriMesh":
        return TriMesh(T.apply(self.vertices), self.faces)

    def scaled(self, s: float) -> "TriMesh":
        return TriMesh(self.vertices * s, self.faces)

    def translated(self, t) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(t, dtype=np.float64), self.faces)

    def flipped(self) -> "TriMesh":
        return TriMesh(self.vertices, self.faces[:, ::-1])

    # topology -----------------------------------------------------------
    def edge_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and how many faces use each."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    @property
    def is_watertight(self) -> bool:
        if self.is_empty:
            return False
        _, counts = self.edge_counts()
        return bool(np.all(counts == 2))


def euler_characteristic(mesh: TriMesh) -> int:
    """V - E + F over referenced vertices and unique undirected edges."""
    if mesh.is_empty:
        return 0
    edges, counts = mesh.edge_counts()
    if np.any(counts > 2):
        raise NonManifold("an edge is shared by more than two faces")
    n_vertices = len(np.unique(mesh.faces))
    return int(n_vertices - len(edges) + len(mesh.faces))


def concatenate(meshes: list[TriMesh]) -> TriMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    if not verts:
        return TriMesh.empty()
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


def sample_surface_points(mesh: TriMesh, n: int, seed: int, return_faces: bool = False):
    """Area-weighted uniform samples on the surface, deterministic given ``seed``."""
    if n < 0:
        raise ValidationError("sample count must be non-negative")
    if mesh.is_empty:
        raise EmptyMesh("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    if n == 0:
        pts = np.zeros((0, 3))
        return (pts, np.zeros(0, dtype=np.int64)) if return_faces else pts
    areas = mesh.face_areas()
    cdf = np.cumsum(areas)
    cdf /= cdf[-1]
    face_idx = np.searchsorted(cdf, rng.random(n), side="right")
    face_idx = np.minimum(face_idx, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[face_idx]]
    pts = ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
           + (r1 * r2)[:, None] * tri[:, 2])
    return (pts, face_idx) if return_faces else pts


def save_obj(mesh: TriMesh, path) -> None:
    """ASCII OBJ, v/f records only, 1-based indices; floats written losslessly."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1])
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))
