"""Signed-distance training samples: near-surface sampler and the samples.bin format."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import TriMesh, mesh_signed_distance, sample_surface_points

# fraction of samples per branch: surface + N(0, sigma) noise, twice, then uniform
BRANCHES = ((0.475, 0.01), (0.475, 0.001))
UNIFORM_FRACTION = 0.05


@dataclass
class SdfSamples:
    """A bank of (point, signed distance) pairs; one array row per sample."""

    points: np.ndarray  # (N, 3)
    sdf: np.ndarray  # (N,)
    scene_id: str = ""
    branch: np.ndarray | None = None  # 0: sigma 0.01, 1: sigma 0.001, 2: uniform

    def __len__(self) -> int:
        return len(self.sdf)

    def save(self, path) -> None:
        """float32 records (x, y, z, sdf), little endian."""
        rec = np.concatenate([self.points, self.sdf[:, None]], axis=1).astype("<f4")
        Path(path).write_bytes(rec.tobytes())

    @classmethod
    def load(cls, path, scene_id: str = "") -> "SdfSamples":
        rec = np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(-1, 4).astype(np.float64)
        return cls(rec[:, :3].copy(), rec[:, 3].copy(), scene_id)


def query_cube(center, radius: float, factor: float = 1.25) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned cube centered at ``center`` with half-extent ``factor * radius``."""
    c = np.asarray(center, dtype=np.float64)
    h = factor * radius
    return c - h, c + h


def near_surface_samples(mesh: TriMesh, n: int, seed: int, cube_lo, cube_hi,
                         branches=BRANCHES, check: bool = True) -> SdfSamples:
    """Jittered surface points plus a small uniform share inside the cube.

    Labels are computed from the float32-rounded points so that a bank
    written to disk reproduces its labels exactly on reload.
    """
    if n < 0:
        raise ValidationError("sample count must be non-negative")
    rng = np.random.default_rng(seed)
    counts = [int(round(frac * n)) for frac, _ in branches]
    n_uni = n - sum(counts)
    if n_uni < 0:
        raise ValidationError("branch fractions exceed 1")
    surf = sample_surface_points(mesh, sum(counts), seed=int(rng.integers(2 ** 31)))
    pts, tags = [], []
    start = 0
    for k, ((_, sigma), c) in enumerate(zip(branches, counts)):
        p = surf[start:start + c]
        start += c
        pts.append(p + rng.normal(0.0, 1.0, size=p.shape) * sigma)
        tags.append(np.full(c, k))
    lo = np.asarray(cube_lo, dtype=np.float64)
    hi = np.asarray(cube_hi, dtype=np.float64)
    pts.append(lo + rng.random((n_uni, 3)) * (hi - lo))
    tags.append(np.full(n_uni, len(branches)))
    points = np.concatenate(pts).astype(np.float32).astype(np.float64)
    sdf = mesh_signed_distance(mesh, points, check=check)
    return SdfSamples(points, sdf, branch=np.concatenate(tags))
