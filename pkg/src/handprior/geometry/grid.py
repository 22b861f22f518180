"""Regular voxel grids, their binary I/O, and iso-surface extraction."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage import measure

from ..errors import ValidationError
from .mesh import TriMesh


@dataclass
class VoxelGrid:
    """Scalar (or multi-channel) samples at nodes ``origin + index * cell_size``.

    ``values`` is indexed ``[i, j, k(, channel)]`` with i along x.
    """

    origin: np.ndarray
    cell_size: float
    values: np.ndarray
    kind: str = "sdf"  # "sdf" | "occupancy" | "latent"

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.values = np.asarray(self.values)
        if self.cell_size <= 0:
            raise ValidationError("cell size must be positive")
        if self.values.ndim < 3 or min(self.values.shape[:3]) < 2:
            raise ValidationError("grid resolution must be at least 2 per axis")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape[:3])

    @property
    def channels(self) -> int:
        return 1 if self.values.ndim == 3 else int(self.values.shape[3])

    def node_positions(self) -> np.ndarray:
        return grid_nodes(self.origin, self.cell_size, self.resolution)

    @classmethod
    def from_bounds(cls, lo, hi, resolution: int, values=None, kind="sdf") -> "VoxelGrid":
        """Nodes spanning [lo, hi] inclusive along each axis (cubic cells)."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        cell = float((hi - lo).max() / (resolution - 1))
        if values is None:
            values = np.zeros((resolution,) * 3)
        return cls(lo, cell, values, kind)


def grid_nodes(origin, cell_size: float, resolution) -> np.ndarray:
    """(nx*ny*nz, 3) node positions in C order (k fastest)."""
    axes = [origin[a] + cell_size * np.arange(resolution[a]) for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)


def save_grid(grid: VoxelGrid, path) -> None:
    """Raw little-endian float32 (x fastest) plus ``<path>.json`` sidecar."""
    path = Path(path)
    vals = grid.values if grid.values.ndim == 4 else grid.values[..., None]
    # x-fastest order of a [i, j, k, c] array: channel slowest, then k, j, i
    buf = np.ascontiguousarray(np.transpose(vals, (3, 2, 1, 0))).astype("<f4")
    path.write_bytes(buf.tobytes())
    meta = {"origin": [float(v) for v in grid.origin], "cell_size": float(grid.cell_size),
            "resolution": list(grid.resolution), "kind": grid.kind, "channels": grid.channels}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))


def load_grid(path) -> VoxelGrid:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    nx, ny, nz = meta["resolution"]
    c = int(meta.get("channels", 1))
    buf = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(c, nz, ny, nx)
    vals = np.transpose(buf, (3, 2, 1, 0)).astype(np.float64)
    if c == 1:
        vals = vals[..., 0]
    return VoxelGrid(np.array(meta["origin"]), float(meta["cell_size"]), vals, meta["kind"])


def marching_cubes(grid: VoxelGrid, iso: float = 0.0) -> TriMesh:
    """Iso-surface of a scalar grid; values below ``iso`` are inside.

    Faces are oriented outward (toward increasing values). Nodes exactly on the
    iso value count as inside. A grid with no crossing yields an empty mesh.
    """
    vals = np.asarray(grid.values, dtype=np.float64)
    if vals.ndim != 3:
        raise ValidationError("marching cubes needs a scalar grid")
    if not np.all(np.isfinite(vals)):
        raise ValidationError("grid contains non-finite values")
    vals = vals - iso
    # ties go inside; keeps the crossing strictly between nodes
    tiny = 1e-12 * max(1.0, float(np.abs(vals).max()))
    vals = np.where(vals == 0.0, -tiny, vals)
    if vals.min() > 0 or vals.max() < 0:
        return TriMesh.empty()
    verts, faces, _, _ = measure.marching_cubes(vals, 0.0, spacing=(grid.cell_size,) * 3,
                                                allow_degenerate=False, method="lewiner")
    verts = verts.astype(np.float64) + grid.origin
    return TriMesh(verts, faces.astype(np.int64))
