"""Reconstruction and interaction metrics: chamfer distance, penetration depth and volume.

Everything is computed in meters and converted at the return: chamfer in
units of 10 mm^2, penetration depth in cm, penetration volume in cm^3.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMesh, NotWatertight
from .geometry import TriMesh, mesh_signed_distance, sample_surface_points, voxelize
from .hand import mpjpe

M2_TO_CD_UNIT = 1e6 / 10.0  # m^2 -> mm^2 -> 10 mm^2
M_TO_CM = 100.0
M3_TO_CM3 = 1e6

__all__ = ["chamfer", "chamfer_points", "lens_volume", "mpjpe", "penetration_depth", "penetration_volume",
           "sphere_volume"]


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    """mean_a min ||a - b||^2 + mean_b min ||b - a||^2 in m^2."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptyMesh("chamfer needs two nonempty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))


def chamfer(mesh_a: TriMesh, mesh_b: TriMesh, n: int = 30000, seed: int = 0, raw: bool = False) -> float:
    """Two-sided chamfer distance between area-weighted surface samples.

    Both meshes are sampled with the same seed, so swapping the arguments
    gives the same value. Returns 10 mm^2 units, or mm^2 with ``raw``.
    """
    if mesh_a.is_empty or mesh_b.is_empty:
        raise EmptyMesh("chamfer needs two nonempty meshes")
    pa = sample_surface_points(mesh_a, n, seed)
    pb = sample_surface_points(mesh_b, n, seed)
    val = chamfer_points(pa, pb)
    return val * 1e6 if raw else val * M2_TO_CD_UNIT


def _require_watertight(*meshes: TriMesh) -> None:
    for m in meshes:
        if not m.is_watertight:
            raise NotWatertight("penetration metrics need watertight meshes")


def penetration_depth(hand: TriMesh, obj: TriMesh, check: bool = True) -> float:
    """Deepest hand vertex inside the object, in cm; 0 when no vertex is inside."""
    if check:
        _require_watertight(obj)
    if hand.is_empty:
        return 0.0
    sdf = mesh_signed_distance(obj, hand.vertices, check=False)
    return float(max(0.0, -sdf.min())) * M_TO_CM


def penetration_volume(hand: TriMesh, obj: TriMesh, resolution: int = 128, check: bool = True) -> float:
    """Voxelized hand-object intersection in cm^3.

    Both meshes are voxelized by cell-center occupancy on one grid over the
    intersection of their bounding boxes, with ``resolution`` cells along its
    longest side.
    """
    if check:
        _require_watertight(hand, obj)
    if hand.is_empty or obj.is_empty:
        return 0.0
    (alo, ahi), (blo, bhi) = hand.bounds(), obj.bounds()
    lo, hi = np.maximum(alo, blo), np.minimum(ahi, bhi)
    if np.any(hi <= lo):
        return 0.0
    ga = voxelize(hand, resolution, (lo, hi), check=False)
    gb = voxelize(obj, resolution, (lo, hi), check=False)
    count = float(np.sum((ga.values > 0) & (gb.values > 0)))
    return count * ga.cell_size ** 3 * M3_TO_CM3


def sphere_volume(r: float) -> float:
    return 4.0 / 3.0 * np.pi * r ** 3


def lens_volume(r1: float, r2: float, d: float) -> float:
    """Volume of the intersection of two balls with center distance ``d``."""
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return sphere_volume(min(r1, r2))
    return float(np.pi * (r1 + r2 - d) ** 2 * (d ** 2 + 2 * d * (r1 + r2) - 3 * (r1 - r2) ** 2) / (12 * d))
