"""Closed procedural meshes used as test shapes and building blocks."""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh


def icosahedron(radius: float = 1.0) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    v *= radius / np.linalg.norm(v[0])
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return TriMesh(v, f)


def icosphere(radius: float = 1.0, subdivisions: int = 2, center=(0.0, 0.0, 0.0)) -> TriMesh:
    mesh = icosahedron(1.0)
    verts = [tuple(p) for p in mesh.vertices]
    faces = mesh.faces.tolist()
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = (np.asarray(verts[i]) + np.asarray(verts[j])) / 2.0
                verts.append(tuple(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(v, np.array(faces, dtype=np.int64))


def torus(major: float = 0.5, minor: float = 0.2, n_major: int = 48, n_minor: int = 24) -> TriMesh:
    u = 2 * np.pi * np.arange(n_major) / n_major
    w = 2 * np.pi * np.arange(n_minor) / n_minor
    U, Wm = np.meshgrid(u, w, indexing="ij")
    r = major + minor * np.cos(Wm)
    v = np.stack([r * np.cos(U), r * np.sin(U), minor * np.sin(Wm)], axis=-1).reshape(-1, 3)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces += [[a, b, c], [a, c, d]]
    return TriMesh(v, np.array(faces, dtype=np.int64))


def lathe(profile: np.ndarray, segments: int = 32) -> TriMesh:
    """Revolve an (r, z) polyline about the z axis.

    The profile runs from the bottom pole to the top pole: its first and last
    points must have r == 0 and collapse to single pole vertices. Interior
    points need r > 0. Traversing the profile bottom to top with the outside
    on the right gives outward-facing triangles.
    """
    profile = np.asarray(profile, dtype=np.float64)
    assert profile[0, 0] == 0 and profile[-1, 0] == 0
    rings = profile[1:-1]
    ang = 2 * np.pi * np.arange(segments) / segments
    ring_v = np.stack([
        rings[:, 0:1] * np.cos(ang)[None, :],
        rings[:, 0:1] * np.sin(ang)[None, :],
        np.repeat(rings[:, 1:2], segments, axis=1),
    ], axis=-1).reshape(-1, 3)
    bottom = len(ring_v)
    top = bottom + 1
    verts = np.concatenate([ring_v, [[0, 0, profile[0, 1]], [0, 0, profile[-1, 1]]]])
    faces = []
    n_rings = len(rings)
    for j in range(segments):
        jn = (j + 1) % segments
        faces.append([bottom, jn, j])
        for i in range(n_rings - 1):
            a = i * segments + j
            b = i * segments + jn
            c = (i + 1) * segments + jn
            d = (i + 1) * segments + j
            faces += [[a, b, c], [a, c, d]]
        last = (n_rings - 1) * segments
        faces.append([top, last + j, last + jn])
    return TriMesh(verts, np.array(faces, dtype=np.int64))


def uv_sphere_capsule(p0, p1, r0: float, r1: float, n_around: int = 8, n_cap: int = 2) -> TriMesh:
    """Tapered capsule from p0 (radius r0) to p1 (radius r1), closed, genus 0."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    # profile in (r, z) along the local axis, bottom pole at -r0
    prof = [(0.0, -r0)]
    for k in range(1, n_cap + 1):
        a = -np.pi / 2 + k * (np.pi / 2) / n_cap
        prof.append((r0 * np.cos(a), r0 * np.sin(a)))
    for k in range(0, n_cap):
        a = k * (np.pi / 2) / n_cap
        prof.append((r1 * np.cos(a), length + r1 * np.sin(a)))
    prof.append((0.0, length + r1))
    prof = np.array(prof)
    mesh = lathe(prof, n_around)
    d = axis / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    R = np.stack([e1, e2, d], axis=1)
    return TriMesh(mesh.vertices @ R.T + p0, mesh.faces)


def ellipsoid(center, radii, subdivisions: int = 2) -> TriMesh:
    s = icosphere(1.0, subdivisions)
    return TriMesh(s.vertices * np.asarray(radii, dtype=np.float64) + np.asarray(center, dtype=np.float64), s.faces)


def box(half_extents=(0.5, 0.5, 0.5), divisions: int = 1, corner_radius: float = 0.0) -> TriMesh:
    """Axis-aligned box centered at the origin; each face an n×n grid.

    With ``corner_radius > 0`` points are pushed onto the rounded box surface.
    """
    h = np.asarray(half_extents, dtype=np.float64)
    n = divisions
    verts: list = []
    index: dict = {}
    faces = []

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    g = np.linspace(-1.0, 1.0, n + 1)
    for axis in range(3):
        for sgn in (-1.0, 1.0):
            u_ax, v_ax = (axis + 1) % 3, (axis + 2) % 3
            if sgn < 0:
                u_ax, v_ax = v_ax, u_ax
            for i in range(n):
                for j in range(n):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sgn
                        p[u_ax] = g[i + di]
                        p[v_ax] = g[j + dj]
                        quad.append(vid(p))
                    a, b, c, d = quad
                    faces += [[a, b, c], [a, c, d]]
    v = np.array(verts) * h
    if corner_radius > 0:
        inner = h - corner_radius
        q = np.clip(v, -inner, inner)
        d = v - q
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        v = q + corner_radius * d / np.where(norm > 0, norm, 1.0)
    return TriMesh(v, np.array(faces, dtype=np.int64))
