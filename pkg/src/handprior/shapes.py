"""Parametric category shapes: mug, bottle, box, knife.

Every shape is built as a single closed manifold (no boolean operations) and
then normalized: bounding box centered at the origin, maximum extent 0.2 m,
up along +z. The mug's handle is a tube swept between two holes cut into the
outer wall, so the result has genus 1; the other categories are genus 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotWatertight, ParamOutOfRange, ValidationError
from .geometry import TriMesh, euler_characteristic
from .geometry.primitives import box as rounded_box
from .geometry.primitives import lathe

CANONICAL_EXTENT = 0.2


@dataclass(frozen=True)
class CategorySpec:
    name: str
    ranges: dict  # parameter name -> (lo, hi), meters before normalization
    holdout: str  # parameter whose top sub-range is reserved for unseen-instance tests
    holdout_fraction: float = 0.2
    genus: int = 0

    def split_range(self, key: str, held_out: bool) -> tuple[float, float]:
        lo, hi = self.ranges[key]
        if key != self.holdout:
            return lo, hi
        cut = hi - self.holdout_fraction * (hi - lo)
        return (cut, hi) if held_out else (lo, cut)

    def sample(self, rng: np.random.Generator, held_out: bool = False) -> dict:
        out = {}
        for key in self.ranges:
            lo, hi = self.split_range(key, held_out)
            out[key] = float(lo + (hi - lo) * rng.random())
        # the upper end of the train sub-range belongs to the held-out range
        if not held_out:
            lo, hi = self.split_range(self.holdout, False)
            out[self.holdout] = min(out[self.holdout], np.nextafter(hi, lo))
        return out

    def validate(self, params: dict) -> None:
        missing = set(self.ranges) - set(params)
        if missing:
            raise ParamOutOfRange(f"missing parameters {sorted(missing)}")
        for key, (lo, hi) in self.ranges.items():
            v = params[key]
            if not (lo <= v <= hi):
                raise ParamOutOfRange(f"{self.name}.{key}={v} outside [{lo}, {hi}]")


CATEGORIES = {
    "mug": CategorySpec("mug", {
        "body_radius": (0.035, 0.050),
        "height": (0.080, 0.110),
        "wall": (0.004, 0.007),
        "handle_reach": (0.025, 0.035),
        "handle_span": (0.45, 0.60),  # handle height as a fraction of the body height
    }, holdout="body_radius", genus=1),
    "bottle": CategorySpec("bottle", {
        "body_radius": (0.028, 0.042),
        "body_height": (0.090, 0.140),
        "shoulder": (0.015, 0.035),
        "neck_radius": (0.009, 0.014),
        "neck_height": (0.015, 0.035),
    }, holdout="body_height"),
    "box": CategorySpec("box", {
        "half_x": (0.025, 0.045),
        "half_y": (0.020, 0.040),
        "half_z": (0.040, 0.070),
        "corner": (0.003, 0.008),
    }, holdout="half_z"),
    "knife": CategorySpec("knife", {
        "blade_length": (0.100, 0.140),
        "blade_height": (0.018, 0.030),
        "blade_thickness": (0.004, 0.006),
        "handle_length": (0.075, 0.100),
        "handle_height": (0.018, 0.026),
        "handle_thickness": (0.013, 0.020),
    }, holdout="blade_length"),
}


def normalize_canonical(mesh: TriMesh, extent: float = CANONICAL_EXTENT) -> tuple[TriMesh, float]:
    """Center the bounding box and scale the largest side to ``extent``; returns (mesh, scale)."""
    lo, hi = mesh.bounds()
    s = extent / float((hi - lo).max())
    return TriMesh((mesh.vertices - (lo + hi) / 2) * s, mesh.faces), s


def _compact(vertices: np.ndarray, faces: np.ndarray) -> TriMesh:
    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(vertices[used], remap[faces])


def _orient_outward(mesh: TriMesh) -> TriMesh:
    return mesh if mesh.signed_volume() > 0 else mesh.flipped()


def _mug(p: dict, segments: int = 48) -> TriMesh:
    R, H, t = p["body_radius"], p["height"], p["wall"]
    dphi = 2 * np.pi / segments
    dz = R * np.sin(dphi)  # square-ish wall quads around the handle holes
    fillet = 0.003
    prof = [(0.0, 0.0), (0.5 * R, 0.0), (R - fillet, 0.0), (R - fillet * 0.3, fillet * 0.3)]
    wall_z = np.arange(fillet, H + 1e-12, dz)
    wall_start = len(prof)
    prof += [(R, z) for z in wall_z]
    n_wall = len(wall_z)
    top = wall_z[-1]
    prof += [(R - t / 2, top + t / 2), (R - t, top)]
    inner_z = np.linspace(top, t + fillet, 8)[1:]
    prof += [(R - t, z) for z in inner_z]
    prof += [(R - t - fillet, t), (0.5 * (R - t), t), (0.0, t)]
    shell = lathe(np.array(prof), segments)
    V = shell.vertices
    F = shell.faces

    span = p["handle_span"] * top
    mid = 0.5 * top
    k_up = wall_start - 1 + int(np.argmin(np.abs(wall_z - (mid + span / 2))))
    k_lo = wall_start - 1 + int(np.argmin(np.abs(wall_z - (mid - span / 2))))
    k_up = min(k_up, wall_start - 1 + n_wall - 3)
    k_lo = max(k_lo, wall_start - 1 + 2)

    def vid(ring, seg):
        return ring * segments + seg % segments

    # boundary loop of the 2x2 quad block centered on (ring k, segment 0), as (du, dw) offsets
    square = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)]

    def hole(k, w_sign):
        block = {vid(k + dk, dj) for dk in (-1, 0, 1) for dj in (-1, 0, 1)}
        loop = [vid(k + w_sign * dw, du) for du, dw in square]
        return block, loop

    blk_up, loop_up = hole(k_up, +1)
    blk_lo, loop_lo = hole(k_lo, -1)
    drop = np.array([set(f) <= blk_up or set(f) <= blk_lo for f in F.tolist()])
    F = F[~drop]

    # handle path: half ellipse bulging out along +x between the hole centers
    z_up, z_lo = V[vid(k_up, 0), 2], V[vid(k_lo, 0), 2]
    zc, b = 0.5 * (z_up + z_lo), 0.5 * (z_up - z_lo)
    a = p["handle_reach"]
    n_steps = 24
    s_vals = np.linspace(0, np.pi, n_steps + 1)[1:-1]
    hy, hz = R * np.sin(dphi), dz
    # cross-section: the hole square blended toward a circle with the same half-widths
    sq = np.array(square, dtype=np.float64)
    circ = sq / np.linalg.norm(sq, axis=1, keepdims=True)
    rings = []
    for s in s_vals:
        c = np.array([R + a * np.sin(s), 0.0, zc + b * np.cos(s)])
        tan = np.array([a * np.cos(s), 0.0, -b * np.sin(s)])
        tan /= np.linalg.norm(tan)
        bino = np.array([-tan[2], 0.0, tan[0]])
        blend = np.sin(s) ** 0.5
        shape = (1 - blend) * sq + blend * circ
        rings.append(c + shape[:, :1] * hy * np.array([0.0, 1.0, 0.0]) + shape[:, 1:] * hz * bino)
    base = len(V)
    V = np.concatenate([V, np.concatenate(rings)])
    loops = [loop_up] + [list(range(base + 8 * i, base + 8 * i + 8)) for i in range(len(rings))] + [loop_lo]
    tube = []
    for l0, l1 in zip(loops[:-1], loops[1:]):
        for m in range(8):
            a0, a1 = l0[m], l0[(m + 1) % 8]
            b0, b1 = l1[m], l1[(m + 1) % 8]
            tube += [[a0, a1, b1], [a0, b1, b0]]
    tube = np.array(tube, dtype=np.int64)
    # orient the tube against the wall: a shared edge must run in opposite directions
    def directed(faces):
        return {(int(f[i]), int(f[(i + 1) % 3])) for f in faces for i in range(3)}

    e = (loop_up[0], loop_up[1])
    wall_has = e in directed(F)
    if (e in directed(tube)) == wall_has:
        tube = tube[:, ::-1]
    mesh = _compact(V, np.concatenate([F, tube]))
    return _orient_outward(mesh)


def _smoothstep(x):
    x = np.clip(x, 0, 1)
    return x * x * (3 - 2 * x)


def _bottle(p: dict, segments: int = 40) -> TriMesh:
    Rb, Hb, sh = p["body_radius"], p["body_height"], p["shoulder"]
    rn, hn = p["neck_radius"], p["neck_height"]
    fillet = 0.004
    prof = [(0.0, 0.0), (0.5 * Rb, 0.0), (Rb - fillet, 0.0), (Rb - 0.3 * fillet, 0.3 * fillet)]
    prof += [(Rb, z) for z in np.linspace(fillet, Hb, 12)]
    for u in np.linspace(0, 1, 9)[1:]:
        prof.append((Rb + (rn - Rb) * _smoothstep(u), Hb + sh * u))
    prof += [(rn, z) for z in np.linspace(Hb + sh, Hb + sh + hn, 5)[1:]]
    top = Hb + sh + hn
    cap = 0.4 * rn
    for ang in np.linspace(0, np.pi / 2, 5)[1:-1]:
        prof.append((rn - cap + cap * np.cos(ang), top + cap * np.sin(ang)))
    prof += [(0.5 * (rn - cap), top + cap), (0.0, top + cap)]
    return _orient_outward(lathe(np.array(prof), segments))


def _box(p: dict) -> TriMesh:
    return _orient_outward(rounded_box((p["half_x"], p["half_y"], p["half_z"]), divisions=8,
                                       corner_radius=p["corner"]))


def _rounded_rect(hw: float, hh: float, n: int = 16, power: float = 4.0) -> np.ndarray:
    """Superellipse cross-section points (y, z), counter-clockwise."""
    ang = 2 * np.pi * np.arange(n) / n
    c, s = np.cos(ang), np.sin(ang)
    y = hw * np.sign(c) * np.abs(c) ** (2 / power)
    z = hh * np.sign(s) * np.abs(s) ** (2 / power)
    return np.stack([y, z], axis=1)


def _knife(p: dict, n_around: int = 16) -> TriMesh:
    Lb, hb, tb = p["blade_length"], p["blade_height"], p["blade_thickness"]
    Lh, hh, th = p["handle_length"], p["handle_height"], p["handle_thickness"]
    # sections along x: (x, half thickness, half height, z center)
    sec = []
    for x in np.linspace(-Lh, 0, 8):
        bulge = 1.0 - 0.15 * ((x + Lh / 2) / (Lh / 2)) ** 2
        sec.append((x, th / 2 * bulge, hh / 2 * bulge, 0.0))
    z_spine = hh / 2 - hb / 2  # blade spine flush with the handle top
    for u in np.linspace(0, 1, 12)[1:]:
        x = u * Lb
        height = hb * (1 - 0.85 * _smoothstep((u - 0.55) / 0.45))
        zc = z_spine + (hb - height) / 2
        thick = tb * (1 - 0.5 * u) if u > 0.05 else 0.5 * (tb + th)
        sec.append((x, thick / 2, height / 2, zc))
    rings = []
    for x, hw, hh_, zc in sec:
        yz = _rounded_rect(hw, hh_, n_around)
        rings.append(np.stack([np.full(len(yz), x), yz[:, 0], yz[:, 1] + zc], axis=1))
    V = np.concatenate(rings + [[[-Lh - 0.003, 0.0, 0.0]], [[Lb + 0.004, 0.0, sec[-1][3]]]])
    n = n_around
    back, tip = len(V) - 2, len(V) - 1
    F = []
    for j in range(n):
        jn = (j + 1) % n
        F.append([back, jn, j])
        for i in range(len(rings) - 1):
            a, b = i * n + j, i * n + jn
            c, d = (i + 1) * n + jn, (i + 1) * n + j
            F += [[a, b, c], [a, c, d]]
        last = (len(rings) - 1) * n
        F.append([tip, last + j, last + jn])
    return _orient_outward(TriMesh(V, np.array(F, dtype=np.int64)))


_BUILDERS = {"mug": _mug, "bottle": _bottle, "box": _box, "knife": _knife}


def make_shape(spec: CategorySpec | str, params: dict, seed: int = 0, check_ranges: bool = True,
               normalize: bool = True) -> TriMesh:
    """Build, verify and normalize one instance.

    ``seed`` is accepted for interface symmetry; construction is fully
    determined by ``params``.
    """
    if isinstance(spec, str):
        if spec not in CATEGORIES:
            raise ValidationError(f"unknown category {spec!r}")
        spec = CATEGORIES[spec]
    if check_ranges:
        spec.validate(params)
    if spec.name == "mug" and params["wall"] >= params["body_radius"]:
        raise ParamOutOfRange("mug wall must be thinner than the body radius")
    mesh = _BUILDERS[spec.name](params)
    if not mesh.is_watertight:
        raise NotWatertight(f"{spec.name} construction produced an open surface")
    chi = euler_characteristic(mesh)
    if chi != 2 - 2 * spec.genus:
        raise NotWatertight(f"{spec.name} construction has Euler characteristic {chi}")
    if normalize:
        mesh, _ = normalize_canonical(mesh)
    return mesh
