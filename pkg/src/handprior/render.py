"""CPU ray-caster for per-entity depth / normal / mask / color maps.

Pixel (row v, column u) has its center at image coordinates (u, v); rays
leave the camera center through those points. Depth is the hit's camera-space
z, with 0 marking background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import Camera, TriMesh, concatenate

HAND_ALBEDO = (0.86, 0.66, 0.55)
OBJECT_ALBEDO = (0.35, 0.55, 0.80)
CHANNELS = ("depth", "normal", "mask", "color")
_CHANNEL_WIDTH = {"depth": 1, "normal": 3, "mask": 1, "color": 3}


@dataclass(frozen=True)
class MapStack:
    depth: np.ndarray  # (H, W) float32, meters, 0 = background
    normal: np.ndarray  # (H, W, 3) float32, camera space
    mask: np.ndarray  # (H, W) float32 in {0, 1}
    color: np.ndarray  # (H, W, 3) float32 in [0, 1]
    kind: str = "entity"

    def __post_init__(self):
        for name in CHANNELS:
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))
        h, w = self.depth.shape
        if self.normal.shape != (h, w, 3) or self.color.shape != (h, w, 3) or self.mask.shape != (h, w):
            raise ValidationError("map channels disagree on resolution")

    @property
    def height(self) -> int:
        return int(self.depth.shape[0])

    @property
    def width(self) -> int:
        return int(self.depth.shape[1])

    @classmethod
    def blank(cls, height: int, width: int, kind: str = "entity") -> "MapStack":
        return cls(np.zeros((height, width)), np.zeros((height, width, 3)), np.zeros((height, width)),
                   np.zeros((height, width, 3)), kind)

    def depth_normal(self) -> np.ndarray:
        """(H, W, 4): depth then normal, the layout consumed by the 2D network."""
        return np.concatenate([self.depth[..., None], self.normal], axis=-1)

    def masked(self, keep: np.ndarray) -> "MapStack":
        k = keep.astype(bool)
        return MapStack(self.depth * k, self.normal * k[..., None], self.mask * k,
                        self.color * k[..., None], self.kind)

    def check(self) -> None:
        """Raise if the mask/depth or unit-normal invariants are broken."""
        on = self.mask > 0
        if not np.array_equal(on, self.depth > 0):
            raise ValidationError("mask must be 1 exactly where depth > 0")
        if np.any(on):
            n = np.linalg.norm(self.normal[on].astype(np.float64), axis=1)
            if np.abs(n - 1).max() > 1e-5:
                raise ValidationError("normals must be unit length on the mask")


def _ray_directions(camera: Camera) -> np.ndarray:
    v, u = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    d = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u, dtype=np.float64)],
                 axis=-1)
    return d.reshape(-1, 3)


def _intersect(dirs: np.ndarray, tri: np.ndarray, pix: np.ndarray, fid: np.ndarray):
    """Möller–Trumbore for rays from the origin; pairs (pix[k], fid[k])."""
    d = dirs[pix]
    a, b, c = tri[fid, 0], tri[fid, 1], tri[fid, 2]
    e1 = b - a
    e2 = c - a
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = -a
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = np.einsum("ij,ij->i", d, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
    return hit, t


def cast_rays(mesh: TriMesh, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel nearest hit: (depth (H, W), face index or -1 (H, W), camera-space vertices)."""
    H, W = camera.height, camera.width
    depth = np.zeros(H * W)
    face = np.full(H * W, -1, dtype=np.int64)
    if mesh.is_empty:
        return depth.reshape(H, W), face.reshape(H, W), np.zeros((0, 3))
    dirs = _ray_directions(camera)
    verts = camera.to_camera(mesh.vertices)
    tri = verts[mesh.faces]
    z = tri[..., 2]
    front = np.all(z > 1e-6, axis=1)
    pairs_pix, pairs_face = [], []
    # triangles fully in front of the camera: enumerate pixels in their projected bbox
    fi = np.nonzero(front)[0]
    if len(fi):
        uv = np.stack([camera.fx * tri[fi, :, 0] / z[fi] + camera.cx,
                       camera.fy * tri[fi, :, 1] / z[fi] + camera.cy], axis=-1)
        u0 = np.clip(np.ceil(uv[..., 0].min(axis=1) - 1e-7), 0, W).astype(np.int64)
        u1 = np.clip(np.floor(uv[..., 0].max(axis=1) + 1e-7), -1, W - 1).astype(np.int64)
        v0 = np.clip(np.ceil(uv[..., 1].min(axis=1) - 1e-7), 0, H).astype(np.int64)
        v1 = np.clip(np.floor(uv[..., 1].max(axis=1) + 1e-7), -1, H - 1).astype(np.int64)
        nu = np.maximum(u1 - u0 + 1, 0)
        nv = np.maximum(v1 - v0 + 1, 0)
        cnt = nu * nv
        keep = cnt > 0
        fi, u0, v0, nu, cnt = fi[keep], u0[keep], v0[keep], nu[keep], cnt[keep]
        if len(fi):
            owner = np.repeat(np.arange(len(fi)), cnt)
            start = np.cumsum(cnt) - cnt
            local = np.arange(int(cnt.sum())) - start[owner]
            uu = u0[owner] + local % nu[owner]
            vv = v0[owner] + local // nu[owner]
            pairs_pix.append(vv * W + uu)
            pairs_face.append(fi[owner])
    # triangles touching the camera plane: test against every pixel
    for f in np.nonzero(~front & np.any(z > 1e-6, axis=1))[0]:
        pairs_pix.append(np.arange(H * W))
        pairs_face.append(np.full(H * W, f))
    if not pairs_pix:
        return depth.reshape(H, W), face.reshape(H, W), verts
    pix = np.concatenate(pairs_pix)
    fid = np.concatenate(pairs_face)
    hit, t = _intersect(dirs, tri, pix, fid)
    pix, fid, t = pix[hit], fid[hit], t[hit]
    # nearest first, ties to the smallest face index
    order = np.lexsort((fid, t, pix))
    pix, fid, t = pix[order], fid[order], t[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    depth[pix[first]] = t[first]  # ray direction has unit z, so t is camera z
    face[pix[first]] = fid[first]
    return depth.reshape(H, W), face.reshape(H, W), verts


def _shade(depth, face, verts, faces, camera: Camera, albedo, kind: str) -> MapStack:
    H, W = depth.shape
    normal = np.zeros((H, W, 3))
    color = np.zeros((H, W, 3))
    on = face >= 0
    if np.any(on):
        tri = verts[faces[face[on]]]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        d = _ray_directions(camera).reshape(H, W, 3)[on]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        facing = np.einsum("ij,ij->i", n, d)
        n = np.where(facing[:, None] > 0, -n, n)
        normal[on] = n
        # headlight at the camera center
        color[on] = np.clip(np.abs(facing), 0, 1)[:, None] * np.asarray(albedo)[None]
    return MapStack(depth, normal, on.astype(np.float64), color, kind)


def raycast(mesh: TriMesh, camera: Camera, albedo=OBJECT_ALBEDO, kind: str = "entity") -> MapStack:
    depth, face, verts = cast_rays(mesh, camera)
    return _shade(depth, face, verts, mesh.faces, camera, albedo, kind)


def render_scene(hand: TriMesh, obj: TriMesh, camera: Camera, mode: str = "separate"):
    """(hand MapStack, object MapStack); ``merged`` keeps only z-buffer winners."""
    if mode == "separate":
        return (raycast(hand, camera, HAND_ALBEDO, "hand"), raycast(obj, camera, OBJECT_ALBEDO, "object"))
    if mode != "merged":
        raise ValidationError(f"unknown render mode {mode!r}")
    both = concatenate([hand, obj])
    depth, face, verts = cast_rays(both, camera)
    nh = len(hand.faces)
    hand_px = (face >= 0) & (face < nh)
    obj_px = face >= nh
    h = _shade(np.where(hand_px, depth, 0.0), np.where(hand_px, face, -1), verts, both.faces, camera,
               HAND_ALBEDO, "hand")
    o = _shade(np.where(obj_px, depth, 0.0), np.where(obj_px, face, -1), verts, both.faces, camera,
               OBJECT_ALBEDO, "object")
    return h, o


def composite_color(*stacks: MapStack) -> np.ndarray:
    """Front-most color per pixel over several entity stacks (the synthetic RGB input)."""
    H, W = stacks[0].depth.shape
    best = np.full((H, W), np.inf)
    out = np.zeros((H, W, 3), dtype=np.float32)
    for s in stacks:
        win = (s.mask > 0) & (s.depth < best)
        best = np.where(win, s.depth, best)
        out[win] = s.color[win]
    return out


def bilinear_sample(channel: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample an (H, W) or (H, W, C) map at (N, 2) pixel coordinates (u, v).

    Bilinear over the four surrounding pixel centers; coordinates outside the
    image clamp to the border pixels. A single 2-vector returns one value.
    """
    m = np.asarray(channel, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv = uv.reshape(-1, 2)
    if not np.all(np.isfinite(uv)):
        raise ValidationError("sample coordinates must be finite")
    H, W = m.shape[:2]
    u = np.clip(uv[:, 0], 0.0, W - 1.0)
    v = np.clip(uv[:, 1], 0.0, H - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(W - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = u - u0
    fv = v - v0
    if m.ndim == 3:
        fu = fu[:, None]
        fv = fv[:, None]
    out = ((1 - fv) * ((1 - fu) * m[v0, u0] + fu * m[v0, u1])
           + fv * ((1 - fu) * m[v1, u0] + fu * m[v1, u1]))
    return out[0] if single else out


def save_maps(stack: MapStack, directory, stem: str) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in CHANNELS:
        (d / f"{stem}.{name}.bin").write_bytes(getattr(stack, name).astype("<f4").tobytes())
    header = {"width": stack.width, "height": stack.height,
              "channels": {name: _CHANNEL_WIDTH[name] for name in CHANNELS}, "kind": stack.kind}
    (d / f"{stem}.json").write_text(json.dumps(header, indent=2))


def load_maps(directory, stem: str) -> MapStack:
    d = Path(directory)
    header = json.loads((d / f"{stem}.json").read_text())
    h, w = header["height"], header["width"]
    arrays = {}
    for name in CHANNELS:
        c = header["channels"][name]
        buf = np.frombuffer((d / f"{stem}.{name}.bin").read_bytes(), dtype="<f4")
        arrays[name] = buf.reshape((h, w) if c == 1 else (h, w, c))
    return MapStack(kind=header["kind"], **arrays)
