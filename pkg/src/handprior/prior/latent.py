"""Anchored latent codes on the prior mesh, their diffusion into a volume, and queries."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import NotWatertight, ValidationError
from ..geometry import RigidTransform, TriMesh, VoxelGrid, load_grid, load_obj, save_grid, save_obj
from ..neural import ParamStore, Tensors, conv_init, relu

CODE_DIM = 16
VOLUME_RES = 32
VOLUME_HALF = 0.15
PRIOR_METHODS = ("voxel_mean", "latent_mean", "template")


@dataclass
class ObjectPrior:
    mesh: TriMesh  # canonical, watertight
    codes: np.ndarray  # (V, code_dim) initial anchored codes
    category: str
    method: str = "voxel_mean"
    scale: float = 1.0  # canonical-to-metric factor recorded for the category

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float32)
        if self.codes.shape[0] != len(self.mesh.vertices):
            raise ValidationError("one code per prior vertex required")
        if not np.all(np.isfinite(self.codes)):
            raise ValidationError("codes must be finite")
        if self.method not in PRIOR_METHODS:
            raise ValidationError(f"unknown prior method {self.method!r}")

    @property
    def code_dim(self) -> int:
        return int(self.codes.shape[1])

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.mesh.vertices, axis=1).max())

    def manifest(self) -> dict:
        return {"category": self.category, "code_dim": self.code_dim, "scale": self.scale,
                "method": self.method, "n_vertices": int(len(self.mesh.vertices))}


def anchor_codes(prior_mesh: TriMesh, category: str = "", code_dim: int = CODE_DIM, seed: int = 0,
                 sigma: float = 0.01, method: str = "voxel_mean", scale: float = 1.0) -> ObjectPrior:
    """One N(0, sigma^2) code per prior vertex."""
    if not prior_mesh.is_watertight:
        raise NotWatertight("prior mesh must be watertight")
    rng = np.random.default_rng(seed)
    codes = rng.normal(0.0, 1.0, size=(len(prior_mesh.vertices), code_dim)) * sigma
    return ObjectPrior(prior_mesh, codes, category, method, scale)


def save_prior(prior: ObjectPrior, directory) -> str:
    """Write OBJ + raw float32 codes + JSON manifest; returns the content hash."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_obj(prior.mesh, d / "prior.obj")
    (d / "prior_codes.bin").write_bytes(prior.codes.astype("<f4").tobytes())
    (d / "prior.json").write_text(json.dumps(prior.manifest(), indent=2, sort_keys=True))
    return prior_hash(d)


def load_prior(directory) -> ObjectPrior:
    d = Path(directory)
    man = json.loads((d / "prior.json").read_text())
    mesh = load_obj(d / "prior.obj")
    codes = np.frombuffer((d / "prior_codes.bin").read_bytes(), dtype="<f4").reshape(-1, man["code_dim"])
    return ObjectPrior(mesh, codes.copy(), man["category"], man["method"], man["scale"])


def prior_hash(directory) -> str:
    d = Path(directory)
    h = hashlib.sha256()
    for name in ("prior.json", "prior.obj", "prior_codes.bin"):
        h.update((d / name).read_bytes())
    return h.hexdigest()


def prior_content_hash(prior: ObjectPrior) -> str:
    """Hash of the in-memory prior, equal to :func:`prior_hash` of its saved form."""
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        return save_prior(prior, tmp)


# ----------------------------------------------------------------------------
# splatting and diffusion


def volume_nodes(res: int = VOLUME_RES, half: float = VOLUME_HALF) -> np.ndarray:
    return np.linspace(-half, half, res)


@dataclass(frozen=True)
class Splat:
    """Sparse linear map from anchor codes to volume nodes (C order, k fastest)."""

    node: np.ndarray  # (M,) flat node index
    anchor: np.ndarray  # (M,) anchor index
    weight: np.ndarray  # (M,) normalized weight
    res: int

    def apply(self, codes: np.ndarray) -> np.ndarray:
        out = np.zeros((self.res ** 3, codes.shape[1]))
        np.add.at(out, self.node, self.weight[:, None] * codes[self.anchor])
        return out.reshape((self.res,) * 3 + (codes.shape[1],))

    def apply_torch(self, codes: torch.Tensor) -> torch.Tensor:
        out = torch.sparse.mm(self.sparse(codes.dtype, len(codes)), codes)
        return out.reshape((self.res,) * 3 + (codes.shape[1],))

    def sparse(self, dtype, n_anchors: int) -> torch.Tensor:
        """(res^3, n_anchors) COO matrix, cached per dtype."""
        cache = self.__dict__.setdefault("_sparse", {})
        key = (dtype, n_anchors)
        if key not in cache:
            idx = torch.as_tensor(np.stack([self.node, self.anchor]))
            cache[key] = torch.sparse_coo_tensor(idx, torch.as_tensor(self.weight, dtype=dtype),
                                                 (self.res ** 3, n_anchors), check_invariants=True).coalesce()
        return cache[key]


def build_splat(anchors: np.ndarray, res: int = VOLUME_RES, half: float = VOLUME_HALF,
                sigma_cells: float = 2.0, radius_cells: float = 2.0) -> Splat:
    """Gaussian weights from each anchor to the nodes within ``radius_cells``.

    Each node's weights are divided by max(total weight, 1): a node fed by
    one anchor sitting on it takes that anchor's code, a node far from all
    anchors fades toward zero, and well-covered nodes get a weighted mean.
    """
    a = np.asarray(anchors, dtype=np.float64)
    cell = 2 * half / (res - 1)
    g = (a + half) / cell  # continuous node coordinates
    base = np.floor(g).astype(np.int64)
    offs = np.arange(-2, 3)
    O = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), axis=-1).reshape(-1, 3)
    idx = base[:, None, :] + O[None]  # (A, 125, 3)
    d2 = ((idx - g[:, None, :]) ** 2).sum(-1)
    ok = (d2 <= radius_cells ** 2 + 1e-12) & np.all((idx >= 0) & (idx < res), axis=-1)
    ai, oi = np.nonzero(ok)
    nodes = idx[ai, oi]
    flat = (nodes[:, 0] * res + nodes[:, 1]) * res + nodes[:, 2]
    w = np.exp(-d2[ai, oi] / (2 * sigma_cells ** 2))
    total = np.zeros(res ** 3)
    np.add.at(total, flat, w)
    w = w / np.maximum(total[flat], 1.0)
    order = np.lexsort((ai, flat))
    return Splat(flat[order], ai[order], w[order], res)


def diffusion_init(rng: np.random.Generator, code_dim: int = CODE_DIM, hidden: int = 32, prefix: str = "diff",
                   store: ParamStore | None = None) -> ParamStore:
    store = store if store is not None else ParamStore()
    conv_init(rng, store, f"{prefix}.0", code_dim, hidden, k=3, dims=3)
    conv_init(rng, store, f"{prefix}.1", hidden, code_dim, k=3, dims=3, gain=1.0)
    return store


def diffusion_forward(params: Tensors | None, volume: torch.Tensor, prefix: str = "diff") -> torch.Tensor:
    """(R, R, R, C) -> (R, R, R, C); conv3 + relu + conv3, zero padding. None disables it."""
    if params is None:
        return volume
    x = volume.permute(3, 0, 1, 2)[None]
    x = relu(F.conv3d(x, params[f"{prefix}.0.W"], params[f"{prefix}.0.b"], padding=1))
    x = F.conv3d(x, params[f"{prefix}.1.W"], params[f"{prefix}.1.b"], padding=1)
    return x[0].permute(1, 2, 3, 0)


@dataclass
class LatentVolume:
    values: np.ndarray  # (R, R, R, C) at nodes linspace(-half, half, R) per axis
    half: float = VOLUME_HALF

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 4 or len(set(self.values.shape[:3])) != 1:
            raise ValidationError("latent volume must be (R, R, R, C)")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("latent volume must be finite")

    @property
    def res(self) -> int:
        return int(self.values.shape[0])

    def to_grid(self) -> VoxelGrid:
        cell = 2 * self.half / (self.res - 1)
        return VoxelGrid(np.full(3, -self.half), cell, self.values, kind="latent")

    def save(self, path) -> None:
        save_grid(self.to_grid(), path)

    @classmethod
    def load(cls, path) -> "LatentVolume":
        g = load_grid(path)
        return cls(g.values, float(-g.origin[0]))


def diffuse_codes(prior: ObjectPrior, params: ParamStore | Tensors | None = None, codes=None,
                  splat: Splat | None = None) -> LatentVolume:
    """Splat the anchored codes to the 32^3 node grid, then run the conv stack.

    ``params=None`` skips the convolution. ``codes`` overrides the prior's
    initial codes (e.g. trained ones).
    """
    splat = splat or build_splat(prior.mesh.vertices)
    z = prior.codes if codes is None else codes
    vol = torch.tensor(splat.apply(np.asarray(z, dtype=np.float64)), dtype=torch.float64)
    if params is not None:
        p = {k: torch.as_tensor(np.asarray(v), dtype=torch.float64) for k, v in
             (params.items() if hasattr(params, "items") else params)}
        with torch.no_grad():
            vol = diffusion_forward(p, vol)
    return LatentVolume(vol.numpy())


# ----------------------------------------------------------------------------
# queries


def trilinear_weights(xc: np.ndarray, res: int = VOLUME_RES, half: float = VOLUME_HALF):
    """Corner flat indices (N, 8), weights (N, 8) and inside flags (N,) for canonical points."""
    xc = np.asarray(xc, dtype=np.float64).reshape(-1, 3)
    cell = 2 * half / (res - 1)
    inside = np.all((xc >= -half) & (xc <= half), axis=1)
    g = np.clip((xc + half) / cell, 0.0, res - 1.0)
    i0 = np.minimum(np.floor(g).astype(np.int64), res - 2)
    f = g - i0
    idx = np.zeros((len(xc), 8), dtype=np.int64)
    w = np.zeros((len(xc), 8))
    k = 0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ii = i0 + np.array([dx, dy, dz])
                idx[:, k] = (ii[:, 0] * res + ii[:, 1]) * res + ii[:, 2]
                w[:, k] = (np.where(dx, f[:, 0], 1 - f[:, 0]) * np.where(dy, f[:, 1], 1 - f[:, 1])
                           * np.where(dz, f[:, 2], 1 - f[:, 2]))
                k += 1
    w[~inside] = 0.0
    return idx, w, inside


def sample_volume(values: np.ndarray, xc: np.ndarray, half: float = VOLUME_HALF) -> np.ndarray:
    res = values.shape[0]
    idx, w, _ = trilinear_weights(xc, res, half)
    flat = values.reshape(res ** 3, -1)
    return np.einsum("nk,nkc->nc", w, flat[idx])


def sample_volume_torch(values: torch.Tensor, idx: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    res = values.shape[0]
    flat = values.reshape(res ** 3, -1)
    return (flat[idx] * w[..., None]).sum(-2)


def canonicalize(x: np.ndarray, pose: RigidTransform) -> np.ndarray:
    return pose.inverse().apply(np.asarray(x, dtype=np.float64))


def shape_feature(x: np.ndarray, pose: RigidTransform, volume: LatentVolume) -> np.ndarray:
    """F_S: trilinear sample of the volume at inverse(pose)(x); zero outside the cube."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = sample_volume(volume.values, canonicalize(x.reshape(-1, 3), pose), volume.half)
    return out[0] if single else out
