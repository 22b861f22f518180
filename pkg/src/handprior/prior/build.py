"""Category prior meshes: voxel mean, auto-decoder latent mean, and implicit template."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import EmptyCollection, InsufficientData, OpenSurface
from ..geometry import TriMesh, VoxelGrid, marching_cubes, voxelize
from ..neural import (
    AdamState,
    MlpSpec,
    ParamStore,
    absolute,
    adam_step,
    check_finite,
    mlp_forward,
    mlp_init,
)
from ..samples import SdfSamples

log = logging.getLogger(__name__)

# canonical shapes fit in [-0.1, 0.1]^3; priors are extracted over a slightly larger cube
PRIOR_HALF = 0.11
# networks see coordinates and distances divided by this length
UNIT = 0.1


def voxel_mean_prior(meshes: list[TriMesh], resolution: int = 64, half: float = PRIOR_HALF) -> TriMesh:
    """Mean occupancy over instances, kept where >= 0.5, surfaced by marching cubes.

    Occupancy is sampled at cell centers, which become the marching-cubes nodes.
    """
    if not meshes:
        raise EmptyCollection("voxel mean prior needs at least one mesh")
    lo, hi = np.full(3, -half), np.full(3, half)
    total = np.zeros((resolution,) * 3)
    for m in meshes:
        total += voxelize(m, resolution, (lo, hi)).values
    mean = total / len(meshes)
    cell = 2 * half / resolution
    grid = VoxelGrid(lo + cell / 2, cell, 0.5 - mean)
    return marching_cubes(grid)


def _extract(sdf_fn, resolution: int = 64, half: float = PRIOR_HALF) -> TriMesh:
    """Zero level set of a canonical SDF on a node grid spanning [-half, half]^3."""
    grid = VoxelGrid.from_bounds(np.full(3, -half), np.full(3, half), resolution)
    vals = sdf_fn(grid.node_positions()).reshape((resolution,) * 3)
    grid.values = vals
    if vals.min() >= 0:
        raise OpenSurface("decoded field has no interior")
    boundary = np.concatenate([vals[[0, -1]].ravel(), vals[:, [0, -1]].ravel(), vals[:, :, [0, -1]].ravel()])
    if boundary.min() <= 0:
        raise OpenSurface("decoded surface leaves the extraction cube")
    mesh = marching_cubes(grid)
    if mesh.is_empty or not mesh.is_watertight:
        raise OpenSurface("extracted surface is not watertight")
    return mesh


def _check_banks(banks: list[SdfSamples], min_shapes: int, min_samples: int) -> None:
    if len(banks) < min_shapes:
        raise InsufficientData(f"need at least {min_shapes} shapes, got {len(banks)}")
    for b in banks:
        if len(b) < min_samples:
            raise InsufficientData(f"each shape needs >= {min_samples} samples")


@dataclass
class PriorTrainConfig:
    steps: int = 2000
    points_per_shape: int = 2048
    lr: float = 5e-4
    code_lr: float = 1e-3
    lambda_code: float = 1e-4
    lambda_warp: float = 1.0
    code_dim: int = 64
    code_sigma: float = 0.01
    seed: int = 0
    log_every: int = 100
    history: list = field(default_factory=list)


AUTODECODER_SPEC_HIDDEN = (128, 128, 128, 128)


@dataclass
class AutoDecoder:
    params: ParamStore  # "ad.*" decoder weights
    codes: np.ndarray  # (n_shapes, code_dim)
    spec: MlpSpec
    losses: list

    def decode(self, points: np.ndarray, code: np.ndarray, chunk: int = 65536) -> np.ndarray:
        p = {k: torch.tensor(v, dtype=torch.float64) for k, v in self.params.items()}
        c = torch.tensor(np.asarray(code, dtype=np.float64))
        out = []
        with torch.no_grad():
            for s in range(0, len(points), chunk):
                x = torch.tensor(points[s:s + chunk], dtype=torch.float64) / UNIT
                inp = torch.cat([x, c.expand(len(x), -1)], dim=1)
                out.append(mlp_forward(p, self.spec, inp, "ad")[:, 0].numpy() * UNIT)
        return np.concatenate(out) if out else np.zeros(0)

    def reconstruct(self, index: int, resolution: int = 64) -> TriMesh:
        return _extract(lambda x: self.decode(x, self.codes[index]), resolution)


def _batches(banks: list[SdfSamples], n: int, rng: np.random.Generator):
    pts, sdf, owner = [], [], []
    for i, b in enumerate(banks):
        sel = rng.integers(0, len(b), size=n)
        pts.append(b.points[sel])
        sdf.append(b.sdf[sel])
        owner.append(np.full(n, i))
    return (torch.tensor(np.concatenate(pts) / UNIT, dtype=torch.float32),
            torch.tensor(np.concatenate(sdf) / UNIT, dtype=torch.float32),
            torch.tensor(np.concatenate(owner)))


def train_autodecoder(banks: list[SdfSamples], config: PriorTrainConfig | None = None,
                      min_shapes: int = 2, min_samples: int = 10_000) -> AutoDecoder:
    """Jointly fit decoder weights and one free code per shape.

    Loss: mean L1 on (normalized) signed distance + lambda_code * mean ||c_i||^2.
    """
    cfg = config or PriorTrainConfig()
    _check_banks(banks, min_shapes, min_samples)
    rng = np.random.default_rng(cfg.seed)
    spec = MlpSpec(3 + cfg.code_dim, AUTODECODER_SPEC_HIDDEN, 1)
    store = mlp_init(spec, rng, "ad", ParamStore(cfg.seed))
    codes0 = rng.normal(0.0, cfg.code_sigma, size=(len(banks), cfg.code_dim))
    params = store.tensors()
    codes = torch.tensor(codes0, dtype=torch.float32, requires_grad=True)
    state = AdamState.create(params)
    cstate = AdamState.create({"codes": codes})
    torch.manual_seed(cfg.seed)
    losses = []
    for step in range(cfg.steps):
        x, s, owner = _batches(banks, cfg.points_per_shape, rng)
        inp = torch.cat([x, codes[owner]], dim=1)
        pred = mlp_forward(params, spec, inp, "ad")[:, 0]
        loss = absolute(pred - s).mean() + cfg.lambda_code * (codes ** 2).sum(1).mean()
        losses.append(check_finite(loss, step))
        grads = torch.autograd.grad(loss, list(params.values()) + [codes])
        adam_step(params, dict(zip(params, grads[:-1])), state, cfg.lr)
        adam_step({"codes": codes}, {"codes": grads[-1]}, cstate, cfg.code_lr)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("autodecoder step %d loss %.5f", step, losses[-1])
    store.assign(params)
    return AutoDecoder(store, codes.detach().numpy().astype(np.float64), spec, losses)


def latent_mean_prior(model: AutoDecoder, resolution: int = 64) -> TriMesh:
    """Decode the mean of the learned codes and extract its zero level set."""
    return _extract(lambda x: model.decode(x, model.codes.mean(axis=0)), resolution)


WARP_HIDDEN = (64, 64, 64)
TEMPLATE_HIDDEN = (128, 128, 128, 128)


@dataclass
class ImplicitTemplate:
    """f(x, c) = T(W(x, c)) with W(x, c) = x + D(x, c)."""

    params: ParamStore  # "warp.*" and "tmpl.*"
    codes: np.ndarray
    warp_spec: MlpSpec
    template_spec: MlpSpec
    losses: list

    def _tensors(self):
        return {k: torch.tensor(v, dtype=torch.float64) for k, v in self.params.items()}

    def warp(self, points: np.ndarray, code: np.ndarray) -> np.ndarray:
        p = self._tensors()
        with torch.no_grad():
            x = torch.tensor(points, dtype=torch.float64) / UNIT
            c = torch.tensor(np.asarray(code, dtype=np.float64)).expand(len(x), -1)
            return (x + mlp_forward(p, self.warp_spec, torch.cat([x, c], 1), "warp")).numpy() * UNIT

    def template_sdf(self, points: np.ndarray) -> np.ndarray:
        p = self._tensors()
        with torch.no_grad():
            x = torch.tensor(points, dtype=torch.float64) / UNIT
            return mlp_forward(p, self.template_spec, x, "tmpl")[:, 0].numpy() * UNIT

    def decode(self, points: np.ndarray, code: np.ndarray) -> np.ndarray:
        return self.template_sdf(self.warp(points, code))

    def mean_displacement(self, code: np.ndarray, n: int = 20000, half: float = PRIOR_HALF, seed: int = 0) -> float:
        pts = np.random.default_rng(seed).uniform(-half, half, size=(n, 3))
        return float(np.linalg.norm(self.warp(pts, code) - pts, axis=1).mean())

    def reconstruct(self, index: int, resolution: int = 64) -> TriMesh:
        return _extract(lambda x: self.decode(x, self.codes[index]), resolution)


def implicit_template_init(cfg: PriorTrainConfig, rng: np.random.Generator):
    warp_spec = MlpSpec(3 + cfg.code_dim, WARP_HIDDEN, 3)
    tmpl_spec = MlpSpec(3, TEMPLATE_HIDDEN, 1)
    store = mlp_init(warp_spec, rng, "warp", ParamStore(cfg.seed))
    # zero final warp layer: the warp starts as the identity
    last = warp_spec.n_layers - 1
    store._arrays[f"warp.{last}.W"][:] = 0.0
    mlp_init(tmpl_spec, rng, "tmpl", store)
    return store, warp_spec, tmpl_spec


def train_implicit_template(banks: list[SdfSamples], config: PriorTrainConfig | None = None,
                            min_shapes: int = 2, min_samples: int = 10_000) -> ImplicitTemplate:
    """Fit a shared template SDF and a code-conditioned warp.

    Loss: mean L1 of T(W(x, c_i)) against s*_i(x), plus lambda_warp times the
    mean squared displacement and lambda_code * mean ||c_i||^2.
    """
    cfg = config or PriorTrainConfig()
    _check_banks(banks, min_shapes, min_samples)
    rng = np.random.default_rng(cfg.seed)
    store, warp_spec, tmpl_spec = implicit_template_init(cfg, rng)
    codes0 = rng.normal(0.0, cfg.code_sigma, size=(len(banks), cfg.code_dim))
    params = store.tensors()
    codes = torch.tensor(codes0, dtype=torch.float32, requires_grad=True)
    state = AdamState.create(params)
    cstate = AdamState.create({"codes": codes})
    losses = []
    for step in range(cfg.steps):
        x, s, owner = _batches(banks, cfg.points_per_shape, rng)
        disp = mlp_forward(params, warp_spec, torch.cat([x, codes[owner]], 1), "warp")
        pred = mlp_forward(params, tmpl_spec, x + disp, "tmpl")[:, 0]
        data = absolute(pred - s).mean()
        loss = data + cfg.lambda_warp * (disp ** 2).sum(1).mean() + cfg.lambda_code * (codes ** 2).sum(1).mean()
        check_finite(loss, step)
        losses.append(float(data))
        grads = torch.autograd.grad(loss, list(params.values()) + [codes])
        adam_step(params, dict(zip(params, grads[:-1])), state, cfg.lr)
        adam_step({"codes": codes}, {"codes": grads[-1]}, cstate, cfg.code_lr)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("template step %d loss %.5f", step, losses[-1])
    store.assign(params)
    return ImplicitTemplate(store, codes.detach().numpy().astype(np.float64), warp_spec, tmpl_spec, losses)


def template_prior(model: ImplicitTemplate, resolution: int = 64) -> TriMesh:
    """Zero level set of the shared template."""
    return _extract(model.template_sdf, resolution)
