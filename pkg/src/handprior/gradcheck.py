"""Finite-difference checks of every trainable block and of the end-to-end 3D loss.

Inputs are small random tensors. The end-to-end check runs the production
graph with the real decoder; the latent volume is checked at 16^3 nodes
instead of 32^3, which changes no operation, only the grid size, and keeps
ten seeds per block within a desk-scale time budget.
"""

from __future__ import annotations

import numpy as np
import torch

from .geometry.primitives import icosphere
from .model import PYRAMID_STRIDES, AblationMask, QueryBatch, chord_init, chord_loss
from .neural import (
    MlpSpec,
    ParamStore,
    conv_encoder_forward,
    conv_encoder_init,
    encdec_forward,
    encdec_init,
    finite_difference_check,
    l1_loss,
    mlp_forward,
    mlp_init,
)
from .prior import VOLUME_HALF, anchor_codes, build_splat, diffusion_forward, diffusion_init, sample_volume_torch, trilinear_weights


CHECK_RES = 16


def _t(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def check_mlp(seed: int) -> float:
    rng = np.random.default_rng(seed)
    spec = MlpSpec(7, (16, 16, 16), 2, skip_layer=2)
    p = mlp_init(spec, rng, "m").tensors(dtype=torch.float64)
    x, y = _t(rng.normal(size=(32, 7))), _t(rng.normal(size=(32, 2)))
    return finite_difference_check(p, lambda q: l1_loss(mlp_forward(q, spec, x, "m"), y), seed=seed)


def check_conv_encoder(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = conv_encoder_init(rng, 3, "enc").tensors(dtype=torch.float64)
    img = _t(rng.random((2, 3, 16, 16)))
    targets = [_t(rng.normal(size=s)) for s in ((2, 8, 16, 16), (2, 16, 8, 8), (2, 32, 4, 4), (2, 64, 2, 2))]

    def loss(q):
        return sum(l1_loss(f, t) for f, t in zip(conv_encoder_forward(q, img, "enc"), targets))

    return finite_difference_check(p, loss, seed=seed)


def check_encdec(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = encdec_init(rng).tensors(dtype=torch.float64)
    x, y = _t(rng.random((1, 11, 16, 16))), _t(rng.normal(size=(1, 4, 16, 16)))
    return finite_difference_check(p, lambda q: l1_loss(encdec_forward(q, x), y), seed=seed)


def check_diffusion(seed: int) -> float:
    """Splat of trainable codes -> conv stack -> trilinear queries."""
    rng = np.random.default_rng(seed)
    anchors = icosphere(0.08, 1).vertices
    splat = build_splat(anchors, res=CHECK_RES)
    store = ParamStore(seed)
    store.add("codes", rng.normal(0.0, 0.1, size=(len(anchors), 16)))
    diffusion_init(rng, 16, store=store)
    p = store.tensors(dtype=torch.float64)
    q = rng.uniform(-0.1, 0.1, size=(64, 3))
    idx, w, _ = trilinear_weights(q, CHECK_RES, VOLUME_HALF)
    target = _t(rng.normal(0.0, 0.1, size=(64, 16)))

    def loss(t):
        vol = diffusion_forward(t, splat.apply_torch(t["codes"]))
        return l1_loss(sample_volume_torch(vol, torch.as_tensor(idx), _t(w)), target)

    return finite_difference_check(p, loss, n_probes=4, seed=seed)


def random_batch(rng: np.random.Generator, n_images: int = 2, n_points: int = 48, size: int = 16,
                 res: int = CHECK_RES) -> QueryBatch:
    """A valid query batch over random images with random geometry, sdf targets included."""
    n = n_images * n_points
    owner = np.repeat(np.arange(n_images), n_points)
    corners = []
    for s in PYRAMID_STRIDES:
        h = size // s
        local = rng.integers(0, h * h, size=(n, 4))
        w = rng.random((n, 4))
        corners.append((local + owner[:, None] * h * h, w / w.sum(1, keepdims=True)))
    xc = rng.uniform(-0.12, 0.12, size=(n, 3))
    idx, w, _ = trilinear_weights(xc, res, VOLUME_HALF)
    return QueryBatch(rng.random((n_images, size, size, 3)), rng.uniform(-0.1, 0.1, (n, 3)) + [0, 0, 0.5], xc,
                      rng.normal(0.0, 0.05, (n, 48)), rng.normal(0.0, 0.3, (n, 8)), idx, w, corners,
                      rng.normal(0.0, 0.02, n))


def check_end_to_end(seed: int, mask: AblationMask = AblationMask()) -> float:
    """The f3D training loss over all parameters: decoder, encoder, projection, codes, diffusion."""
    rng = np.random.default_rng(seed)
    prior = anchor_codes(icosphere(0.08, 1), "sphere", seed=seed, sigma=0.1)
    splat = build_splat(prior.mesh.vertices, res=CHECK_RES)
    p = chord_init(prior, seed).tensors(dtype=torch.float64)
    batch = random_batch(rng)
    return finite_difference_check(p, lambda q: chord_loss(q, batch, mask, splat), n_probes=4, seed=seed)


CHECKS = {
    "mlp": check_mlp,
    "conv_encoder": check_conv_encoder,
    "encdec": check_encdec,
    "diffusion": check_diffusion,
    "end_to_end": check_end_to_end,
}


def run_gradchecks(seeds=range(10), names=None) -> dict[str, list[float]]:
    names = names or list(CHECKS)
    return {name: [CHECKS[name](int(s)) for s in seeds] for name in names}
