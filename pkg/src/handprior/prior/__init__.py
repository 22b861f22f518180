from .build import (
    PRIOR_HALF,
    UNIT,
    AutoDecoder,
    ImplicitTemplate,
    PriorTrainConfig,
    latent_mean_prior,
    template_prior,
    train_autodecoder,
    train_implicit_template,
    voxel_mean_prior,
)
from .latent import (
    CODE_DIM,
    PRIOR_METHODS,
    VOLUME_HALF,
    VOLUME_RES,
    LatentVolume,
    ObjectPrior,
    Splat,
    anchor_codes,
    build_splat,
    canonicalize,
    diffuse_codes,
    diffusion_forward,
    diffusion_init,
    load_prior,
    prior_content_hash,
    prior_hash,
    sample_volume,
    sample_volume_torch,
    save_prior,
    shape_feature,
    trilinear_weights,
)

__all__ = [
    "PRIOR_HALF", "UNIT", "AutoDecoder", "ImplicitTemplate", "PriorTrainConfig", "latent_mean_prior", "template_prior",
    "train_autodecoder", "train_implicit_template", "voxel_mean_prior",
    "CODE_DIM", "PRIOR_METHODS", "VOLUME_HALF", "VOLUME_RES", "LatentVolume", "ObjectPrior", "Splat", "anchor_codes",
    "build_splat", "canonicalize", "diffuse_codes", "diffusion_forward", "diffusion_init", "load_prior",
    "prior_content_hash", "prior_hash", "sample_volume", "sample_volume_torch", "save_prior", "shape_feature", "trilinear_weights",
]
