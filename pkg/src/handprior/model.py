"""Per-query feature bundle, the implicit decoder, its training loop and coarse-to-fine reconstruction.

A query point x is described by

    x       camera-frame coordinates (3)
    x'      prior-canonical coordinates, inverse(prior pose)(x) (3)
    F_I     image pyramid features mapped to 16 values
    F_P     x in the hand's joint frames (48; shorter modes are zero padded)
    F_S     trilinear sample of the diffused latent volume (16)
    F_A     hand / object normal and depth maps sampled at pi(x) (8)

and the decoder maps the 94 values to a signed distance.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import (
    BehindCamera,
    CheckpointPriorMismatch,
    EmptyDataset,
    NotWatertight,
    ShapeMismatch,
    ValidationError,
)
from .geometry import Camera, RigidTransform, TriMesh, VoxelGrid, marching_cubes, perturb_transform, project
from .hand import (
    HandModel,
    HandPose,
    JointFrames,
    POSE_FEATURE_DIMS,
    build_hand_model,
    forward_kinematics,
    joint_positions,
    pose_feature,
    skin,
)
from .neural import (
    DECODER_SPEC,
    ENCODER_CHANNELS,
    ENCDEC_IN,
    AdamState,
    ParamStore,
    Tensors,
    adam_step,
    check_finite,
    conv_encoder_forward,
    conv_encoder_init,
    encdec_forward,
    encdec_init,
    l1_loss,
    mlp_forward,
    mlp_init,
    step_lr,
)
from .prior import (
    UNIT,
    LatentVolume,
    ObjectPrior,
    Splat,
    build_splat,
    diffusion_forward,
    diffusion_init,
    prior_content_hash,
    sample_volume_torch,
    shape_feature,
    trilinear_weights,
)
from .render import HAND_ALBEDO, OBJECT_ALBEDO, MapStack, bilinear_sample, raycast
from .samples import SdfSamples, near_surface_samples, query_cube

log = logging.getLogger(__name__)

BUNDLE_BLOCKS = (("x", 3), ("x_canonical", 3), ("F_I", 16), ("F_P", 48), ("F_S", 16), ("F_A", 8))
BUNDLE_WIDTH = sum(w for _, w in BUNDLE_BLOCKS)
BUNDLE_SLICES = {}
_start = 0
for _name, _w in BUNDLE_BLOCKS:
    BUNDLE_SLICES[_name] = slice(_start, _start + _w)
    _start += _w
del _start, _name, _w

PYRAMID_STRIDES = (1, 2, 4, 8)
PYRAMID_WIDTH = sum(ENCODER_CHANNELS)
IMAGE_FEATURE_DIM = 16
POSE_MODES = ("gt_pose", "perturbed_pose")
INSTANCE_MODES = ("oracle", "identity", "trained")
RENDER_MODES = ("separate", "merged")

# query coordinates (x, x', F_P) enter the decoder in units of UNIT; codes, image
# features and the F_A maps raw (scaling the map depths too trained markedly worse)
_INPUT_SCALE = np.ones(BUNDLE_WIDTH)
for _name in ("x", "x_canonical", "F_P"):
    _INPUT_SCALE[BUNDLE_SLICES[_name]] = 1.0 / UNIT
del _name


@dataclass(frozen=True)
class AblationMask:
    """Which awareness blocks feed the decoder; F_I is always on."""

    fa: bool = True
    fs: bool = True
    fp: bool = True

    @classmethod
    def parse(cls, text: str) -> "AblationMask":
        """'fi,fa,fs,fp' style lists (also '+' separated); 'full' enables everything."""
        t = text.strip().lower()
        if t == "full":
            return cls()
        tokens = {s.strip() for s in t.replace("+", ",").split(",") if s.strip()}
        unknown = tokens - {"fi", "fa", "fs", "fp"}
        if unknown or "fi" not in tokens:
            raise ValidationError(f"bad mask {text!r}: expected a subset of fi,fa,fs,fp containing fi")
        return cls("fa" in tokens, "fs" in tokens, "fp" in tokens)

    @property
    def name(self) -> str:
        return ",".join(["fi"] + [k for k in ("fa", "fs", "fp") if getattr(self, k)])

    def enabled(self, block: str) -> bool:
        return {"F_A": self.fa, "F_S": self.fs, "F_P": self.fp}.get(block, True)


FULL_MASK = AblationMask()
FI_ONLY = AblationMask(False, False, False)


@dataclass
class FeatureBundle:
    x: np.ndarray  # (N, 3) camera frame
    x_canonical: np.ndarray  # (N, 3)
    F_I: np.ndarray  # (N, 16)
    F_P: np.ndarray  # (N, 48)
    F_S: np.ndarray  # (N, 16)
    F_A: np.ndarray  # (N, 8)

    def array(self) -> np.ndarray:
        out = np.concatenate([getattr(self, name) for name, _ in BUNDLE_BLOCKS], axis=1)
        if out.shape[1] != BUNDLE_WIDTH:
            raise ShapeMismatch(f"bundle width {out.shape[1]} != {BUNDLE_WIDTH}")
        if not np.all(np.isfinite(out)):
            raise ValidationError("feature bundle has non-finite entries")
        return out


# ----------------------------------------------------------------------------
# scene inputs


@dataclass
class SceneInputs:
    """Everything the 3D stage sees for one image."""

    scene_id: str
    camera: Camera
    image: np.ndarray  # (H, W, 3)
    hand_pose: HandPose
    hand_mesh: TriMesh
    frames: JointFrames
    joints: np.ndarray  # (21, 3)
    prior_pose: RigidTransform
    hand_maps: MapStack
    prior_maps: MapStack
    instance_maps: np.ndarray  # (H, W, 4): depth then normal
    object_maps: MapStack | None = None  # ground truth, where known
    samples: SdfSamples | None = None
    object_world: TriMesh | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.instance_maps = np.asarray(self.instance_maps, dtype=np.float32)
        self.check()

    @property
    def resolution(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    def check(self) -> None:
        H, W = self.resolution
        if self.image.shape != (H, W, 3):
            raise ShapeMismatch("image must be (H, W, 3)")
        if (self.camera.height, self.camera.width) != (H, W):
            raise ShapeMismatch("camera resolution differs from the image")
        stacks = [self.hand_maps, self.prior_maps] + ([self.object_maps] if self.object_maps is not None else [])
        for s in stacks:
            if s.depth.shape != (H, W):
                raise ShapeMismatch("all maps must share the image resolution")
        if self.instance_maps.shape != (H, W, 4):
            raise ShapeMismatch("instance maps must be (H, W, 4)")
        for T in (self.prior_pose, self.hand_pose.root):
            if not (np.all(np.isfinite(T.rotation)) and np.all(np.isfinite(T.translation))):
                raise ValidationError("poses must be finite")

    def moved(self, g: RigidTransform) -> "SceneInputs":
        """The same scene after one rigid motion of camera, hand, object and prior."""
        return SceneInputs(
            self.scene_id, self.camera.moved(g), self.image, self.hand_pose.with_root(g.compose(self.hand_pose.root)),
            self.hand_mesh.transformed(g), self.frames.moved(g), g.apply(self.joints), g.compose(self.prior_pose),
            self.hand_maps, self.prior_maps, self.instance_maps, self.object_maps,
            None if self.samples is None else SdfSamples(g.apply(self.samples.points), self.samples.sdf,
                                                         self.samples.scene_id),
            None if self.object_world is None else self.object_world.transformed(g))


def _scene_rng(seed: int, scene_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode())])


def scene_inputs(scene, prior: ObjectPrior, model: HandModel | None = None, pose_mode: str = "gt_pose",
                 render_mode: str = "separate", instance_mode: str = "oracle", f2d_params=None,
                 seed: int = 0, max_angle_deg: float = 5.0, max_translation: float = 0.005,
                 with_samples: bool = True) -> SceneInputs:
    """Turn a dataset scene into model inputs.

    ``perturbed_pose`` replaces the hand root and the prior pose by perturbed
    copies (rotation <= max_angle_deg per axis, shift <= max_translation per
    axis) drawn from (seed, scene id); the hand maps are then rendered from
    that estimated hand.
    """
    if pose_mode not in POSE_MODES:
        raise ValidationError(f"unknown pose mode {pose_mode!r}")
    if render_mode not in RENDER_MODES:
        raise ValidationError(f"unknown render mode {render_mode!r}")
    if instance_mode not in INSTANCE_MODES:
        raise ValidationError(f"unknown instance-map mode {instance_mode!r}")
    model = model or build_hand_model()
    camera = scene.camera
    hand_pose = scene.hand_pose
    prior_pose = scene.prior_pose
    if pose_mode == "perturbed_pose":
        rng = _scene_rng(seed, scene.scene_id)
        hand_pose = hand_pose.with_root(perturb_transform(hand_pose.root, rng, max_angle_deg, max_translation))
        prior_pose = perturb_transform(prior_pose, rng, max_angle_deg, max_translation)
    frames = forward_kinematics(model, hand_pose)
    hand_mesh = skin(model, hand_pose, frames)
    joints = joint_positions(model, hand_pose, frames)
    if pose_mode == "gt_pose":
        hand_maps = scene.maps[f"hand_{render_mode}"]
    else:
        hand_maps = raycast(hand_mesh, camera, HAND_ALBEDO)
    prior_maps = raycast(prior.mesh.transformed(prior_pose), camera, OBJECT_ALBEDO)
    object_maps = scene.maps[f"object_{render_mode}"]
    inputs = SceneInputs(scene.scene_id, camera, scene.image, hand_pose, hand_mesh, frames, joints, prior_pose,
                         hand_maps, prior_maps, np.zeros(object_maps.depth.shape + (4,)), object_maps,
                         scene.samples if with_samples else None, scene.object_world)
    depth, normal = predict_instance_maps(inputs, f2d_params, instance_mode)
    inputs.instance_maps = np.concatenate([depth[..., None], normal], axis=-1).astype(np.float32)
    return inputs


# ----------------------------------------------------------------------------
# feature blocks


def _project_checked(x: np.ndarray, camera: Camera) -> np.ndarray:
    xc = camera.to_camera(x)
    if np.any(xc[:, 2] <= 0):
        raise BehindCamera("query point at or behind the camera plane")
    return project(xc, camera)


def appearance_feature(x: np.ndarray, camera: Camera, hand_maps: MapStack, instance_maps) -> np.ndarray:
    """F_A: hand normal (3), object normal (3), hand depth, object depth at pi(x).

    ``instance_maps`` is an (H, W, 4) depth+normal array or a MapStack.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    uv = _project_checked(x.reshape(-1, 3), camera)
    if isinstance(instance_maps, MapStack):
        obj_depth, obj_normal = instance_maps.depth, instance_maps.normal
    else:
        obj_depth, obj_normal = instance_maps[..., 0], instance_maps[..., 1:4]
    out = np.concatenate([
        bilinear_sample(hand_maps.normal, uv),
        bilinear_sample(obj_normal, uv),
        bilinear_sample(hand_maps.depth, uv)[:, None],
        bilinear_sample(obj_depth, uv)[:, None],
    ], axis=1)
    return out[0] if single else out


def pixel_corners(uv: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices (N, 4) and weights (N, 4) of the clamped bilinear stencil at (u, v)."""
    u = np.clip(uv[:, 0], 0.0, width - 1.0)
    v = np.clip(uv[:, 1], 0.0, height - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(width - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(height - 2, 0))
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    fu, fv = u - u0, v - v0
    idx = np.stack([v0 * width + u0, v0 * width + u1, v1 * width + u0, v1 * width + u1], axis=1)
    w = np.stack([(1 - fv) * (1 - fu), (1 - fv) * fu, fv * (1 - fu), fv * fu], axis=1)
    return idx, w


def pyramid_corners(uv: np.ndarray, height: int, width: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Bilinear stencils per pyramid level; pixel centers map as (uv + 0.5) / s - 0.5."""
    out = []
    for s in PYRAMID_STRIDES:
        out.append(pixel_corners((uv + 0.5) / s - 0.5, height // s, width // s))
    return out


def _image_tensor(images: np.ndarray, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(images), dtype=dtype).permute(0, 3, 1, 2).contiguous()


def _image_block(params: Tensors, feats: list[torch.Tensor], corners: list[tuple]) -> torch.Tensor:
    """Gather the pyramid at per-query stencils (indices already offset per image), project to 16."""
    cols = []
    for fmap, (idx, w) in zip(feats, corners):
        B, C, h, wd = fmap.shape
        flat = fmap.permute(0, 2, 3, 1).reshape(B * h * wd, C)
        cols.append((flat[idx] * w[..., None]).sum(1))
    return torch.cat(cols, dim=1) @ params["img_proj.W"] + params["img_proj.b"]


def _tensors64(params) -> Tensors:
    items = params.items() if hasattr(params, "items") else params
    return {k: torch.as_tensor(np.asarray(v.detach() if torch.is_tensor(v) else v), dtype=torch.float64)
            for k, v in items}


def image_feature(x: np.ndarray, camera: Camera, params, image: np.ndarray) -> np.ndarray:
    """F_I: bilinear samples of the 4-level pyramid at pi(x), concatenated (120) and mapped to 16."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    image = np.asarray(image)
    if image.shape[:2] != (camera.height, camera.width):
        raise ShapeMismatch("image resolution differs from the camera")
    uv = _project_checked(x.reshape(-1, 3), camera)
    p = _tensors64(params)
    H, W = image.shape[:2]
    corners = [(torch.as_tensor(i), torch.as_tensor(w)) for i, w in pyramid_corners(uv, H, W)]
    with torch.no_grad():
        feats = conv_encoder_forward(p, _image_tensor(image[None], torch.float64))
        out = _image_block(p, feats, corners).numpy()
    return out[0] if single else out


def pose_block(x: np.ndarray, scene: SceneInputs, mode: str = "with_global") -> np.ndarray:
    """F_P slot: pose_feature padded with zeros to 48 values."""
    f = pose_feature(np.asarray(x, dtype=np.float64).reshape(-1, 3), scene.frames, mode, scene.hand_mesh, scene.joints)
    width = BUNDLE_SLICES["F_P"].stop - BUNDLE_SLICES["F_P"].start
    return np.concatenate([f, np.zeros((len(f), width - f.shape[1]))], axis=1)


def assemble_bundle(x: np.ndarray, scene: SceneInputs, volume: LatentVolume, mask: AblationMask, params,
                    pose_mode: str = "with_global") -> FeatureBundle:
    """All six blocks for world-frame queries ``x``; masked blocks are zeros."""
    X = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    n = len(X)

    def block(name, fn):
        if not mask.enabled(name):
            return np.zeros((n, BUNDLE_SLICES[name].stop - BUNDLE_SLICES[name].start))
        return fn()

    return FeatureBundle(
        scene.camera.to_camera(X),
        scene.prior_pose.inverse().apply(X),
        image_feature(X, scene.camera, params, scene.image),
        block("F_P", lambda: pose_block(X, scene, pose_mode)),
        block("F_S", lambda: shape_feature(X, scene.prior_pose, volume)),
        block("F_A", lambda: appearance_feature(X, scene.camera, scene.hand_maps, scene.instance_maps)),
    )


# ----------------------------------------------------------------------------
# parameters


def chord_init(prior: ObjectPrior, seed: int = 0) -> ParamStore:
    """Decoder, image encoder + projection, anchored codes and diffusion conv in one store."""
    rng = np.random.default_rng(seed)
    store = ParamStore(seed)
    mlp_init(DECODER_SPEC, rng, "dec", store)
    conv_encoder_init(rng, 3, "enc", store)
    store.add("img_proj.W", rng.normal(0.0, np.sqrt(1.0 / PYRAMID_WIDTH), size=(PYRAMID_WIDTH, IMAGE_FEATURE_DIM)))
    store.add("img_proj.b", np.zeros(IMAGE_FEATURE_DIM))
    store.add("codes", prior.codes)
    diffusion_init(rng, prior.code_dim, store=store)
    return store


def decode(params: Tensors, bundle: torch.Tensor) -> torch.Tensor:
    """(N, 94) bundle -> (N,) signed distance in meters."""
    scale = torch.as_tensor(_INPUT_SCALE, dtype=bundle.dtype)
    return mlp_forward(params, DECODER_SPEC, bundle * scale, "dec")[:, 0] * UNIT


def latent_volume_torch(params: Tensors, splat: Splat) -> torch.Tensor:
    return diffusion_forward(params, splat.apply_torch(params["codes"]))


def latent_volume(params, prior: ObjectPrior, splat: Splat | None = None) -> LatentVolume:
    """The diffused volume for the store's current codes."""
    splat = splat or build_splat(prior.mesh.vertices)
    p = _tensors64(params)
    with torch.no_grad():
        return LatentVolume(latent_volume_torch(p, splat).numpy())


# ----------------------------------------------------------------------------
# query batches


@dataclass
class QueryBatch:
    """Non-trainable per-query inputs for a set of scenes, ready for :func:`chord_forward`."""

    images: np.ndarray  # (B, H, W, 3)
    x_cam: np.ndarray  # (N, 3)
    x_canonical: np.ndarray  # (N, 3)
    pose: np.ndarray  # (N, 48)
    appearance: np.ndarray  # (N, 8)
    vol_idx: np.ndarray  # (N, 8) trilinear stencil into the latent volume
    vol_w: np.ndarray
    corners: list  # per pyramid level: (idx (N, 4) offset by image, w (N, 4))
    sdf: np.ndarray | None = None


@dataclass
class _ScenePrep:
    """Per-scene precomputation over its sample bank (or any fixed query set)."""

    x: np.ndarray
    x_cam: np.ndarray
    appearance: np.ndarray
    corners: list
    pose: np.ndarray
    sdf: np.ndarray | None


def _prep_scene(scene: SceneInputs, x: np.ndarray, sdf, pose_mode: str, need_fa: bool) -> _ScenePrep:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    uv = _project_checked(x, scene.camera)
    H, W = scene.resolution
    fa = (appearance_feature(x, scene.camera, scene.hand_maps, scene.instance_maps) if need_fa
          else np.zeros((len(x), 8)))
    pose = pose_block(x, scene, pose_mode) if pose_mode == "joint_distances" else np.zeros((0, 48))
    return _ScenePrep(x, scene.camera.to_camera(x), fa, pyramid_corners(uv, H, W), pose, sdf)


def _local_pose(x: np.ndarray, frames: JointFrames, mode: str) -> np.ndarray:
    f = pose_feature(x, frames, mode)
    return np.concatenate([f, np.zeros((len(f), 48 - f.shape[1]))], axis=1)


def _gather(preps: list[_ScenePrep], scenes: list[SceneInputs], picks: list[np.ndarray], pose_mode: str,
            hand_moves=None, prior_poses=None) -> QueryBatch:
    """Stack selected queries of several scenes; optional per-scene pose overrides (augmentation)."""
    xs, xcan, pose, fa, vi, vw, sdf = [], [], [], [], [], [], []
    corners = [([], []) for _ in PYRAMID_STRIDES]
    H, W = scenes[0].resolution
    for b, (prep, sc, sel) in enumerate(zip(preps, scenes, picks)):
        x = prep.x[sel]
        xs.append(prep.x_cam[sel])
        pp = sc.prior_pose if prior_poses is None else prior_poses[b]
        xc = pp.inverse().apply(x)
        xcan.append(xc)
        if pose_mode == "joint_distances":
            pose.append(prep.pose[sel])
        else:
            frames = sc.frames if hand_moves is None else sc.frames.moved(hand_moves[b])
            pose.append(_local_pose(x, frames, pose_mode))
        fa.append(prep.appearance[sel])
        i, w, _ = trilinear_weights(xc)
        vi.append(i)
        vw.append(w)
        for level, s in enumerate(PYRAMID_STRIDES):
            ci, cw = prep.corners[level]
            corners[level][0].append(ci[sel] + b * (H // s) * (W // s))
            corners[level][1].append(cw[sel])
        if prep.sdf is not None:
            sdf.append(prep.sdf[sel])
    return QueryBatch(
        np.stack([sc.image for sc in scenes]), np.concatenate(xs), np.concatenate(xcan), np.concatenate(pose),
        np.concatenate(fa), np.concatenate(vi), np.concatenate(vw),
        [(np.concatenate(i), np.concatenate(w)) for i, w in corners],
        np.concatenate(sdf) if sdf else None)


def chord_forward(params: Tensors, batch: QueryBatch, mask: AblationMask, splat: Splat | None,
                  volume: torch.Tensor | None = None, return_bundle: bool = False):
    """Predicted signed distances (N,) for a query batch; differentiable in every parameter."""
    dtype = params["dec.0.W"].dtype
    n = len(batch.x_cam)
    t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    feats = conv_encoder_forward(params, _image_tensor(batch.images, dtype))
    corners = [(torch.as_tensor(i), t(w)) for i, w in batch.corners]
    f_i = _image_block(params, feats, corners)
    zeros = lambda name: torch.zeros(n, BUNDLE_SLICES[name].stop - BUNDLE_SLICES[name].start, dtype=dtype)  # noqa
    f_p = t(batch.pose) if mask.fp else zeros("F_P")
    if mask.fs:
        vol = volume if volume is not None else latent_volume_torch(params, splat)
        f_s = sample_volume_torch(vol, torch.as_tensor(batch.vol_idx), t(batch.vol_w))
    else:
        f_s = zeros("F_S")
    f_a = t(batch.appearance) if mask.fa else zeros("F_A")
    bundle = torch.cat([t(batch.x_cam), t(batch.x_canonical), f_i, f_p, f_s, f_a], dim=1)
    pred = decode(params, bundle)
    return (pred, bundle) if return_bundle else pred


def chord_loss(params: Tensors, batch: QueryBatch, mask: AblationMask, splat: Splat | None,
               clamp: float | None = None) -> torch.Tensor:
    """Mean L1 between predicted and ground-truth signed distance (optionally both clamped)."""
    pred = chord_forward(params, batch, mask, splat)
    target = torch.as_tensor(batch.sdf, dtype=pred.dtype)
    if clamp is not None:
        pred, target = pred.clamp(-clamp, clamp), target.clamp(-clamp, clamp)
    return l1_loss(pred / UNIT, target / UNIT)


# ----------------------------------------------------------------------------
# samples and training


def generate_sdf_samples(scene: SceneInputs, object_mesh: TriMesh, n: int, seed: int, prior: ObjectPrior | None = None,
                         branches=None) -> SdfSamples:
    """Near-surface bank for a world-frame object inside the query cube around the prior pose.

    The cube half-extent is 1.25x the prior's bounding radius when a prior is
    given, otherwise the object's own radius about the prior translation.
    """
    if not object_mesh.is_watertight:
        raise NotWatertight("sample labels need a watertight object")
    center = scene.prior_pose.translation
    if prior is not None:
        radius = prior.bounding_radius
    else:
        radius = float(np.linalg.norm(object_mesh.vertices - center, axis=1).max())
    lo, hi = query_cube(center, radius)
    kwargs = {} if branches is None else {"branches": branches}
    bank = near_surface_samples(object_mesh, n, seed, lo, hi, **kwargs)
    bank.scene_id = scene.scene_id
    return bank


@dataclass
class ChordConfig:
    steps: int = 2000
    lr: float = 1e-4
    final_lr: float | None = None  # default lr / 10
    batch_scenes: int = 32
    points_per_scene: int = 256
    pose_feature: str = "with_global"
    augment: bool = True
    max_angle_deg: float = 5.0
    max_translation: float = 0.005
    clamp: float | None = None
    seed: int = 0
    log_every: int = 100

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ChordConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ChordModel:
    params: ParamStore
    mask: AblationMask
    config: ChordConfig
    prior_hash: str
    losses: list = field(default_factory=list)

    def meta(self) -> dict:
        return {"prior_hash": self.prior_hash, "mask": self.mask.name, "config": self.config.to_json(),
                "bundle_layout": [list(b) for b in BUNDLE_BLOCKS]}


def _augment_poses(scenes, rng, cfg: ChordConfig):
    """Per-scene hand motion (as a left factor of every joint frame) and perturbed prior pose."""
    moves, priors = [], []
    for sc in scenes:
        root = sc.hand_pose.root
        new_root = perturb_transform(root, rng, cfg.max_angle_deg, cfg.max_translation)
        moves.append(new_root.compose(root.inverse()))
        priors.append(perturb_transform(sc.prior_pose, rng, cfg.max_angle_deg, cfg.max_translation))
    return moves, priors


def train_chord(scenes: list[SceneInputs], prior: ObjectPrior, config: ChordConfig | None = None,
                mask: AblationMask = FULL_MASK, params: ParamStore | None = None) -> ChordModel:
    """Adam on decoder, encoder, projection, anchored codes and diffusion conv jointly.

    Each step draws up to ``batch_scenes`` scenes and ``points_per_scene``
    samples from each bank; with ``augment`` the hand root and prior pose of
    every drawn scene are perturbed afresh.
    """
    cfg = config or ChordConfig()
    if not scenes:
        raise EmptyDataset("training needs at least one scene")
    if any(sc.samples is None or len(sc.samples) == 0 for sc in scenes):
        raise EmptyDataset("every training scene needs a sample bank")
    if cfg.pose_feature not in POSE_FEATURE_DIMS:
        raise ValidationError(f"unknown pose feature mode {cfg.pose_feature!r}")
    store = params.copy() if params is not None else chord_init(prior, cfg.seed)
    splat = build_splat(prior.mesh.vertices)
    preps = [_prep_scene(sc, sc.samples.points, sc.samples.sdf, cfg.pose_feature, mask.fa) for sc in scenes]
    rng = np.random.default_rng([cfg.seed, 1])
    torch.manual_seed(cfg.seed)
    tensors = store.tensors()
    state = AdamState.create(tensors)
    final_lr = cfg.lr / 10 if cfg.final_lr is None else cfg.final_lr
    augment = cfg.augment and cfg.pose_feature != "joint_distances"
    losses = []
    for step in range(cfg.steps):
        if len(scenes) > cfg.batch_scenes:
            chosen = np.sort(rng.choice(len(scenes), cfg.batch_scenes, replace=False))
        else:
            chosen = np.arange(len(scenes))
        sub = [scenes[i] for i in chosen]
        picks = [rng.integers(0, len(preps[i].x), cfg.points_per_scene) for i in chosen]
        moves, priors = _augment_poses(sub, rng, cfg) if augment else (None, None)
        batch = _gather([preps[i] for i in chosen], sub, picks, cfg.pose_feature, moves, priors)
        loss = chord_loss(tensors, batch, mask, splat, cfg.clamp)
        losses.append(check_finite(loss, step))
        grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
        adam_step(tensors, {k: g for k, g in zip(tensors, grads) if g is not None}, state,
                  step_lr(step, cfg.steps, cfg.lr, final_lr))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("chord [%s] step %d loss %.5f", mask.name, step, losses[-1])
    store.assign(tensors)
    return ChordModel(store, mask, cfg, prior_content_hash(prior), losses)


def save_checkpoint(model: ChordModel, path) -> None:
    model.params.save(path, model.meta())


def load_checkpoint(path, prior: ObjectPrior | None = None, prior_hash: str | None = None) -> ChordModel:
    """Load params + meta; a given prior (or hash) must match the one trained against."""
    store, meta = ParamStore.load(path)
    expected = prior_hash if prior_hash is not None else (prior_content_hash(prior) if prior is not None else None)
    if expected is not None and meta.get("prior_hash") != expected:
        raise CheckpointPriorMismatch("checkpoint was trained against a different prior")
    if [list(b) for b in BUNDLE_BLOCKS] != meta.get("bundle_layout"):
        raise ShapeMismatch("checkpoint bundle layout differs from this build")
    return ChordModel(store, AblationMask.parse(meta["mask"]), ChordConfig.from_json(meta["config"]),
                      meta["prior_hash"], [])


# ----------------------------------------------------------------------------
# reconstruction


@dataclass
class Reconstruction:
    mesh: TriMesh  # world frame
    empty: bool  # EmptyField: no negative value anywhere
    coarse: np.ndarray  # (32, 32, 32) values
    fine: np.ndarray  # (64, 64, 64) values
    half: float  # cube half-extent, in the prior frame
    n_refined: int  # fine nodes evaluated directly

    @property
    def flag(self) -> str | None:
        return "EmptyField" if self.empty else None


def _cube_nodes(half: float, res: int) -> np.ndarray:
    a = np.linspace(-half, half, res)
    return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1).reshape(-1, 3)


def field_fn(scene: SceneInputs, prior: ObjectPrior, model: ChordModel, chunk: int = 16384):
    """World points -> predicted signed distance under ``model`` for ``scene``."""
    tensors = model.params.tensors(requires_grad=False)
    mask = model.mask
    mode = model.config.pose_feature
    splat = build_splat(prior.mesh.vertices)
    with torch.no_grad():
        volume = latent_volume_torch(tensors, splat) if mask.fs else None

    def fn(x: np.ndarray) -> np.ndarray:
        out = []
        for s in range(0, len(x), chunk):
            prep = _prep_scene(scene, x[s:s + chunk], None, mode, mask.fa)
            batch = _gather([prep], [scene], [np.arange(len(prep.x))], mode)
            with torch.no_grad():
                out.append(chord_forward(tensors, batch, mask, splat, volume).numpy().astype(np.float64))
        return np.concatenate(out) if out else np.zeros(0)

    return fn


def reconstruct(scene: SceneInputs, prior: ObjectPrior, model: ChordModel | None = None, sdf_fn=None,
                coarse_res: int = 32, fine_res: int = 64, factor: float = 1.25) -> Reconstruction:
    """Coarse-to-fine zero level set inside a cube around the prior pose.

    The cube is axis-aligned in the prior frame, centered at the prior
    translation, with half-extent ``factor`` times the prior's bounding
    radius. Coarse cells with any corner below one coarse-cell diagonal are
    refined on the fine grid; fine nodes elsewhere take the trilinear
    interpolation of the coarse values. ``sdf_fn`` (world points -> sdf)
    bypasses the model.
    """
    if sdf_fn is None:
        if model is None:
            raise ValidationError("reconstruct needs a model or an sdf_fn")
        sdf_fn = field_fn(scene, prior, model)
    half = factor * prior.bounding_radius
    pose = scene.prior_pose
    coarse = np.asarray(sdf_fn(pose.apply(_cube_nodes(half, coarse_res))), dtype=np.float64)
    coarse = coarse.reshape((coarse_res,) * 3)
    cc = 2 * half / (coarse_res - 1)
    corner_min = coarse.copy()
    for axis in range(3):
        a = np.moveaxis(corner_min, axis, 0)
        corner_min = np.moveaxis(np.minimum(a[:-1], a[1:]), 0, axis)
    flagged = corner_min < np.sqrt(3) * cc  # (R-1)^3 cells

    fine_nodes = _cube_nodes(half, fine_res)
    g = (fine_nodes + half) / cc
    cell = np.minimum(np.floor(g).astype(np.int64), coarse_res - 2)
    cell = np.maximum(cell, 0)
    refine = flagged[cell[:, 0], cell[:, 1], cell[:, 2]]
    f = g - cell
    fine = np.zeros(len(fine_nodes))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (np.where(dx, f[:, 0], 1 - f[:, 0]) * np.where(dy, f[:, 1], 1 - f[:, 1])
                     * np.where(dz, f[:, 2], 1 - f[:, 2]))
                fine += w * coarse[cell[:, 0] + dx, cell[:, 1] + dy, cell[:, 2] + dz]
    if refine.any():
        fine[refine] = np.asarray(sdf_fn(pose.apply(fine_nodes[refine])), dtype=np.float64)
    fine = fine.reshape((fine_res,) * 3)
    if fine.min() >= 0:
        log.warning("EmptyField: no negative signed distance in the query cube of %s", scene.scene_id)
        return Reconstruction(TriMesh.empty(), True, coarse, fine, half, int(refine.sum()))
    grid = VoxelGrid(np.full(3, -half), 2 * half / (fine_res - 1), fine)
    mesh = marching_cubes(grid).transformed(pose)
    return Reconstruction(mesh, False, coarse, fine, half, int(refine.sum()))


def provenance(scene: SceneInputs, model: ChordModel | None, pose_mode: str, seed: int,
               coarse_res: int = 32, fine_res: int = 64) -> dict:
    return {"scene_id": scene.scene_id, "mask": None if model is None else model.mask.name,
            "pose_mode": pose_mode, "seeds": {"eval": seed, "train": None if model is None else model.config.seed},
            "grid_sizes": [coarse_res, fine_res]}


# ----------------------------------------------------------------------------
# 2D stage: instance maps


def f2d_input(scene: SceneInputs) -> np.ndarray:
    """(H, W, 11) stack: image, hand depth + normal, prior depth + normal."""
    H, W = scene.resolution
    stack = np.concatenate([scene.image, scene.hand_maps.depth_normal(), scene.prior_maps.depth_normal()], axis=-1)
    if stack.shape != (H, W, ENCDEC_IN):
        raise ShapeMismatch(f"2D input stack must be (H, W, {ENCDEC_IN})")
    return stack


def predict_instance_maps(scene: SceneInputs, f2d_params=None, mode: str = "trained") -> tuple[np.ndarray, np.ndarray]:
    """(depth (H, W), normal (H, W, 3)) of the object instance.

    ``oracle`` returns the ground-truth maps, ``identity`` the prior's
    rendered maps, ``trained`` runs the encoder-decoder.
    """
    if mode == "oracle":
        if scene.object_maps is None:
            raise ValidationError("oracle instance maps need ground-truth object maps")
        return scene.object_maps.depth.copy(), scene.object_maps.normal.copy()
    if mode == "identity":
        return scene.prior_maps.depth.copy(), scene.prior_maps.normal.copy()
    if mode != "trained":
        raise ValidationError(f"unknown instance-map mode {mode!r}")
    if f2d_params is None:
        raise ValidationError("trained instance maps need f2d parameters")
    p = _tensors64(f2d_params)
    x = _image_tensor(f2d_input(scene)[None], torch.float64)
    with torch.no_grad():
        out = encdec_forward(p, x)[0].permute(1, 2, 0).numpy()
    return out[..., 0].astype(np.float32), out[..., 1:4].astype(np.float32)


def instance_map_error(pred: tuple[np.ndarray, np.ndarray], scene: SceneInputs) -> float:
    """Mean absolute error over the 4 depth+normal channels against ground truth."""
    target = scene.object_maps.depth_normal().astype(np.float64)
    p = np.concatenate([pred[0][..., None], pred[1]], axis=-1).astype(np.float64)
    return float(np.abs(p - target).mean())


@dataclass
class F2DConfig:
    steps: int = 2000
    lr: float = 1e-3
    final_lr: float | None = None
    batch: int = 8
    perceptual_weight: float = 0.0  # the feature-matching term needs pretrained weights; only 0 is supported
    seed: int = 0
    log_every: int = 100


def train_f2d(scenes: list[SceneInputs], config: F2DConfig | None = None,
              params: ParamStore | None = None) -> tuple[ParamStore, list[float]]:
    """Pixel-wise L1 on depth and normal channels, equal weight."""
    cfg = config or F2DConfig()
    if not scenes:
        raise EmptyDataset("2D training needs at least one scene")
    if cfg.perceptual_weight != 0.0:
        raise ValidationError("perceptual loss is not available; perceptual_weight must be 0")
    store = params.copy() if params is not None else encdec_init(np.random.default_rng(cfg.seed))
    inputs = _image_tensor(np.stack([f2d_input(s) for s in scenes]), torch.float32)
    targets = _image_tensor(np.stack([s.object_maps.depth_normal() for s in scenes]), torch.float32)
    rng = np.random.default_rng([cfg.seed, 2])
    tensors = store.tensors()
    state = AdamState.create(tensors)
    final_lr = cfg.lr / 10 if cfg.final_lr is None else cfg.final_lr
    losses = []
    for step in range(cfg.steps):
        sel = (np.sort(rng.choice(len(scenes), cfg.batch, replace=False)) if len(scenes) > cfg.batch
               else np.arange(len(scenes)))
        idx = torch.as_tensor(sel)
        loss = l1_loss(encdec_forward(tensors, inputs[idx]), targets[idx])
        losses.append(check_finite(loss, step))
        grads = torch.autograd.grad(loss, list(tensors.values()))
        adam_step(tensors, dict(zip(tensors, grads)), state, step_lr(step, cfg.steps, cfg.lr, final_lr))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("f2d step %d loss %.5f", step, losses[-1])
    store.assign(tensors)
    return store, losses


def save_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
