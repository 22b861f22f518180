"""Synthetic hand-object scenes: heuristic grasps, cameras, maps and SDF banks."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FramingFailed, GraspFailed, ValidationError
from .geometry import (
    Camera,
    RigidTransform,
    TriMesh,
    axis_angle_to_matrix,
    load_obj,
    look_at,
    mesh_signed_distance,
    save_obj,
)
from .hand import N_BETA, N_JOINTS, HandModel, HandPose, build_hand_model, finger_joints, flexion_pose, skin
from .render import MapStack, composite_color, load_maps, render_scene, save_maps
from .samples import SdfSamples, near_surface_samples, query_cube
from .shapes import CATEGORIES, make_shape

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "HANDPRIOR_DATA"
SPLITS = ("train", "test_instance", "test_view")

# hand-local palm surface point facing the object
_PALM_POINT = np.array([0.0, 0.050, -0.015])
_FLEX_LIMIT_DEG = {0: 80.0, 1: 100.0, 2: 100.0, 3: 100.0, 4: 100.0}  # per finger


@dataclass
class GraspConfig:
    step_deg: float = 2.0
    contact_tol: float = 0.001  # fingertip stops once its object SDF is at most this
    penetration_step_tol: float = 0.002  # a curl step that pushes deeper than this is undone
    max_penetration: float = 0.005
    reach_tol: float = 0.005  # a finger counts as touching within this distance
    min_contacts: int = 3
    palm_gap: float = 0.002
    min_band_width: float = 0.006
    retries: int = 20


def _sdf(obj: TriMesh, pts: np.ndarray) -> np.ndarray:
    return mesh_signed_distance(obj, pts, check=False)


def _band_frames(obj: TriMesh, category: str, rng: np.random.Generator):
    """Palm target point, approach normal (object -> palm) and finger direction."""
    v = obj.vertices
    up = np.array([0.0, 0.0, 1.0])
    if category in ("mug", "bottle") or category not in ("box", "knife"):
        if category == "mug":
            # stay on the side opposite the handle (handle along +x)
            phi = rng.uniform(0.6 * np.pi, 1.4 * np.pi)
        else:
            phi = rng.uniform(0, 2 * np.pi)
        normal = np.array([np.cos(phi), np.sin(phi), 0.0])
        ang = np.arctan2(v[:, 1], v[:, 0])
        near = np.abs(np.angle(np.exp(1j * (ang - phi)))) < np.deg2rad(25)
        z = v[:, 2]
        edges = np.arange(z.min(), z.max() + 0.01, 0.01)
        best, best_r = None, -np.inf
        for lo in edges[:-1]:
            sel = near & (z >= lo) & (z < lo + 0.01)
            if sel.sum() < 3:
                continue
            r = np.percentile(v[sel] @ normal, 90)
            if r > best_r + 1e-4:
                best, best_r = lo, r
        if best is None:
            raise GraspFailed("no graspable band found")
        zc = best + 0.005 + rng.uniform(-0.004, 0.004)
        target = np.array([0.0, 0.0, zc]) + best_r * normal
        tangent = np.cross(up, normal)
        finger_dir = tangent if rng.random() < 0.5 else -tangent
        width = 2 * best_r
    elif category == "box":
        axis = int(rng.integers(0, 2))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        normal = np.zeros(3)
        normal[axis] = sign
        lo, hi = obj.bounds()
        target = (lo + hi) / 2
        target[axis] = hi[axis] if sign > 0 else lo[axis]
        target[2] += rng.uniform(-0.2, 0.2) * (hi[2] - lo[2]) / 2
        tangent = np.cross(up, normal)
        finger_dir = tangent if rng.random() < 0.5 else -tangent
        width = float((hi - lo)[1 - axis])
    else:  # knife: handle along -x, blade along +x
        lo, hi = obj.bounds()
        handle = v[:, 0] < lo[0] + 0.35 * (hi[0] - lo[0])
        sign = 1.0 if rng.random() < 0.5 else -1.0
        normal = np.array([0.0, sign, 0.0])
        hv = v[handle]
        xc = 0.5 * (hv[:, 0].min() + hv[:, 0].max()) + rng.uniform(-0.005, 0.005)
        zc = 0.5 * (hv[:, 2].min() + hv[:, 2].max())
        target = np.array([xc, (hv[:, 1].max() if sign > 0 else hv[:, 1].min()), zc])
        finger_dir = up if rng.random() < 0.5 else -up
        width = float(min(np.ptp(hv[:, 1]), np.ptp(hv[:, 2])))
    return target, normal, finger_dir, width


def _palm_root(target: np.ndarray, normal: np.ndarray, finger_dir: np.ndarray, gap: float) -> RigidTransform:
    z_h = normal / np.linalg.norm(normal)
    y_h = finger_dir - (finger_dir @ z_h) * z_h
    y_h /= np.linalg.norm(y_h)
    x_h = np.cross(y_h, z_h)
    R = np.stack([x_h, y_h, z_h], axis=1)
    t = target + gap * z_h - R @ _PALM_POINT
    return RigidTransform(R, t)


def _curl(model: HandModel, obj: TriMesh, root: RigidTransform, beta: np.ndarray, cfg: GraspConfig):
    angles = np.zeros(N_JOINTS)
    step = np.deg2rad(cfg.step_deg)
    for f in range(5):
        joints = finger_joints(f)
        limit = np.deg2rad(_FLEX_LIMIT_DEG[f])
        tip_part = model.vertex_part == joints[2]
        touched = False
        for k, j in enumerate(joints):
            moving = np.isin(model.vertex_part, joints[k:])
            while angles[j] + step <= limit + 1e-12:
                trial = angles.copy()
                trial[j] += step
                verts = skin(model, flexion_pose(model, trial, root, beta)).vertices
                d = _sdf(obj, verts[moving])
                if d.min() < -cfg.penetration_step_tol:
                    break
                angles = trial
                if _sdf(obj, verts[tip_part]).min() <= cfg.contact_tol:
                    touched = True
                    break
            if touched:
                break
    return angles


def synth_grasp(obj: TriMesh, model: HandModel | None = None, seed: int = 0, category: str = "bottle",
                config: GraspConfig | None = None) -> HandPose:
    """Palm against a graspable band, fingers curled joint by joint until contact.

    ``obj`` is in its canonical frame; the returned pose's root is expressed in
    that frame. Raises GraspFailed when no retry yields enough fingertip
    contacts within the penetration budget.
    """
    cfg = config or GraspConfig()
    model = model or build_hand_model()
    for attempt in range(cfg.retries):
        rng = np.random.default_rng([seed, attempt])
        target, normal, finger_dir, width = _band_frames(obj, category, rng)
        if width < cfg.min_band_width:
            continue
        beta = np.ones(N_BETA) + rng.uniform(-0.05, 0.05, size=N_BETA)
        root = _palm_root(target, normal, finger_dir, cfg.palm_gap)
        angles = _curl(model, obj, root, beta, cfg)
        pose = flexion_pose(model, angles, root, beta)
        verts = skin(model, pose).vertices
        d = _sdf(obj, verts)
        if -d.min() > cfg.max_penetration:
            continue
        n_contact = 0
        for f in range(5):
            tip = model.vertex_part == finger_joints(f)[2]
            if np.abs(d[tip]).min() <= cfg.reach_tol:
                n_contact += 1
        if n_contact >= cfg.min_contacts:
            return pose
    raise GraspFailed(f"no acceptable grasp after {cfg.retries} attempts")


# ----------------------------------------------------------------------------
# scenes


@dataclass
class Scene:
    scene_id: str
    category: str
    split: str
    object_canonical: TriMesh
    object_pose: RigidTransform  # canonical -> world
    hand_pose: HandPose  # world frame root
    camera: Camera
    maps: dict = field(default_factory=dict)  # name -> MapStack
    image: np.ndarray | None = None
    samples: SdfSamples | None = None
    shape_id: str = ""
    params: dict = field(default_factory=dict)

    @property
    def object_world(self) -> TriMesh:
        return self.object_canonical.transformed(self.object_pose)

    @property
    def prior_pose(self) -> RigidTransform:
        # canonical instances are aligned with the category prior
        return self.object_pose


def _sample_camera(center: np.ndarray, obj_world: TriMesh, rng: np.random.Generator, width: int, height: int,
                   tries: int = 20, margin: float = 1.0) -> Camera:
    for _ in range(tries):
        rho = rng.uniform(0.4, 0.8)
        az = rng.uniform(0, 2 * np.pi)
        el = np.arcsin(rng.uniform(-0.5, 0.9))
        eye = center + rho * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        f = rng.uniform(80, 120)
        cam = Camera(f, f, (width - 1) / 2, (height - 1) / 2, width, height, look_at(eye, center))
        xc = cam.to_camera(obj_world.vertices)
        if np.any(xc[:, 2] <= 1e-3):
            continue
        uv = cam.project_world(obj_world.vertices)
        if (uv.min() >= margin) and (uv[:, 0].max() <= width - 1 - margin) and (uv[:, 1].max() <= height - 1 - margin):
            return cam
    raise FramingFailed(f"object did not fit in the frame after {tries} camera draws")


def render_maps(hand_world: TriMesh, obj_world: TriMesh, camera: Camera) -> tuple[dict, np.ndarray]:
    hs, os_ = render_scene(hand_world, obj_world, camera, "separate")
    hm, om = render_scene(hand_world, obj_world, camera, "merged")
    maps = {"hand_separate": hs, "object_separate": os_, "hand_merged": hm, "object_merged": om}
    return maps, composite_color(hm, om)


def assemble_scene(obj_canonical: TriMesh, hand_pose_canonical: HandPose, seed: int, model: HandModel | None = None,
                   scene_id: str = "scene", category: str = "", split: str = "train", n_samples: int = 20000,
                   width: int = 64, height: int = 64, object_pose: RigidTransform | None = None) -> Scene:
    """Place object and hand in the world, draw a camera, render maps and label samples."""
    model = model or build_hand_model()
    rng = np.random.default_rng(seed)
    if object_pose is None:
        yaw = rng.uniform(0, 2 * np.pi)
        object_pose = RigidTransform(axis_angle_to_matrix(np.array([0.0, 0.0, yaw])), rng.uniform(-0.02, 0.02, 3))
    else:
        rng.uniform(0, 2 * np.pi), rng.uniform(-0.02, 0.02, 3)
    hand_pose = hand_pose_canonical.with_root(object_pose.compose(hand_pose_canonical.root))
    obj_world = obj_canonical.transformed(object_pose)
    center = object_pose.translation
    camera = _sample_camera(center, obj_world, rng, width, height)
    hand_world = skin(model, hand_pose)
    maps, image = render_maps(hand_world, obj_world, camera)
    radius = float(np.linalg.norm(obj_canonical.vertices, axis=1).max())
    lo, hi = query_cube(center, radius)
    samples = near_surface_samples(obj_world, n_samples, int(rng.integers(2 ** 31)), lo, hi, check=False)
    samples.scene_id = scene_id
    return Scene(scene_id, category, split, obj_canonical, object_pose, hand_pose, camera, maps, image, samples)


def _transform_json(T: RigidTransform) -> dict:
    return {"R": T.rotation.reshape(-1).tolist(), "t": T.translation.tolist()}


def _transform_from_json(d: dict) -> RigidTransform:
    return RigidTransform(np.array(d["R"]).reshape(3, 3), np.array(d["t"]))


def save_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    (d / "maps").mkdir(parents=True, exist_ok=True)
    save_obj(scene.object_world, d / "object.obj")
    save_obj(scene.object_canonical, d / "object_canonical.obj")
    (d / "hand_pose.json").write_text(json.dumps(scene.hand_pose.to_json(), indent=2))
    (d / "camera.json").write_text(json.dumps(scene.camera.to_json(), indent=2))
    (d / "prior_pose.json").write_text(json.dumps(_transform_json(scene.prior_pose), indent=2))
    meta = {"scene_id": scene.scene_id, "category": scene.category, "split": scene.split,
            "shape_id": scene.shape_id, "params": scene.params,
            "object_pose": _transform_json(scene.object_pose)}
    (d / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for name, stack in scene.maps.items():
        save_maps(stack, d / "maps", name)
    color = MapStack(np.zeros(scene.image.shape[:2]), np.zeros(scene.image.shape), np.zeros(scene.image.shape[:2]),
                     scene.image, "image")
    save_maps(color, d / "maps", "image")
    scene.samples.save(d / "samples.bin")


def load_scene(directory, with_samples: bool = True) -> Scene:
    d = Path(directory)
    meta = json.loads((d / "scene.json").read_text())
    maps = {}
    for name in ("hand_separate", "object_separate", "hand_merged", "object_merged"):
        maps[name] = load_maps(d / "maps", name)
    image = load_maps(d / "maps", "image").color
    samples = SdfSamples.load(d / "samples.bin", meta["scene_id"]) if with_samples else None
    return Scene(meta["scene_id"], meta["category"], meta["split"], load_obj(d / "object_canonical.obj"),
                 _transform_from_json(meta["object_pose"]),
                 HandPose.from_json(json.loads((d / "hand_pose.json").read_text())),
                 Camera.from_json(json.loads((d / "camera.json").read_text())), maps, image, samples,
                 meta["shape_id"], meta["params"])


# ----------------------------------------------------------------------------
# datasets


def data_root(explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    raise ValidationError(f"no data root given and ${DATA_ROOT_ENV} is unset")


def _derived_seed(seed: int, *parts) -> int:
    h = hashlib.sha256(json.dumps([seed, *parts]).encode()).digest()
    return int.from_bytes(h[:4], "little")


def build_dataset(category: str, counts: dict, seed: int, root, n_samples: int = 20000,
                  model: HandModel | None = None) -> Path:
    """Generate ``<root>/<category>/<scene_id>/`` scenes and ``<root>/manifest.json``.

    train and test_instance draw fresh shapes from disjoint parameter
    sub-ranges; test_view reuses training shapes and grasps with new cameras.
    """
    if category not in CATEGORIES:
        raise ValidationError(f"unknown category {category!r}")
    for split in SPLITS:
        if counts.get(split, 0) < 1:
            raise ValidationError("every split count must be >= 1")
    spec = CATEGORIES[category]
    model = model or build_hand_model()
    root = Path(root)
    entries = []
    train_shapes = []

    def make_instance(split: str, index: int):
        for attempt in range(50):
            rng = np.random.default_rng(_derived_seed(seed, category, split, index, attempt))
            params = spec.sample(rng, held_out=(split == "test_instance"))
            mesh = make_shape(spec, params)
            try:
                grasp = synth_grasp(mesh, model, _derived_seed(seed, category, split, index, attempt, "grasp"),
                                    category)
            except GraspFailed:
                continue
            return params, mesh, grasp
        raise GraspFailed(f"could not grasp any {category} instance for {split} #{index}")

    def emit(split, index, params, mesh, grasp, shape_id):
        sid = f"{split}_{index:04d}"
        scene = assemble_scene(mesh, grasp, _derived_seed(seed, category, split, index, "scene"), model,
                               sid, category, split, n_samples)
        scene.shape_id = shape_id
        scene.params = params
        save_scene(scene, root / category / sid)
        entries.append({"scene_id": sid, "category": category, "split": split, "shape_id": shape_id,
                        "params": params})
        log.info("wrote %s/%s", category, sid)

    for i in range(counts["train"]):
        params, mesh, grasp = make_instance("train", i)
        train_shapes.append((params, mesh, grasp, f"train_shape_{i:04d}"))
        emit("train", i, params, mesh, grasp, f"train_shape_{i:04d}")
    for i in range(counts["test_instance"]):
        params, mesh, grasp = make_instance("test_instance", i)
        emit("test_instance", i, params, mesh, grasp, f"test_shape_{i:04d}")
    for i in range(counts["test_view"]):
        params, mesh, grasp, shape_id = train_shapes[i % len(train_shapes)]
        emit("test_view", i, params, mesh, grasp, shape_id)

    manifest_path = root / "manifest.json"
    manifest = {"categories": {}}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    manifest["categories"][category] = {"seed": seed, "counts": {s: counts[s] for s in SPLITS},
                                        "n_samples": n_samples, "scenes": entries}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"no manifest at {path}")
    return json.loads(path.read_text())


def scene_dirs(root, category: str, splits=SPLITS) -> list[Path]:
    man = load_manifest(root)
    cat = man["categories"].get(category)
    if cat is None:
        raise ValidationError(f"category {category!r} not in dataset")
    return [Path(root) / category / e["scene_id"] for e in cat["scenes"] if e["split"] in splits]
