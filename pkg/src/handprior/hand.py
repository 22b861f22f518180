"""Procedural 16-joint proxy hand: template, kinematics, skinning and pose features.

Hand-local frame: wrist at the origin, fingers along +y, palm facing -z,
thumb on the +x side. Rest frames are axis aligned, so the rest transform of
joint ``b`` is a pure translation to its rest position.

Joint order is root, then three joints each for thumb, index, middle, ring and
pinky (proximal to distal); the 21-keypoint set appends the five fingertip
sites in the same finger order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidFrames, InvalidPose, LengthMismatch, ValidationError
from .geometry import (
    RigidTransform,
    TriMesh,
    axis_angle_to_matrix,
    closest_point_on_mesh,
    concatenate,
    load_obj,
    save_obj,
)
from .geometry.primitives import ellipsoid, uv_sphere_capsule

N_JOINTS = 16
N_KEYPOINTS = 21
N_BETA = 10
FINGERS = ("thumb", "index", "middle", "ring", "pinky")

# (first joint rest position, unit bone direction, three bone lengths to the
# next joint / tip, three capsule radii)
_FINGER_LAYOUT = {
    "thumb": ((0.022, 0.022, 0.0), (0.70, 0.70, 0.0), (0.036, 0.032, 0.026), (0.0115, 0.0105, 0.0095)),
    "index": ((0.028, 0.090, 0.0), (0.0, 1.0, 0.0), (0.040, 0.025, 0.022), (0.0095, 0.0085, 0.0077)),
    "middle": ((0.009, 0.094, 0.0), (0.0, 1.0, 0.0), (0.044, 0.028, 0.024), (0.0098, 0.0088, 0.0079)),
    "ring": ((-0.010, 0.090, 0.0), (0.0, 1.0, 0.0), (0.041, 0.026, 0.023), (0.0092, 0.0082, 0.0074)),
    "pinky": ((-0.028, 0.082, 0.0), (0.0, 1.0, 0.0), (0.032, 0.020, 0.020), (0.0080, 0.0072, 0.0066)),
}
_PALM_CENTER = (0.0, 0.050, 0.0)
_PALM_RADII = (0.045, 0.056, 0.015)


def finger_joints(finger: int) -> tuple[int, int, int]:
    return 1 + 3 * finger, 2 + 3 * finger, 3 + 3 * finger


@dataclass(frozen=True)
class HandModel:
    template: TriMesh
    weights: np.ndarray  # (V, 16), rows sum to 1
    parents: np.ndarray  # (16,), parents[0] == -1
    rest_positions: np.ndarray  # (16, 3) joint origins in the zero pose
    bone_dirs: np.ndarray  # (16, 3) unit rest direction of each bone (zero for the root)
    flex_axes: np.ndarray  # (16, 3) unit flexion axis per joint (zero for the root)
    tip_sites: np.ndarray  # (5,) template vertex indices of the fingertip sites
    vertex_part: np.ndarray  # (V,) joint whose rigid part owns each vertex

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.shape != (len(self.template.vertices), N_JOINTS):
            raise ValidationError("weights must be (V, 16)")
        if np.any(w < 0) or np.abs(w.sum(axis=1) - 1).max() > 1e-9:
            raise ValidationError("skinning weights must be non-negative and sum to 1")
        p = np.asarray(self.parents)
        if p[0] != -1 or np.any(p[1:] >= np.arange(1, N_JOINTS)) or np.any(p[1:] < 0):
            raise ValidationError("hierarchy must be a tree rooted at joint 0 in topological order")

    @property
    def rest_offsets(self) -> np.ndarray:
        off = np.zeros((N_JOINTS, 3))
        off[1:] = self.rest_positions[1:] - self.rest_positions[self.parents[1:]]
        return off

    def finger_of(self, joint: int) -> int:
        return -1 if joint == 0 else (joint - 1) // 3

    def descendants(self, joint: int) -> list[int]:
        out = []
        for b in range(joint + 1, N_JOINTS):
            p = self.parents[b]
            if p == joint or p in out:
                out.append(b)
        return out


@dataclass(frozen=True)
class HandPose:
    theta: np.ndarray  # (16, 3) axis-angle per joint, radians; theta[0] unused (root carries global motion)
    beta: np.ndarray  # (10,) 5 finger length scales then 5 finger thickness scales
    root: RigidTransform

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64).reshape(N_JOINTS, 3))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64).reshape(N_BETA))

    @classmethod
    def zero(cls, root: RigidTransform | None = None) -> "HandPose":
        return cls(np.zeros((N_JOINTS, 3)), np.ones(N_BETA), root or RigidTransform.identity())

    def validate(self) -> None:
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.beta))):
            raise InvalidPose("non-finite pose parameters")
        if np.any(np.linalg.norm(self.theta, axis=1) >= np.pi):
            raise InvalidPose("axis-angle magnitude must be below pi")
        if np.any(self.beta < 0.7) or np.any(self.beta > 1.3):
            raise InvalidPose("shape scales must lie in [0.7, 1.3]")

    def with_root(self, root: RigidTransform) -> "HandPose":
        return HandPose(self.theta.copy(), self.beta.copy(), root)

    def to_json(self) -> dict:
        return {"theta": self.theta.tolist(), "beta": self.beta.tolist(),
                "root": {"R": self.root.rotation.reshape(-1).tolist(), "t": self.root.translation.tolist()}}

    @classmethod
    def from_json(cls, d: dict) -> "HandPose":
        return cls(np.array(d["theta"]), np.array(d["beta"]),
                   RigidTransform(np.array(d["root"]["R"]).reshape(3, 3), np.array(d["root"]["t"])))


@dataclass(frozen=True)
class JointFrames:
    transforms: tuple[RigidTransform, ...]

    def __post_init__(self):
        if len(self.transforms) != N_JOINTS:
            raise InvalidFrames(f"expected {N_JOINTS} joint frames")

    def matrices(self) -> np.ndarray:
        return np.stack([T.matrix() for T in self.transforms])

    def inverse_matrices(self) -> np.ndarray:
        return np.stack([T.inverse().matrix() for T in self.transforms])

    @property
    def origins(self) -> np.ndarray:
        return np.stack([T.translation for T in self.transforms])

    def moved(self, g: RigidTransform) -> "JointFrames":
        return JointFrames(tuple(g.compose(T) for T in self.transforms))


def build_hand_model(n_around: int = 8, n_cap: int = 2, palm_subdivisions: int = 2) -> HandModel:
    """Palm ellipsoid plus one tapered capsule per finger bone."""
    parents = np.full(N_JOINTS, -1)
    rest = np.zeros((N_JOINTS, 3))
    dirs = np.zeros((N_JOINTS, 3))
    axes = np.zeros((N_JOINTS, 3))
    tip_points = np.zeros((5, 3))
    radii = np.zeros(N_JOINTS)
    palm_normal = np.array([0.0, 0.0, -1.0])
    for f, name in enumerate(FINGERS):
        start, d, lengths, rad = _FINGER_LAYOUT[name]
        d = np.asarray(d, dtype=np.float64)
        d /= np.linalg.norm(d)
        # positive rotation about this axis curls the bone toward the palm side
        ax = np.cross(-palm_normal, d)
        ax /= np.linalg.norm(ax)
        p = np.asarray(start, dtype=np.float64)
        for k, j in enumerate(finger_joints(f)):
            parents[j] = 0 if k == 0 else j - 1
            rest[j] = p
            dirs[j] = d
            axes[j] = ax
            radii[j] = rad[k]
            p = p + lengths[k] * d
        tip_points[f] = p

    parts, owners, blends = [], [], []
    palm = ellipsoid(_PALM_CENTER, _PALM_RADII, palm_subdivisions)
    parts.append(palm)
    owners.append(np.zeros(len(palm.vertices), dtype=np.int64))
    blends.append(np.zeros(len(palm.vertices)))
    tip_sites = np.zeros(5, dtype=np.int64)
    offset = len(palm.vertices)
    for j in range(1, N_JOINTS):
        f = (j - 1) // 3
        distal = (j - 1) % 3 == 2
        start = rest[j]
        end = tip_points[f] if distal else rest[j + 1]
        r0 = radii[j]
        r1 = radii[j] * 0.92
        if distal:
            # the top pole then lands exactly on the anatomical tip
            end = end - r1 * dirs[j]
        cap = uv_sphere_capsule(start, end, r0, r1, n_around, n_cap)
        parts.append(cap)
        owners.append(np.full(len(cap.vertices), j))
        s = (cap.vertices - start) @ dirs[j]
        # knuckle blend: half of the proximal cap follows the parent
        blends.append(0.5 * np.clip(-s / r0, 0.0, 1.0))
        if distal:
            tip_sites[f] = offset + int(np.argmax(s))
        offset += len(cap.vertices)
    template = concatenate(parts)
    owner = np.concatenate(owners)
    blend = np.concatenate(blends)
    weights = np.zeros((len(owner), N_JOINTS))
    weights[np.arange(len(owner)), owner] = 1.0 - blend
    par = np.where(owner > 0, parents[owner], 0)
    np.add.at(weights, (np.arange(len(owner)), par), blend)
    return HandModel(template, weights, parents, rest, dirs, axes, tip_sites, owner)


def _shape_matrices(model: HandModel, beta: np.ndarray) -> np.ndarray:
    """Per-joint local scaling: finger length along the bone, thickness across it."""
    S = np.tile(np.eye(3), (N_JOINTS, 1, 1))
    for j in range(1, N_JOINTS):
        f = (j - 1) // 3
        d = model.bone_dirs[j]
        P = np.outer(d, d)
        S[j] = beta[f] * P + beta[5 + f] * (np.eye(3) - P)
    return S


def forward_kinematics(model: HandModel, pose: HandPose) -> JointFrames:
    """T_b = T_parent ∘ translate(shape-scaled rest offset) ∘ rotate(theta_b); T_0 = root."""
    pose.validate()
    S = _shape_matrices(model, pose.beta)
    offsets = model.rest_offsets
    Rs = np.zeros((N_JOINTS, 3, 3))
    # translations are tracked as displacements from the rest positions so the
    # zero pose reproduces the rest frames without round-off
    disp = np.zeros((N_JOINTS, 3))
    Rs[0] = pose.root.rotation
    disp[0] = pose.root.translation - model.rest_positions[0]
    for b in range(1, N_JOINTS):
        p = model.parents[b]
        disp[b] = disp[p] + (Rs[p] @ S[p] - np.eye(3)) @ offsets[b]
        Rs[b] = Rs[p] @ axis_angle_to_matrix(pose.theta[b])
    ts = model.rest_positions + disp
    ts[0] = pose.root.translation
    return JointFrames(tuple(RigidTransform(Rs[b], ts[b]) for b in range(N_JOINTS)))


def skin(model: HandModel, pose: HandPose, frames: JointFrames | None = None) -> TriMesh:
    """Linear blend skinning: v' = sum_b w_vb T_b(S_b (v - rest_b)).

    Evaluated as v plus a weighted displacement, which is algebraically the
    same and keeps the zero pose exact.
    """
    if frames is None:
        frames = forward_kinematics(model, pose)
    S = _shape_matrices(model, pose.beta)
    v = model.template.vertices
    delta = np.zeros_like(v)
    for b in range(N_JOINTS):
        w = model.weights[:, b]
        nz = w > 0
        if not np.any(nz):
            continue
        T = frames.transforms[b]
        A = T.rotation @ S[b] - np.eye(3)
        shift = T.translation - model.rest_positions[b]
        delta[nz] += w[nz, None] * ((v[nz] - model.rest_positions[b]) @ A.T + shift)
    out = v + delta
    return TriMesh(out, model.template.faces)


def joint_positions(model: HandModel, pose: HandPose, frames: JointFrames | None = None,
                    hand_mesh: TriMesh | None = None) -> np.ndarray:
    """(21, 3): sixteen joint origins, then the five skinned fingertip sites."""
    if frames is None:
        frames = forward_kinematics(model, pose)
    if hand_mesh is None:
        hand_mesh = skin(model, pose, frames)
    return np.concatenate([frames.origins, hand_mesh.vertices[model.tip_sites]])


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-joint position error in millimeters (inputs in meters)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != (N_KEYPOINTS, 3) or gt.shape != (N_KEYPOINTS, 3):
        raise LengthMismatch("MPJPE needs two (21, 3) joint sets")
    return float(np.linalg.norm(pred - gt, axis=1).mean() * 1000.0)


POSE_FEATURE_DIMS = {"with_global": 48, "without_global": 45, "joint_distances": 23}


def pose_feature(x: np.ndarray, frames: JointFrames, mode: str = "with_global",
                 hand_mesh: TriMesh | None = None, joints: np.ndarray | None = None) -> np.ndarray:
    """Query coordinates in the hand's joint frames.

    ``with_global``: T_b^-1(x) for all 16 joints (48 values).
    ``without_global``: the 15 non-root joints only (45 values).
    ``joint_distances``: 21 distances to the keypoints, then the signed
    projection of (x - nearest hand surface point) on that point's face
    normal, then the distance itself (23 values).

    Accepts a single point or an (N, 3) batch.
    """
    if not isinstance(frames, JointFrames):
        raise InvalidFrames("frames must be a JointFrames instance")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(-1, 3)
    if mode in ("with_global", "without_global"):
        inv = frames.inverse_matrices()
        if mode == "without_global":
            inv = inv[1:]
        local = np.einsum("bij,nj->nbi", inv[:, :3, :3], X) + inv[None, :, :3, 3]
        out = local.reshape(len(X), -1)
    elif mode == "joint_distances":
        if hand_mesh is None or joints is None:
            raise InvalidFrames("joint_distances mode needs the skinned hand mesh and keypoints")
        joints = np.asarray(joints, dtype=np.float64)
        if joints.shape != (N_KEYPOINTS, 3):
            raise InvalidFrames("keypoints must be (21, 3)")
        d_joint = np.linalg.norm(X[:, None, :] - joints[None], axis=-1)
        dist, closest, face = closest_point_on_mesh(hand_mesh, X)
        normal = hand_mesh.face_normals()[face]
        dot = np.einsum("ni,ni->n", X - closest, normal)
        out = np.concatenate([d_joint, dot[:, None], dist[:, None]], axis=1)
    else:
        raise ValidationError(f"unknown pose feature mode {mode!r}")
    return out[0] if single else out


def flexion_pose(model: HandModel, angles: np.ndarray, root: RigidTransform | None = None,
                 beta: np.ndarray | None = None) -> HandPose:
    """Pose from one flexion angle per joint (index 0 ignored)."""
    angles = np.asarray(angles, dtype=np.float64).reshape(N_JOINTS)
    theta = angles[:, None] * model.flex_axes
    return HandPose(theta, np.ones(N_BETA) if beta is None else beta, root or RigidTransform.identity())


def save_hand_model(model: HandModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_obj(model.template, d / "hand_template.obj")
    meta = {
        "weights": model.weights.tolist(),
        "parents": model.parents.tolist(),
        "rest_offsets": model.rest_offsets.tolist(),
        "rest_positions": model.rest_positions.tolist(),
        "bone_dirs": model.bone_dirs.tolist(),
        "flex_axes": model.flex_axes.tolist(),
        "tip_sites": model.tip_sites.tolist(),
        "vertex_part": model.vertex_part.tolist(),
    }
    (d / "hand_model.json").write_text(json.dumps(meta))


def load_hand_model(directory) -> HandModel:
    d = Path(directory)
    meta = json.loads((d / "hand_model.json").read_text())
    return HandModel(
        load_obj(d / "hand_template.obj"),
        np.array(meta["weights"]),
        np.array(meta["parents"]),
        np.array(meta["rest_positions"]),
        np.array(meta["bone_dirs"]),
        np.array(meta["flex_axes"]),
        np.array(meta["tip_sites"], dtype=np.int64),
        np.array(meta["vertex_part"], dtype=np.int64),
    )
