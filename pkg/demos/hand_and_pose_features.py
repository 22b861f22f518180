"""
Articulated hand and pose-aware query features
==============================================

Pose the procedural hand, skin it, and compute the per-query pose feature
in each joint's local frame. The feature is unchanged when the hand and
the queries move together.
"""

import numpy as np

from handprior.geometry import RigidTransform, random_rigid
from handprior.hand import (
    POSE_FEATURE_DIMS,
    N_JOINTS,
    build_hand_model,
    flexion_pose,
    forward_kinematics,
    joint_positions,
    pose_feature,
    skin,
)

model = build_hand_model()
print("template:", len(model.template.vertices), "vertices,", N_JOINTS, "joints")

# curl every finger joint by 0.4 rad under a translated root
pose = flexion_pose(model, np.full(N_JOINTS, 0.4), RigidTransform(np.eye(3), [0.0, 0.0, 0.5]))
frames = forward_kinematics(model, pose)
mesh = skin(model, pose, frames)
print("skinned mesh bounds:", np.round(mesh.bounds()[0], 3), np.round(mesh.bounds()[1], 3))
print("fingertips (m):\n", np.round(joint_positions(model, pose, frames)[[4, 8, 12, 16, 20]], 3))

# one query per mode; joint distances need the skinned mesh and keypoints
x = np.array([[0.01, 0.06, 0.52]])
for mode, dim in POSE_FEATURE_DIMS.items():
    f = pose_feature(x, frames, mode, mesh, joint_positions(model, pose, frames))
    print(f"{mode:16s} dim {f.shape[1]} (expected {dim})")

# move hand and query together: the local-frame feature stays put
g = random_rigid(np.random.default_rng(1), 0.3)
moved = forward_kinematics(model, pose.with_root(g.compose(pose.root)))
delta = np.abs(pose_feature(g.apply(x), moved) - pose_feature(x, frames)).max()
print("co-moved feature change:", delta)
