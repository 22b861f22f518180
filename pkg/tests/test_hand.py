import functools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handprior.errors import InvalidFrames, InvalidPose, LengthMismatch
from handprior.geometry import RigidTransform, axis_angle_to_matrix, random_rigid
from handprior.hand import (
    N_JOINTS,
    HandPose,
    JointFrames,
    forward_kinematics,
    joint_positions,
    load_hand_model,
    mpjpe,
    pose_feature,
    save_hand_model,
    skin,
)


def random_pose(rng, root_scale=0.2):
    theta = rng.normal(0, 0.4, (N_JOINTS, 3))
    theta = np.clip(np.linalg.norm(theta, axis=1, keepdims=True), None, 2.5) * theta / np.maximum(
        np.linalg.norm(theta, axis=1, keepdims=True), 1e-12)
    return HandPose(theta, rng.uniform(0.8, 1.2, 10), random_rigid(rng, root_scale))


def _homogeneous(R, t):
    M = np.eye(4)
    M[:3, :3], M[:3, 3] = R, t
    return M


def fk_oracle(model, pose):
    """Plain 4x4 chain: M_b = M_parent @ Trans(S_parent offset_b) @ Rot(theta_b)."""
    from handprior.hand import _shape_matrices

    S = _shape_matrices(model, pose.beta)
    S[0] = np.eye(3)
    M = [pose.root.matrix()]
    for b in range(1, N_JOINTS):
        p = model.parents[b]
        M.append(M[p] @ _homogeneous(np.eye(3), S[p] @ model.rest_offsets[b])
                 @ _homogeneous(axis_angle_to_matrix(pose.theta[b]), np.zeros(3)))
    return np.stack(M)


def test_model_invariants(hand_model):
    w = hand_model.weights
    assert w.shape[1] == 16 and np.all(w >= 0) and np.abs(w.sum(1) - 1).max() < 1e-9
    assert hand_model.parents[0] == -1
    assert 500 <= len(hand_model.template.vertices) <= 1000
    assert hand_model.template.is_watertight


def test_fk_zero_pose_rest_frames(hand_model):
    fr = forward_kinematics(hand_model, HandPose.zero())
    for b, T in enumerate(fr.transforms):
        assert np.array_equal(T.rotation, np.eye(3))
        assert np.array_equal(T.translation, hand_model.rest_positions[b])


def test_fk_root_translation_shifts(hand_model):
    base = forward_kinematics(hand_model, HandPose.zero()).origins
    moved = forward_kinematics(hand_model, HandPose.zero(RigidTransform(np.eye(3), [0, 0, 0.1]))).origins
    assert np.allclose(moved - base, [0, 0, 0.1], atol=1e-15)


def test_fk_matches_matrix_chain(hand_model):
    theta = np.zeros((N_JOINTS, 3))
    theta[4] = [np.pi / 2, 0, 0]
    pose = HandPose(theta, np.ones(10), RigidTransform.identity())
    assert np.abs(forward_kinematics(hand_model, pose).matrices() - fk_oracle(hand_model, pose)).max() < 1e-12
    rng = np.random.default_rng(0)
    for _ in range(20):
        pose = random_pose(rng)
        assert np.abs(forward_kinematics(hand_model, pose).matrices() - fk_oracle(hand_model, pose)).max() < 1e-12


def test_fk_frames_orthonormal_and_root(hand_model):
    pose = random_pose(np.random.default_rng(1))
    fr = forward_kinematics(hand_model, pose)
    for T in fr.transforms:
        assert np.abs(T.rotation.T @ T.rotation - np.eye(3)).max() < 1e-12
    assert np.array_equal(fr.transforms[0].matrix(), pose.root.matrix())


def test_fk_locality(hand_model):
    rng = np.random.default_rng(2)
    pose = random_pose(rng)
    for b in (3, 8, 13):
        theta = pose.theta.copy()
        theta[b] += 0.3
        a = forward_kinematics(hand_model, pose).matrices()
        c = forward_kinematics(hand_model, HandPose(theta, pose.beta, pose.root)).matrices()
        changed = {b, *hand_model.descendants(b)}
        for j in range(N_JOINTS):
            if j not in changed:
                assert np.array_equal(a[j], c[j])
        assert not np.array_equal(a[b], c[b])


def test_invalid_pose(hand_model):
    theta = np.zeros((N_JOINTS, 3))
    theta[2] = [np.pi, 0, 0]
    with pytest.raises(InvalidPose):
        forward_kinematics(hand_model, HandPose(theta, np.ones(10), RigidTransform.identity()))
    with pytest.raises(InvalidPose):
        skin(hand_model, HandPose(np.zeros((16, 3)), np.full(10, 1.4), RigidTransform.identity()))


def test_skin_zero_pose_identity(hand_model):
    assert np.array_equal(skin(hand_model, HandPose.zero()).vertices, hand_model.template.vertices)


def test_skin_rigid_root(hand_model):
    from handprior.hand import HandModel

    w = np.zeros_like(hand_model.weights)
    w[:, 0] = 1
    rigid = HandModel(hand_model.template, w, hand_model.parents, hand_model.rest_positions,
                      hand_model.bone_dirs, hand_model.flex_axes, hand_model.tip_sites, hand_model.vertex_part)
    R = axis_angle_to_matrix([0.3, -0.5, 0.9])
    pose = HandPose(np.random.default_rng(3).normal(0, 0.3, (16, 3)), np.ones(10), RigidTransform(R, np.zeros(3)))
    out = skin(rigid, pose).vertices
    assert np.allclose(out, hand_model.template.vertices @ R.T, atol=1e-12)


def test_skin_matches_direct_sum(hand_model):
    from handprior.hand import _shape_matrices

    rng = np.random.default_rng(4)
    pose = random_pose(rng)
    M = fk_oracle(hand_model, pose)
    S = _shape_matrices(hand_model, pose.beta)
    v = hand_model.template.vertices
    expected = np.zeros_like(v)
    for i in range(len(v)):
        for b in range(N_JOINTS):
            w = hand_model.weights[i, b]
            if w:
                local = S[b] @ (v[i] - hand_model.rest_positions[b])
                expected[i] += w * (M[b, :3, :3] @ local + M[b, :3, 3])
    assert np.abs(skin(hand_model, pose).vertices - expected).max() < 1e-10
    assert np.array_equal(skin(hand_model, pose).faces, hand_model.template.faces)


def test_joint_positions(hand_model):
    zero = joint_positions(hand_model, HandPose.zero())
    assert zero.shape == (21, 3)
    assert np.array_equal(zero[:16], hand_model.rest_positions)
    t = np.array([0.01, -0.02, 0.3])
    shifted = joint_positions(hand_model, HandPose.zero(RigidTransform(np.eye(3), t)))
    assert np.allclose(shifted - zero, t, atol=1e-12)
    pose = random_pose(np.random.default_rng(5))
    J = joint_positions(hand_model, pose)
    assert np.array_equal(J[16:], skin(hand_model, pose).vertices[hand_model.tip_sites])
    assert np.allclose(J[:16], forward_kinematics(hand_model, pose).origins)


def test_mpjpe():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(21, 3))
    assert mpjpe(a, a) == 0.0
    assert mpjpe(a, a + [0.005, 0, 0]) == pytest.approx(5.0, abs=1e-9)
    b, c = rng.normal(size=(21, 3)), rng.normal(size=(21, 3))
    loop = sum(np.sqrt(sum((a[j, k] - b[j, k]) ** 2 for k in range(3))) for j in range(21)) / 21 * 1000
    assert abs(mpjpe(a, b) - loop) < 1e-9
    assert mpjpe(a, b) == mpjpe(b, a)
    assert mpjpe(a, c) <= mpjpe(a, b) + mpjpe(b, c) + 1e-9
    with pytest.raises(LengthMismatch):
        mpjpe(a[:20], a[:20])


def test_pose_feature_dims_and_rest_zero(hand_model):
    pose = HandPose.zero()
    fr = forward_kinematics(hand_model, pose)
    f = pose_feature(hand_model.rest_positions[5], fr)
    assert f.shape == (48,) and np.array_equal(f[15:18], np.zeros(3))
    assert pose_feature(np.zeros(3), fr, "without_global").shape == (45,)
    mesh = skin(hand_model, pose, fr)
    J = joint_positions(hand_model, pose, fr, mesh)
    g = pose_feature(np.array([0.0, 0.05, -0.05]), fr, "joint_distances", mesh, J)
    assert g.shape == (23,) and g[22] >= 0 and abs(g[21]) <= g[22] + 1e-12
    with pytest.raises(InvalidFrames):
        pose_feature(np.zeros(3), fr, "joint_distances")
    with pytest.raises(InvalidFrames):
        pose_feature(np.zeros(3), [np.eye(4)] * 16)


def test_pose_feature_matches_inverse_oracle(hand_model):
    rng = np.random.default_rng(7)
    pose = random_pose(rng)
    fr = forward_kinematics(hand_model, pose)
    x = rng.normal(0, 0.1, 3)
    expected = np.concatenate([(np.linalg.inv(M) @ np.append(x, 1))[:3] for M in fk_oracle(hand_model, pose)])
    assert np.abs(pose_feature(x, fr) - expected).max() < 1e-10


def test_pose_feature_global_invariance(hand_model):
    rng = np.random.default_rng(8)
    pose = random_pose(rng)
    fr = forward_kinematics(hand_model, pose)
    x = rng.normal(0, 0.1, (500, 3))
    base = pose_feature(x, fr)
    worst = 0.0
    for i in range(500):
        g = random_rigid(rng, 1.0)
        worst = max(worst, np.abs(pose_feature(g.apply(x[i]), fr.moved(g)) - base[i]).max())
    assert worst < 1e-9


def test_frames_moved_equals_fk_of_moved_root(hand_model):
    rng = np.random.default_rng(9)
    pose = random_pose(rng)
    g = random_rigid(rng)
    a = forward_kinematics(hand_model, pose).moved(g).matrices()
    b = forward_kinematics(hand_model, pose.with_root(g.compose(pose.root))).matrices()
    assert np.abs(a - b).max() < 1e-12


def test_joint_distances_global_invariance(hand_model):
    rng = np.random.default_rng(10)
    pose = random_pose(rng)
    fr = forward_kinematics(hand_model, pose)
    mesh = skin(hand_model, pose, fr)
    J = joint_positions(hand_model, pose, fr, mesh)
    x = fr.origins[0] + rng.normal(0, 0.05, (30, 3))
    g = random_rigid(rng)
    a = pose_feature(x, fr, "joint_distances", mesh, J)
    b = pose_feature(g.apply(x), fr.moved(g), "joint_distances", mesh.transformed(g), g.apply(J))
    # column 21 uses one face normal at the nearest point, which is ambiguous at edges
    keep = np.r_[0:21, 22]
    assert np.abs(a[:, keep] - b[:, keep]).max() < 1e-9
    assert np.all(np.abs(b[:, 21]) <= b[:, 22] + 1e-12)


def test_hand_model_io_roundtrip(hand_model, tmp_path):
    save_hand_model(hand_model, tmp_path)
    m = load_hand_model(tmp_path)
    assert np.array_equal(m.weights, hand_model.weights) and np.array_equal(m.parents, hand_model.parents)
    assert np.allclose(m.template.vertices, hand_model.template.vertices)


def test_hand_pose_json_roundtrip():
    pose = random_pose(np.random.default_rng(11))
    back = HandPose.from_json(pose.to_json())
    assert np.array_equal(back.theta, pose.theta) and np.array_equal(back.root.matrix(), pose.root.matrix())


def test_joint_frames_count():
    with pytest.raises(InvalidFrames):
        JointFrames((RigidTransform.identity(),) * 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_property_skin_commutes_with_root_motion(seed):
    model = _cached_model()
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    g = random_rigid(rng, 0.5)
    moved = HandPose(pose.theta, pose.beta, g.compose(pose.root))
    assert np.abs(skin(model, moved).vertices - g.apply(skin(model, pose).vertices)).max() < 1e-9
    assert np.abs(joint_positions(model, moved) - g.apply(joint_positions(model, pose))).max() < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 0.05))
def test_property_mpjpe_translation(seed, shift):
    rng = np.random.default_rng(seed)
    gt = rng.normal(0, 0.05, (21, 3))
    d = rng.normal(size=3)
    d *= shift / np.linalg.norm(d)
    assert mpjpe(gt + d, gt) == pytest.approx(shift * 1000, abs=1e-9)
    assert mpjpe(gt, gt) == 0.0


@functools.lru_cache(maxsize=1)
def _cached_model():
    # hypothesis does not mix with function-scoped fixtures
    from handprior.hand import build_hand_model

    return build_hand_model()
