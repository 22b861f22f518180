import numpy as np
import pytest
import torch

from handprior.errors import BehindCamera, CheckpointPriorMismatch, EmptyDataset, NotWatertight
from handprior.geometry import (
    Camera,
    RigidTransform,
    TriMesh,
    mesh_signed_distance,
    random_rigid,
    sample_surface_points,
    save_obj,
)
from handprior.geometry.primitives import icosphere
from handprior.metrics import chamfer
from handprior.model import (
    BUNDLE_SLICES,
    BUNDLE_WIDTH,
    FI_ONLY,
    FULL_MASK,
    AblationMask,
    ChordConfig,
    appearance_feature,
    assemble_bundle,
    chord_forward,
    chord_init,
    generate_sdf_samples,
    image_feature,
    latent_volume,
    load_checkpoint,
    pose_block,
    predict_instance_maps,
    reconstruct,
    save_checkpoint,
    train_chord,
)
from handprior.model import _gather, _prep_scene
from handprior.prior import anchor_codes, shape_feature
from handprior.render import MapStack, bilinear_sample
from handprior.samples import query_cube


@pytest.fixture(scope="module")
def trained(mug_setup):
    _, prior, inputs = mug_setup
    cfg = ChordConfig(steps=60, lr=1e-3, augment=False, points_per_scene=128, log_every=0)
    return train_chord(inputs, prior, cfg)


def _queries(scene, n, seed=0):
    """Points around the object that project into the image."""
    rng = np.random.default_rng(seed)
    c = scene.prior_pose.translation
    return c + rng.uniform(-0.06, 0.06, (n, 3))


# ----------------------------------------------------------------------------
# mask parsing and layout


def test_mask_parse():
    assert AblationMask.parse("full") == FULL_MASK
    assert AblationMask.parse("fi") == FI_ONLY
    assert AblationMask.parse("fi+fs").name == "fi,fs"
    for bad in ("fa,fs", "fi,fx", ""):
        with pytest.raises(Exception):
            AblationMask.parse(bad)
    assert BUNDLE_WIDTH == 94
    assert [BUNDLE_SLICES[k].stop - BUNDLE_SLICES[k].start for k in ("F_I", "F_P", "F_S", "F_A")] == [16, 48, 16, 8]


# ----------------------------------------------------------------------------
# appearance feature


def _manual_bilinear(img, u, v):
    H, W = img.shape[:2]
    u, v = min(max(u, 0.0), W - 1.0), min(max(v, 0.0), H - 1.0)
    u0, v0 = min(int(np.floor(u)), W - 2), min(int(np.floor(v)), H - 2)
    fu, fv = u - u0, v - v0
    return ((1 - fu) * (1 - fv) * img[v0, u0] + fu * (1 - fv) * img[v0, u0 + 1]
            + (1 - fu) * fv * img[v0 + 1, u0] + fu * fv * img[v0 + 1, u0 + 1])


def _random_maps(rng, H=16, W=16):
    return MapStack(rng.uniform(0.5, 1, (H, W)).astype(np.float32), rng.normal(size=(H, W, 3)).astype(np.float32),
                    np.ones((H, W), np.uint8), np.zeros((H, W, 3), np.float32))


def test_appearance_constant_and_pixel_center():
    H = W = 16
    cam = Camera(20.0, 20.0, 7.5, 7.5, W, H)
    hand = MapStack(np.full((H, W), 0.7, np.float32), np.broadcast_to(np.float32([0, 0, -1]), (H, W, 3)).copy(),
                    np.ones((H, W), np.uint8), np.zeros((H, W, 3), np.float32))
    inst = np.zeros((H, W, 4), np.float32)
    inst[..., 0], inst[..., 1:] = 0.9, [0.6, 0.0, 0.8]
    x = np.random.default_rng(0).uniform([-0.2, -0.2, 0.5], [0.2, 0.2, 1.0], (50, 3))
    f = appearance_feature(x, cam, hand, inst)
    assert np.allclose(f, np.float32([0, 0, -1, 0.6, 0.0, 0.8, 0.7, 0.9]), atol=1e-7)
    rng = np.random.default_rng(1)
    hand, inst = _random_maps(rng), rng.normal(size=(H, W, 4)).astype(np.float32)
    u, v, z = 5, 9, 0.8
    p = np.array([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])
    f = appearance_feature(p, cam, hand, inst)
    assert np.allclose(f, np.concatenate([hand.normal[v, u], inst[v, u, 1:], [hand.depth[v, u], inst[v, u, 0]]]),
                       atol=1e-6)


def test_appearance_compose_oracle():
    rng = np.random.default_rng(2)
    H, W = 16, 24
    cam = Camera(22.0, 21.0, 11.3, 7.1, W, H, random_rigid(rng, 0.2))
    hand, inst = _random_maps(rng, H, W), rng.normal(size=(H, W, 4)).astype(np.float32)
    xc = rng.uniform([-0.3, -0.3, 0.5], [0.3, 0.3, 1.2], (100, 3))
    x = cam.pose.inverse().apply(xc)
    f = appearance_feature(x, cam, hand, inst)
    for i, p in enumerate(xc):
        u, v = cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy
        want = np.concatenate([
            _manual_bilinear(hand.normal.astype(np.float64), u, v),
            _manual_bilinear(inst[..., 1:].astype(np.float64), u, v),
            [_manual_bilinear(hand.depth.astype(np.float64), u, v), _manual_bilinear(inst[..., 0].astype(np.float64), u, v)],
        ])
        assert np.abs(f[i] - want).max() < 1e-9
    with pytest.raises(BehindCamera):
        appearance_feature(cam.pose.inverse().apply(np.array([0.0, 0.0, -0.5])), cam, hand, inst)


# ----------------------------------------------------------------------------
# image feature


def _conv2d_loop(x, W, b):
    C, H, Wd = x.shape
    pad = np.zeros((C, H + 2, Wd + 2))
    pad[:, 1:-1, 1:-1] = x
    out = np.zeros((W.shape[0], H, Wd)) + b[:, None, None]
    for i in range(3):
        for j in range(3):
            out += np.einsum("oc,chw->ohw", W[:, :, i, j], pad[:, i:i + H, j:j + Wd])
    return out


def test_image_feature_staged_oracle(mug_setup):
    _, prior, _ = mug_setup
    rng = np.random.default_rng(3)
    store = chord_init(prior, seed=3)
    for k in store.names():
        if k.startswith("enc.") and k.endswith(".b") or k == "img_proj.b":
            store._arrays[k][:] = rng.normal(0, 0.1, store[k].shape)
    H = W = 16
    cam = Camera(20.0, 20.0, 7.5, 7.5, W, H)
    img = rng.random((H, W, 3)).astype(np.float32)
    x = rng.uniform([-0.2, -0.2, 0.5], [0.2, 0.2, 1.0], (20, 3))
    f = image_feature(x, cam, store, img)
    assert f.shape == (20, 16)
    # stage 1: conv pyramid by loops
    h, levels = np.moveaxis(img.astype(np.float64), -1, 0), []
    for i in range(4):
        h = np.maximum(_conv2d_loop(h, store[f"enc.{i}.W"].astype(np.float64), store[f"enc.{i}.b"].astype(np.float64)), 0)
        if i > 0:
            h = h.reshape(h.shape[0], h.shape[1] // 2, 2, h.shape[2] // 2, 2).mean(axis=(2, 4))
        levels.append(np.moveaxis(h, 0, -1))
    # stage 2: bilinear per level at the stride-scaled pixel; stage 3: linear map
    uv = np.stack([20 * x[:, 0] / x[:, 2] + 7.5, 20 * x[:, 1] / x[:, 2] + 7.5], 1)
    Wp, bp = store["img_proj.W"].astype(np.float64), store["img_proj.b"].astype(np.float64)
    for n in range(len(x)):
        cols = [bilinear_sample(L, (uv[n] + 0.5) / s - 0.5) for L, s in zip(levels, (1, 2, 4, 8))]
        assert np.abs(np.concatenate(cols) @ Wp + bp - f[n]).max() < 1e-6


def test_image_feature_zero_params(mug_setup):
    _, prior, _ = mug_setup
    store = chord_init(prior)
    for k in store.names():
        if k.startswith("enc.") or k.startswith("img_proj"):
            store._arrays[k][:] = 0.0
    cam = Camera(20.0, 20.0, 7.5, 7.5, 16, 16)
    f = image_feature(np.array([0.0, 0.0, 1.0]), cam, store, np.random.default_rng(0).random((16, 16, 3)))
    assert f.shape == (16,) and not np.any(f)


# ----------------------------------------------------------------------------
# bundle


def test_bundle_component_equivalence(mug_setup):
    _, prior, inputs = mug_setup
    sc = inputs[0]
    store = chord_init(prior, seed=1)
    vol = latent_volume(store, prior)
    x = _queries(sc, 64)
    b = assemble_bundle(x, sc, vol, FULL_MASK, store)
    assert np.array_equal(b.x, sc.camera.to_camera(x))
    assert np.array_equal(b.x_canonical, sc.prior_pose.inverse().apply(x))
    assert np.array_equal(b.F_I, image_feature(x, sc.camera, store, sc.image))
    assert np.array_equal(b.F_P, pose_block(x, sc))
    assert np.array_equal(b.F_S, shape_feature(x, sc.prior_pose, vol))
    assert np.array_equal(b.F_A, appearance_feature(x, sc.camera, sc.hand_maps, sc.instance_maps))
    full = b.array()
    assert full.shape == (64, 94)
    for mask, name in ((AblationMask(False, True, True), "F_A"), (AblationMask(True, False, True), "F_S"),
                       (AblationMask(True, True, False), "F_P")):
        part = assemble_bundle(x, sc, vol, mask, store).array()
        sl = BUNDLE_SLICES[name]
        assert not np.any(part[:, sl])
        keep = np.ones(94, bool)
        keep[sl] = False
        assert np.array_equal(part[:, keep], full[:, keep])


def test_bundle_all_masked_and_identity_pose(mug_setup):
    _, prior, inputs = mug_setup
    store = chord_init(prior)
    for k in store.names():
        if k.startswith("enc.") or k.startswith("img_proj"):
            store._arrays[k][:] = 0.0
    sc = inputs[0]
    x = _queries(sc, 16)
    b = assemble_bundle(x, sc, latent_volume(store, prior), FI_ONLY, store).array()
    assert not np.any(b[:, 6:])
    sc_id = type(sc)(**{**vars(sc), "prior_pose": RigidTransform.identity()})
    b = assemble_bundle(x, sc_id, latent_volume(store, prior), FI_ONLY, store)
    assert np.array_equal(b.x_canonical, x)


def test_training_path_matches_bundle(mug_setup):
    _, prior, inputs = mug_setup
    sc = inputs[1]
    store = chord_init(prior, seed=2)
    x = _queries(sc, 40)
    want = assemble_bundle(x, sc, latent_volume(store, prior), FULL_MASK, store).array()
    prep = _prep_scene(sc, x, None, "with_global", True)
    batch = _gather([prep], [sc], [np.arange(len(x))], "with_global")
    from handprior.prior import build_splat

    with torch.no_grad():
        _, got = chord_forward(store.tensors(False, torch.float64), batch, FULL_MASK,
                               build_splat(prior.mesh.vertices), return_bundle=True)
    assert np.abs(got.numpy() - want).max() < 1e-9


def test_co_moving_features_invariant(mug_setup):
    _, prior, inputs = mug_setup
    sc = inputs[0]
    store = chord_init(prior, seed=4)
    vol = latent_volume(store, prior)
    x = _queries(sc, 100)
    base = assemble_bundle(x, sc, vol, FULL_MASK, store)
    rng = np.random.default_rng(5)
    for _ in range(5):
        g = random_rigid(rng, 1.0)
        moved = assemble_bundle(g.apply(x), sc.moved(g), vol, FULL_MASK, store)
        for name in ("F_P", "F_S", "x", "x_canonical"):
            assert np.abs(getattr(moved, name) - getattr(base, name)).max() < 1e-9, name
        for name in ("F_I", "F_A"):
            assert np.abs(getattr(moved, name) - getattr(base, name)).max() < 1e-6, name


# ----------------------------------------------------------------------------
# samples


def test_generate_sdf_samples(mug_setup):
    _, prior, inputs = mug_setup
    sc = inputs[0]
    obj = sc.object_world
    a = generate_sdf_samples(sc, obj, 4000, seed=7, prior=prior)
    b = generate_sdf_samples(sc, obj, 4000, seed=7, prior=prior)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.sdf, b.sdf)
    lo, hi = query_cube(sc.prior_pose.translation, prior.bounding_radius)
    uni = a.branch == 2
    assert uni.sum() == 200 and np.all((a.points[uni] >= lo) & (a.points[uni] <= hi))
    for k, sigma in ((0, 0.01), (1, 0.001)):
        assert np.mean(np.abs(a.sdf[a.branch == k]) < 3 * sigma) >= 0.9
    # sigma = 0 branch: only the float32 rounding of the stored point separates it from the surface
    c = generate_sdf_samples(sc, obj, 1000, seed=8, prior=prior, branches=((1.0, 0.0),))
    assert np.abs(c.sdf).max() <= np.sqrt(3) * np.spacing(np.float32(np.abs(c.points).max())) + 1e-12
    p = sample_surface_points(obj, 500, seed=9)
    assert np.abs(mesh_signed_distance(obj, p)).max() < 1e-9
    with pytest.raises(NotWatertight):
        generate_sdf_samples(sc, TriMesh(obj.vertices, obj.faces[1:]), 10, 0)


# ----------------------------------------------------------------------------
# training


def test_train_lr_zero_keeps_params(mug_setup):
    _, prior, inputs = mug_setup
    init = chord_init(prior, seed=0)
    ck = train_chord(inputs, prior, ChordConfig(steps=3, lr=0.0, final_lr=0.0, points_per_scene=32, log_every=0))
    assert ck.params.blob() == init.blob()


def test_train_errors(mug_setup):
    _, prior, inputs = mug_setup
    with pytest.raises(EmptyDataset):
        train_chord([], prior)
    bare = type(inputs[0])(**{**vars(inputs[0]), "samples": None})
    with pytest.raises(EmptyDataset):
        train_chord([bare], prior)


def test_train_descends(trained):
    assert np.all(np.isfinite(trained.losses))
    assert np.mean(trained.losses[-20:]) < np.mean(trained.losses[:20])


def test_train_deterministic(mug_setup):
    _, prior, inputs = mug_setup
    cfg = ChordConfig(steps=4, lr=1e-3, points_per_scene=32, log_every=0)
    a, b = train_chord(inputs, prior, cfg), train_chord(inputs, prior, cfg)
    assert a.params.blob() == b.params.blob() and a.losses == b.losses


def test_checkpoint_roundtrip(tmp_path, mug_setup, trained):
    _, prior, _ = mug_setup
    save_checkpoint(trained, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck", prior)
    assert back.params.blob() == trained.params.blob() and back.mask == trained.mask
    assert back.config == trained.config
    other = anchor_codes(icosphere(0.05, 3), "mug")
    with pytest.raises(CheckpointPriorMismatch):
        load_checkpoint(tmp_path / "ck", other)


# ----------------------------------------------------------------------------
# reconstruction


def test_reconstruct_analytic_sphere(mug_setup):
    _, prior, inputs = mug_setup
    sc = inputs[0]
    c, r = sc.prior_pose.apply(np.array([0.004, -0.003, 0.002])), 0.04
    rec = reconstruct(sc, prior, sdf_fn=lambda x: np.linalg.norm(x - c, axis=1) - r)
    fine = 2 * rec.half / 63
    assert not rec.empty and rec.mesh.is_watertight
    sphere = icosphere(r, 6).transformed(RigidTransform(np.eye(3), c))
    assert chamfer(rec.mesh, sphere, raw=True) * 1e-6 < (2 * fine) ** 2
    assert rec.n_refined < 64 ** 3


def test_reconstruct_empty_field(mug_setup):
    _, prior, inputs = mug_setup
    rec = reconstruct(inputs[0], prior, sdf_fn=lambda x: np.full(len(x), 0.01))
    assert rec.empty and rec.flag == "EmptyField" and rec.mesh.is_empty


def test_reconstruct_deterministic_obj(tmp_path, mug_setup, trained):
    _, prior, inputs = mug_setup
    a, b = reconstruct(inputs[0], prior, trained), reconstruct(inputs[0], prior, trained)
    assert not a.empty
    save_obj(a.mesh, tmp_path / "a.obj")
    save_obj(b.mesh, tmp_path / "b.obj")
    assert (tmp_path / "a.obj").read_bytes() == (tmp_path / "b.obj").read_bytes()


def test_reconstruct_co_moves(mug_setup, trained):
    _, prior, inputs = mug_setup
    sc = inputs[0]
    g = random_rigid(np.random.default_rng(6), 0.5)
    a = reconstruct(sc, prior, trained)
    b = reconstruct(sc.moved(g), prior, trained)
    assert a.mesh.faces.shape == b.mesh.faces.shape and np.array_equal(a.mesh.faces, b.mesh.faces)
    assert np.abs(g.apply(a.mesh.vertices) - b.mesh.vertices).max() < 1e-6


# ----------------------------------------------------------------------------
# instance maps


def test_instance_map_modes(mug_setup):
    _, _, inputs = mug_setup
    sc = inputs[0]
    d, n = predict_instance_maps(sc, None, "oracle")
    assert np.array_equal(d, sc.object_maps.depth) and np.array_equal(n, sc.object_maps.normal)
    d, n = predict_instance_maps(sc, None, "identity")
    assert np.array_equal(d, sc.prior_maps.depth) and np.array_equal(n, sc.prior_maps.normal)
    assert np.array_equal(sc.instance_maps[..., 0], sc.object_maps.depth)


def test_f2d_training_descends_and_rejects_perceptual(mug_setup):
    from handprior.errors import ValidationError
    from handprior.model import F2DConfig, instance_map_error, train_f2d

    _, _, inputs = mug_setup
    with pytest.raises(ValidationError):
        train_f2d(inputs, F2DConfig(steps=1, perceptual_weight=0.1))
    with pytest.raises(EmptyDataset):
        train_f2d([], F2DConfig(steps=1))
    params, losses = train_f2d(inputs, F2DConfig(steps=40, lr=2e-3, log_every=0))
    assert np.mean(losses[-5:]) < losses[0]
    depth, normal = predict_instance_maps(inputs[0], params)
    assert depth.shape == inputs[0].object_maps.depth.shape and normal.shape[-1] == 3
    assert np.isfinite(instance_map_error((depth, normal), inputs[0]))
    again, _ = train_f2d(inputs, F2DConfig(steps=40, lr=2e-3, log_every=0))
    assert all(torch.equal(a, b) for a, b in zip(params.tensors().values(), again.tensors().values()))
