"""Command-line entry point: ``handprior <verb> [options]``.

Artifacts under ``--out``:

    prior/                  prior mesh, anchored codes, manifest
    f2d.json / f2d.bin      instance-map network
    chord_<mask>.json/.bin  3D checkpoints, one per ablation mask
    recon/<scene>.obj/.json reconstructions with provenance
    eval/                   report.csv, summary.json, timing.json

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .datagen import CATEGORIES, SPLITS, build_dataset, data_root, load_scene, scene_dirs
from .errors import HandPriorError, ValidationError
from .geometry import save_obj
from .hand import build_hand_model
from .model import (
    ChordConfig,
    AblationMask,
    F2DConfig,
    instance_map_error,
    load_checkpoint,
    predict_instance_maps,
    provenance,
    reconstruct,
    save_checkpoint,
    save_json,
    scene_inputs,
    train_chord,
    train_f2d,
)
from .neural import ParamStore
from .prior import (
    PRIOR_METHODS,
    PriorTrainConfig,
    anchor_codes,
    latent_mean_prior,
    load_prior,
    save_prior,
    template_prior,
    train_autodecoder,
    train_implicit_template,
    voxel_mean_prior,
)
from .samples import SdfSamples

log = logging.getLogger("handprior")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _section(args, name: str) -> dict:
    if not args.config:
        return {}
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read config {args.config}: {e}") from e
    return cfg.get(name, {})


def _apply(config, overrides: dict):
    for k, v in overrides.items():
        if not hasattr(config, k):
            raise ValidationError(f"unknown config key {k!r} for {type(config).__name__}")
        setattr(config, k, v)
    return config


def _out(args) -> Path:
    out = Path(args.out) if args.out else data_root(args.data_root) / "runs" / args.category
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_scenes(args):
    return [load_scene(d) for d in scene_dirs(data_root(args.data_root), args.category, ("train",))]


def _mask_slug(mask: AblationMask) -> str:
    return mask.name.replace(",", "+")


# ----------------------------------------------------------------------------
# verbs


def cmd_gen_data(args) -> int:
    counts = {"train": args.train, "test_instance": args.test_instance, "test_view": args.test_view}
    kw = _section(args, "gen_data")
    root = build_dataset(args.category, counts, args.seed, data_root(args.out or args.data_root),
                         n_samples=kw.get("n_samples", args.n_samples))
    print(f"wrote {sum(counts.values())} {args.category} scenes to {root}")
    return 0


def _canonical_banks(scenes) -> list[SdfSamples]:
    """One bank per distinct training shape, moved back to the canonical frame."""
    seen, banks = set(), []
    for s in scenes:
        if s.shape_id in seen:
            continue
        seen.add(s.shape_id)
        banks.append(SdfSamples(s.object_pose.inverse().apply(s.samples.points), s.samples.sdf, s.shape_id))
    return banks


def cmd_build_prior(args) -> int:
    scenes = _train_scenes(args)
    cfg = _apply(PriorTrainConfig(seed=args.seed), _section(args, "build_prior"))
    if args.steps is not None:
        cfg.steps = args.steps
    if args.method == "voxel_mean":
        shapes = {s.shape_id: s.object_canonical for s in scenes}
        mesh = voxel_mean_prior([shapes[k] for k in sorted(shapes)])
    elif args.method == "latent_mean":
        mesh = latent_mean_prior(train_autodecoder(_canonical_banks(scenes), cfg))
    else:
        mesh = template_prior(train_implicit_template(_canonical_banks(scenes), cfg))
    prior = anchor_codes(mesh, args.category, seed=args.seed, method=args.method)
    digest = save_prior(prior, _out(args) / "prior")
    print(f"prior ({args.method}, {len(mesh.vertices)} vertices) hash {digest}")
    return 0


def cmd_train_2d(args) -> int:
    out = _out(args)
    prior = load_prior(out / "prior")
    model = build_hand_model()
    scenes = [scene_inputs(s, prior, model, args.pose_mode, args.render_mode, "identity", seed=args.seed)
              for s in _train_scenes(args)]
    cfg = _apply(F2DConfig(seed=args.seed), _section(args, "train_2d"))
    if args.steps is not None:
        cfg.steps = args.steps
    params, losses = train_f2d(scenes, cfg)
    params.save(out / "f2d", {"losses_tail": losses[-10:]})
    ident = np.mean([instance_map_error(predict_instance_maps(s, None, "identity"), s) for s in scenes])
    pred = np.mean([instance_map_error(predict_instance_maps(s, params), s) for s in scenes])
    print(f"f2d train L1 {pred:.5f} (identity baseline {ident:.5f})")
    return 0


def _f2d(out: Path, mode: str):
    if mode != "trained":
        return None
    store, _ = ParamStore.load(out / "f2d")
    return store


def cmd_train_3d(args) -> int:
    out = _out(args)
    prior = load_prior(out / "prior")
    mask = AblationMask.parse(args.mask)
    model = build_hand_model()
    f2d = _f2d(out, args.instance_mode)
    scenes = [scene_inputs(s, prior, model, args.pose_mode, args.render_mode, args.instance_mode, f2d, args.seed)
              for s in _train_scenes(args)]
    cfg = _apply(ChordConfig(seed=args.seed), _section(args, "train_3d"))
    if args.steps is not None:
        cfg.steps = args.steps
    if args.lr is not None:
        cfg.lr = args.lr
    chord = train_chord(scenes, prior, cfg, mask)
    path = out / f"chord_{_mask_slug(mask)}"
    save_checkpoint(chord, path)
    print(f"checkpoint {path} digest {chord.params.digest()} final loss {chord.losses[-1]:.5f}")
    return 0


def _checkpoints(out: Path, masks: list[str], prior) -> dict:
    found = {}
    for m in masks:
        mask = AblationMask.parse(m)
        found[mask.name] = load_checkpoint(out / f"chord_{_mask_slug(mask)}", prior)
    return found


def cmd_reconstruct(args) -> int:
    out = _out(args)
    prior = load_prior(out / "prior")
    (ck,) = _checkpoints(out, [args.mask], prior).values()
    root = data_root(args.data_root)
    scene = load_scene(root / args.category / args.scene, with_samples=False)
    inputs = scene_inputs(scene, prior, build_hand_model(), args.pose_mode, args.render_mode, args.instance_mode,
                          _f2d(out, args.instance_mode), args.seed, with_samples=False)
    rec = reconstruct(inputs, prior, ck)
    d = out / "recon"
    d.mkdir(parents=True, exist_ok=True)
    stem = f"{args.scene}.{args.pose_mode}.{_mask_slug(ck.mask)}"
    save_obj(rec.mesh, d / f"{stem}.obj")
    save_json({**provenance(inputs, ck, args.pose_mode, args.seed), "empty_field": rec.empty}, d / f"{stem}.json")
    print(f"{'EmptyField: ' if rec.empty else ''}wrote {d / stem}.obj ({len(rec.mesh.faces)} faces)")
    return 0


def cmd_eval(args) -> int:
    from .benchmark import emit_report, run_benchmark, write_provenance

    out = _out(args)
    prior = load_prior(out / "prior")
    masks = [m for m in args.masks.split(";") if m]
    splits = [s for s in args.splits.split(",") if s]
    checkpoints = _checkpoints(out, masks, prior)
    timing, dump = {}, ({} if args.dump_meshes else None)
    report = run_benchmark(data_root(args.data_root), args.category, checkpoints, prior, splits,
                           tuple(args.pose_modes.split(",")), instance_mode=args.instance_mode,
                           f2d_params=_f2d(out, args.instance_mode), seed=args.seed,
                           render_mode=args.render_mode, mesh_dump=dump, timing=timing)
    meshes = None
    if dump is not None:
        write_provenance(dump.pop("_provenance", {}), out / "eval" / "meshes")
        meshes = dump
    written = emit_report(report, out / "eval", allow_empty=args.allow_empty, meshes=meshes)
    (out / "eval" / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True))
    for key, stats in report.summary().items():
        print(f"{key}: n={stats['count']} CD {stats['cd']:.4f} PD {stats['pd_cm']:.4f} PV {stats['pv_cm3']:.4f}")
    print(f"report {written.get('csv', '(empty)')}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradchecks

    results = run_gradchecks(seeds=range(args.seed, args.seed + args.n_seeds))
    worst = 0.0
    for name, errs in results.items():
        worst = max(worst, max(errs))
        print(f"{name:<12} max rel err {max(errs):.3e} over {len(errs)} seeds")
    ok = worst < args.tolerance
    print("gradcheck", "passed" if ok else "FAILED")
    return 0 if ok else 2


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_opts(q, suppress: bool):
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        q.add_argument("--config", default=d(None),
                       help="JSON file with per-verb sections (gen_data, build_prior, train_2d, train_3d)")
        q.add_argument("--seed", type=int, default=d(0))
        q.add_argument("--data-root", default=d(None), help="dataset root (default: $HANDPRIOR_DATA)")
        q.add_argument("--out", default=d(None), help="output directory")
        q.add_argument("--category", default=d("mug"), choices=sorted(CATEGORIES))
        q.add_argument("-v", "--verbose", action="store_true", default=d(False))

    p = _Parser(prog="handprior", description=__doc__.splitlines()[0])
    global_opts(p, False)
    # the same flags are accepted after the verb
    common = _Parser(add_help=False)
    global_opts(common, True)
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)

    g = sub.add_parser("gen-data", help="generate a procedural dataset")
    g.add_argument("--train", type=int, default=64)
    g.add_argument("--test-instance", type=int, default=16)
    g.add_argument("--test-view", type=int, default=16)
    g.add_argument("--n-samples", type=int, default=20000)
    g.set_defaults(fn=cmd_gen_data)

    b = sub.add_parser("build-prior", help="build the category prior from the training shapes")
    b.add_argument("--method", choices=PRIOR_METHODS, default="voxel_mean")
    b.add_argument("--steps", type=int)
    b.set_defaults(fn=cmd_build_prior)

    def scene_opts(q):
        q.add_argument("--pose-mode", choices=("gt_pose", "perturbed_pose"), default="gt_pose")
        q.add_argument("--render-mode", choices=("separate", "merged"), default="separate")

    t2 = sub.add_parser("train-2d", help="train the instance-map network")
    t2.add_argument("--steps", type=int)
    scene_opts(t2)
    t2.set_defaults(fn=cmd_train_2d)

    t3 = sub.add_parser("train-3d", help="train the implicit decoder under one ablation mask")
    t3.add_argument("--mask", default="fi,fa,fs,fp")
    t3.add_argument("--instance-mode", choices=("oracle", "identity", "trained"), default="oracle")
    t3.add_argument("--steps", type=int)
    t3.add_argument("--lr", type=float)
    scene_opts(t3)
    t3.set_defaults(fn=cmd_train_3d)

    r = sub.add_parser("reconstruct", help="reconstruct one scene")
    r.add_argument("--scene", required=True)
    r.add_argument("--mask", default="fi,fa,fs,fp")
    r.add_argument("--instance-mode", choices=("oracle", "identity", "trained"), default="oracle")
    scene_opts(r)
    r.set_defaults(fn=cmd_reconstruct)

    e = sub.add_parser("eval", help="benchmark checkpoints over dataset splits")
    e.add_argument("--splits", default=",".join(SPLITS))
    e.add_argument("--masks", default="fi,fa,fs,fp", help="';'-separated masks, e.g. 'fi;fi,fa,fs,fp'")
    e.add_argument("--pose-modes", default="gt_pose")
    e.add_argument("--instance-mode", choices=("oracle", "identity", "trained"), default="oracle")
    e.add_argument("--render-mode", choices=("separate", "merged"), default="separate")
    e.add_argument("--allow-empty", action="store_true")
    e.add_argument("--dump-meshes", action="store_true")
    e.set_defaults(fn=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference checks of every trainable block")
    gc.add_argument("--n-seeds", type=int, default=10)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (HandPriorError, OSError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
