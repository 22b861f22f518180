"""Benchmark harness: reconstruct every scene of some splits under masks and pose modes, and report."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .datagen import SPLITS, load_manifest, load_scene
from .errors import CheckpointPriorMismatch, IoError, ManifestMismatch, ValidationError
from .geometry import save_obj
from .hand import HandModel, build_hand_model, joint_positions
from .metrics import chamfer, penetration_depth, penetration_volume
from .model import POSE_MODES, ChordModel, provenance, reconstruct, save_json, scene_inputs
from .prior import ObjectPrior, prior_content_hash

log = logging.getLogger(__name__)


@dataclass
class MetricRow:
    scene_id: str
    category: str
    split: str
    pose_mode: str
    mask: str
    cd: float  # 10·mm^2
    cd_mm2: float
    pd_cm: float
    pv_cm3: float
    mpjpe_mm: float
    empty: int  # 1 when the decoded field had no interior and the prior stood in
    seed: int


COLUMNS = tuple(f.name for f in fields(MetricRow))
_NUMERIC = ("cd", "cd_mm2", "pd_cm", "pv_cm3", "mpjpe_mm")
_INTS = ("empty", "seed")


@dataclass
class MetricReport:
    rows: list

    def __len__(self) -> int:
        return len(self.rows)

    def sorted(self) -> "MetricReport":
        return MetricReport(sorted(self.rows, key=lambda r: (r.split, r.pose_mode, r.mask, r.scene_id)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in (getattr(r, c) for c in COLUMNS)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != COLUMNS:
            raise ValidationError("unexpected report header")
        rows = []
        for rec in reader:
            d = dict(zip(COLUMNS, rec))
            for c in _NUMERIC:
                d[c] = float(d[c])
            for c in _INTS:
                d[c] = int(d[c])
            rows.append(MetricRow(**d))
        return cls(rows)

    def summary(self) -> dict:
        """Per (split, pose mode, mask) group: scene count and metric means."""
        groups: dict[str, list] = {}
        for r in self.rows:
            groups.setdefault(f"{r.split}|{r.pose_mode}|{r.mask}", []).append(r)
        out = {}
        for key in sorted(groups):
            rs = groups[key]
            out[key] = {"count": len(rs), **{c: float(np.mean([getattr(r, c) for r in rs])) for c in _NUMERIC}}
        return out

    def check(self) -> None:
        for r in self.rows:
            for c in _NUMERIC:
                v = getattr(r, c)
                if not (np.isfinite(v) and v >= 0):
                    raise ValidationError(f"{c} of {r.scene_id} is {v}")


def read_report(path) -> MetricReport:
    return MetricReport.from_csv(Path(path).read_text())


def emit_report(report: MetricReport, directory, formats=("csv", "json"), allow_empty: bool = False,
                meshes: dict | None = None) -> dict:
    """Write report.csv and summary.json (and optional OBJ dumps); returns the written paths."""
    if not report.rows and not allow_empty:
        raise ValidationError("refusing to write an empty report without allow_empty")
    d = Path(directory)
    written = {}
    try:
        d.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            p = d / "report.csv"
            p.write_text(report.to_csv())
            written["csv"] = p
        if "json" in formats:
            p = d / "summary.json"
            p.write_text(json.dumps(report.summary(), indent=2, sort_keys=True))
            written["json"] = p
        if meshes:
            md = d / "meshes"
            md.mkdir(exist_ok=True)
            for name, mesh in sorted(meshes.items()):
                save_obj(mesh, md / f"{name}.obj")
            written["meshes"] = md
    except OSError as e:
        raise IoError(f"could not write report to {d}: {e}") from e
    return written


def check_manifest(root, category: str) -> list[dict]:
    """Manifest entries of a category, each with an existing scene directory."""
    man = load_manifest(root)
    cat = man.get("categories", {}).get(category)
    if cat is None:
        raise ManifestMismatch(f"category {category!r} missing from the manifest")
    entries = cat["scenes"]
    expected = sum(cat["counts"].values())
    if len(entries) != expected:
        raise ManifestMismatch(f"manifest lists {len(entries)} scenes, counts say {expected}")
    for e in entries:
        d = Path(root) / category / e["scene_id"]
        if not (d / "scene.json").exists():
            raise ManifestMismatch(f"scene {e['scene_id']} listed but missing on disk")
        meta = json.loads((d / "scene.json").read_text())
        if meta["split"] != e["split"] or meta["category"] != category:
            raise ManifestMismatch(f"scene {e['scene_id']} disagrees with the manifest")
    return entries


def run_benchmark(root, category: str, checkpoints: dict, prior: ObjectPrior, splits=SPLITS,
                  pose_modes=("gt_pose",), hand_model: HandModel | None = None, instance_mode: str = "oracle",
                  f2d_params=None, seed: int = 0, render_mode: str = "separate",
                  mesh_dump: dict | None = None, timing: dict | None = None) -> MetricReport:
    """Reconstruct every scene of ``splits`` with each checkpoint (keyed by mask name) and pose mode.

    Rows are ordered by (split, pose mode, mask, scene id). Wall-clock time
    per row goes to ``timing`` when given, not into the report, so that the
    report is reproducible byte for byte.
    """
    for pm in pose_modes:
        if pm not in POSE_MODES:
            raise ValidationError(f"unknown pose mode {pm!r}")
    unknown = set(splits) - set(SPLITS)
    if unknown:
        raise ValidationError(f"unknown splits {sorted(unknown)}")
    expected = prior_content_hash(prior)
    for name, ck in checkpoints.items():
        if ck.prior_hash != expected:
            raise CheckpointPriorMismatch(f"checkpoint {name!r} was trained against a different prior")
    if not splits:
        return MetricReport([])
    entries = [e for e in check_manifest(root, category) if e["split"] in splits]
    hand_model = hand_model or build_hand_model()
    rows = []
    for e in sorted(entries, key=lambda e: (e["split"], e["scene_id"])):
        scene = load_scene(Path(root) / category / e["scene_id"], with_samples=False)
        gt_obj = scene.object_world
        gt_joints = joint_positions(hand_model, scene.hand_pose)
        for pm in pose_modes:
            inputs = scene_inputs(scene, prior, hand_model, pm, render_mode, instance_mode, f2d_params, seed,
                                  with_samples=False)
            err = np.linalg.norm(inputs.joints - gt_joints, axis=1).mean() * 1000.0
            for mask_name in sorted(checkpoints):
                ck: ChordModel = checkpoints[mask_name]
                t0 = time.perf_counter()
                rec = reconstruct(inputs, prior, ck)
                mesh = rec.mesh if not rec.empty else prior.mesh.transformed(inputs.prior_pose)
                cd_mm2 = chamfer(mesh, gt_obj, raw=True)
                pd = penetration_depth(inputs.hand_mesh, mesh, check=False)
                pv = penetration_volume(inputs.hand_mesh, mesh, check=False)
                rows.append(MetricRow(scene.scene_id, category, e["split"], pm, ck.mask.name, cd_mm2 / 10.0,
                                      cd_mm2, pd, pv, float(err), int(rec.empty), seed))
                if timing is not None:
                    timing[f"{e['split']}|{pm}|{ck.mask.name}|{scene.scene_id}"] = time.perf_counter() - t0
                if mesh_dump is not None:
                    slug = ck.mask.name.replace(",", "+")
                    mesh_dump[f"{scene.scene_id}.{pm}.{slug}"] = mesh
                    mesh_dump.setdefault("_provenance", {})[f"{scene.scene_id}.{pm}.{slug}"] = provenance(
                        inputs, ck, pm, seed)
                log.info("%s %s %s CD %.4f", scene.scene_id, pm, ck.mask.name, cd_mm2 / 10.0)
    report = MetricReport(rows).sorted()
    report.check()
    return report


def write_provenance(records: dict, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, rec in sorted(records.items()):
        save_json(rec, d / f"{name}.json")


__all__ = ["COLUMNS", "MetricReport", "MetricRow", "check_manifest", "emit_report", "read_report",
           "run_benchmark", "write_provenance"]
