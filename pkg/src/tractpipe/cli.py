"""``tractpipe`` command line: one subcommand per stage plus the full ablation run.

Stages talk to each other only through files under the workspace::

    cohort/cohort.json            labeled / unlabeled / test members
    stage1/pseudo.json            pseudo subjects, fields, registration traces
    stage2/model_a.model.json     one-shot model (also the baseline)
    stage3/uncertainty/*.vol.*    cached confidence maps of model A
    stage3/model_b_ure.model.json model B trained with confidence weights
    stage3/model_b_rpa.model.json model B trained with unit weights (--no-ure)
    eval/dice_<method>.csv        per subject / class Dice
    eval/ablation.csv             one mean +/- std row per method
    logs/tractpipe.log
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend_name
from .config import PipelineConfig, load_config
from .metrics import DiceReport, evaluate, report_rows, write_report
from .phantom import generate_atlas, generate_cohort
from .registration import save_field
from .rpa import LabeledSubject, build_pseudo_dataset
from .segmentation import PatchMLP, load_model, predict_subject, save_model, train
from .ure import load_uncertainty, save_uncertainty, uncertainty_map_for_subject
from .volume import load_volume, save_volume

log = logging.getLogger("tractpipe")

COHORT_MANIFEST = "cohort/cohort.json"
PSEUDO_MANIFEST = "stage1/pseudo.json"
MODEL_A = "stage2/model_a"
MODEL_B = {True: "stage3/model_b_ure", False: "stage3/model_b_rpa"}
UNCERTAINTY_DIR = "stage3/uncertainty"
UNCERTAINTY_MANIFEST = "stage3/uncertainty/uncertainty.json"
ABLATION_CSV = "eval/ablation.csv"
METHODS = ("baseline", "rpa", "rpa+ure")


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _ws(cfg: PipelineConfig) -> Path:
    return cfg.workspace_path


def _rel(cfg, path: Path) -> str:
    return Path(path).relative_to(_ws(cfg)).as_posix()


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path


def _read_manifest(cfg, name: str, stage_hint: str) -> dict:
    path = _ws(cfg) / name
    if not path.exists():
        raise StageError(f"missing manifest {path}; run `tractpipe {stage_hint}` first")
    return json.loads(path.read_text(encoding="utf-8"))


def _load(cfg, rel: str) -> np.ndarray:
    return load_volume(_ws(cfg) / rel)


def _new_model(cfg: PipelineConfig) -> PatchMLP:
    return PatchMLP(
        cfg.phantom.channels,
        cfg.phantom.n_tracts,
        cfg.model.patch_radius,
        cfg.model.hidden_size,
        seed=cfg.model_seed,
    )


class _TestSubject:
    def __init__(self, sid, peaks, truth):
        self.id, self.peaks, self.truth = sid, peaks, truth


def _test_set(cfg) -> list:
    manifest = _read_manifest(cfg, COHORT_MANIFEST, "phantom")
    return [_TestSubject(e["id"], _load(cfg, e["peaks"]), _load(cfg, e["truth"])) for e in manifest["test"]]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def cmd_phantom(cfg: PipelineConfig) -> Path:
    """Generate the atlas and cohort and write them with their manifest."""
    ws = _ws(cfg)
    out = ws / "cohort"
    out.mkdir(parents=True, exist_ok=True)
    atlas = generate_atlas(cfg.phantom)
    cohort = generate_cohort(atlas, cfg.phantom)
    save_volume(atlas.peaks, out / "atlas_peaks", kind="peaks")
    save_volume(atlas.truth, out / "atlas_truth", kind="labels")
    labeled = cohort.labeled
    manifest = {
        "config": cfg.phantom.to_dict(),
        "atlas": {"peaks": "cohort/atlas_peaks.vol.json", "truth": "cohort/atlas_truth.vol.json"},
        "labeled": {
            "id": labeled.id,
            "peaks": _rel(cfg, save_volume(labeled.peaks, out / f"{labeled.id}_peaks", kind="peaks")),
            "labels": _rel(cfg, save_volume(labeled.labels, out / f"{labeled.id}_labels", kind="labels")),
        },
        "unlabeled": [
            {"id": sid, "peaks": _rel(cfg, save_volume(peaks, out / f"{sid}_peaks", kind="peaks"))}
            for sid, peaks in zip(cohort.unlabeled_ids, cohort.unlabeled)
        ],
        "test": [
            {
                "id": s.id,
                "peaks": _rel(cfg, save_volume(s.peaks, out / f"{s.id}_peaks", kind="peaks")),
                "truth": _rel(cfg, save_volume(s.truth, out / f"{s.id}_truth", kind="labels")),
            }
            for s in cohort.test
        ],
    }
    path = _write_json(ws / COHORT_MANIFEST, manifest)
    log.info(
        "phantom: 1 labeled, %d unlabeled, %d test subjects -> %s",
        len(manifest["unlabeled"]), len(manifest["test"]), path,
    )
    return path


def cmd_stage1(cfg: PipelineConfig, jobs: int = 1) -> Path:
    """Register the labeled subject onto every unlabeled subject."""
    ws = _ws(cfg)
    cohort = _read_manifest(cfg, COHORT_MANIFEST, "phantom")
    entry = cohort["labeled"]
    labeled = LabeledSubject(_load(cfg, entry["peaks"]), _load(cfg, entry["labels"]), entry["id"])
    ids = [e["id"] for e in cohort["unlabeled"]]
    unlabeled = [_load(cfg, e["peaks"]) for e in cohort["unlabeled"]]
    t0 = time.perf_counter()
    pseudo = build_pseudo_dataset(labeled, unlabeled, cfg.registration, ids=ids, jobs=jobs)
    if len(pseudo) != len(unlabeled):
        raise StageError(f"expected {len(unlabeled)} pseudo subjects, got {len(pseudo)}")
    out = ws / "stage1"
    entries = []
    for p in pseudo:
        if not p.trace[-1] <= p.trace[0]:
            raise StageError(f"registration to {p.source_unlabeled_id} increased the loss")
        sid = p.source_unlabeled_id
        entries.append(
            {
                "source_unlabeled_id": sid,
                "peaks": _rel(cfg, save_volume(p.peaks, out / f"pseudo_{sid}_peaks", kind="peaks")),
                "labels": _rel(cfg, save_volume(p.labels, out / f"pseudo_{sid}_labels", kind="labels")),
                "field": _rel(cfg, save_field(p.field, out / f"field_{sid}")),
                "loss_trace": p.trace,
                "sim_trace": p.sim_trace,
            }
        )
        log.info(
            "stage1: %s loss %.6g -> %.6g, sim %.6g -> %.6g (%d iterations)",
            sid, p.trace[0], p.trace[-1], p.sim_trace[0], p.sim_trace[-1], len(p.trace) - 1,
        )
    manifest = {"registration": cfg.registration.to_dict(), "labeled_id": labeled.id, "entries": entries}
    path = _write_json(ws / PSEUDO_MANIFEST, manifest)
    log.info("stage1: %d pseudo subjects from %d unlabeled in %.1fs", len(entries), len(unlabeled), time.perf_counter() - t0)
    return path


def cmd_stage2(cfg: PipelineConfig) -> Path:
    """Train model A on the one labeled subject."""
    ws = _ws(cfg)
    cohort = _read_manifest(cfg, COHORT_MANIFEST, "phantom")
    entry = cohort["labeled"]
    dataset = [(_load(cfg, entry["peaks"]), _load(cfg, entry["labels"]))]
    log.info("stage2: model A training set: %d subject (%s)", len(dataset), entry["id"])
    result = train(_new_model(cfg), dataset, cfg.train_a)
    path = save_model(result.model, ws / MODEL_A)
    _write_json(ws / "stage2/model_a_trace.json", {"train": cfg.train_a.to_dict(), "loss_trace": result.trace})
    log.info("stage2: loss %.6f -> %.6f, checkpoint %s", result.trace[0], result.trace[-1], path)
    return path


def _um_job(args):
    model_a, peaks = args
    return uncertainty_map_for_subject(model_a, peaks)


def _uncertainty_maps(cfg, model_a, entries, jobs: int) -> list[np.ndarray]:
    """Confidence maps of model A per pseudo subject, cached on disk."""
    ws = _ws(cfg)
    checksum = model_a.checksum()
    cache_path = ws / UNCERTAINTY_MANIFEST
    cached = {}
    if cache_path.exists():
        cache = json.loads(cache_path.read_text(encoding="utf-8"))
        if cache.get("model_a_sha256") == checksum:
            cached = cache.get("maps", {})
    rels = {e["source_unlabeled_id"]: f"{UNCERTAINTY_DIR}/um_{e['source_unlabeled_id']}.vol.json" for e in entries}
    missing = [e for e in entries if cached.get(e["source_unlabeled_id"]) != rels[e["source_unlabeled_id"]]
               or not (ws / rels[e["source_unlabeled_id"]]).exists()]
    if missing:
        tasks = [(model_a, _load(cfg, e["peaks"])) for e in missing]
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                maps = list(pool.map(_um_job, tasks))
        else:
            maps = [_um_job(t) for t in tasks]
        for e, um in zip(missing, maps):
            save_uncertainty(um, ws / rels[e["source_unlabeled_id"]])
            cached[e["source_unlabeled_id"]] = rels[e["source_unlabeled_id"]]
        _write_json(cache_path, {"model_a_sha256": checksum, "maps": cached})
    log.info("stage3: uncertainty maps computed %d, reused %d", len(missing), len(entries) - len(missing))
    return [load_uncertainty(ws / rels[e["source_unlabeled_id"]]) for e in entries]


def cmd_stage3(cfg: PipelineConfig, use_ure: bool = True, jobs: int = 1) -> Path:
    """Train model B on the pseudo dataset, weighted by model A's confidence unless ``use_ure`` is off."""
    ws = _ws(cfg)
    pseudo = _read_manifest(cfg, PSEUDO_MANIFEST, "stage1")
    model_a_path = ws / f"{MODEL_A}.model.json"
    if not model_a_path.exists():
        raise StageError(f"missing {model_a_path}; run `tractpipe stage2` first")
    model_a = load_model(model_a_path)
    before = model_a.checksum()
    entries = pseudo["entries"]
    dataset = [(_load(cfg, e["peaks"]), _load(cfg, e["labels"])) for e in entries]
    weights = _uncertainty_maps(cfg, model_a, entries, jobs) if use_ure else None
    if model_a.checksum() != before or load_model(model_a_path).checksum() != before:
        raise StageError("model A changed during stage 3; it must stay frozen")
    log.info("stage3: model B on %d pseudo subjects, %s", len(dataset), "URe weights" if use_ure else "unit weights (--no-ure)")
    result = train(_new_model(cfg), dataset, cfg.train_b, weight_source=weights)
    path = save_model(result.model, ws / MODEL_B[use_ure])
    _write_json(
        ws / f"{MODEL_B[use_ure]}_trace.json",
        {"train": cfg.train_b.to_dict(), "ure": use_ure, "model_a_sha256": before, "loss_trace": result.trace},
    )
    log.info("stage3: loss %.6f -> %.6f, checkpoint %s", result.trace[0], result.trace[-1], path)
    return path


def cmd_predict(cfg: PipelineConfig, model_path, subject_path, output=None) -> Path:
    """Tri-planar prediction of one subject; written in the volume format."""
    model_path = Path(model_path)
    model = load_model(model_path)
    vol = load_volume(subject_path)
    pred = predict_subject(model, vol)
    if output is None:
        name = Path(subject_path).name.replace(".vol.json", "").replace(".vol.bin", "")
        output = _ws(cfg) / "predictions" / f"{name}_pred"
    path = save_volume(pred, output, kind="prediction", dtype="f32")
    log.info("predict: %s -> %s", subject_path, path)
    return path


def cmd_evaluate(cfg: PipelineConfig, model_path, method: str = "model") -> DiceReport:
    """Dice of a model on the cohort's test subjects; CSV under ``eval/``."""
    model = load_model(model_path)
    report = evaluate(model, _test_set(cfg), cfg.train_b.binarize_threshold, method)
    path = write_report(report, _ws(cfg) / "eval" / f"dice_{method}.csv")
    log.info("evaluate: %s mean Dice %.4f +/- %.4f -> %s", method, report.overall_mean, report.overall_std, path)
    return report


def write_ablation(cfg, reports) -> Path:
    ws = _ws(cfg)
    write_report(reports, ws / "eval" / "dice_all.csv")
    lines = ["method,mean_dice,std_dice"]
    lines += [f"{r.method_tag},{r.overall_mean:.6f},{r.overall_std:.6f}" for r in reports]
    path = ws / ABLATION_CSV
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tract_lines = ["method,class,mean_dice,std_dice"]
    for r in reports:
        tract_lines += [f"{r.method_tag},{name},{m:.6f},{s:.6f}" for name, m, s in r.per_class]
    (ws / "eval" / "per_tract.csv").write_text("\n".join(tract_lines) + "\n", encoding="utf-8")
    return path


def cmd_pipeline(cfg: PipelineConfig, jobs: int = 1) -> list[DiceReport]:
    """phantom -> stage1 -> stage2 -> stage3 (with and without URe) -> evaluate."""
    ws = _ws(cfg)
    t0 = time.perf_counter()
    _write_json(ws / "config.resolved.json", cfg.to_dict())
    cmd_phantom(cfg)
    cmd_stage1(cfg, jobs=jobs)
    cmd_stage2(cfg)
    cmd_stage3(cfg, use_ure=False, jobs=jobs)
    cmd_stage3(cfg, use_ure=True, jobs=jobs)
    models = {
        "baseline": ws / f"{MODEL_A}.model.json",
        "rpa": ws / f"{MODEL_B[False]}.model.json",
        "rpa+ure": ws / f"{MODEL_B[True]}.model.json",
    }
    reports = [cmd_evaluate(cfg, models[m], m) for m in METHODS]
    path = write_ablation(cfg, reports)
    for r in reports:
        log.info("ablation: %-8s %.4f +/- %.4f", r.method_tag, r.overall_mean, r.overall_std)
    log.info("pipeline finished in %.1fs -> %s", time.perf_counter() - t0, path)
    return reports


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tractpipe", description="One-shot tract segmentation on synthetic peak volumes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="master seed; overrides the config")
    common.add_argument("--workspace", type=Path, help="workspace directory; overrides config and $TRACTPIPE_WORKSPACE")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-subject work")
    common.add_argument("--no-ure", action="store_true", help="stage3: train model B with unit weights")
    common.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("phantom", parents=[common], help="generate the synthetic cohort")
    sub.add_parser("stage1", parents=[common], help="registration-based pseudo dataset")
    sub.add_parser("stage2", parents=[common], help="train model A on the labeled subject")
    sub.add_parser("stage3", parents=[common], help="train model B on the pseudo dataset")
    p = sub.add_parser("predict", parents=[common], help="predict one subject")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--subject", required=True, type=Path)
    p.add_argument("--output", type=Path)
    e = sub.add_parser("evaluate", parents=[common], help="Dice on the test subjects")
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--method", default="model")
    sub.add_parser("pipeline", parents=[common], help="full ablation: baseline, RPA, RPA+URe")
    return parser


def _setup_logging(ws: Path, verbose: bool) -> None:
    root = logging.getLogger("tractpipe")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(fmt)
    root.addHandler(console)
    (ws / "logs").mkdir(parents=True, exist_ok=True)
    fh = logging.FileHandler(ws / "logs" / "tractpipe.log", encoding="utf-8")
    fh.setFormatter(fmt)
    root.addHandler(fh)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.jobs < 1:
            raise ValueError("--jobs must be >= 1")
        cfg = load_config(args.config, seed=args.seed, workspace=args.workspace)
        _setup_logging(cfg.workspace_path, args.verbose)
        log.info("tractpipe %s (%s kernels), workspace %s", args.command, backend_name(), cfg.workspace_path)
        if args.command == "phantom":
            cmd_phantom(cfg)
        elif args.command == "stage1":
            cmd_stage1(cfg, jobs=args.jobs)
        elif args.command == "stage2":
            cmd_stage2(cfg)
        elif args.command == "stage3":
            cmd_stage3(cfg, use_ure=not args.no_ure, jobs=args.jobs)
        elif args.command == "predict":
            print(cmd_predict(cfg, args.model, args.subject, args.output))
        elif args.command == "evaluate":
            report = cmd_evaluate(cfg, args.model, args.method)
            print(f"{report.method_tag}: {report.overall_mean:.4f} +/- {report.overall_std:.4f}")
        elif args.command == "pipeline":
            reports = cmd_pipeline(cfg, jobs=args.jobs)
            for r in reports:
                print(f"{r.method_tag:10s} {100 * r.overall_mean:6.2f} +/- {100 * r.overall_std:5.2f}")
    except (StageError, ValueError, OSError, FileNotFoundError) as exc:
        logging.getLogger("tractpipe").error("%s", exc)
        print(f"tractpipe: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
