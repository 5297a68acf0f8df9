"""Command-line entry point: ``angiovid {phantom,train,generate,evaluate,downstream}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import multiprocessing as mp
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import metrics as M
from .data import (
    AngioVideo,
    PhantomSpec,
    even_phase_tags,
    generate_phantom,
    load_manifest,
    load_sample,
    read_image,
    resize_grid,
    write_phantom_dataset,
    write_video,
)
from .downstream import (
    EncoderHandle,
    assert_frozen,
    embed_set,
    few_shot_train,
    finetune_segmentation,
    retrieve,
    supervised_train_fused,
    zero_shot_eval,
)
from .errors import AngioError, ConfigError, DataError
from .model import load_models, read_archive, rollout_tensor, source_tensor
from .training import Trainer, fit, temporal_smooth

logger = logging.getLogger("angiovid")


class UsageError(AngioError):
    code = "E_USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# shared helpers


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args) -> dict:
    sets = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        sets.append(f"run.seed={args.seed}")
    if getattr(args, "out", None):
        sets.append(f"run.out={args.out}")
    return C.resolve_config(args.config, overrides=sets)


def load_generator(path):
    """Generator from either a training-state checkpoint or a model archive."""
    meta, _ = read_archive(path)
    if meta.get("kind") == "train_state":
        return Trainer.load(path).G.eval()
    return load_models(path)[0]


def _generate(gen, sources, frames: int, smooth: bool) -> np.ndarray:
    out = rollout_tensor(gen, sources, frames)[0].numpy()
    if smooth:
        out = np.stack([temporal_smooth(v) for v in out]).astype(np.float32)
    return out


def _smooth_flag(args, cfg) -> bool:
    return bool(cfg["train"]["smoothing"]) if args.smooth is None else args.smooth


# ---------------------------------------------------------------------------
# phantom


def _split_names(n_patients: int, ratios) -> list:
    total = sum(ratios)
    n_val = math.floor(n_patients * ratios[1] / total)
    n_test = math.floor(n_patients * ratios[2] / total)
    n_train = n_patients - n_val - n_test
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def cmd_phantom(args, cfg):
    p = cfg["phantom"]
    n = int(p["n"])
    if n <= 0:
        raise DataError("empty dataset: phantom count must be >= 1")
    views = int(p["views"])
    out = _prepare_out(C.require(cfg, "run.out"), args.force)
    kw = C.phantom_spec_kwargs(cfg)
    counts = list(p["lesion_counts"]) or [1]
    seed = int(cfg["run"]["seed"])
    splits = _split_names(n, p["split_ratios"])
    samples, sample_splits = [], []
    for i in range(n):
        for v in range(views):
            spec = PhantomSpec(seed=seed * 100003 + i, view=v, lesion_count=int(counts[i % len(counts)]), **kw)
            samples.append(generate_phantom(spec))
            sample_splits.append(splits[i])
    path = write_phantom_dataset(out, samples, sample_splits)
    C.write_resolved(cfg, out)
    return {"manifest": str(path), "samples": len(samples)}


# ---------------------------------------------------------------------------
# train


def cmd_train(args, cfg):
    manifest = load_manifest(C.require(cfg, "data.manifest"))
    out = Path(C.require(cfg, "run.out"))
    if not args.resume:
        out = _prepare_out(out, args.force)
    C.write_resolved(cfg, out)
    trainer, reports = fit(
        manifest, C.train_config(cfg), out, C.generator_config(cfg), C.discriminator_config(cfg),
        C.loss_weights(cfg), C.patch_config(cfg), C.threshold_policy(cfg), resume=args.resume,
    )
    return {"steps": trainer.step, "final_total": reports[-1].total if reports else None,
            "checkpoint": str(out / "final.zip")}


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args, cfg):
    gen = load_generator(args.checkpoint)
    img = read_image(args.source)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    res = int(cfg["data"]["resolution"])
    if img.shape[:2] != (res, res):
        img = resize_grid(img, res)
    out = _prepare_out(C.require(cfg, "run.out"), args.force)
    frames = _generate(gen, source_tensor(img[None]), gen.cfg.frame_count, _smooth_flag(args, cfg))[0]
    names = write_video(out, AngioVideo(np.clip(frames, 0, 1), even_phase_tags(len(frames))))
    C.write_resolved(cfg, out)
    return {"frames": len(names), "index": str(out / "index.json")}


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args, cfg):
    manifest = load_manifest(C.require(cfg, "data.manifest"))
    split = cfg["data"]["split"]
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    res, per_phase = int(cfg["data"]["resolution"]), int(cfg["data"]["per_phase"])
    samples = [load_sample(manifest, r, res, per_phase) for r in records]
    real = [s.target.frames for s in samples]
    if args.self_check:
        fake = real
    else:
        if not args.checkpoint:
            raise ConfigError("missing --checkpoint (or pass --self-check)")
        gen = load_generator(args.checkpoint)
        src = source_tensor(np.stack([s.source.pixels for s in samples]))
        fake = list(_generate(gen, src, len(real[0]), _smooth_flag(args, cfg)))
    seed = int(cfg["metrics"]["extractor_seed"])
    report = M.video_quality(real, fake, M.VideoFeatureExtractor(seed, int(cfg["metrics"]["video_size"])),
                             M.FrameBackbone(seed))
    out = _prepare_out(C.require(cfg, "run.out"), args.force)
    rows = []
    for s, pv in zip(samples, report.per_video):
        for k in ("ssim", "psnr", "perceptual"):
            rows.append({"metric": k, "split": split, "seed": seed, "value": pv[k], "video": s.sample_id or s.patient_id})
    for k, v in report.as_record().items():
        rows.append({"metric": k, "split": split, "seed": seed, "value": v, "video": "ALL"})
    M.write_table(out / "report.csv", rows)
    (out / "report.json").write_text(json.dumps({**report.as_record(), "per_video": report.per_video},
                                                sort_keys=True, indent=1) + "\n")
    C.write_resolved(cfg, out)
    return report.as_record()


# ---------------------------------------------------------------------------
# downstream

TASKS = {"lesion_classification", "vessel_segmentation", "retrieval"}
MODES = {
    "lesion_classification": {"zero_shot", "few_shot", "supervised"},
    "vessel_segmentation": {"zero_shot", "few_shot"},
    "retrieval": {"zero_shot"},
}
_CELL_KEYS = {"task", "mode", "shots", "seeds"}


def load_grid(path) -> list:
    """Grid cells from a JSON-lines file; each line names a task, mode, shots and seeds."""
    cells = []
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"grid file not found: {path}")
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{ln}: malformed grid row ({e.msg})") from None
        if not isinstance(row, dict):
            raise ConfigError(f"{path}:{ln}: grid row must be an object")
        unknown = set(row) - _CELL_KEYS
        if unknown:
            raise ConfigError(f"{path}:{ln}: unknown grid fields {sorted(unknown)}")
        task = row.get("task")
        if task not in TASKS:
            raise ConfigError(f"{path}:{ln}: unknown task {task!r}")
        mode = row.get("mode", "few_shot" if row.get("shots", 0) and task != "retrieval" else "zero_shot")
        if mode not in MODES[task]:
            raise ConfigError(f"{path}:{ln}: mode {mode!r} not available for {task}")
        shots = row.get("shots", 0)
        seeds = row.get("seeds", [0, 1, 2, 3, 4])
        if not isinstance(shots, int) or shots < 0 or (mode == "few_shot" and shots < 1):
            raise ConfigError(f"{path}:{ln}: shots must be a nonnegative integer (>= 1 for few_shot)")
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError(f"{path}:{ln}: seeds must be a nonempty list of integers")
        cells.append({"task": task, "mode": mode, "shots": shots, "seeds": seeds, "line": ln})
    if not cells:
        raise ConfigError(f"{path}: grid has no cells")
    return cells


_CTX: dict = {}


def _downstream_context(cfg):
    manifest = load_manifest(C.require(cfg, "data.manifest"))
    res = int(cfg["data"]["resolution"])
    data = {}
    for split in ("train", "val", "test"):
        data[split] = [load_sample(manifest, r, res, None) for r in manifest.split(split)]
    ckpt = cfg["downstream"]["checkpoint"]
    seed = int(cfg["run"]["seed"])
    gcfg = C.generator_config(cfg)
    encoders = {}
    if ckpt:
        gen = load_generator(ckpt)
        encoders["pretrained"] = EncoderHandle(gen, "pretrained")
        gcfg = gen.cfg
    if not ckpt or cfg["downstream"]["compare_random"]:
        encoders["random"] = EncoderHandle.random(gcfg, seed)
    return {"cfg": cfg, "data": data, "encoders": encoders}


def _labels(samples):
    return np.asarray([int(s.lesion_truth is not None and s.lesion_truth.any()) for s in samples])


def _embed(handle, samples, labels=True):
    return embed_set(handle, np.stack([s.source.pixels for s in samples]),
                     _labels(samples) if labels else None,
                     [s.patient_id for s in samples], [s.sample_id or s.patient_id for s in samples])


def _run_cell(cell, handle, ctx, seed):
    cfg, data = ctx["cfg"], ctx["data"]
    task, mode, shots = cell["task"], cell["mode"], cell["shots"]
    if task == "lesion_classification":
        if mode == "supervised":
            everything = data["train"] + data["val"] + data["test"]
            other = ctx["encoders"].get("random") if handle.encoder_id != "random" else handle
            with assert_frozen(handle, other):
                r = supervised_train_fused(_embed(handle, everything), _embed(other, everything),
                                           C.probe_config(cfg, mode="supervised"), seed)
            return "auroc", r.test_auroc
        with assert_frozen(handle):
            pool, test = _embed(handle, data["train"]), _embed(handle, data["test"])
            if mode == "zero_shot":
                return "auroc", zero_shot_eval(pool, test).auroc
            run = few_shot_train(pool, test, shots, C.probe_config(cfg, mode="few_shot", support_per_class=shots),
                                 seeds=[seed])[0]
        return "auroc", run.auroc
    if task == "vessel_segmentation":
        pool, test = data["train"], data["test"]
        sc = C.segmentation_config(cfg, shots=0 if mode == "zero_shot" else shots)
        r = finetune_segmentation(handle, sc, [s.source.pixels for s in pool], [s.vessel_truth for s in pool],
                                  [s.source.pixels for s in test], [s.vessel_truth for s in test], seed)
        return "dice", r.dice
    everything = data["train"] + data["val"] + data["test"]
    with assert_frozen(handle):
        _, rep = retrieve(_embed(handle, everything, labels=False), ks=tuple(cfg["downstream"]["ks"]))
    return "mean_recall", rep.mean_recall


def _cell_rows(cell):
    ctx = _CTX
    rows = []
    for seed in cell["seeds"]:
        row = {"task": cell["task"], "mode": cell["mode"], "shots": cell["shots"], "seed": seed}
        for name, handle in ctx["encoders"].items():
            metric, value = _run_cell(cell, handle, ctx, seed)
            row["metric"] = metric
            row[f"{name}_value"] = float(value)
        rows.append(row)
    return rows


def cmd_downstream(args, cfg):
    grid_path = args.grid or C.require(cfg, "downstream.grid")
    cells = load_grid(grid_path)
    out = _prepare_out(C.require(cfg, "run.out"), args.force)
    _CTX.clear()
    _CTX.update(_downstream_context(cfg))
    if args.jobs > 1 and len(cells) > 1:
        with mp.get_context("fork").Pool(min(args.jobs, len(cells))) as pool:
            per_cell = pool.map(_cell_rows, cells)
    else:
        per_cell = [_cell_rows(c) for c in cells]
    names = list(_CTX["encoders"])
    primary = names[0]
    rows, summaries = [], []
    for cell, crows in zip(cells, per_cell):
        for r in crows:
            rows.append({**r, "value": r[f"{primary}_value"], "encoder": primary})
        comp = [r[f"{names[1]}_value"] for r in crows] if len(names) > 1 else None
        vals = [r[f"{primary}_value"] for r in crows]
        if len(vals) >= 2:
            stats = M.summarize(vals, comp).as_record()
        else:  # a single run has no spread to report
            stats = {"mean": vals[0], "se": None, "ci95_low": None, "ci95_high": None, "n": 1, "p_value": None}
        summaries.append({"task": cell["task"], "mode": cell["mode"], "shots": cell["shots"],
                          "metric": crows[0]["metric"], "encoder": primary,
                          "comparator": names[1] if comp else None, "comparator_mean": None if comp is None
                          else float(np.mean(comp)), **stats})
    fields = ("task", "mode", "shots", "seed", "encoder", "metric", "value")
    M.write_table(out / "results.csv", rows, fields)
    with open(out / "summary.jsonl", "w") as fh:
        for s in summaries:
            fh.write(json.dumps(s, sort_keys=True) + "\n")
    C.write_resolved(cfg, out)
    return {"rows": len(rows), "cells": len(summaries)}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="angiovid", description="Fundus-to-angiography video generation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("phantom", parents=[common], help="write a procedural phantom dataset")
    t = sub.add_parser("train", parents=[common], help="train the generator")
    t.add_argument("--resume", help="training-state checkpoint to continue from")
    g = sub.add_parser("generate", parents=[common], help="roll out a 12-frame video from one source image")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--source", required=True)
    g.add_argument("--smooth", action=argparse.BooleanOptionalAction, default=None)
    e = sub.add_parser("evaluate", parents=[common], help="video-quality report on a manifest split")
    e.add_argument("--checkpoint")
    e.add_argument("--self-check", action="store_true", help="score ground truth against itself")
    e.add_argument("--smooth", action=argparse.BooleanOptionalAction, default=None)
    d = sub.add_parser("downstream", parents=[common], help="probe grid over frozen / fine-tuned encoders")
    d.add_argument("--grid")
    d.add_argument("--jobs", type=int, default=1)
    return p


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "downstream": cmd_downstream}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _resolve(args)
        result = COMMANDS[args.command](args, cfg)
    except AngioError as e:
        print(f"error[{e.code}]: {' '.join(str(e).split())}", file=sys.stderr)
        return 1 if not isinstance(e, UsageError) else 2
    except OSError as e:
        print(f"error[E_IO]: {' '.join(str(e).split())}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
