"""``phaseseg`` command line: synth, train, fit, segment, eval, export.

Every command takes ``--config`` (JSON, see :mod:`phaseseg.config`) and
optionally ``--seed`` and ``--out``. Outputs land under the run directory:

    effective_config.json   merged config actually used
    split.json              train/test video ids
    encoder.json            encoder checkpoint (+ train_log.csv)
    projector.json          projector checkpoint (+ fit_log.csv, prototypes.csv)
    labels/<id>.csv         frame, class, score_0..score_{K-1}
    segments/<id>.csv       class, start_frame, end_frame
    report.json, report.csv metrics over the evaluated split
    timeline/<id>.csv       ground truth and prediction runs with class names

Failures exit with status 1 (2 for usage errors) and print a single line
``phaseseg-error: <Kind>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import astgcn, config, metrics, projector, synth
from . import tape as ad
from .pose_io import load_dataset, write_dataset

log = logging.getLogger("phaseseg")

ERROR_PREFIX = "phaseseg-error:"
COMMANDS = ("synth", "train", "fit", "segment", "eval", "export")


class CliError(RuntimeError):
    pass


class UsageError(CliError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="phaseseg", description="Unsupervised phase segmentation of skeleton sequences.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from encoder.json")
        if name == "segment":
            p.add_argument("--videos", nargs="+", default=None, help="video ids (default: all)")
        if name == "export":
            p.add_argument("--video", required=True, help="video id")
    return parser


# -- helpers -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.8f}"


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _prepare_out(cfg: config.RunConfig) -> Path:
    out = cfg.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        config.save(cfg, out / "effective_config.json")
    except OSError as exc:
        raise CliError(f"output directory not writable: {out} ({exc.strerror})") from None
    return out


def _dataset(cfg):
    return load_dataset(cfg.dataset_path, cfg.num_classes)


def _split(cfg, seqs) -> dict:
    split = config.resolve_split(cfg, [s.video_id for s in seqs])
    (cfg.out / "split.json").write_text(json.dumps(split, indent=2) + "\n")
    return split


def _select(seqs, ids):
    by_id = {s.video_id: s for s in seqs}
    missing = [v for v in ids if v not in by_id]
    if missing:
        raise CliError(f"unknown video id(s): {', '.join(missing)}")
    return [by_id[v] for v in ids]


def _map(cfg, fn, items):
    if cfg.workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(cfg.workers) as pool:
        return list(pool.map(fn, items))


def _load_encoder(out: Path):
    path = out / "encoder.json"
    if not path.exists():
        raise CliError(f"encoder checkpoint missing: {path} (run 'phaseseg train' first)")
    return ad.load_checkpoint(path)


def _load_projector(out: Path) -> projector.ProjectorParams:
    path = out / "projector.json"
    if not path.exists():
        raise CliError(f"projector checkpoint missing: {path} (run 'phaseseg fit' first)")
    weights, meta, _ = ad.load_checkpoint(path)
    return projector.ProjectorParams(weights, meta["temperature"])


def _features(cfg, params, seqs):
    return _map(cfg, lambda s: astgcn.extract_features(s, params, cfg.encoder), seqs)


# -- commands ----------------------------------------------------------------

def cmd_synth(cfg: config.RunConfig) -> dict:
    spec = replace(cfg.synth, num_classes=cfg.num_classes)
    seqs = synth.generate(spec)
    try:
        manifest = write_dataset(seqs, cfg.dataset_path, cfg.num_classes)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {cfg.dataset_path}: {exc.strerror}") from None
    frames = sum(len(s) for s in seqs)
    print(f"synth: wrote {len(seqs)} videos, {frames} frames, K={cfg.num_classes} to {manifest}")
    return {"videos": len(seqs), "frames": frames, "manifest": str(manifest)}


def cmd_train(cfg: config.RunConfig, resume: bool = False) -> dict:
    out = cfg.out
    seqs = _dataset(cfg)
    train = _select(seqs, _split(cfg, seqs)["train"])
    ckpt = out / "encoder.json"
    params, adam, done, history = None, None, 0, []
    if resume or cfg.resume:
        if not ckpt.exists():
            raise CliError(f"cannot resume: {ckpt} not found")
        params, meta, adam = ad.load_checkpoint(ckpt)
        done, history = int(meta["epoch"]), list(meta.get("log", []))
    remaining = cfg.encoder.epochs - done
    if remaining > 0:
        try:
            result = astgcn.train_denoiser(train, replace(cfg.encoder, epochs=remaining), params, adam, done)
        except (ValueError, FloatingPointError) as exc:
            raise CliError(f"training failed: {exc}") from exc
        params, adam = result.params, result.adam
        history += result.log
    meta = {"epoch": done + max(remaining, 0), "encoder": cfg.encoder.to_dict(), "log": history}
    ad.save_checkpoint(ckpt, params, meta, adam)
    _write_csv(out / "train_log.csv", ["epoch", "mse", "vel", "total"],
               [[r["epoch"], _fmt(r["mse"]), _fmt(r["vel"]), _fmt(r["total"])] for r in history])
    if history:
        first, last = history[0]["total"], history[-1]["total"]
        print(f"train: {len(train)} videos, epochs {history[0]['epoch']}-{history[-1]['epoch']}, "
              f"loss {first:.6f} -> {last:.6f}")
    return {"epochs": meta["epoch"], "log": history}


def cmd_fit(cfg: config.RunConfig) -> dict:
    out = cfg.out
    enc_params, _, _ = _load_encoder(out)
    seqs = _dataset(cfg)
    train = _select(seqs, _split(cfg, seqs)["train"])
    feats = _features(cfg, enc_params, train)
    result = projector.fit(feats, cfg.projector, cfg.sot)
    meta = {"temperature": result.params.temperature, "projector": cfg.projector.to_dict(),
            "sot": cfg.sot.to_dict(), "log": result.log}
    ad.save_checkpoint(out / "projector.json", result.params.weights, meta)
    _write_csv(out / "fit_log.csv", ["epoch", "ot_objective", "loss"],
               [[r["epoch"], _fmt(r["ot_objective"]), _fmt(r["loss"])] for r in result.log])
    A = result.params.prototypes
    _write_csv(out / "prototypes.csv", ["class", *(f"d{i}" for i in range(A.shape[1]))],
               [[k, *map(_fmt, row)] for k, row in enumerate(A)])
    print(f"fit: {len(train)} videos, {cfg.projector.epochs} epochs, "
          f"loss {result.log[0]['loss']:.6f} -> {result.log[-1]['loss']:.6f}")
    return {"log": result.log}


def cmd_segment(cfg: config.RunConfig, video_ids=None) -> dict:
    out = cfg.out
    enc_params, _, _ = _load_encoder(out)
    params = _load_projector(out)
    seqs = _dataset(cfg)
    chosen = _select(seqs, video_ids) if video_ids else seqs
    K = len(params.prototypes)

    def run(seq):
        feats = astgcn.extract_features(seq, enc_params, cfg.encoder)
        labels, plan = projector.segment(feats, params, cfg.sot)
        scores = plan * len(plan)  # rows sum to one
        _write_csv(out / "labels" / f"{seq.video_id}.csv", ["frame", "class", *(f"score_{k}" for k in range(K))],
                   [[t, int(c), *map(_fmt, scores[t])] for t, c in enumerate(labels)])
        _write_csv(out / "segments" / f"{seq.video_id}.csv", ["class", "start_frame", "end_frame"],
                   metrics.to_segments(labels))
        return len(labels)

    counts = _map(cfg, run, chosen)
    print(f"segment: {len(chosen)} videos, {sum(counts)} frames -> {out / 'labels'}")
    return {"videos": [s.video_id for s in chosen]}


def read_labels(path: Path):
    """Per-frame classes and soft scores from a ``labels/<id>.csv`` file."""
    header, rows = _read_csv(path)
    if header[:2] != ["frame", "class"]:
        raise CliError(f"{path}: unexpected header {header}")
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    scores = np.array([[float(x) for x in r[2:]] for r in rows], dtype=np.float64)
    return labels, scores


def cmd_eval(cfg: config.RunConfig) -> metrics.MetricsReport:
    out = cfg.out
    seqs = _dataset(cfg)
    split = _split(cfg, seqs)
    ids = sorted(split["train"] + split["test"]) if cfg.eval_split == "all" else split[cfg.eval_split]
    if not ids:
        raise CliError(f"split '{cfg.eval_split}' is empty")
    chosen = _select(seqs, ids)
    preds, truths, scores = [], [], []
    for seq in chosen:
        if seq.labels is None:
            raise CliError(f"video {seq.video_id} has no ground-truth labels")
        path = out / "labels" / f"{seq.video_id}.csv"
        if not path.exists():
            raise CliError(f"segmentation missing for {seq.video_id}: {path} (run 'phaseseg segment')")
        lab, sc = read_labels(path)
        if len(lab) != len(seq):
            raise CliError(f"{path}: {len(lab)} rows for a {len(seq)}-frame video")
        preds.append(lab)
        scores.append(sc)
        truths.append(seq.labels)
    report = metrics.evaluate(preds, truths, scores, cfg.num_classes, video_ids=ids)
    report.extra = {"split": cfg.eval_split, "train_videos": len(split["train"]),
                    "test_videos": len(split["test"]), "video_ids": ids,
                    "class_names": list(cfg.class_names[:cfg.num_classes])}
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    print(f"eval[{cfg.eval_split}]: {len(ids)} videos  MoF={report.mof:.4f} F1={report.f1:.4f} "
          f"mIoU={report.miou:.4f} mAP={report.map:.4f}")
    for flag in report.flags:
        print(f"  note: {flag}")
    return report


def cmd_export(cfg: config.RunConfig, video_id: str) -> Path:
    out = cfg.out
    seq = _select(_dataset(cfg), [video_id])[0]
    path = out / "labels" / f"{video_id}.csv"
    if not path.exists():
        raise CliError(f"segmentation missing for {video_id}: {path} (run 'phaseseg segment')")
    pred, _ = read_labels(path)
    # name predicted clusters through the dataset-level mapping when eval has run
    report = out / "report.json"
    mapping = np.asarray(json.loads(report.read_text())["mapping"]) if report.exists() else None
    names = cfg.class_names
    rows = []
    if seq.labels is not None:
        rows += [["ground_truth", s, e, names[c]] for c, s, e in metrics.to_segments(seq.labels)]
    mapped = mapping[pred] if mapping is not None else pred
    rows += [["prediction", s, e, names[c]] for c, s, e in metrics.to_segments(mapped)]
    target = out / "timeline" / f"{video_id}.csv"
    _write_csv(target, ["track", "start_frame", "end_frame", "class_name"], rows)
    print(f"export: {target}")
    return target


def run(argv=None) -> object:
    """Parse ``argv`` and execute one command; raises on failure."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = config.load(args.config).with_overrides(seed=args.seed, output_dir=args.out)
    _prepare_out(cfg)
    if args.command == "synth":
        return cmd_synth(cfg)
    if args.command == "train":
        return cmd_train(cfg, resume=args.resume)
    if args.command == "fit":
        return cmd_fit(cfg)
    if args.command == "segment":
        return cmd_segment(cfg, args.videos)
    if args.command == "eval":
        return cmd_eval(cfg)
    return cmd_export(cfg, args.video)


def main(argv=None) -> int:
    try:
        run(argv)
    except UsageError as exc:
        print(f"{ERROR_PREFIX} UsageError: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"{ERROR_PREFIX} {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
