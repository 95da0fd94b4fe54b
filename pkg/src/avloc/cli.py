"""Command-line surface: generate / train / predict / eval / selftest.

One JSON config drives all stages; any leaf can be overridden per run via
repeated ``--set section.key=value`` flags, and the ``DEL_SEED``
environment variable overrides the seed.  Every command writes exactly
one ``run_manifest.json`` next to its outputs with the resolved config
snapshot, so a run is reproducible from its manifest alone.

Exit codes: 0 ok, 2 usage, 3 bad config, 4 missing/unreadable input,
5 selftest failure, 6 training divergence, 1 unexpected error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .contrast import LossWeights
from .datasim import SynthConfig, generate_synthetic_dataset, load_manifest, load_split, write_dataset
from .detect import load_predictions, save_predictions
from .evalkit import mean_ap
from .model import DecodeConfig, EventLocalizer, ModelConfig
from .trainer import Trainer, TrainConfig, TrainingDiverged, restore_model

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_SELFTEST = 5
EXIT_DIVERGED = 6


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def default_config() -> dict:
    return {
        "seed": 7,
        "data": {
            "num_train": 200, "num_eval": 50, "T": 64, "d_v": 32, "d_a": 32,
            "num_classes": 5, "events_mean": 2.5, "events_max": 4,
            "overlap_probability": 0.25, "duration_min": 6, "duration_max": 20,
            "coupling": "coupled", "misalignment_jitter": 0, "snr": 3.0,
        },
        "model": {
            "d": 64, "heads": 4, "attn_blocks": 1, "levels": 6, "n_pool": 16,
            "head_hidden": 64, "dropout": 0.0, "adaptive_mask": True,
        },
        "loss": {
            "l_inter": 0.3, "l_intra": 0.3, "l_score": 0.5, "l_cls": 1.0, "l_reg": 1.0,
            "temperature_init": 0.07, "score_threshold": 0.5, "pair_cap": 32,
        },
        "train": {
            "epochs": 60, "warmup_epochs": 5, "base_lr": 0.002, "weight_decay": 1e-4,
            "batch_size": 16, "modality": "AV", "clip_norm": 1.0, "eval_every": 5,
        },
        "decode": {
            "score_threshold": 0.1, "max_per_video": 100,
            "nms_sigma": 0.5, "nms_min_conf": 0.001,
        },
        "eval": {"thresholds": [0.5, 0.6, 0.7, 0.8, 0.9]},
    }


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _apply_override(cfg: dict, expr: str) -> None:
    if "=" not in expr:
        raise CliError(f"--set expects section.key=value, got {expr!r}", EXIT_CONFIG)
    dotted, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise CliError(f"unknown config section {dotted!r}", EXIT_CONFIG)
        node = node[part]
    node[parts[-1]] = value


def resolve_config(path: str | None, overrides: list[str]) -> dict:
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {p}", EXIT_CONFIG)
        try:
            cfg = _deep_merge(cfg, json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise CliError(f"config is not valid JSON: {exc}", EXIT_CONFIG)
    for expr in overrides or []:
        _apply_override(cfg, expr)
    env_seed = os.environ.get("DEL_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise CliError(f"DEL_SEED must be an integer, got {env_seed!r}", EXIT_CONFIG)
    return cfg


def _synth_config(cfg: dict, num_videos: int, seed: int) -> SynthConfig:
    d = cfg["data"]
    return SynthConfig(
        num_videos=num_videos, T=d["T"], d_v=d["d_v"], d_a=d["d_a"],
        num_classes=d["num_classes"], events_mean=d["events_mean"],
        events_max=d["events_max"], overlap_probability=d["overlap_probability"],
        duration_min=d["duration_min"], duration_max=d["duration_max"],
        modality_coupling=d["coupling"], misalignment_jitter=d["misalignment_jitter"],
        snr=d["snr"], seed=seed)


def _model_config(cfg: dict) -> ModelConfig:
    m, d = cfg["model"], cfg["data"]
    return ModelConfig(d_v=d["d_v"], d_a=d["d_a"], t_max=d["T"],
                       num_classes=d["num_classes"], d=m["d"], heads=m["heads"],
                       attn_blocks=m["attn_blocks"], levels=m["levels"],
                       n_pool=m["n_pool"], head_hidden=m["head_hidden"],
                       dropout=m["dropout"], adaptive_mask=m["adaptive_mask"])


def _loss_weights(cfg: dict) -> LossWeights:
    return LossWeights(**cfg["loss"])


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], warmup_epochs=t["warmup_epochs"],
                       base_lr=t["base_lr"], weight_decay=t["weight_decay"],
                       batch_size=t["batch_size"], seed=cfg["seed"],
                       modality=t["modality"], clip_norm=t["clip_norm"],
                       eval_every=t["eval_every"],
                       eval_thresholds=tuple(cfg["eval"]["thresholds"]))


def _decode_config(cfg: dict) -> DecodeConfig:
    return DecodeConfig(**cfg["decode"])


def _write_manifest(out_dir: Path, command: str, args, cfg: dict, outputs: dict,
                    started: str) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config_path": getattr(args, "config", None),
        "config": cfg,
        "seed": cfg["seed"],
        "outputs": outputs,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _require_dataset(path_str: str) -> Path:
    path = Path(path_str)
    if not (path / "manifest.json").exists():
        raise CliError(f"no dataset manifest under {path}", EXIT_INPUT)
    return path


# -- subcommands ---------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = resolve_config(args.config, args.set)
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_eval = cfg["data"]["num_train"], cfg["data"]["num_eval"]
    # one pool under one seed: the splits share class signatures but no videos
    pool_cfg = _synth_config(cfg, n_train + n_eval, cfg["seed"])
    seqs, anns = generate_synthetic_dataset(pool_cfg)
    for i, seq in enumerate(seqs):
        seq.id = f"train_{i:05d}" if i < n_train else f"eval_{i - n_train:05d}"
    write_dataset(out, {"train": list(zip(seqs[:n_train], anns[:n_train])),
                        "eval": list(zip(seqs[n_train:], anns[n_train:]))}, pool_cfg)
    _write_manifest(out, "generate", args, cfg,
                    {"dataset": str(out / "manifest.json")}, started)
    print(f"generated {len(seqs)} videos under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set)
    started = _now()
    data_dir = _require_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_items = load_split(data_dir, args.split)
    eval_split = args.eval_split
    eval_items = None
    if eval_split:
        manifest = load_manifest(data_dir)
        if eval_split in manifest["splits"]:
            eval_items = load_split(data_dir, eval_split)
        else:
            raise CliError(f"split {eval_split!r} not in dataset", EXIT_INPUT)
    model = EventLocalizer(_model_config(cfg), _loss_weights(cfg), seed=cfg["seed"])
    trainer = Trainer(model, train_items, _train_config(cfg), eval_items=eval_items)
    if args.resume:
        trainer.resume(args.resume)
    try:
        trainer.fit(decode_cfg=_decode_config(cfg))
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED

    ckpt = out / "checkpoint.delp"
    trainer.save(ckpt)
    rows = [r.as_row() for r in trainer.history]
    metrics = out / "metrics.csv"
    fields = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(metrics, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    from .plots import loss_curves, map_curves
    loss_svg = out / "loss_curves.svg"
    map_svg = out / "map_curves.svg"
    loss_curves(rows, loss_svg)
    map_curves(rows, map_svg)
    _write_manifest(out, "train", args, cfg,
                    {"checkpoint": str(ckpt), "metrics": str(metrics),
                     "loss_curves": str(loss_svg), "map_curves": str(map_svg)}, started)
    last = trainer.history[-1]
    print(f"trained {last.epoch + 1} epochs; final total loss {last.total:.4f}; "
          f"average mAP {last.average_map}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = resolve_config(args.config, args.set)
    started = _now()
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}", EXIT_INPUT)
    data_dir = _require_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _, meta = restore_model(ckpt)
    items = load_split(data_dir, args.split)
    decode_cfg = _decode_config(cfg)
    modality = cfg["train"]["modality"]
    from .datasim import pad_or_crop

    def run_one(item):
        seq, _events = item
        fitted = pad_or_crop(seq, model.cfg.t_max)
        return seq.id, model.predict(fitted.video, fitted.audio, modality=modality,
                                     decode_cfg=decode_cfg)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(run_one, items))
    else:
        results = [run_one(item) for item in items]
    preds = dict(results)
    pred_path = out / "predictions.json"
    save_predictions(preds, pred_path)
    _write_manifest(out, "predict", args, cfg, {"predictions": str(pred_path)}, started)
    total = sum(len(v) for v in preds.values())
    print(f"wrote {total} events for {len(preds)} videos to {pred_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args.config, args.set)
    started = _now()
    pred_path = Path(args.predictions)
    if not pred_path.exists():
        raise CliError(f"predictions not found: {pred_path}", EXIT_INPUT)
    data_dir = _require_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds = load_predictions(pred_path)
    gts = {seq.id: events for seq, events in load_split(data_dir, args.split)}
    missing = set(gts) - set(preds)
    for vid in missing:
        preds[vid] = []
    report = mean_ap(preds, gts, cfg["eval"]["thresholds"])
    report_json = out / "report.json"
    report_csv = out / "report.csv"
    report.write_json(report_json)
    report.write_csv(report_csv)
    from .plots import pr_curves
    pr_svg = out / "pr_curves.svg"
    pr_curves(report, pr_svg)
    _write_manifest(out, "eval", args, cfg,
                    {"report_json": str(report_json), "report_csv": str(report_csv),
                     "pr_curves": str(pr_svg)}, started)
    per_thr = " ".join(f"mAP@{t}={report.map_at[t]:.4f}" for t in report.thresholds)
    print(f"{per_thr} average mAP={report.average_map:.4f}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    ok = run_selftest()
    print("selftest:", "OK" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_SELFTEST


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avloc",
                                     description="Dense audio-visual event localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults are built in)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config leaf, e.g. --set train.epochs=10")

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--eval-split", default="eval")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="decode events with a trained checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against a dataset split")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("selftest", help="run the gradient-check and oracle suites")
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - single reporting point for the CLI
        print(f"unexpected error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
