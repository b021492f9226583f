"""Command-line entry point: ``pdaf {gen-data,pretrain,train,eval,infer,report}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flag, unknown
config key, malformed override).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Config
from .data import (DatasetSplits, SPLITS, build_dataset, class_color, load_dataset, read_ppm,
                   save_dataset, write_pgm, write_ppm)
from .errors import ConfigError, PdafError
from .tensor import RngStream
from .trainer import (CSV_COLUMNS, PRETRAIN_COLUMNS, ModelBundle, evaluate, inference_noise,
                      load_any, load_baseline, predict_baseline, predict_pdaf, pretrain_baseline,
                      save_baseline, save_bundle, train_pdaf, write_csv)

log = logging.getLogger("pdaf")

COMMANDS = ("gen-data", "pretrain", "train", "eval", "infer", "report")
METRIC_KEYS = ("model", "split", "per_class_iou", "miou", "config_digest", "dataset_digest")
EVAL_SPLITS = ("val_source", "shifted_test")


class UsageError(Exception):
    """Bad invocation; maps to exit code 2."""


@dataclass
class CommandSpec:
    command: str
    config: Config
    out: Path
    seed: int | None = None
    config_path: Path | None = None
    overrides: list[str] = field(default_factory=list)
    args: argparse.Namespace | None = None


# --------------------------------------------------------------------------- parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse already names the offending token
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pdaf", allow_abbrev=False,
                     description="Synthetic-benchmark PDAF pipeline.",
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, help_text: str, out_help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text, allow_abbrev=False,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--out", type=Path, default=Path("."), help=out_help)
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        p.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                       help="config overrides, e.g. lr=0.001 or train_augment.noise=[0,0.05]")
        return p

    command("gen-data", "generate the synthetic benchmark", "dataset directory")

    p = command("pretrain", "train the baseline on clean source scenes", "run directory")
    p.add_argument("--data", type=Path, default=None, help="dataset manifest; regenerated from the config when omitted")

    p = command("train", "PDAF fine-tuning of a pretrained baseline", "run directory")
    p.add_argument("--data", type=Path, default=None, help="dataset manifest; regenerated from the config when omitted")
    p.add_argument("--baseline", type=Path, required=True, help="baseline checkpoint")

    p = command("eval", "per-split mIoU of a checkpoint", "directory for the metrics JSON")
    p.add_argument("--data", type=Path, default=None, help="dataset manifest; regenerated from the config when omitted")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", choices=("auto", "baseline", "pdaf"), default="auto",
                   help="auto: pdaf for PDAF checkpoints, baseline otherwise")
    p.add_argument("--name", default=None, help="model name in the metrics; the mode when omitted")

    p = command("infer", "label and colour maps for PPM images", "output directory")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, action="append", required=True, help="PPM image (repeatable)")
    p.add_argument("--mode", choices=("auto", "baseline", "pdaf"), default="auto")

    p = command("report", "compare metrics files", "directory for report.csv / report.md")
    p.add_argument("--metrics", type=Path, action="append", required=True,
                   help="metrics JSON (repeatable)")
    return parser


def _reject_unknown_flags(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Name a mistyped flag before argparse complains about missing required ones."""
    if not argv or argv[0] not in COMMANDS:
        return
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    known = set(sub.choices[argv[0]]._option_string_actions)
    for token in argv[1:]:
        if token == "--":
            break
        if token.startswith("-") and token.split("=", 1)[0] not in known:
            raise UsageError(f"pdaf {argv[0]}: unrecognized argument {token}")


def parse_and_validate(argv: Sequence[str]) -> CommandSpec:
    parser = build_parser()
    _reject_unknown_flags(parser, list(argv))
    args = parser.parse_args(list(argv))
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"unexpected argument {item!r} (overrides must be KEY=VALUE)")
    try:
        config = Config.from_json_file(args.config) if args.config else Config()
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        config = config.with_overrides(overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
    return CommandSpec(command=args.command, config=config, out=args.out, seed=args.seed,
                       config_path=args.config, overrides=list(args.overrides), args=args)


# --------------------------------------------------------------------------- helpers


def _dataset(spec: CommandSpec, config: Config) -> tuple[DatasetSplits, str]:
    manifest = getattr(spec.args, "data", None)
    if manifest is not None:
        if manifest.is_dir():
            manifest = manifest / "manifest.json"
        if not manifest.exists():
            raise PdafError(f"dataset manifest not found: {manifest}")
        splits, meta = load_dataset(manifest)
        return splits, meta["digest"]
    splits = build_dataset(RngStream(config.seed), config)
    return splits, splits.digest()


def _require(path: Path, what: str) -> None:
    if not path.exists():
        raise PdafError(f"{what} not found: {path}")


def _save_config(out: Path, config: Config) -> None:
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")


def _resolve_mode(requested: str, model) -> str:
    if requested == "auto":
        return "pdaf" if isinstance(model, ModelBundle) else "baseline"
    if requested == "pdaf" and not isinstance(model, ModelBundle):
        raise PdafError("pdaf mode needs a PDAF checkpoint")
    return requested


def _checkpoint_config(spec: CommandSpec, meta: dict) -> Config:
    """Checkpoint config, unless the user passed one explicitly."""
    if spec.config_path is not None or spec.overrides or spec.seed is not None:
        return spec.config
    return Config.from_dict(meta["config"])


# --------------------------------------------------------------------------- commands


def cmd_gen_data(spec: CommandSpec) -> None:
    spec.out.mkdir(parents=True, exist_ok=True)
    splits = build_dataset(RngStream(spec.config.seed), spec.config)
    path = save_dataset(splits, spec.out, spec.config)
    log.info("wrote %s (digest %s)", path, splits.digest())


def cmd_pretrain(spec: CommandSpec) -> None:
    cfg = spec.config
    splits, digest = _dataset(spec, cfg)
    spec.out.mkdir(parents=True, exist_ok=True)
    params, rows = pretrain_baseline(cfg, splits, RngStream(cfg.seed))
    save_baseline(params, cfg, spec.out / "baseline.ckpt", {"seed": cfg.seed, "dataset_digest": digest})
    write_csv(rows, spec.out / "pretrain_log.csv", PRETRAIN_COLUMNS)
    _save_config(spec.out, cfg)
    log.info("baseline saved to %s", spec.out / "baseline.ckpt")


def cmd_train(spec: CommandSpec) -> None:
    cfg = spec.config
    _require(spec.args.baseline, "baseline checkpoint")
    baseline, _ = load_baseline(spec.args.baseline)
    splits, digest = _dataset(spec, cfg)
    spec.out.mkdir(parents=True, exist_ok=True)
    bundle, rows = train_pdaf(cfg, splits, baseline, RngStream(cfg.seed))
    save_bundle(bundle, spec.out / "pdaf.ckpt", {"seed": cfg.seed, "dataset_digest": digest})
    write_csv(rows, spec.out / "train_log.csv", CSV_COLUMNS)
    _save_config(spec.out, cfg)
    log.info("PDAF bundle saved to %s", spec.out / "pdaf.ckpt")


def metrics_record(model: str, split: str, result, config: Config, dataset_digest: str) -> dict:
    per_class = [None if math.isnan(v) else float(v) for v in result.per_class]
    return {"model": model, "split": split, "per_class_iou": per_class, "miou": float(result.miou),
            "config_digest": config.digest(), "dataset_digest": dataset_digest}


def cmd_eval(spec: CommandSpec) -> None:
    _require(spec.args.checkpoint, "checkpoint")
    model, meta = load_any(spec.args.checkpoint)
    cfg = _checkpoint_config(spec, meta)
    mode = _resolve_mode(spec.args.mode, model)
    name = spec.args.name or mode
    splits, digest = _dataset(spec, cfg)
    records = []
    for split in EVAL_SPLITS:
        result = evaluate(model, splits[split], mode, RngStream(cfg.seed).child(7))
        records.append(metrics_record(name, split, result, cfg, digest))
        log.info("%s %s mIoU %.4f", name, split, result.miou)
    spec.out.mkdir(parents=True, exist_ok=True)
    path = spec.out / f"metrics_{name}.json"
    path.write_text(json.dumps(records, indent=1) + "\n")


def label_colors(K: int) -> np.ndarray:
    return np.array([class_color(k, K) if k else (0.0, 0.0, 0.0) for k in range(K)])


def cmd_infer(spec: CommandSpec) -> None:
    _require(spec.args.checkpoint, "checkpoint")
    model, meta = load_any(spec.args.checkpoint)
    cfg = _checkpoint_config(spec, meta)
    mode = _resolve_mode(spec.args.mode, model)
    spec.out.mkdir(parents=True, exist_ok=True)
    rng = RngStream(cfg.seed).child(7)
    colors = label_colors(cfg.num_classes)
    for index, path in enumerate(spec.args.input):
        _require(path, "input image")
        image = read_ppm(path.read_bytes())[None]
        if mode == "baseline":
            logits = predict_baseline(model.theta if isinstance(model, ModelBundle) else model, image)
        else:
            noise = inference_noise(model, rng, index, *image.shape[2:])[None]
            logits = predict_pdaf(model, image, noise)
        labels = logits.argmax(axis=1)[0].astype(np.uint8)
        (spec.out / f"{path.stem}_labels.pgm").write_bytes(write_pgm(labels))
        (spec.out / f"{path.stem}_color.ppm").write_bytes(write_ppm(colors[labels].transpose(2, 0, 1)))


def _load_records(path: Path) -> list[dict]:
    _require(path, "metrics file")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise PdafError(f"{path}: invalid JSON ({exc.msg})") from None
    records = raw if isinstance(raw, list) else [raw]
    for rec in records:
        if not isinstance(rec, dict) or set(rec) != set(METRIC_KEYS) \
                or not isinstance(rec["per_class_iou"], list):
            raise PdafError(f"{path}: not a metrics file (expected keys {', '.join(METRIC_KEYS)})")
    return records


def render_report(records: list[dict]) -> tuple[str, str]:
    """CSV and markdown text, one row per (model, split) plus a delta vs baseline."""
    K = max(len(r["per_class_iou"]) for r in records)
    base = {r["split"]: r["miou"] for r in records if r["model"] == "baseline"}
    header = ["model", "split", "miou", "delta_miou"] + [f"iou_{k}" for k in range(K)]
    rows = []
    split_rank = {s: i for i, s in enumerate(SPLITS)}
    for r in sorted(records, key=lambda r: (r["model"] != "baseline", r["model"],
                                            split_rank.get(r["split"], len(SPLITS)), r["split"])):
        delta = "" if r["model"] == "baseline" or r["split"] not in base \
            else f"{r['miou'] - base[r['split']]:+.4f}"
        ious = ["" if v is None else f"{v:.4f}" for v in r["per_class_iou"]]
        rows.append([r["model"], r["split"], f"{r['miou']:.4f}", delta] + ious + [""] * (K - len(ious)))
    if not base or all(r["model"] == "baseline" for r in records):
        header.remove("delta_miou")
        rows = [row[:3] + row[4:] for row in rows]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    md += ["| " + " | ".join(row) + " |" for row in rows]
    return buf.getvalue(), "\n".join(md) + "\n"


def cmd_report(spec: CommandSpec) -> None:
    records: list[dict] = []
    for path in spec.args.metrics:
        records.extend(_load_records(path))
    digests = sorted({r["dataset_digest"] for r in records})
    if len(digests) > 1:
        raise PdafError(f"metrics come from different datasets: {', '.join(digests)}")
    csv_text, md_text = render_report(records)
    spec.out.mkdir(parents=True, exist_ok=True)
    (spec.out / "report.csv").write_text(csv_text)
    (spec.out / "report.md").write_text(md_text)
    sys.stdout.write(md_text)


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "infer": cmd_infer, "report": cmd_report}


def run(spec: CommandSpec) -> int:
    try:
        HANDLERS[spec.command](spec)
    except (PdafError, OSError) as exc:
        print(f"pdaf {spec.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        spec = parse_and_validate(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())
