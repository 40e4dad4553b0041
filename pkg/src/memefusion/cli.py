"""Command-line interface.

One executable exposes the pipeline: synth, split, train, eval, ablate,
diagnose, inspect, convert.  Every value a command consumes resolves with
the precedence flags > config file > environment > built-in default, where
the config file is a plain ``key = value`` text file and environment
overrides use the ``MEMEFUSION_`` prefix (for CI).  Commands that produce
files also write a run manifest recording the resolved configuration,
sha256 digests of every input file, the tool version, wall-clock time,
and output paths; the read-only ``inspect`` command embeds the same
manifest in its report instead.

Exit codes: 0 success, 2 usage or configuration error, 3 data or file
format error, 4 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .ablation import run_study, write_study_csv
from .dataio import (
    MAGIC,
    SPLITS,
    SyntheticSpec,
    read_dataset,
    read_header,
    read_jsonl,
    split_dataset,
    split_of,
    synth,
    write_dataset,
    write_jsonl,
)
from .errors import ConfigError, DataError, DimensionError, MemefusionError
from .metrics import EVAL_CSV_HEADER, EvalReport
from .model import ABLATIONS, HeadConfig
from .trainer import (
    CKPT_MAGIC,
    GradStdLog,
    TrainConfig,
    evaluate,
    grad_diagnose,
    load_checkpoint,
    save_checkpoint,
    train,
    write_epoch_csv,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

ENV_PREFIX = "MEMEFUSION_"


# ---------------------------------------------------------------------------
# flag schema and value resolution


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_seeds(text: str) -> tuple[int, ...]:
    parts = [p for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty seed list")
    return tuple(int(p) for p in parts)


def _parse_fractions(text: str) -> tuple[float, float, float]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise ValueError("expected three comma-separated fractions")
    a, b, c = (float(p) for p in parts)
    return (a, b, c)


_PARSE: dict[str, Callable[[str], object]] = {
    "int": int,
    "float": float,
    "str": str,
    "path": Path,
    "bool": _parse_bool,
    "seeds": _parse_seeds,
    "fractions": _parse_fractions,
}


@dataclass(frozen=True)
class Flag:
    name: str
    kind: str
    default: object = None
    help: str = ""
    required: bool = False
    choices: tuple[str, ...] = ()
    aliases: tuple[str, ...] = ()

    @property
    def option(self) -> str:
        return "--" + self.name.replace("_", "-")


def _head_flags() -> list[Flag]:
    return [
        Flag("img_dim", "int", None, "image embedding width (default: dataset header)"),
        Flag("txt_dim", "int", None, "text embedding width (default: dataset header)"),
        Flag("shared_dim", "int", 1024, "projection target width"),
        Flag("proj_layers", "int", 2, "layers per projection block"),
        Flag("adapter_reduction", "float", 1.5, "adapter bottleneck reduction factor"),
        Flag("adapter_alpha_init", "float", 0.1, "initial adapter residual gain"),
        Flag("mix_beta", "float", 0.2, "adapted-feature share in the convex mix"),
        Flag("dropout_proj", "float", 0.1, "projection dropout rate"),
        Flag("dropout_adapter", "float", 0.1, "adapter dropout rate"),
        Flag("dropout_preout", "float", 0.1, "pre-output dropout rate"),
        Flag("dropout_cls", "float", 0.2, "classifier dropout rate"),
        Flag("num_classes", "int", 2, "output classes"),
        Flag("cls_hidden_dim", "int", 0, "classifier hidden width (0 = shared//2)"),
    ]


def _train_flags() -> list[Flag]:
    return [
        Flag("epochs", "int", 12, "training epochs"),
        Flag("base_lr", "float", 5e-5, "peak learning rate", aliases=("--lr",)),
        Flag("weight_decay", "float", 1e-4, "decoupled weight decay"),
        Flag("clip_norm", "float", 1.0, "global gradient norm bound"),
        Flag("warmup_epochs", "int", 3, "linear warmup epochs"),
        Flag("batch_size", "int", 64, "training batch size"),
        Flag("eval_batch_size", "int", 256, "evaluation batch size"),
        Flag("beta1", "float", 0.9, "first-moment decay"),
        Flag("beta2", "float", 0.999, "second-moment decay"),
        Flag("eps", "float", 1e-8, "denominator stabilizer"),
        Flag("debug_checks", "bool", False, "enable slow invariant checks"),
    ]


COMMAND_FLAGS: dict[str, list[Flag]] = {
    "synth": [
        Flag("n", "int", 2000, "number of records"),
        Flag("img_dim", "int", 1408, "image embedding width"),
        Flag("txt_dim", "int", 768, "text embedding width"),
        Flag("separation", "float", 6.0, "distance between class means"),
        Flag("noise", "float", 0.0, "label flip probability"),
        Flag("seed", "int", 0, "generator seed"),
        Flag("out", "path", None, "output dataset path", required=True),
    ],
    "split": [
        Flag("data", "path", None, "input dataset", required=True),
        Flag("out", "path", None, "output dataset path", required=True),
        Flag("fractions", "fractions", (0.85, 0.05, 0.10), "train,val,test fractions"),
        Flag("seed", "int", 0, "split shuffle seed"),
    ],
    "train": [
        Flag("data", "path", None, "input dataset (needs train and val splits)", required=True),
        Flag("out_dir", "path", None, "directory for checkpoints and logs", required=True),
        Flag("seed", "int", 0, "training seed"),
        Flag("ablation", "str", "full", "head configuration", choices=ABLATIONS),
        *_head_flags(),
        *_train_flags(),
    ],
    "eval": [
        Flag("checkpoint", "path", None, "trained checkpoint", required=True),
        Flag("data", "path", None, "dataset to evaluate on", required=True),
        Flag("split", "str", "test", "split to evaluate", choices=SPLITS),
        Flag("seed", "int", 0, "seed label recorded in the output row"),
        Flag("out", "path", None, "output CSV (default: eval_<split>.csv beside the checkpoint)"),
    ],
    "ablate": [
        Flag("data", "path", None, "input dataset (needs all three splits)", required=True),
        Flag("out_dir", "path", None, "directory for study outputs", required=True),
        Flag("seeds", "seeds", (0, 1, 2), "comma-separated training seeds"),
        Flag("parallel", "int", 0, "scenario worker threads (0 = sequential)"),
        *_head_flags(),
        *_train_flags(),
    ],
    "diagnose": [
        Flag("grad_log", "path", None, "per-step gradient spread CSV from train", required=True),
        Flag("spike_factor", "float", 10.0, "flag threshold over the median epoch spread"),
        Flag("out", "path", None, "output CSV (default: diagnose.csv beside the log)"),
    ],
    "inspect": [
        Flag("validate", "bool", False, "fully parse and validate the file"),
    ],
    "convert": [
        Flag("data", "path", None, "input dataset (.mbe2 or .jsonl)", required=True),
        Flag("out", "path", None, "output path; direction follows the extensions", required=True),
    ],
}


def load_config_file(path: Path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blanks skipped."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigError(f"{path}: line {lineno}: empty key")
        values[key] = value.strip()
    return values


def resolve_config(command: str, args: argparse.Namespace) -> dict[str, object]:
    """Merge flag, file, environment, and default values per flag."""
    schema = COMMAND_FLAGS[command]
    known = {f.name for f in schema}
    file_values: dict[str, str] = {}
    if getattr(args, "config", None) is not None:
        file_values = load_config_file(args.config)
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ConfigError(
                f"config file {args.config}: unknown key(s) for {command}: {', '.join(unknown)}"
            )
    resolved: dict[str, object] = {}
    for flag in schema:
        value = getattr(args, flag.name)
        if value is None:
            text = file_values.get(flag.name)
            if text is None:
                text = os.environ.get(ENV_PREFIX + flag.name.upper())
            if text is not None:
                try:
                    value = _PARSE[flag.kind](text)
                except ValueError as exc:
                    raise ConfigError(f"invalid value for {flag.name}: {exc}") from exc
        if value is None:
            value = flag.default
        if value is None and flag.required:
            raise ConfigError(f"missing required flag {flag.option}")
        if flag.choices and value is not None and value not in flag.choices:
            raise ConfigError(
                f"invalid value for {flag.name}: {value!r} (choose from {', '.join(flag.choices)})"
            )
        resolved[flag.name] = value
    return resolved


# ---------------------------------------------------------------------------
# run manifests


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    version: str = __version__
    started: float = field(default_factory=time.perf_counter, repr=False, compare=False)

    def add_input(self, path) -> None:
        digest = hashlib.sha256()
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                digest.update(chunk)
        self.inputs[str(path)] = "sha256:" + digest.hexdigest()

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "version": self.version,
            "config": _jsonable(self.config),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_clock_seconds": round(time.perf_counter() - self.started, 6),
        }

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _jsonable(value):
    """Coerce to types the strict JSON encoder accepts; NaN becomes null."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        value = float(value)
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def _emit(doc: dict, json_mode: bool, human: str) -> None:
    if json_mode:
        sys.stdout.write(json.dumps(_jsonable(doc), indent=2, sort_keys=True, allow_nan=False) + "\n")
    elif human:
        sys.stdout.write(human if human.endswith("\n") else human + "\n")


# ---------------------------------------------------------------------------
# command handlers


def _report_dict(report: EvalReport) -> dict:
    return {
        "accuracy": report.accuracy,
        "auroc": report.auroc,
        "macro_f1": report.macro_f1,
        "tp": report.tp,
        "tn": report.tn,
        "fp": report.fp,
        "fn": report.fn,
        "n": report.n,
    }


def cmd_synth(cfg: dict, manifest: RunManifest, json_mode: bool) -> None:
    spec = SyntheticSpec(
        n=cfg["n"],
        img_dim=cfg["img_dim"],
        txt_dim=cfg["txt_dim"],
        class_separation=cfg["separation"],
        label_noise=cfg["noise"],
        seed=cfg["seed"],
    )
    records = synth(spec)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(records, out)
    manifest.outputs.append(str(out))
    manifest.write(out.with_name(out.name + ".manifest.json"))
    _emit(
        {"command": "synth", "records": len(records), "out": str(out)},
        json_mode,
        f"wrote {len(records)} records to {out}",
    )


def cmd_split(cfg: dict, manifest: RunManifest, json_mode: bool) -> None:
    manifest.add_input(cfg["data"])
    records = read_dataset(cfg["data"])
    assigned = split_dataset(records, fractions=cfg["fractions"], seed=cfg["seed"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(assigned, out)
    counts = {name: len(split_of(assigned, name)) for name in SPLITS}
    manifest.outputs.append(str(out))
    manifest.write(out.with_name(out.name + ".manifest.json"))
    _emit(
        {"command": "split", "counts": counts, "out": str(out)},
        json_mode,
        " ".join(f"{name}={counts[name]}" for name in SPLITS) + f" -> {out}",
    )


def _head_config_from(cfg: dict, data_path) -> HeadConfig:
    header = read_header(data_path)
    return HeadConfig(
        img_dim=cfg["img_dim"] if cfg["img_dim"] is not None else header.img_dim,
        txt_dim=cfg["txt_dim"] if cfg["txt_dim"] is not None else header.txt_dim,
        shared_dim=cfg["shared_dim"],
        proj_layers=cfg["proj_layers"],
        adapter_reduction=cfg["adapter_reduction"],
        adapter_alpha_init=cfg["adapter_alpha_init"],
        mix_beta=cfg["mix_beta"],
        dropout_proj=cfg["dropout_proj"],
        dropout_adapter=cfg["dropout_adapter"],
        dropout_preout=cfg["dropout_preout"],
        dropout_cls=cfg["dropout_cls"],
        num_classes=cfg["num_classes"],
        ablation=cfg.get("ablation", "full"),
        cls_hidden_dim=cfg["cls_hidden_dim"],
    )


def _train_config_from(cfg: dict, seeds: tuple[int, ...]) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["epochs"],
        base_lr=cfg["base_lr"],
        weight_decay=cfg["weight_decay"],
        clip_norm=cfg["clip_norm"],
        warmup_epochs=cfg["warmup_epochs"],
        batch_size=cfg["batch_size"],
        seeds=seeds,
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        eps=cfg["eps"],
        eval_batch_size=cfg["eval_batch_size"],
        debug_checks=cfg["debug_checks"],
    )


def cmd_train(cfg: dict, manifest: RunManifest, json_mode: bool) -> None:
    manifest.add_input(cfg["data"])
    records = read_dataset(cfg["data"])
    head_cfg = _head_config_from(cfg, cfg["data"])
    train_cfg = _train_config_from(cfg, seeds=(cfg["seed"],))
    result = train(records, head_cfg, train_cfg, seed=cfg["seed"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "best": out_dir / "best.mbck",
        "last": out_dir / "last.mbck",
        "epochs": out_dir / "epochs.csv",
        "grad_std": out_dir / "grad_std.csv",
    }
    save_checkpoint(result.best, paths["best"])
    save_checkpoint(result.last, paths["last"])
    write_epoch_csv(result.epoch_log, paths["epochs"])
    result.grad_log.to_csv(paths["grad_std"])
    manifest.outputs.extend(str(p) for p in paths.values())
    manifest.write(out_dir / "manifest.json")
    final = result.epoch_log[-1]
    _emit(
        {
            "command": "train",
            "epochs": len(result.epoch_log),
            "best_val_auroc": result.best.best_val_auroc,
            "best_epoch": result.best.epoch,
            "final": {
                "train_loss": final.train_loss,
                "val_acc": final.val_acc,
                "val_auroc": final.val_auroc,
                "val_f1": final.val_f1,
            },
            "outputs": {k: str(v) for k, v in paths.items()},
        },
        json_mode,
        (
            f"trained {len(result.epoch_log)} epochs; best val auroc "
            f"{result.best.best_val_auroc:.4f} at epoch {result.best.epoch}; "
            f"artifacts in {out_dir}"
        ),
    )


def cmd_eval(cfg: dict, manifest: RunManifest, json_mode: bool) -> None:
    manifest.add_input(cfg["checkpoint"])
    manifest.add_input(cfg["data"])
    ckpt = load_checkpoint(cfg["checkpoint"])
    records = read_dataset(cfg["data"])
    report = evaluate(ckpt, records, cfg["split"])
    out = cfg["out"]
    if out is None:
        out = Path(cfg["checkpoint"]).parent / f"eval_{cfg['split']}.csv"
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(EVAL_CSV_HEADER + "\n" + report.to_csv_row(cfg["seed"], cfg["split"]) + "\n")
    manifest.outputs.append(str(out))
    manifest.write(out.with_name(out.name + ".manifest.json"))
    _emit(
        {"command": "eval", "split": cfg["split"], "report": _report_dict(report), "out": str(out)},
        json_mode,
        report.to_kv(),
    )


def cmd_ablate(cfg: dict, manifest: RunManifest, json_mode: bool) -> None:
    if cfg["parallel"] < 0:
        raise ConfigError("parallel must be >= 0")
    manifest.add_input(cfg["data"])
    records = read_dataset(cfg["data"])
    head_cfg = _head_config_from(cfg, cfg["data"])
    train_cfg = _train_config_from(cfg, seeds=tuple(cfg["seeds"]))
    study = run_study(
        records,
        head_cfg,
        train_cfg,
        parallel=cfg["parallel"] > 0,
        max_workers=cfg["parallel"] or None,
    )
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "study.csv"
    table_path = out_dir / "table.txt"
    write_study_csv(study.runs, csv_path)
    table_path.write_text(study.table)
    manifest.outputs.extend([str(csv_path), str(table_path)])
    manifest.write(out_dir / "manifest.json")
    _emit(
        {
            "command": "ablate",
            "runs": [
                {
                    "scenario": run.scenario,
                    "mean_accuracy": run.aggregate.mean_accuracy,
                    "std_accuracy": run.aggregate.std_accuracy,
                    "mean_auroc": run.aggregate.mean_auroc,
                    "std_auroc": run.aggregate.std_auroc,
                    "mean_macro_f1": run.aggregate.mean_macro_f1,
                    "std_macro_f1": run.aggregate.std_macro_f1,
                }
                for run in study.runs
            ],
            "outputs": {"csv": str(csv_path), "table": str(table_path)},
        },
        json_mode,
        study.table,
    )


def cmd_diagnose(cfg: dict, manifest: RunManifest, json_mode: bool) -> None:
    manifest.add_input(cfg["grad_log"])
    log = GradStdLog.from_csv(cfg["grad_log"])
    report = grad_diagnose(log, spike_factor=cfg["spike_factor"])
    out = cfg["out"]
    if out is None:
        out = Path(cfg["grad_log"]).parent / "diagnose.csv"
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    manifest.outputs.append(str(out))
    manifest.write(out.with_name(out.name + ".manifest.json"))
    if report.flagged:
        human = "flagged parameters: " + ", ".join(report.flagged)
    else:
        human = "no gradient spikes flagged"
    _emit(
        {
            "command": "diagnose",
            "flagged": list(report.flagged),
            "summary_rows": len(report.rows),
            "out": str(out),
        },
        json_mode,
        human + f"\nwrote {len(report.rows)} summary rows to {out}",
    )


def _sniff_kind(path: Path) -> str:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == MAGIC:
        return "dataset"
    if magic == CKPT_MAGIC:
        return "checkpoint"
    raise DataError(f"{path}: unrecognized file magic {magic!r}")


def _inspect_dataset(path: Path, validate: bool) -> tuple[dict, str]:
    header = read_header(path)
    doc: dict = {
        "kind": "dataset",
        "count": header.count,
        "img_dim": header.img_dim,
        "txt_dim": header.txt_dim,
        "format_version": header.version,
    }
    lines = [
        f"dataset {path}",
        f"  records: {header.count}",
        f"  dims: img={header.img_dim} txt={header.txt_dim}",
    ]
    if validate:
        records = read_dataset(path)
        for record in records:
            record.validate(header.img_dim, header.txt_dim)
        split_counts = {name: len(split_of(records, name)) for name in SPLITS}
        label_counts = {
            "0": sum(1 for r in records if r.label == 0),
            "1": sum(1 for r in records if r.label == 1),
        }
        doc.update({"valid": True, "splits": split_counts, "labels": label_counts})
        lines.append(
            "  splits: " + " ".join(f"{k}={v}" for k, v in split_counts.items())
        )
        lines.append(
            "  labels: " + " ".join(f"{k}={v}" for k, v in label_counts.items())
        )
        lines.append("  valid: yes")
    return doc, "\n".join(lines)


def _inspect_checkpoint(path: Path) -> tuple[dict, str]:
    ckpt = load_checkpoint(path)
    params = []
    for name in ckpt.params.names():
        tensor = ckpt.params[name]
        digest = hashlib.sha256(np.ascontiguousarray(tensor).tobytes()).hexdigest()
        params.append(
            {"name": name, "shape": list(tensor.shape), "sha256": digest}
        )
    head = ckpt.head_cfg
    doc = {
        "kind": "checkpoint",
        "epoch": ckpt.epoch,
        "best_val_auroc": ckpt.best_val_auroc,
        "head": {
            "img_dim": head.img_dim,
            "txt_dim": head.txt_dim,
            "shared_dim": head.shared_dim,
            "ablation": head.ablation,
            "init_seed": head.init_seed,
        },
        "optim": {
            "t": ckpt.opt.t,
            "base_lr": ckpt.opt.base_lr,
            "weight_decay": ckpt.opt.weight_decay,
        },
        "params": params,
    }
    lines = [
        f"checkpoint {path}",
        f"  epoch: {ckpt.epoch}  best_val_auroc: {ckpt.best_val_auroc:.6f}",
        f"  head: dims {head.img_dim}/{head.txt_dim} -> {head.shared_dim}, "
        f"ablation {head.ablation}",
        f"  optim: t={ckpt.opt.t} lr={ckpt.opt.base_lr} wd={ckpt.opt.weight_decay}",
        f"  parameters ({len(params)}):",
    ]
    for entry in params:
        shape = "x".join(str(d) for d in entry["shape"]) or "scalar"
        lines.append(f"    {entry['name']}  [{shape}]  sha256:{entry['sha256'][:16]}")
    return doc, "\n".join(lines)


def cmd_inspect(cfg: dict, manifest: RunManifest, json_mode: bool, path: Path) -> None:
    manifest.add_input(path)
    kind = _sniff_kind(path)
    if kind == "dataset":
        doc, human = _inspect_dataset(path, cfg["validate"])
    else:
        doc, human = _inspect_checkpoint(path)
    doc["manifest"] = manifest.to_dict()
    _emit(doc, json_mode, human)


def cmd_convert(cfg: dict, manifest: RunManifest, json_mode: bool) -> None:
    src = Path(cfg["data"])
    out = Path(cfg["out"])
    manifest.add_input(src)
    with open(src, "rb") as fh:
        records = read_dataset(src) if fh.read(4) == MAGIC else read_jsonl(src)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".jsonl":
        write_jsonl(records, out)
    else:
        write_dataset(records, out)
    manifest.outputs.append(str(out))
    manifest.write(out.with_name(out.name + ".manifest.json"))
    _emit(
        {"command": "convert", "records": len(records), "out": str(out)},
        json_mode,
        f"converted {len(records)} records to {out}",
    )


# ---------------------------------------------------------------------------
# parser assembly and entry point

_COMMAND_HELP = {
    "synth": "generate a labeled synthetic embedding dataset",
    "split": "assign stratified train/val/test tags to a dataset",
    "train": "train the fusion head and write checkpoints plus logs",
    "eval": "score a checkpoint on one split of a dataset",
    "ablate": "run the five-configuration study and render the table",
    "diagnose": "summarize per-parameter gradient spread and flag spikes",
    "inspect": "describe a dataset or checkpoint file",
    "convert": "convert between the binary and JSON-lines dataset formats",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memefusion",
        description="train and evaluate the meme fusion head on embedding datasets",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, flags in COMMAND_FLAGS.items():
        sub = subparsers.add_parser(command, help=_COMMAND_HELP[command])
        if command == "inspect":
            sub.add_argument("path", type=Path, help="dataset or checkpoint file")
        for flag in flags:
            options = (flag.option,) + flag.aliases
            if flag.kind == "bool":
                sub.add_argument(
                    *options,
                    dest=flag.name,
                    action=argparse.BooleanOptionalAction,
                    default=None,
                    help=flag.help,
                )
            else:
                sub.add_argument(
                    *options,
                    dest=flag.name,
                    type=_PARSE[flag.kind],
                    default=None,
                    help=flag.help,
                    metavar=flag.kind.upper(),
                )
        sub.add_argument(
            "--config",
            type=Path,
            default=None,
            help="key = value file; flags override it, it overrides MEMEFUSION_* env vars",
        )
        sub.add_argument(
            "--json",
            dest="json_mode",
            action="store_true",
            help="emit one machine-readable JSON document on stdout",
        )
    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
    "convert": cmd_convert,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args.command, args)
        manifest = RunManifest(command=args.command, config=dict(cfg))
        if args.command == "inspect":
            cmd_inspect(cfg, manifest, args.json_mode, args.path)
        else:
            _HANDLERS[args.command](cfg, manifest, args.json_mode)
        return EXIT_OK
    except (ConfigError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MemefusionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
