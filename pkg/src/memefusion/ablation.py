"""Ablation study driver.

Runs the five head configurations (full, no_mlp, no_mlp_preout,
no_mlp_preout_adapter, minimal) over identical data, split, and training
seeds, then renders a comparison table of mean ± std per metric.  Pairing
is guaranteed by construction: batch shuffling and parameter init derive
only from the training seed and epoch, never from the head configuration,
so scenario s and scenario s' see the same batch order every epoch.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal

from .errors import StateError
from .metrics import EvalReport, SeedAggregate
from .model import ABLATIONS, HeadConfig, param_manifest
from .trainer import TrainConfig, run_seeds

STUDY_CSV_HEADER = "scenario,metric,mean,std"
_METRICS = ("accuracy", "auroc", "macro_f1")
_TABLE_COLUMNS = ("scenario", "accuracy (%)", "auroc (%)", "macro_f1 (%)")


@dataclass(frozen=True)
class AblationRun:
    """Outcome of one scenario: per-seed test reports plus their aggregate."""

    scenario: str
    reports: dict[int, EvalReport]
    aggregate: SeedAggregate


@dataclass(frozen=True)
class StudyResult:
    runs: tuple[AblationRun, ...]
    table: str


def _fmt_percent(value: float) -> str:
    if math.isnan(value):
        return "n/a"
    return str(Decimal(repr(value * 100.0)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def format_mean_std(mean: float, std: float) -> str:
    """Render a metric pair as percentages, e.g. ``76.90 ± 0.55``."""
    if math.isnan(mean):
        return "n/a"
    return f"{_fmt_percent(mean)} ± {_fmt_percent(std)}"


def render_table(runs: tuple[AblationRun, ...] | list[AblationRun]) -> str:
    """Aligned text table: one row per scenario, one column per metric."""
    body = []
    for run in runs:
        agg = run.aggregate
        body.append(
            (
                run.scenario,
                format_mean_std(agg.mean_accuracy, agg.std_accuracy),
                format_mean_std(agg.mean_auroc, agg.std_auroc),
                format_mean_std(agg.mean_macro_f1, agg.std_macro_f1),
            )
        )
    widths = [
        max(len(_TABLE_COLUMNS[c]), *(len(row[c]) for row in body)) if body else len(_TABLE_COLUMNS[c])
        for c in range(len(_TABLE_COLUMNS))
    ]
    lines = [
        "  ".join(_TABLE_COLUMNS[c].ljust(widths[c]) for c in range(len(widths))).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in body:
        lines.append("  ".join(row[c].ljust(widths[c]) for c in range(len(widths))).rstrip())
    return "\n".join(lines) + "\n"


def _run_scenario(dataset, head_cfg: HeadConfig, train_cfg: TrainConfig, scenario: str) -> AblationRun:
    cfg = replace(head_cfg, ablation=scenario)
    out = run_seeds(dataset, cfg, train_cfg)
    expected = {name for name, _, _ in param_manifest(cfg)}
    for seed, ckpt in out.checkpoints.items():
        got = set(ckpt.params.names())
        if got != expected:
            raise StateError(
                f"scenario {scenario!r} seed {seed}: trained parameter set does not "
                f"match the configuration manifest"
            )
    return AblationRun(scenario=scenario, reports=out.reports, aggregate=out.aggregate)


def run_study(
    dataset,
    head_cfg: HeadConfig,
    train_cfg: TrainConfig,
    parallel: bool = False,
    max_workers: int | None = None,
) -> StudyResult:
    """Train every scenario under identical conditions and render the table.

    The base configuration's ablation field is ignored; each scenario
    overrides it.  Scenarios run sequentially unless ``parallel`` is set,
    in which case each runs in its own thread with no shared mutable state.
    """
    if parallel:
        with ThreadPoolExecutor(max_workers=max_workers or len(ABLATIONS)) as pool:
            runs = tuple(
                pool.map(lambda s: _run_scenario(dataset, head_cfg, train_cfg, s), ABLATIONS)
            )
    else:
        runs = tuple(_run_scenario(dataset, head_cfg, train_cfg, s) for s in ABLATIONS)
    return StudyResult(runs=runs, table=render_table(runs))


def write_study_csv(runs: tuple[AblationRun, ...] | list[AblationRun], path) -> None:
    """One row per (scenario, metric) with full-precision mean and std."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STUDY_CSV_HEADER.split(","))
        for run in runs:
            agg = run.aggregate
            for metric in _METRICS:
                writer.writerow(
                    [
                        run.scenario,
                        metric,
                        repr(getattr(agg, f"mean_{metric}")),
                        repr(getattr(agg, f"std_{metric}")),
                    ]
                )
