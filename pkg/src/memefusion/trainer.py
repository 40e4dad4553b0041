"""Training orchestration: the epoch loop with warmup-cosine scheduling
and clipping, per-epoch validation with best-checkpoint selection by
validation AUROC, multi-seed runs, per-step gradient-spread logging with
spike diagnostics, and versioned binary checkpoints.

Every random draw is keyed off the run seed through labeled stream
derivation, so a (dataset, head config, train config, seed) tuple fully
determines every logged number and checkpoint byte, and a run stopped at
an epoch boundary resumes bit-exactly.

Checkpoint format (all little-endian), version 1:

    magic "MBCK" (4 bytes), version u32, meta_len u32,
    meta: canonical JSON (head config echo, completed epochs,
          best validation AUROC, optimizer constants and step count),
    table: n_entries u32, then per entry: name_len u16, name (UTF-8),
           dtype u8 (0=float32, 1=float64), ndim u8, ndim x u32 dims,
    payload: raw tensor bytes in table order.

Table names carry a role prefix: "p:" parameter, "m:"/"v:" moments.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndcore
from .dataio import EmbeddingRecord, batches, split_of, to_arrays
from .errors import (
    ConfigError,
    CorruptionError,
    DataError,
    FormatError,
    ShapeError,
    StateError,
    VersionError,
)
from .metrics import EvalReport, SeedAggregate, aggregate, report_from_predictions
from .model import (
    HeadConfig,
    ParamStore,
    backward_head,
    forward,
    init_params,
    param_manifest,
)
from .optim import (
    LrSchedule,
    OptimState,
    adamw_step,
    clip_global_norm,
    cross_entropy,
    global_grad_norm,
    init_optim,
    lr_at,
    per_sample_nll,
    softmax,
)

CKPT_MAGIC = b"MBCK"
CKPT_VERSION = 1

EPOCH_CSV_HEADER = "epoch,train_loss,val_acc,val_auroc,val_f1,lr"
GRADSTD_CSV_HEADER = "epoch,step,param,grad_std"
DIAGNOSE_CSV_HEADER = "epoch,param,mean_std,max_std,flagged"


@dataclass(frozen=True)
class TrainConfig:
    """The training protocol; defaults are the published recipe."""

    epochs: int = 12
    base_lr: float = 5e-5
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    warmup_epochs: int = 3
    batch_size: int = 64
    seeds: tuple[int, ...] = (0, 1, 2)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch_size: int = 256
    debug_checks: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.epochs:
            raise ConfigError(
                f"warmup_epochs must be in [0, epochs), got {self.warmup_epochs} "
                f"with epochs={self.epochs}"
            )
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr and weight_decay must be >= 0")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")


@dataclass(frozen=True)
class EpochStat:
    epoch: int
    train_loss: float
    val_acc: float
    val_auroc: float
    val_f1: float
    lr: float


@dataclass(frozen=True)
class StepStat:
    epoch: int
    step: int
    loss: float
    lr: float
    grad_norm: float
    clip_scale: float
    post_clip_norm: float


@dataclass
class GradStdLog:
    """Per-step, per-parameter spread of gradient elements."""

    rows: list[tuple[int, int, str, float]] = field(default_factory=list)

    def record(self, epoch: int, step: int, params: ParamStore) -> None:
        for name in params.names():
            self.rows.append((epoch, step, name, float(params.grad(name).std())))

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(GRADSTD_CSV_HEADER + "\n")
            for epoch, step, name, std in self.rows:
                fh.write(f"{epoch},{step},{name},{std!r}\n")

    @classmethod
    def from_csv(cls, path) -> "GradStdLog":
        log = cls()
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != GRADSTD_CSV_HEADER:
                raise FormatError(
                    f"unexpected gradient-log header {header!r}, "
                    f"expected {GRADSTD_CSV_HEADER!r}"
                )
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 4:
                    raise FormatError(f"line {lineno}: expected 4 fields, got {len(parts)}")
                try:
                    log.rows.append((int(parts[0]), int(parts[1]), parts[2], float(parts[3])))
                except ValueError as exc:
                    raise FormatError(f"line {lineno}: {exc}") from exc
        if not log.rows:
            raise DataError(f"{path}: empty gradient log")
        return log


@dataclass
class Checkpoint:
    """A reloadable training snapshot; forward outputs reproduce bit-exactly."""

    head_cfg: HeadConfig
    params: ParamStore
    opt: OptimState
    epoch: int  # completed epochs at snapshot time
    best_val_auroc: float
    version: int = CKPT_VERSION


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    epoch_log: list[EpochStat]
    grad_log: GradStdLog
    step_stats: list[StepStat]


def _copy_opt(opt: OptimState) -> OptimState:
    return OptimState(
        m={k: v.copy() for k, v in opt.m.items()},
        v={k: v.copy() for k, v in opt.v.items()},
        t=opt.t,
        base_lr=opt.base_lr,
        weight_decay=opt.weight_decay,
        beta1=opt.beta1,
        beta2=opt.beta2,
        eps=opt.eps,
    )


def _snapshot(cfg, params, opt, epoch, best_val_auroc) -> Checkpoint:
    return Checkpoint(cfg, params.copy(), _copy_opt(opt), epoch, best_val_auroc)


def _evaluate_arrays(params, cfg, records, eval_batch_size) -> EvalReport:
    preds_parts = []
    score_parts = []
    labels_parts = []
    for batch in batches(records, eval_batch_size):
        x_img, x_txt, y = to_arrays(batch)
        logits, _ = forward((x_img, x_txt), params, cfg, mode="eval")
        preds_parts.append(np.argmax(logits, axis=-1))
        score_parts.append(softmax(logits)[:, 1])
        labels_parts.append(y)
    return report_from_predictions(
        np.concatenate(preds_parts),
        np.concatenate(score_parts),
        np.concatenate(labels_parts),
    )


def train(
    dataset: list[EmbeddingRecord],
    head_cfg: HeadConfig,
    train_cfg: TrainConfig,
    seed: int,
    stop_after_epoch: int | None = None,
    resume_last: Checkpoint | None = None,
    resume_best: Checkpoint | None = None,
) -> TrainResult:
    """Run the training protocol for one seed.

    Each step: training-mode forward, cross-entropy, backward, global-norm
    clip, then one scheduled optimizer update.  Validation runs after each
    epoch; the checkpoint with the highest validation AUROC is kept, ties
    resolved toward the earlier epoch.  ``stop_after_epoch`` ends the run
    early at an epoch boundary; passing that run's last and best
    checkpoints back via ``resume_last``/``resume_best`` (with the same
    seed and configs) continues it bit-exactly.
    """
    train_records = split_of(dataset, "train")
    val_records = split_of(dataset, "val")
    if not train_records:
        raise DataError("training requires a non-empty train split")
    if not val_records:
        raise DataError("training requires a non-empty val split")
    val_labels = {r.label for r in val_records}
    if len(val_labels) < 2:
        raise DataError(
            "validation split contains a single class; validation AUROC "
            "(the checkpoint-selection metric) is undefined"
        )

    cfg = replace(head_cfg, init_seed=ndcore.derive_seed(seed, "init"))
    end_epoch = train_cfg.epochs if stop_after_epoch is None else stop_after_epoch
    if not 0 < end_epoch <= train_cfg.epochs:
        raise ConfigError(
            f"stop_after_epoch must be in [1, {train_cfg.epochs}], got {stop_after_epoch}"
        )

    if resume_last is not None:
        if resume_last.head_cfg != cfg:
            raise ConfigError(
                "resume checkpoint was produced under a different head "
                "configuration or seed"
            )
        if resume_best is None:
            raise ConfigError("resuming requires both the last and best checkpoints")
        if resume_best.head_cfg != cfg:
            raise ConfigError(
                "best checkpoint was produced under a different head "
                "configuration or seed"
            )
        params = resume_last.params.copy()
        opt = _copy_opt(resume_last.opt)
        start_epoch = resume_last.epoch
        best = _snapshot(
            resume_best.head_cfg,
            resume_best.params,
            resume_best.opt,
            resume_best.epoch,
            resume_best.best_val_auroc,
        )
    else:
        params = init_params(cfg, ndcore.make_rng(cfg.init_seed))
        opt = init_optim(
            params,
            base_lr=train_cfg.base_lr,
            weight_decay=train_cfg.weight_decay,
            beta1=train_cfg.beta1,
            beta2=train_cfg.beta2,
            eps=train_cfg.eps,
        )
        start_epoch = 0
        best = None

    steps_per_epoch = math.ceil(len(train_records) / train_cfg.batch_size)
    sched = LrSchedule(
        base_lr=train_cfg.base_lr,
        warmup_epochs=train_cfg.warmup_epochs,
        total_epochs=train_cfg.epochs,
        steps_per_epoch=steps_per_epoch,
    )
    shuffle_seed = ndcore.derive_seed(seed, "shuffle")

    epoch_log: list[EpochStat] = []
    grad_log = GradStdLog()
    step_stats: list[StepStat] = []

    for epoch in range(start_epoch, end_epoch):
        sample_losses: list[float] = []
        lr_t = 0.0
        for i, batch in enumerate(
            batches(train_records, train_cfg.batch_size, shuffle_seed, epoch)
        ):
            global_step = epoch * steps_per_epoch + i
            params.zero_grads()
            rng = ndcore.make_rng(ndcore.derive_seed(seed, f"dropout:e{epoch}:b{i}"))
            x_img, x_txt, y = to_arrays(batch)
            logits, trace = forward((x_img, x_txt), params, cfg, mode="train", rng=rng)
            loss, dlogits = cross_entropy(logits, y)
            backward_head(trace, dlogits, params)
            grad_log.record(epoch, global_step, params)
            pre_norm = global_grad_norm(params)
            scale = clip_global_norm(params, train_cfg.clip_norm)
            post_norm = global_grad_norm(params)
            if train_cfg.debug_checks:
                assert post_norm <= train_cfg.clip_norm + 1e-9, post_norm
            lr_t = lr_at(sched, global_step)
            adamw_step(params, opt, lr_t)
            sample_losses.extend(float(v) for v in per_sample_nll(logits, y))
            step_stats.append(
                StepStat(epoch, global_step, loss, lr_t, pre_norm, scale, post_norm)
            )
        val_report = _evaluate_arrays(params, cfg, val_records, train_cfg.eval_batch_size)
        epoch_log.append(
            EpochStat(
                epoch=epoch,
                # exactly-rounded sum, so the epoch loss is independent of
                # the shuffle order the samples arrived in
                train_loss=math.fsum(sample_losses) / len(sample_losses),
                val_acc=val_report.accuracy,
                val_auroc=val_report.auroc,
                val_f1=val_report.macro_f1,
                lr=lr_t,
            )
        )
        if best is None or val_report.auroc > best.best_val_auroc:
            best = _snapshot(cfg, params, opt, epoch + 1, val_report.auroc)

    last = _snapshot(cfg, params, opt, end_epoch, best.best_val_auroc)
    return TrainResult(best, last, epoch_log, grad_log, step_stats)


def evaluate(checkpoint: Checkpoint, dataset: list[EmbeddingRecord], split: str) -> EvalReport:
    """Eval-mode metrics of a checkpoint on one split: argmax predictions,
    class-1 softmax scores for AUROC."""
    records = split_of(dataset, split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    return _evaluate_arrays(
        checkpoint.params, checkpoint.head_cfg, records, eval_batch_size=256
    )


@dataclass
class RunSeedsResult:
    aggregate: SeedAggregate
    reports: dict[int, EvalReport]
    checkpoints: dict[int, Checkpoint]


def run_seeds(
    dataset: list[EmbeddingRecord], head_cfg: HeadConfig, train_cfg: TrainConfig
) -> RunSeedsResult:
    """Full train + test evaluation per seed, aggregated order-free."""
    reports: dict[int, EvalReport] = {}
    checkpoints: dict[int, Checkpoint] = {}
    for seed in train_cfg.seeds:
        result = train(dataset, head_cfg, train_cfg, seed)
        reports[seed] = evaluate(result.best, dataset, "test")
        checkpoints[seed] = result.best
    agg = aggregate([reports[s] for s in sorted(reports)])
    return RunSeedsResult(agg, reports, checkpoints)


# ---------------------------------------------------------------------------
# gradient diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiagnoseRow:
    epoch: int
    param: str
    mean_std: float
    max_std: float


@dataclass
class DiagnoseReport:
    """Per-epoch gradient-spread summary plus flagged spiky parameters.

    A parameter is flagged when its largest step-level spread exceeds
    spike_factor times the median of its per-epoch means.
    """

    rows: list[DiagnoseRow]
    flagged: list[str]
    spike_factor: float

    def to_csv(self, path) -> None:
        flagged = set(self.flagged)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(DIAGNOSE_CSV_HEADER + "\n")
            for row in self.rows:
                fh.write(
                    f"{row.epoch},{row.param},{row.mean_std!r},{row.max_std!r},"
                    f"{int(row.param in flagged)}\n"
                )


def grad_diagnose(grad_log: GradStdLog, spike_factor: float = 10.0) -> DiagnoseReport:
    """Summarize a gradient-spread log and flag spiking parameters."""
    if spike_factor <= 0:
        raise ConfigError("spike_factor must be > 0")
    if not grad_log.rows:
        raise DataError("gradient log is empty")

    per_epoch: dict[tuple[int, str], list[float]] = {}
    for epoch, _step, name, std in grad_log.rows:
        per_epoch.setdefault((epoch, name), []).append(std)

    rows = [
        DiagnoseRow(epoch, name, float(np.mean(vals)), float(np.max(vals)))
        for (epoch, name), vals in sorted(per_epoch.items())
    ]

    epoch_means: dict[str, list[float]] = {}
    global_max: dict[str, float] = {}
    for row in rows:
        epoch_means.setdefault(row.param, []).append(row.mean_std)
        global_max[row.param] = max(global_max.get(row.param, 0.0), row.max_std)

    flagged = []
    for name in sorted(epoch_means):
        median = float(np.median(epoch_means[name]))
        peak = global_max[name]
        if peak > 0 and peak > spike_factor * median:
            flagged.append(name)
    return DiagnoseReport(rows, flagged, spike_factor)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

_CKPT_FIXED = struct.Struct("<4sII")
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    name_bytes = name.encode("utf-8")
    if arr.dtype not in _DTYPE_CODES:
        raise ConfigError(f"cannot serialize tensor {name!r} of dtype {arr.dtype}")
    head = struct.pack("<H", len(name_bytes)) + name_bytes
    head += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "head_cfg": {
            k: getattr(ckpt.head_cfg, k) for k in ckpt.head_cfg.__dataclass_fields__
        },
        "epoch": ckpt.epoch,
        "best_val_auroc": ckpt.best_val_auroc,
        "optim": {
            "t": ckpt.opt.t,
            "base_lr": ckpt.opt.base_lr,
            "weight_decay": ckpt.opt.weight_decay,
            "beta1": ckpt.opt.beta1,
            "beta2": ckpt.opt.beta2,
            "eps": ckpt.opt.eps,
        },
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    names = ckpt.params.names()
    entries: list[tuple[str, np.ndarray]] = []
    for name in names:
        entries.append((f"p:{name}", ckpt.params[name]))
    for name in names:
        entries.append((f"m:{name}", ckpt.opt.m[name]))
    for name in names:
        entries.append((f"v:{name}", ckpt.opt.v[name]))

    out = bytearray()
    out += _CKPT_FIXED.pack(CKPT_MAGIC, ckpt.version, len(meta_bytes))
    out += meta_bytes
    out += struct.pack("<I", len(entries))
    for name, arr in entries:
        out += _pack_entry(name, arr)
    for _name, arr in entries:
        out += np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return bytes(out)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(ckpt))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _CKPT_FIXED.size:
        raise CorruptionError(f"file ends inside the header at byte {len(buf)}")
    magic, version, meta_len = _CKPT_FIXED.unpack(buf[: _CKPT_FIXED.size])
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}, expected {CKPT_VERSION}")
    offset = _CKPT_FIXED.size

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        chunk = buf[offset : offset + n]
        if len(chunk) < n:
            raise CorruptionError(f"file truncated reading {what} at byte {offset}")
        offset += n
        return chunk

    try:
        meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"checkpoint metadata is unreadable: {exc}") from exc
    try:
        cfg = HeadConfig(**meta["head_cfg"])
        epoch = int(meta["epoch"])
        best_val_auroc = float(meta["best_val_auroc"])
        om = meta["optim"]
        opt_scalars = (
            int(om["t"]),
            float(om["base_lr"]),
            float(om["weight_decay"]),
            float(om["beta1"]),
            float(om["beta2"]),
            float(om["eps"]),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint metadata is malformed: {exc}") from exc

    (n_entries,) = struct.unpack("<I", take(4, "table size"))
    table: list[tuple[str, np.dtype, tuple[int, ...]]] = []
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2, "entry name length"))
        name = take(name_len, "entry name").decode("utf-8")
        dtype_code, ndim = struct.unpack("<BB", take(2, "entry dtype/ndim"))
        if dtype_code not in _CODE_DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype code {dtype_code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "entry dims"))
        table.append((name, _CODE_DTYPES[dtype_code], tuple(dims)))

    tensors: dict[str, np.ndarray] = {}
    for name, dtype, shape in table:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = take(count * dtype.itemsize, f"tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after tensor payload")

    manifest = param_manifest(cfg)
    expected = {name for name, _, _ in manifest}
    got = {n[2:] for n in tensors if n.startswith("p:")}
    if got != expected:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise FormatError(
            f"parameter set mismatch: missing {missing}, unexpected {extra}"
        )

    params = ParamStore()
    for name, shape, _kind in manifest:
        arr = tensors[f"p:{name}"]
        if arr.shape != shape:
            raise ShapeError(
                f"parameter {name!r}: stored shape {arr.shape} does not match "
                f"the configuration's {shape}"
            )
        params.add(name, arr)
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for name, shape, _kind in manifest:
        for role, dest in (("m", m), ("v", v)):
            key = f"{role}:{name}"
            if key not in tensors:
                raise FormatError(f"missing optimizer tensor {key!r}")
            if tensors[key].shape != shape:
                raise ShapeError(
                    f"optimizer tensor {key!r}: stored shape {tensors[key].shape} "
                    f"does not match the configuration's {shape}"
                )
            dest[name] = tensors[key]

    t, base_lr, weight_decay, beta1, beta2, eps = opt_scalars
    opt = OptimState(
        m=m, v=v, t=t, base_lr=base_lr, weight_decay=weight_decay,
        beta1=beta1, beta2=beta2, eps=eps,
    )
    return Checkpoint(cfg, params, opt, epoch, best_val_auroc, version)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def write_epoch_csv(epoch_log: list[EpochStat], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(EPOCH_CSV_HEADER + "\n")
        for s in epoch_log:
            fh.write(
                f"{s.epoch},{s.train_loss!r},{s.val_acc!r},{s.val_auroc!r},"
                f"{s.val_f1!r},{s.lr!r}\n"
            )
