"""Loss, optimizer, learning-rate schedule, and gradient clipping.

Training uses softmax cross-entropy with mean reduction, AdamW in the
decoupled form where the weight-decay term shares the scheduled step
size with the moment update, a per-step linear-warmup/cosine-annealing
schedule, and global-norm gradient clipping applied between backward
and the optimizer step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DimensionError, StateError
from .model import ParamStore
from .ndcore import Array


def softmax(logits: Array) -> Array:
    """Row-wise softmax with max-subtraction stabilization."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _checked_labels(logits: Array, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be [n, K], got shape {logits.shape}")
    n, k = logits.shape
    if n < 1:
        raise DataError("cross_entropy: empty batch")
    if labels.shape != (n,):
        raise DataError(
            f"cross_entropy: labels shape {labels.shape} does not match batch size {n}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"cross_entropy: labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        bad = int(labels[(labels < 0) | (labels >= k)][0])
        raise DataError(f"cross_entropy: label {bad} outside [0, {k})")
    return labels


def _log_softmax(logits: Array) -> Array:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def per_sample_nll(logits: Array, labels) -> Array:
    """Per-row negative log-likelihood of the true class, [n]."""
    labels = _checked_labels(logits, labels)
    log_p = _log_softmax(logits)
    return -log_p[np.arange(logits.shape[0]), labels]


def cross_entropy(
    logits: Array, labels, reduction: str = "mean"
) -> tuple[float, Array]:
    """Softmax cross-entropy and its gradient w.r.t. the logits.

    Returns (loss, dlogits) where dlogits = (softmax - onehot) / n under
    mean reduction.  ``reduction="sum"`` drops the 1/n for literal
    fidelity to a summed loss; mean is the default so the learning rate
    keeps its meaning across batch sizes.
    """
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    labels = _checked_labels(logits, labels)
    n = logits.shape[0]
    log_p = _log_softmax(logits)
    rows = np.arange(n)
    nll = -log_p[rows, labels]
    dlogits = np.exp(log_p)
    dlogits[rows, labels] -= 1.0
    if reduction == "mean":
        return float(nll.mean()), dlogits / n
    return float(nll.sum()), dlogits


@dataclass
class OptimState:
    """AdamW moment estimates plus the run's optimizer constants.

    m and v mirror parameter shapes; v stays elementwise nonnegative;
    t counts completed steps.
    """

    m: dict[str, Array]
    v: dict[str, Array]
    t: int
    base_lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optim(
    params: ParamStore,
    base_lr: float = 5e-5,
    weight_decay: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimState:
    if base_lr < 0 or weight_decay < 0:
        raise ConfigError("base_lr and weight_decay must be >= 0")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ConfigError("beta1 and beta2 must be in [0, 1)")
    if eps <= 0:
        raise ConfigError("eps must be > 0")
    return OptimState(
        m={name: np.zeros_like(value) for name, value in params.items()},
        v={name: np.zeros_like(value) for name, value in params.items()},
        t=0,
        base_lr=base_lr,
        weight_decay=weight_decay,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adamw_step(params: ParamStore, state: OptimState, lr_t: float) -> None:
    """One decoupled-weight-decay update at step size lr_t.

    For each parameter with gradient g:
        m <- b1 m + (1 - b1) g            v <- b2 v + (1 - b2) g^2
        mhat = m / (1 - b1^t)             vhat = v / (1 - b2^t)
        theta <- theta - lr_t (mhat / (sqrt(vhat) + eps) + wd * theta)
    Both the moment term and the decay term scale by lr_t.  Consumes the
    populated gradients; calling without a fresh backward is a state error.
    """
    if lr_t < 0:
        raise ConfigError(f"lr_t must be >= 0, got {lr_t}")
    params.consume_grads()
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, theta in params.items():
        g = params.grad(name)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay != 0.0:
            update = update + state.weight_decay * theta
        theta -= lr_t * update


@dataclass(frozen=True)
class LrSchedule:
    """Per-step linear warmup to base_lr, then cosine annealing to 0."""

    base_lr: float
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int

    def __post_init__(self):
        if self.base_lr < 0:
            raise ConfigError("base_lr must be >= 0")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.warmup_epochs >= self.total_epochs:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be < total_epochs "
                f"({self.total_epochs})"
            )
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(schedule: LrSchedule, global_step: int) -> float:
    """Learning rate for the (0-indexed) optimizer step about to be taken.

    Ramps 0 -> base_lr over the warmup steps, then follows
    base_lr * (1 + cos(pi * progress)) / 2 with progress spanning the
    remaining steps.  Both phases evaluate to base_lr at the boundary.
    """
    if not 0 <= global_step < schedule.total_steps:
        raise ConfigError(
            f"step {global_step} outside [0, {schedule.total_steps})"
        )
    w = schedule.warmup_steps
    if global_step < w:
        return schedule.base_lr * global_step / w
    span = schedule.total_steps - w
    progress = (global_step - w) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: ParamStore) -> float:
    """Joint L2 norm over every parameter's gradient, accumulated in float64."""
    total = 0.0
    for name in params.names():
        g = params.grad(name)
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def _scale_grads(params: ParamStore, scale: float) -> None:
    for name in params.names():
        params.grad(name)[...] *= scale


def clip_global_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the total scale applied (1.0 when untouched).  Because
    scaling rounds in the gradients' own precision, the recomputed norm
    can land a hair above the bound; corrective passes rescale until it
    does not, so the post-clip norm never exceeds max_norm.
    """
    if max_norm <= 0:
        raise ConfigError(f"max_norm must be > 0, got {max_norm}")
    if not params.grads_populated:
        raise StateError("clip_global_norm requires populated gradients")
    total = global_grad_norm(params)
    if total <= max_norm:
        return 1.0
    applied = max_norm / total
    _scale_grads(params, applied)
    new = global_grad_norm(params)
    tries = 0
    while new > max_norm and tries < 4:
        corr = max_norm / new
        if tries >= 2:
            # undershoot slightly; exact rescaling can keep rounding back up
            corr *= 1.0 - 1e-7
        _scale_grads(params, corr)
        applied *= corr
        new = global_grad_norm(params)
        tries += 1
    return applied
