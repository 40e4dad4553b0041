"""The fusion head: projection stacks, residual adapters, mixing,
multiplicative fusion, pre-output block, and classifier.

The head sits on top of frozen encoders, so gradients are computed for
head parameters only; gradients w.r.t. the input embeddings are dropped.
Forward runs in ``train`` or ``eval`` mode.  Training-mode forwards
retain a :class:`ForwardTrace` holding every saved activation and
dropout mask, which :func:`backward_head` consumes exactly once.

Ablation variants prune the architecture from the top down:

====================== ==========================================================
full                   projections + beta-mixed adapters + pre-output + MLP head
no_mlp                 classifier becomes a single affine map
no_mlp_preout          ... and fused features feed the classifier directly
no_mlp_preout_adapter  ... and adapters are bypassed (mix ratio ignored)
minimal                ... and projections become frozen seeded random maps,
                       leaving only the affine classifier trainable
====================== ==========================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import ndcore
from .errors import ConfigError, DimensionError, NormalizationError, StateError
from .ndcore import Array

ABLATIONS = ("full", "no_mlp", "no_mlp_preout", "no_mlp_preout_adapter", "minimal")

MODES = ("train", "eval")

LN_EPS = 1e-5

# rows entering fuse_and_head must be unit-norm within this tolerance
NORM_CONTRACT_TOL = 1e-4


@dataclass(frozen=True)
class HeadConfig:
    """Architectural hyperparameters; fully determines parameter shapes."""

    img_dim: int = 1408
    txt_dim: int = 768
    shared_dim: int = 1024
    proj_layers: int = 2
    adapter_reduction: float = 1.5
    adapter_alpha_init: float = 0.1
    mix_beta: float = 0.2
    dropout_proj: float = 0.1
    dropout_adapter: float = 0.1
    dropout_preout: float = 0.1
    dropout_cls: float = 0.2
    num_classes: int = 2
    ablation: str = "full"
    init_seed: int = 0
    # optional affine hidden layer between the classifier's LayerNorm+GELU
    # and its output map; 0 disables it (the default head applies GELU to
    # the normalized features directly)
    cls_hidden_dim: int = 0

    def __post_init__(self):
        for name in ("img_dim", "txt_dim", "shared_dim", "proj_layers", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"HeadConfig.{name} must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("HeadConfig.num_classes must be >= 2")
        if self.adapter_reduction <= 1.0:
            raise ConfigError("HeadConfig.adapter_reduction must be > 1")
        if not 0.0 <= self.mix_beta <= 1.0:
            raise ConfigError(f"HeadConfig.mix_beta must be in [0, 1], got {self.mix_beta}")
        for name in ("dropout_proj", "dropout_adapter", "dropout_preout", "dropout_cls"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"HeadConfig.{name} must be in [0, 1), got {p}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.cls_hidden_dim < 0:
            raise ConfigError("HeadConfig.cls_hidden_dim must be >= 0")

    @property
    def bottleneck_dim(self) -> int:
        """Adapter bottleneck width: max(16, floor(shared_dim / reduction))."""
        return max(16, math.floor(self.shared_dim / self.adapter_reduction))

    @property
    def has_mlp_classifier(self) -> bool:
        return self.ablation == "full"

    @property
    def has_preoutput(self) -> bool:
        return self.ablation in ("full", "no_mlp")

    @property
    def has_adapters(self) -> bool:
        return self.ablation in ("full", "no_mlp", "no_mlp_preout")

    @property
    def has_trainable_projections(self) -> bool:
        return self.ablation != "minimal"


class ParamStore:
    """Ordered map of parameter name -> (tensor, gradient buffer).

    Iteration order is insertion order and is identical across runs with an
    equal :class:`HeadConfig`.  Gradient buffers always mirror parameter
    shapes.  A populated/unpopulated flag tracks whether a backward pass has
    filled the buffers since they were last consumed or zeroed.
    """

    def __init__(self):
        self._params: dict[str, Array] = {}
        self._grads: dict[str, Array] = {}
        self._grads_populated = False

    def add(self, name: str, value: Array) -> None:
        if name in self._params:
            raise StateError(f"parameter {name!r} already exists")
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Array:
        return self._params[name]

    def __setitem__(self, name: str, value: Array) -> None:
        if name not in self._params:
            raise KeyError(name)
        if value.shape != self._params[name].shape:
            raise DimensionError(
                f"parameter {name!r}: cannot assign shape {value.shape} "
                f"over {self._params[name].shape}"
            )
        self._params[name] = value

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def grad(self, name: str) -> Array:
        return self._grads[name]

    def add_grad(self, name: str, g: Array) -> None:
        buf = self._grads[name]
        if g.shape != buf.shape:
            raise DimensionError(
                f"gradient for {name!r}: shape {g.shape} vs parameter {buf.shape}"
            )
        buf += g

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0
        self._grads_populated = False

    def mark_grads(self) -> None:
        self._grads_populated = True

    def consume_grads(self) -> None:
        """Assert gradients are populated, then mark them consumed."""
        if not self._grads_populated:
            raise StateError("gradients are not populated for this step")
        self._grads_populated = False

    @property
    def grads_populated(self) -> bool:
        return self._grads_populated

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self._params.items():
            out.add(name, value.copy())
            out._grads[name][...] = self._grads[name]
        out._grads_populated = self._grads_populated
        return out


def param_manifest(cfg: HeadConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Enumerate (name, shape, kind) for every trainable parameter of cfg.

    kind is one of weight/bias/gamma/beta/alpha and decides initialization.
    The order here is the canonical creation and iteration order.
    """
    d = cfg.shared_dim
    entries: list[tuple[str, tuple[int, ...], str]] = []

    if cfg.has_trainable_projections:
        for prefix, d_in in (("proj_img", cfg.img_dim), ("proj_txt", cfg.txt_dim)):
            for layer in range(cfg.proj_layers):
                width_in = d_in if layer == 0 else d
                entries.append((f"{prefix}.{layer}.W", (d, width_in), "weight"))
                entries.append((f"{prefix}.{layer}.b", (d,), "bias"))
                entries.append((f"{prefix}.{layer}.gamma", (d,), "gamma"))
                entries.append((f"{prefix}.{layer}.beta", (d,), "beta"))

    if cfg.has_adapters:
        c = cfg.bottleneck_dim
        for prefix in ("adapter_img", "adapter_txt"):
            entries.append((f"{prefix}.ln_in.gamma", (d,), "gamma"))
            entries.append((f"{prefix}.ln_in.beta", (d,), "beta"))
            entries.append((f"{prefix}.W1", (c, d), "weight"))
            entries.append((f"{prefix}.W2", (d, c), "weight"))
            entries.append((f"{prefix}.alpha", (), "alpha"))
            entries.append((f"{prefix}.ln_out.gamma", (d,), "gamma"))
            entries.append((f"{prefix}.ln_out.beta", (d,), "beta"))

    if cfg.has_preoutput:
        entries.append(("preout.W", (d, d), "weight"))
        entries.append(("preout.b", (d,), "bias"))
        entries.append(("preout.gamma", (d,), "gamma"))
        entries.append(("preout.beta", (d,), "beta"))

    if cfg.has_mlp_classifier:
        entries.append(("classifier.gamma", (d,), "gamma"))
        entries.append(("classifier.beta", (d,), "beta"))
        cls_in = d
        if cfg.cls_hidden_dim:
            entries.append(("classifier.hidden.W", (cfg.cls_hidden_dim, d), "weight"))
            entries.append(("classifier.hidden.b", (cfg.cls_hidden_dim,), "bias"))
            cls_in = cfg.cls_hidden_dim
        entries.append(("classifier.W", (cfg.num_classes, cls_in), "weight"))
        entries.append(("classifier.b", (cfg.num_classes,), "bias"))
    else:
        entries.append(("classifier.W", (cfg.num_classes, d), "weight"))
        entries.append(("classifier.b", (cfg.num_classes,), "bias"))

    return entries


def init_params(
    cfg: HeadConfig, rng: np.random.Generator, dtype=np.float32
) -> ParamStore:
    """Build the ParamStore for cfg: fan-in-scaled uniform weights
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases, identity layer norms,
    and the configured adapter scale.  Weights consume rng in manifest order.
    """
    params = ParamStore()
    for name, shape, kind in param_manifest(cfg):
        if kind == "weight":
            bound = 1.0 / math.sqrt(shape[1])
            value = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif kind == "gamma":
            value = np.ones(shape, dtype=dtype)
        elif kind == "alpha":
            value = np.asarray(cfg.adapter_alpha_init, dtype=dtype)
        else:  # bias / beta
            value = np.zeros(shape, dtype=dtype)
        params.add(name, value)
    return params


@lru_cache(maxsize=8)
def _frozen_projections_cached(
    init_seed: int, img_dim: int, txt_dim: int, shared_dim: int, dtype_name: str
) -> tuple[Array, Array]:
    dtype = np.dtype(dtype_name)
    rng = ndcore.make_rng(ndcore.derive_seed(init_seed, "frozen_proj"))
    maps = []
    for d_in in (img_dim, txt_dim):
        bound = 1.0 / math.sqrt(d_in)
        m = rng.uniform(-bound, bound, size=(shared_dim, d_in)).astype(dtype)
        m.setflags(write=False)
        maps.append(m)
    return maps[0], maps[1]


def frozen_projections(cfg: HeadConfig, dtype=np.float32) -> tuple[Array, Array]:
    """Non-trainable random maps to the shared space for the minimal ablation.

    Seeded from cfg.init_seed so they are reproducible from a checkpoint's
    config echo without being stored.
    """
    return _frozen_projections_cached(
        cfg.init_seed, cfg.img_dim, cfg.txt_dim, cfg.shared_dim, np.dtype(dtype).name
    )


class ForwardTrace:
    """Activations and dropout masks retained by one training-mode forward.

    Consumed exactly once by :func:`backward_head`.
    """

    def __init__(self):
        self.data: dict = {}
        self._consumed = False

    def consume(self) -> None:
        if self._consumed:
            raise StateError("ForwardTrace already consumed by a backward pass")
        self._consumed = True


def _check_mode(mode: str) -> bool:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    return mode == "train"


# ---------------------------------------------------------------------------
# blocks (forward)
# ---------------------------------------------------------------------------

def _project_stack(x, prefix, params, cfg, training, rng, trace):
    """Dropout(ReLU(LayerNorm(Wx+b))), residual from the second layer on."""
    layers = []
    cur = x
    for layer in range(cfg.proj_layers):
        W = params[f"{prefix}.{layer}.W"]
        b = params[f"{prefix}.{layer}.b"]
        gamma = params[f"{prefix}.{layer}.gamma"]
        beta = params[f"{prefix}.{layer}.beta"]
        h = ndcore.linear_fwd(cur, W, b)
        a, ln_ctx = ndcore.layernorm_fwd(h, gamma, beta, LN_EPS)
        r = ndcore.relu_fwd(a)
        d, mask = ndcore.dropout_fwd(r, cfg.dropout_proj, training, rng)
        out = d if layer == 0 else d + cur
        if trace is not None:
            layers.append({"x_in": cur, "ln_ctx": ln_ctx, "a": a, "mask": mask})
        cur = out
    if trace is not None:
        trace.data[prefix] = layers
    return cur


def _adapter(x, prefix, params, cfg, training, rng, trace):
    """LayerNorm(x + alpha * Dropout(W2 GELU(W1 LayerNorm(x))))."""
    g_in = params[f"{prefix}.ln_in.gamma"]
    b_in = params[f"{prefix}.ln_in.beta"]
    t, ln_in_ctx = ndcore.layernorm_fwd(x, g_in, b_in, LN_EPS)
    u1 = t @ params[f"{prefix}.W1"].T
    g = ndcore.gelu_fwd(u1)
    h = g @ params[f"{prefix}.W2"].T
    hd, mask = ndcore.dropout_fwd(h, cfg.dropout_adapter, training, rng)
    alpha = params[f"{prefix}.alpha"]
    xp = x + alpha * hd
    g_out = params[f"{prefix}.ln_out.gamma"]
    b_out = params[f"{prefix}.ln_out.beta"]
    y, ln_out_ctx = ndcore.layernorm_fwd(xp, g_out, b_out, LN_EPS)
    if trace is not None:
        trace.data[prefix] = {
            "ln_in_ctx": ln_in_ctx,
            "t": t,
            "u1": u1,
            "g": g,
            "mask": mask,
            "hd": hd,
            "ln_out_ctx": ln_out_ctx,
        }
    return y


def _preoutput(f, params, cfg, training, rng, trace):
    h = ndcore.linear_fwd(f, params["preout.W"], params["preout.b"])
    a, ln_ctx = ndcore.layernorm_fwd(h, params["preout.gamma"], params["preout.beta"], LN_EPS)
    r = ndcore.relu_fwd(a)
    z, mask = ndcore.dropout_fwd(r, cfg.dropout_preout, training, rng)
    if trace is not None:
        trace.data["preout"] = {"x_in": f, "ln_ctx": ln_ctx, "a": a, "mask": mask}
    return z


def _classifier(z, params, cfg, training, rng, trace):
    if not cfg.has_mlp_classifier:
        logits = ndcore.linear_fwd(z, params["classifier.W"], params["classifier.b"])
        if trace is not None:
            trace.data["classifier"] = {"z_in": z}
        return logits
    tz, ln_ctx = ndcore.layernorm_fwd(
        z, params["classifier.gamma"], params["classifier.beta"], LN_EPS
    )
    ctx = {"ln_ctx": ln_ctx}
    cur = tz
    if cfg.cls_hidden_dim:
        cur = ndcore.linear_fwd(cur, params["classifier.hidden.W"], params["classifier.hidden.b"])
        ctx["hidden_in"] = tz
        ctx["pre_gelu"] = cur
    else:
        ctx["pre_gelu"] = tz
    h = ndcore.gelu_fwd(ctx["pre_gelu"])
    hd, mask = ndcore.dropout_fwd(h, cfg.dropout_cls, training, rng)
    logits = ndcore.linear_fwd(hd, params["classifier.W"], params["classifier.b"])
    ctx["mask"] = mask
    ctx["hd"] = hd
    if trace is not None:
        trace.data["classifier"] = ctx
    return logits


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def project(
    x: Array,
    params: ParamStore,
    cfg: HeadConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    stack: str | None = None,
) -> Array:
    """Run one modality's projection stack; the stack is picked by input width.

    Pass ``stack`` ("img"/"txt") explicitly when img_dim == txt_dim.
    """
    training = _check_mode(mode)
    if stack is None:
        if x.shape[1] == cfg.img_dim == cfg.txt_dim:
            raise DimensionError(
                "project: img_dim == txt_dim; pass stack='img' or stack='txt'"
            )
        if x.shape[1] == cfg.img_dim:
            stack = "img"
        elif x.shape[1] == cfg.txt_dim:
            stack = "txt"
        else:
            raise DimensionError(
                f"project: input width {x.shape[1]} matches neither "
                f"img_dim={cfg.img_dim} nor txt_dim={cfg.txt_dim}"
            )
    if not cfg.has_trainable_projections:
        raise ConfigError(f"project: ablation {cfg.ablation!r} has no trainable projections")
    return _project_stack(x, f"proj_{stack}", params, cfg, training, rng, None)


def adapt(
    x: Array,
    params: ParamStore,
    cfg: HeadConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    stack: str = "img",
) -> Array:
    """Refine projected features through the residual bottleneck adapter."""
    training = _check_mode(mode)
    if not cfg.has_adapters:
        raise ConfigError(f"adapt: ablation {cfg.ablation!r} disables the adapters")
    if stack not in ("img", "txt"):
        raise ConfigError(f"adapt: stack must be 'img' or 'txt', got {stack!r}")
    if x.shape[1] != cfg.shared_dim:
        raise DimensionError(
            f"adapt: input width {x.shape[1]} != shared_dim {cfg.shared_dim}"
        )
    return _adapter(x, f"adapter_{stack}", params, cfg, training, rng, None)


def mix(x_proj: Array, x_adapted: Array, beta: float) -> Array:
    """Convex combination beta * adapted + (1 - beta) * projected."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"mix: beta must be in [0, 1], got {beta}")
    if x_proj.shape != x_adapted.shape:
        raise DimensionError(
            f"mix: shapes differ, x_proj{x_proj.shape} vs x_adapted{x_adapted.shape}"
        )
    if beta == 0.0:
        return x_proj
    if beta == 1.0:
        return x_adapted
    return beta * x_adapted + (1.0 - beta) * x_proj


def _check_unit_rows(x: Array, name: str) -> None:
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=-1))
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_CONTRACT_TOL)
    if bad.size:
        i = int(bad[0])
        raise NormalizationError(
            f"fuse_and_head: {name} row {i} has norm {norms[i]:.6f}, expected 1"
        )


def _fuse_and_head(v, u, params, cfg, training, rng, trace):
    f = ndcore.mul_fwd(v, u)
    if trace is not None:
        trace.data["fuse"] = {"v": v, "u": u}
    z = _preoutput(f, params, cfg, training, rng, trace) if cfg.has_preoutput else f
    return _classifier(z, params, cfg, training, rng, trace)


def fuse_and_head(
    v: Array,
    u: Array,
    params: ParamStore,
    cfg: HeadConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Array:
    """Elementwise-fuse unit-norm modality rows and classify them."""
    training = _check_mode(mode)
    _check_unit_rows(v, "image")
    _check_unit_rows(u, "text")
    return _fuse_and_head(v, u, params, cfg, training, rng, None)


def forward(
    batch: tuple[Array, Array],
    params: ParamStore,
    cfg: HeadConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[Array, ForwardTrace | None]:
    """Full head forward; returns (logits, trace) with trace set in train mode."""
    training = _check_mode(mode)
    x_img, x_txt = batch
    if x_img.ndim != 2 or x_img.shape[1] != cfg.img_dim:
        raise DimensionError(
            f"forward: image embeddings have shape {x_img.shape}, "
            f"expected [n, {cfg.img_dim}]"
        )
    if x_txt.ndim != 2 or x_txt.shape[1] != cfg.txt_dim:
        raise DimensionError(
            f"forward: text embeddings have shape {x_txt.shape}, "
            f"expected [n, {cfg.txt_dim}]"
        )
    if x_img.shape[0] != x_txt.shape[0]:
        raise DimensionError(
            f"forward: batch sizes differ, {x_img.shape[0]} vs {x_txt.shape[0]}"
        )
    trace = ForwardTrace() if training else None

    if cfg.has_trainable_projections:
        p_img = _project_stack(x_img, "proj_img", params, cfg, training, rng, trace)
        p_txt = _project_stack(x_txt, "proj_txt", params, cfg, training, rng, trace)
    else:
        r_img, r_txt = frozen_projections(cfg, dtype=x_img.dtype)
        p_img = x_img @ r_img.T
        p_txt = x_txt @ r_txt.T

    if cfg.has_adapters:
        a_img = _adapter(p_img, "adapter_img", params, cfg, training, rng, trace)
        a_txt = _adapter(p_txt, "adapter_txt", params, cfg, training, rng, trace)
        m_img = mix(p_img, a_img, cfg.mix_beta)
        m_txt = mix(p_txt, a_txt, cfg.mix_beta)
    else:
        m_img, m_txt = p_img, p_txt

    n_img, l2_img_ctx = ndcore.l2norm_fwd(m_img)
    n_txt, l2_txt_ctx = ndcore.l2norm_fwd(m_txt)
    if trace is not None:
        trace.data["l2_img"] = l2_img_ctx
        trace.data["l2_txt"] = l2_txt_ctx

    logits = _fuse_and_head(n_img, n_txt, params, cfg, training, rng, trace)
    if trace is not None:
        trace.data["cfg"] = cfg
    return logits, trace


# ---------------------------------------------------------------------------
# blocks (backward)
# ---------------------------------------------------------------------------

def _classifier_bwd(dlogits, params, cfg, trace):
    ctx = trace.data["classifier"]
    if not cfg.has_mlp_classifier:
        dz, dW, db = ndcore.linear_bwd(dlogits, ctx["z_in"], params["classifier.W"])
        params.add_grad("classifier.W", dW)
        params.add_grad("classifier.b", db)
        return dz
    dhd, dW, db = ndcore.linear_bwd(dlogits, ctx["hd"], params["classifier.W"])
    params.add_grad("classifier.W", dW)
    params.add_grad("classifier.b", db)
    dh = ndcore.dropout_bwd(dhd, ctx["mask"]) if ctx["mask"] is not None else dhd
    dpre = ndcore.gelu_bwd(dh, ctx["pre_gelu"])
    if cfg.cls_hidden_dim:
        dtz, dWh, dbh = ndcore.linear_bwd(dpre, ctx["hidden_in"], params["classifier.hidden.W"])
        params.add_grad("classifier.hidden.W", dWh)
        params.add_grad("classifier.hidden.b", dbh)
    else:
        dtz = dpre
    dz, dgamma, dbeta = ndcore.layernorm_bwd(dtz, ctx["ln_ctx"])
    params.add_grad("classifier.gamma", dgamma)
    params.add_grad("classifier.beta", dbeta)
    return dz


def _preoutput_bwd(dz, params, cfg, trace):
    ctx = trace.data["preout"]
    dr = ndcore.dropout_bwd(dz, ctx["mask"]) if ctx["mask"] is not None else dz
    da = ndcore.relu_bwd(dr, ctx["a"])
    dh, dgamma, dbeta = ndcore.layernorm_bwd(da, ctx["ln_ctx"])
    params.add_grad("preout.gamma", dgamma)
    params.add_grad("preout.beta", dbeta)
    df, dW, db = ndcore.linear_bwd(dh, ctx["x_in"], params["preout.W"])
    params.add_grad("preout.W", dW)
    params.add_grad("preout.b", db)
    return df


def _adapter_bwd(dy, prefix, params, cfg, trace):
    ctx = trace.data[prefix]
    dxp, dg_out, db_out = ndcore.layernorm_bwd(dy, ctx["ln_out_ctx"])
    params.add_grad(f"{prefix}.ln_out.gamma", dg_out)
    params.add_grad(f"{prefix}.ln_out.beta", db_out)
    alpha = params[f"{prefix}.alpha"]
    dalpha = np.asarray((dxp * ctx["hd"]).sum(), dtype=alpha.dtype)
    params.add_grad(f"{prefix}.alpha", dalpha)
    dhd = alpha * dxp
    dh = ndcore.dropout_bwd(dhd, ctx["mask"]) if ctx["mask"] is not None else dhd
    # h = g @ W2.T (no bias)
    dg = dh @ params[f"{prefix}.W2"]
    params.add_grad(f"{prefix}.W2", dh.T @ ctx["g"])
    du1 = ndcore.gelu_bwd(dg, ctx["u1"])
    dt = du1 @ params[f"{prefix}.W1"]
    params.add_grad(f"{prefix}.W1", du1.T @ ctx["t"])
    dx_ln, dg_in, db_in = ndcore.layernorm_bwd(dt, ctx["ln_in_ctx"])
    params.add_grad(f"{prefix}.ln_in.gamma", dg_in)
    params.add_grad(f"{prefix}.ln_in.beta", db_in)
    # residual path (identity) plus the normalized branch
    return dxp + dx_ln


def _project_stack_bwd(dout, prefix, params, cfg, trace):
    layers = trace.data[prefix]
    dcur = dout
    for layer in range(cfg.proj_layers - 1, -1, -1):
        ctx = layers[layer]
        dd = dcur  # gradient into the dropout output of this layer
        dr = ndcore.dropout_bwd(dd, ctx["mask"]) if ctx["mask"] is not None else dd
        da = ndcore.relu_bwd(dr, ctx["a"])
        dh, dgamma, dbeta = ndcore.layernorm_bwd(da, ctx["ln_ctx"])
        params.add_grad(f"{prefix}.{layer}.gamma", dgamma)
        params.add_grad(f"{prefix}.{layer}.beta", dbeta)
        dx, dW, db = ndcore.linear_bwd(dh, ctx["x_in"], params[f"{prefix}.{layer}.W"])
        params.add_grad(f"{prefix}.{layer}.W", dW)
        params.add_grad(f"{prefix}.{layer}.b", db)
        # residual term: out = d + x_in for layers >= 1
        dcur = dx + dcur if layer > 0 else dx
    return dcur


def backward_head(
    trace: ForwardTrace, logits_grad: Array, params: ParamStore
) -> None:
    """Accumulate parameter gradients for one traced forward.

    Gradients w.r.t. the raw embeddings are discarded (encoders are frozen).
    The trace is consumed; reusing it raises :class:`StateError`.
    """
    if trace is None:
        raise StateError("backward_head requires a trace from a training-mode forward")
    trace.consume()
    cfg: HeadConfig = trace.data["cfg"]

    dz = _classifier_bwd(logits_grad, params, cfg, trace)
    df = _preoutput_bwd(dz, params, cfg, trace) if cfg.has_preoutput else dz

    fuse = trace.data["fuse"]
    dn_img, dn_txt = ndcore.mul_bwd(df, fuse["v"], fuse["u"])
    dm_img = ndcore.l2norm_bwd(dn_img, trace.data["l2_img"])
    dm_txt = ndcore.l2norm_bwd(dn_txt, trace.data["l2_txt"])

    if cfg.has_adapters:
        beta = cfg.mix_beta
        dp_img = (1.0 - beta) * dm_img + _adapter_bwd(beta * dm_img, "adapter_img", params, cfg, trace)
        dp_txt = (1.0 - beta) * dm_txt + _adapter_bwd(beta * dm_txt, "adapter_txt", params, cfg, trace)
    else:
        dp_img, dp_txt = dm_img, dm_txt

    if cfg.has_trainable_projections:
        _project_stack_bwd(dp_img, "proj_img", params, cfg, trace)
        _project_stack_bwd(dp_txt, "proj_txt", params, cfg, trace)
    # frozen projections and raw embeddings receive no gradients

    params.mark_grads()
