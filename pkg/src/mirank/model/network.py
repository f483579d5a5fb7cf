"""SE-augmented EEGNet-style network: parameters, forward, backward, predict.

Stage order for a batch ``(B, N_c, N_s)``::

    elec_in  electrode ranking on the raw trial
    conv1    temporal conv, 8 filters, same-length padding
    bn1
    elec_map electrode ranking on every conv1 map (one shared weight pair)
    map1     feature-map ranking over the 8 maps
    conv2    depthwise spatial conv, depth multiplier 2 -> 16 maps, N_c -> 1
    bn2, elu, pool(pool1), dropout
    map2     feature-map ranking over 16 maps
    conv3    separable temporal conv (depthwise kS taps + pointwise 16x16)
    bn3, elu, pool(pool2), dropout
    map3     feature-map ranking over 16 maps
    flatten, dense -> 2 logits

Any subset of the five ranking layers can be disabled; with all of them
disabled the network is the plain EEGNet-8,2 stack.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from mirank.core import ops
from mirank.core.ops import DimensionError, check_finite
from mirank.model.se import ELECTRODE_SE, FEATUREMAP_SE, hidden_width

F1 = 8      # temporal filters
DEPTH = 2   # depthwise spatial multiplier
F2 = 16     # separable filters
N_CLASSES = 2
CLASS_NAMES = ("left", "right")

SE_LAYERS = ("elec_in", "elec_map", "map1", "map2", "map3")


@dataclass(frozen=True)
class ArchConfig:
    n_channels: int = 27
    n_samples: int = 2000
    kern_t: int = 250
    kern_s: int = 16
    pool1: int = 4
    pool2: int = 8
    dropout: float = 0.25
    reduction: int = 3
    se_layers: tuple[str, ...] = SE_LAYERS
    max_norm: bool = True
    spatial_max_norm: float = 1.0
    dense_max_norm: float = 0.25
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "se_layers", tuple(self.se_layers))

    @property
    def filter_counts(self) -> tuple[int, int, int]:
        return F1, F1 * DEPTH, F2

    @property
    def flat_width(self) -> int:
        return F2 * ((self.n_samples // self.pool1) // self.pool2)

    def validate(self) -> "ArchConfig":
        problems = []
        if self.n_channels < 1:
            problems.append("n_channels must be >= 1")
        if self.kern_t < 1 or self.kern_s < 1:
            problems.append("kernel sizes must be >= 1")
        if self.pool1 < 1 or self.pool2 < 1:
            problems.append("pool widths must be >= 1")
        if not 0 <= self.dropout < 1:
            problems.append("dropout must satisfy 0 <= p < 1")
        if self.reduction < 1:
            problems.append("reduction rate must be >= 1")
        unknown = set(self.se_layers) - set(SE_LAYERS)
        if unknown:
            problems.append(f"unknown SE layers {sorted(unknown)}; valid: {list(SE_LAYERS)}")
        if self.n_samples // self.pool1 // self.pool2 < 1:
            problems.append(f"n_samples={self.n_samples} too short for pools {self.pool1}x{self.pool2}")
        if self.spatial_max_norm <= 0 or self.dense_max_norm <= 0:
            problems.append("max-norm bounds must be positive")
        if problems:
            raise ValueError("invalid architecture config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["se_layers"] = list(self.se_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def eegnet_config(**overrides) -> ArchConfig:
    """Architecture config with every ranking layer disabled."""
    return ArchConfig(se_layers=(), **overrides)


@dataclass
class ModelState:
    """All learnable parameters, BN running statistics and the architecture."""

    config: ArchConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def has(self, layer: str) -> bool:
        return layer in self.config.se_layers


def param_shapes(cfg: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in checkpoint order."""
    nc, r = cfg.n_channels, cfg.reduction
    f2_maps = F1 * DEPTH
    shapes: dict[str, tuple[int, ...]] = {}

    def se(name, n):
        if name in cfg.se_layers:
            h = hidden_width(n, r)
            shapes[f"{name}.W1"] = (h, n)
            shapes[f"{name}.W2"] = (n, h)

    se("elec_in", nc)
    shapes["conv1.w"] = (F1, 1, 1, cfg.kern_t)
    shapes["bn1.gamma"] = (F1,)
    shapes["bn1.beta"] = (F1,)
    se("elec_map", nc)
    se("map1", F1)
    shapes["conv2.w"] = (f2_maps, 1, nc, 1)
    shapes["bn2.gamma"] = (f2_maps,)
    shapes["bn2.beta"] = (f2_maps,)
    se("map2", f2_maps)
    shapes["conv3_dw.w"] = (f2_maps, 1, 1, cfg.kern_s)
    shapes["conv3_pw.w"] = (F2, f2_maps, 1, 1)
    shapes["bn3.gamma"] = (F2,)
    shapes["bn3.beta"] = (F2,)
    se("map3", F2)
    shapes["dense.W"] = (N_CLASSES, cfg.flat_width)
    shapes["dense.b"] = (N_CLASSES,)
    return shapes


def buffer_shapes(cfg: ArchConfig) -> dict[str, tuple[int, ...]]:
    out = {}
    for bn, c in (("bn1", F1), ("bn2", F1 * DEPTH), ("bn3", F2)):
        out[f"{bn}.running_mean"] = (c,)
        out[f"{bn}.running_var"] = (c,)
    return out


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        c_out, c_in_g, kh, kw = shape
        groups = {"conv2.w": F1, "conv3_dw.w": F1 * DEPTH}.get(name, 1)
        rf = kh * kw
        return c_in_g * rf, (c_out // groups) * rf
    out_dim, in_dim = shape
    return in_dim, out_dim


def build_model(cfg: ArchConfig | None = None, seed: int = 0, dtype=np.float32) -> ModelState:
    """Seeded initialization.

    Each parameter draws from its own stream keyed by ``(seed, name)``, so a
    tensor's initial value does not depend on which ranking layers exist.
    """
    cfg = (cfg or ArchConfig()).validate()
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype)
        elif name.endswith(".beta") or name == "dense.b":
            params[name] = np.zeros(shape, dtype)
        else:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            fan_in, fan_out = _fans(name, shape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    buffers = {}
    for name, shape in buffer_shapes(cfg).items():
        fill = np.zeros if name.endswith("mean") else np.ones
        buffers[name] = fill(shape, dtype)
    return ModelState(cfg, params, buffers)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class Step:
    stage: str
    op: ops.Op
    ctx: ops.Context
    bind: dict[str, str]   # op input name -> parameter name


@dataclass
class Trace:
    steps: list[Step] = field(default_factory=list)
    ranks: dict[str, np.ndarray] = field(default_factory=dict)
    running: dict[str, np.ndarray] = field(default_factory=dict)


def forward(
    model: ModelState,
    batch: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    freeze_bn: bool = False,
) -> tuple[np.ndarray, Trace]:
    """Run the network on ``batch`` (B, N_c, N_s) and return ``(logits, trace)``.

    In train mode BN uses batch statistics (unless ``freeze_bn``) and the
    updated running statistics are placed in ``trace.running``; ``model`` is
    never mutated. Dropout draws from ``rng``.
    """
    cfg, p, buf = model.config, model.params, model.buffers
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if batch.ndim != 3 or batch.shape[1:] != (cfg.n_channels, cfg.n_samples):
        raise DimensionError(
            f"batch shape {batch.shape} does not match (B, {cfg.n_channels}, {cfg.n_samples})"
        )
    bn_mode = "infer" if (mode == "infer" or freeze_bn) else "train"
    drop_mode = mode
    tr = Trace()
    dt = p["conv1.w"].dtype

    def run(stage, op, *args, bind=None, **kw):
        out, ctx = op.forward(*args, **kw)
        tr.steps.append(Step(stage, op, ctx, bind or {}))
        if isinstance(out, np.ndarray):
            check_finite(out, f"stage {stage}")
        return out, ctx

    def se(stage, op, x):
        if stage not in cfg.se_layers:
            return x
        out, ctx = run(stage, op, x, p[f"{stage}.W1"], p[f"{stage}.W2"],
                       bind={"W1": f"{stage}.W1", "W2": f"{stage}.W2"})
        tr.ranks[stage] = ctx["ranks"]
        return out

    def bn(stage, x):
        out, ctx = run(
            stage, ops.BATCH_NORM, x, p[f"{stage}.gamma"], p[f"{stage}.beta"],
            buf[f"{stage}.running_mean"], buf[f"{stage}.running_var"],
            mode=bn_mode, momentum=cfg.bn_momentum, eps=cfg.bn_eps,
            bind={"gamma": f"{stage}.gamma", "beta": f"{stage}.beta"},
        )
        if bn_mode == "train":
            tr.running[f"{stage}.running_mean"] = ctx["running_mean"]
            tr.running[f"{stage}.running_var"] = ctx["running_var"]
        return out

    x = np.asarray(batch, dtype=dt)[:, None]                       # B,1,Nc,Ns
    x = se("elec_in", ELECTRODE_SE, x)
    x, _ = run("conv1", ops.CONV2D, x, p["conv1.w"], groups=1,
               pad=(0, ops.same_pad(cfg.kern_t)), bind={"w": "conv1.w"})
    x = bn("bn1", x)
    x = se("elec_map", ELECTRODE_SE, x)
    x = se("map1", FEATUREMAP_SE, x)
    x, _ = run("conv2", ops.CONV2D, x, p["conv2.w"], groups=F1, pad=0, bind={"w": "conv2.w"})
    x = bn("bn2", x)
    x, _ = run("elu2", ops.ELU, x)
    x, _ = run("pool1", ops.AVG_POOL_TIME, x, cfg.pool1)
    x, _ = run("drop1", ops.DROPOUT, x, cfg.dropout, rng, drop_mode)
    x = se("map2", FEATUREMAP_SE, x)
    x, _ = run("conv3_dw", ops.CONV2D, x, p["conv3_dw.w"], groups=F1 * DEPTH,
               pad=(0, ops.same_pad(cfg.kern_s)), bind={"w": "conv3_dw.w"})
    x, _ = run("conv3_pw", ops.CONV2D, x, p["conv3_pw.w"], groups=1, pad=0, bind={"w": "conv3_pw.w"})
    x = bn("bn3", x)
    x, _ = run("elu3", ops.ELU, x)
    x, _ = run("pool2", ops.AVG_POOL_TIME, x, cfg.pool2)
    x, _ = run("drop2", ops.DROPOUT, x, cfg.dropout, rng, drop_mode)
    x = se("map3", FEATUREMAP_SE, x)
    x, _ = run("flatten", ops.FLATTEN, x)
    logits, _ = run("dense", ops.DENSE, x, p["dense.W"], p["dense.b"], bind={"W": "dense.W", "b": "dense.b"})

    if "elec_in" in tr.ranks:
        tr.ranks["elec_in"] = tr.ranks["elec_in"][:, 0]          # B,1,Nc -> B,Nc
    return logits, tr


def backward(trace: Trace, dlogits: np.ndarray, wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Gradients of the loss for the parameters in ``wrt`` (default: all bound).

    Propagation stops at the earliest stage that owns a requested parameter.
    """
    steps = trace.steps
    if wrt is None:
        wrt = {pn for s in steps for pn in s.bind.values()}
    wrt = set(wrt)
    needed = [i for i, s in enumerate(steps) if wrt & set(s.bind.values())]
    grads: dict[str, np.ndarray] = {}
    if not needed:
        return grads
    first = min(needed)
    cot = dlogits
    for i in range(len(steps) - 1, first - 1, -1):
        s = steps[i]
        need = {k for k, pn in s.bind.items() if pn in wrt}
        if i > first:
            need.add("x")
        if not need:
            continue
        g = ops.vjp(s.op, s.ctx, cot, need=need)
        for k, pn in s.bind.items():
            if k in g and pn in wrt:
                grads[pn] = g[k]
        if i > first:
            cot = g["x"]
    return grads


def logits(model: ModelState, batch: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Inference-mode logits for an arbitrary number of trials."""
    out = [forward(model, batch[i:i + chunk], "infer")[0] for i in range(0, len(batch), chunk)]
    if not out:
        return np.zeros((0, N_CLASSES), dtype=model.params["dense.W"].dtype)
    return np.concatenate(out)


def predict_from_logits(z: np.ndarray) -> np.ndarray:
    """Argmax over classes; a tie goes to the lowest class index (left)."""
    return np.argmax(z, axis=-1)


def predict(model: ModelState, trial: np.ndarray) -> str:
    """Class name for one preprocessed trial (N_c, N_s)."""
    z = logits(model, trial[None])
    return CLASS_NAMES[int(predict_from_logits(z)[0])]


def apply_max_norm(model: ModelState, names: Iterable[str] | None = None) -> None:
    """Project the constrained tensors in place (no-op when disabled)."""
    from mirank.core.optim import max_norm_project

    cfg = model.config
    if not cfg.max_norm:
        return
    names = set(model.params if names is None else names)
    if "conv2.w" in names:
        model.params["conv2.w"] = max_norm_project(model.params["conv2.w"], cfg.spatial_max_norm, axis=0)
    if "dense.W" in names:
        model.params["dense.W"] = max_norm_project(model.params["dense.W"], cfg.dense_max_norm, axis=0)


def with_config(model: ModelState, **changes) -> ModelState:
    return ModelState(replace(model.config, **changes), model.params, model.buffers)
