"""Finite-difference verification of every analytic backward pass.

Each case draws a random float64 instance, projects the op output onto a
fixed random cotangent ``R`` (scalar objective ``sum(out * R)``) and compares
the analytic VJP against central differences with step ``h``. The error for
each element is ``|analytic - numeric| / max(1, |numeric|)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from mirank.core import ops
from mirank.model.se import ELECTRODE_SE, FEATUREMAP_SE

H = 1e-5
TOL = 1e-4


@dataclass
class CaseResult:
    name: str
    instances: int
    max_rel_err: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < TOL


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every element of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_op(op: ops.Op, inputs: dict[str, np.ndarray], wrt: tuple[str, ...], rng,
             options: dict | None = None, perturb: bool = False) -> float:
    """Max relative error of ``op``'s VJP over the inputs named in ``wrt``."""
    options = options or {}
    names = list(inputs)

    def run():
        return op.forward(*[inputs[n] for n in names], **options)

    out, ctx = run()
    scalar = np.ndim(out) == 0
    R = 1.0 if scalar else rng.standard_normal(np.shape(out))

    def objective():
        o = run()[0]
        return float(o) if scalar else float(np.sum(o * R))

    grads = ops.vjp(op, ctx, R if not scalar else 1.0)
    worst = 0.0
    for key in wrt:
        analytic = grads[key]
        if perturb:
            analytic = analytic + 1e-2
        worst = max(worst, _rel_err(analytic, numeric_grad(objective, inputs[key])))
    return worst


def _std(rng, *shape):
    return rng.standard_normal(shape)


def _away_from_zero(x, gap=0.05):
    return np.sign(x) * (np.abs(x) + gap)


# Each factory returns (op, inputs, wrt, options) for one random instance.
def _conv_general(rng):
    return ops.CONV2D, dict(x=_std(rng, 2, 2, 4, 6), w=_std(rng, 3, 2, 2, 3)), ("x", "w"), dict(pad=(1, 1))


def _conv_temporal(rng):
    k = 33
    return (ops.CONV2D, dict(x=_std(rng, 2, 1, 3, 40), w=_std(rng, 4, 1, 1, k)), ("x", "w"),
            dict(pad=(0, ops.same_pad(k))))


def _conv_spatial(rng):
    return ops.CONV2D, dict(x=_std(rng, 2, 4, 5, 7), w=_std(rng, 8, 1, 5, 1)), ("x", "w"), dict(groups=4)


def _conv_depthwise_t(rng):
    return (ops.CONV2D, dict(x=_std(rng, 2, 4, 1, 12), w=_std(rng, 4, 1, 1, 5)), ("x", "w"),
            dict(groups=4, pad=(0, ops.same_pad(5))))


def _conv_pointwise(rng):
    return ops.CONV2D, dict(x=_std(rng, 2, 4, 1, 6), w=_std(rng, 3, 4, 1, 1)), ("x", "w"), {}


def _bn(mode):
    def make(rng):
        c = 3
        inputs = dict(x=_std(rng, 4, c, 2, 5) * 2 + 1, gamma=rng.uniform(0.5, 2, c), beta=_std(rng, c),
                      running_mean=_std(rng, c), running_var=rng.uniform(0.5, 2, c))
        return ops.BATCH_NORM, inputs, ("x", "gamma", "beta"), dict(mode=mode)
    return make


def _elu(rng):
    return ops.ELU, dict(x=_away_from_zero(_std(rng, 3, 2, 2, 5))), ("x",), {}


def _pool(rng):
    return ops.AVG_POOL_TIME, dict(x=_std(rng, 2, 3, 2, 11)), ("x",), dict(width=4)


def _dropout(rng):
    seed = int(rng.integers(2**31))

    class FixedMaskDropout(ops.Dropout):
        def forward(self, x, p):
            return super().forward(x, p, np.random.default_rng(seed), "train")

    return FixedMaskDropout(), dict(x=_std(rng, 2, 3, 1, 8)), ("x",), dict(p=0.3)


def _dense(rng):
    return ops.DENSE, dict(x=_std(rng, 4, 6), W=_std(rng, 3, 6), b=_std(rng, 3)), ("x", "W", "b"), {}


def _xent(rng):
    B, K = 5, 3
    return ops.SOFTMAX_XENT, dict(logits=_std(rng, B, K) * 3, labels=rng.integers(0, K, B)), ("logits",), {}


def _electrode_se(rng):
    nc, h = 6, 2
    inputs = dict(x=_std(rng, 2, 3, nc, 9) + rng.standard_normal((1, 1, nc, 1)),
                  W1=_std(rng, h, nc), W2=_std(rng, nc, h))
    return ELECTRODE_SE, inputs, ("x", "W1", "W2"), {}


def _featuremap_se(rng):
    nf, h = 8, 2
    inputs = dict(x=_std(rng, 2, nf, 3, 5) + rng.standard_normal((1, nf, 1, 1)),
                  W1=_std(rng, h, nf), W2=_std(rng, nf, h))
    return FEATUREMAP_SE, inputs, ("x", "W1", "W2"), {}


OP_CASES: dict[str, Callable] = {
    "conv2d": _conv_general,
    "conv2d_temporal": _conv_temporal,
    "conv2d_depthwise_spatial": _conv_spatial,
    "conv2d_depthwise_temporal": _conv_depthwise_t,
    "conv2d_pointwise": _conv_pointwise,
    "batch_norm_train": _bn("train"),
    "batch_norm_infer": _bn("infer"),
    "elu": _elu,
    "avg_pool_time": _pool,
    "dropout": _dropout,
    "dense": _dense,
    "softmax_xent": _xent,
    "electrode_se": _electrode_se,
    "featuremap_se": _featuremap_se,
}


def check_model(seed: int, perturb: bool = False, config=None) -> float:
    """End-to-end check of every parameter gradient on a tiny float64 network."""
    from mirank.model.network import ArchConfig, backward, build_model, forward

    cfg = config or ArchConfig(n_channels=4, n_samples=32, kern_t=8)
    model = build_model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for name, arr in model.params.items():
        # move BN affine and biases off their trivial init so every path is exercised
        if name.endswith((".gamma", ".beta")) or name == "dense.b":
            arr += 0.3 * rng.standard_normal(arr.shape)
    x = rng.standard_normal((4, cfg.n_channels, cfg.n_samples)) + rng.standard_normal((1, cfg.n_channels, 1))
    y = np.array([0, 1, 1, 0])
    drop_seed = seed + 7

    def loss_and_trace():
        z, tr = forward(model, x, "train", np.random.default_rng(drop_seed))
        loss, ctx = ops.SOFTMAX_XENT.forward(z, y)
        return loss, tr, ctx

    _, tr, ctx = loss_and_trace()
    grads = backward(tr, ops.SOFTMAX_XENT.backward(ctx)["logits"])
    worst = 0.0
    for name, arr in model.params.items():
        analytic = grads[name] + (1e-2 if perturb else 0.0)
        numeric = numeric_grad(lambda: loss_and_trace()[0], arr)
        worst = max(worst, _rel_err(analytic, numeric))
    return worst


def run_suite(seed: int = 0, instances: int = 20, model_instances: int = 2,
              perturb: str | None = None) -> list[CaseResult]:
    """Check every op on ``instances`` random instances plus the whole model.

    ``perturb`` names a case whose analytic gradient is deliberately offset,
    for exercising the failure path.
    """
    results = []
    for i, (name, make) in enumerate(OP_CASES.items()):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(instances):
            op, inputs, wrt, options = make(rng)
            worst = max(worst, check_op(op, inputs, wrt, rng, options, perturb=(perturb == name)))
        results.append(CaseResult(name, instances, worst))
    worst = max(check_model(seed * 1000 + k, perturb == "model") for k in range(model_instances))
    results.append(CaseResult("model", model_instances, worst))
    return results
