"""Finite-difference verification table for every differentiable operation.

Each check builds a small kink-free problem in float64, compares the taped
gradient against central differences, and reports the max relative error.
Per-op tolerance is 1e-6; deep compositions (the full model with the triplet
loss on a tiny configuration) are held to 1e-4.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import conv_block, init_conv_block
from .fusion import FusionParams, fuse_adaptive, init_fusion
from .network import ScnConfig, init_params, scn_forward_many, swap_parameter
from .templates import template_diff, template_multi_diff, template_static_excl
from .trainer import TripletConfig, triplet_loss_ba


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _kinkfree(rng, shape, margin=0.15):
    return rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _weighted(op, rng, out_shape):
    w = rng.standard_normal(out_shape)

    def fn(x):
        return T.sum_all(T.mul(op(x), T.Tensor(w)))

    return fn


def _check_simple_ops(rng):
    out = []
    bias = T.Tensor(rng.standard_normal((4,)))
    mat = T.Tensor(rng.standard_normal((4, 2)))
    cases = [
        ("elementwise/abs", lambda v: T.absolute(v), (3, 4), (3, 4)),
        ("elementwise/leaky_relu", lambda v: T.leaky_relu(v, 0.01), (3, 4), (3, 4)),
        ("elementwise/scalar_mul", lambda v: T.scalar_mul(v, 1.7), (3, 4), (3, 4)),
        ("elementwise/add_broadcast", lambda v: T.add(v, bias), (3, 4), (3, 4)),
        ("reduce/mean", lambda v: T.reduce(v, 0, "mean"), (5, 3), (3,)),
        ("reduce/max", lambda v: T.reduce(v, 0, "max"), (5, 3), (3,)),
        ("reduce/median", lambda v: T.reduce(v, 0, "median"), (5, 3), (3,)),
        ("matmul", lambda v: T.matmul(v, mat), (3, 4), (3, 2)),
        ("max_pool2x2", lambda v: T.max_pool2x2(v), (2, 4, 6), (2, 2, 3)),
    ]
    for name, op, in_shape, out_shape in cases:
        x = T.Tensor(_kinkfree(rng, in_shape))
        out.append(CheckResult(name, T.grad_check(_weighted(op, rng, out_shape), x, h=1e-5), 1e-6))
    return out


def _check_convs(rng):
    out = []
    x = T.Tensor(_kinkfree(rng, (2, 3, 6, 4)))
    kd = T.Tensor(rng.standard_normal((3, 3, 3, 3)))
    out.append(CheckResult(
        "conv2d/input",
        T.grad_check(_weighted(lambda v: T.conv2d(v, kd, 1, 1), rng, (2, 3, 6, 4)), x),
        1e-6,
    ))
    out.append(CheckResult(
        "conv2d/kernel",
        T.grad_check(_weighted(lambda v: T.conv2d(x, v, 1, 1), rng, (2, 3, 6, 4)), kd),
        1e-6,
    ))
    xs = T.Tensor(_kinkfree(rng, (1, 2, 6, 8)))
    ks = T.Tensor(rng.standard_normal((2, 2, 3, 3)))
    out.append(CheckResult(
        "conv2d/strided",
        T.grad_check(_weighted(lambda v: T.conv2d(v, ks, stride=2, padding=1), rng, (1, 2, 3, 4)), xs),
        1e-6,
    ))
    k3 = T.Tensor(rng.standard_normal((3, 3, 3, 1, 1)))
    out.append(CheckResult(
        "conv3d_t3/input",
        T.grad_check(_weighted(lambda v: T.conv3d_t3(v, k3), rng, (2, 3, 6, 4)), x),
        1e-6,
    ))
    out.append(CheckResult(
        "conv3d_t3/kernel",
        T.grad_check(_weighted(lambda v: T.conv3d_t3(x, v), rng, (2, 3, 6, 4)), k3),
        1e-6,
    ))
    return out


def _check_templates(rng):
    out = []
    x = T.Tensor(_kinkfree(rng, (5, 1, 3, 2)))
    for name, op, m in [
        ("template/diff", template_diff, 4),
        ("template/multi_diff", template_multi_diff, 3),
        ("template/static_excl_mean", lambda v: template_static_excl(v, "mean"), 5),
        ("template/static_excl_median", lambda v: template_static_excl(v, "median"), 5),
    ]:
        fn = _weighted(lambda v, op=op: op(v).maps, rng, (m, 1, 3, 2))
        out.append(CheckResult(name, T.grad_check(fn, x), 1e-6))
    return out


def _check_blocks(rng):
    out = []
    cb = init_conv_block(2, rng)
    x = T.Tensor(_kinkfree(rng, (2, 4, 4)))
    out.append(CheckResult(
        "conv_block", T.grad_check(_weighted(lambda v: conv_block(cb, v), rng, (2, 4, 4)), x, h=1e-6), 1e-5
    ))
    tb = init_fusion("adaptive", 2, rng).template_block
    tb.conv1.data = 0.3 * rng.standard_normal((2, 2, 3, 3))
    tb.conv2.data = 0.3 * rng.standard_normal((2, 2, 3, 3))
    tb.projection.data = 0.3 * rng.standard_normal((2, 2, 1, 1))
    frames = T.Tensor(_kinkfree(rng, (4, 2, 4, 4)))

    def adaptive(v):
        t = template_diff(frames)
        p = FusionParams("adaptive", template_block=dataclasses.replace(tb, conv1=v))
        return fuse_adaptive(frames, t, p, cb)

    out.append(CheckResult(
        "fusion/adaptive",
        T.grad_check(_weighted(adaptive, rng, (3, 2, 4, 4)), T.Tensor(tb.conv1.data.copy()), h=1e-6),
        1e-4,
    ))
    return out


def _check_loss(rng):
    rows = T.Tensor(rng.standard_normal((6, 4)))
    labels = [1, 1, 1, 2, 2, 2]
    cfg = TripletConfig(margin=0.2)

    def fn(v):
        loss, _ = triplet_loss_ba(v, labels, cfg)
        return loss

    return [CheckResult("triplet_loss", T.grad_check(fn, rows, h=1e-6), 1e-5)]


def _check_full_model(rng):
    """End to end: forward plus triplet loss on the tiny configuration.

    Coordinates are sampled (seeded) per parameter; the check is the oracle.
    """
    cfg = ScnConfig(channels=(4, 8, 16), input_hw=(16, 12), window_len=3,
                    template="static_excl_mean", fusion="adaptive")
    params = init_params(cfg, rng)
    for _, t in params.named_parameters():
        if not t.data.any():
            t.data = t.data + 0.05 * rng.standard_normal(t.shape)
    seq_data = [rng.standard_normal((8, 1, 16, 12)) for _ in range(4)]
    labels = [1, 1, 2, 2]
    # a margin large enough that every triplet hinge is strictly active keeps
    # the loss away from its piecewise boundary under the probe steps
    tl_cfg = TripletConfig(margin=50.0)

    def loss_with(name, v):
        swapped = swap_parameter(params, name, v)
        feats = scn_forward_many(swapped, [T.Tensor(s) for s in seq_data])
        loss, _ = triplet_loss_ba(feats, labels, tl_cfg)
        return loss

    worst = 0.0
    check_rng = np.random.default_rng(7)
    for name in ("stage1.transition", "stage1.bie.tblock.conv1", "stage2.cb.conv2",
                 "stage3.cb.conv1", "mfa.temporal_kernel"):
        t = dict(params.named_parameters())[name]
        err = T.grad_check(lambda v, n=name: loss_with(n, v), T.Tensor(t.data.copy()),
                           h=1e-5, coords=10, rng=check_rng)
        worst = max(worst, err)
    return [CheckResult("full_model+triplet", worst, 1e-4)]


GROUPS = {
    "elementwise": _check_simple_ops,
    "conv": _check_convs,
    "template": _check_templates,
    "block": _check_blocks,
    "loss": _check_loss,
    "full": _check_full_model,
}


def run_gradcheck(only: str | None = None, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for group, fn in GROUPS.items():
        batch = fn(rng)
        if only:
            batch = [r for r in batch if only in r.name or only == group]
        results.extend(batch)
    if only and not results:
        raise ValueError(f"no gradient checks match {only!r}")
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'operation':<28} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(
            f"{r.name:<28} {r.max_rel_err:>12.3e} {r.tol:>8.0e}  "
            + ("pass" if r.passed else "FAIL")
        )
    return "\n".join(lines)
