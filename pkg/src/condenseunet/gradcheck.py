"""Central finite-difference checks of every differentiable operation.

Each case builds a scalar ``L = sum(f(inputs) * R)`` with a fixed random
``R`` and compares autodiff gradients with ``(L(x+h) - L(x-h)) / 2h``.
The error of one element is ``|a - n| / max(|a|, |n|, floor)``; the floor
keeps gradients that are zero up to rounding from dominating.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import functional as F
from .lgconv import LearnedGroupConv, condense_stage, group_lasso_penalty
from .losses import LossWeights, cross_entropy, dual_loss, soft_dice_loss
from .network import CondenseUNet, NetworkConfig
from .tensor import (Tensor, clip_min, concat, exp, index_select, log, relu, sqrt, tabs)

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-6
MAX_ELEMENTS = 48


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _away_from(rng, shape, kink=0.0, gap=1e-2):
    """Normal samples with no entry within ``gap`` of ``kink``."""
    x = rng.standard_normal(shape)
    close = np.abs(x - kink) < gap
    x[close] = kink + np.where(x[close] >= kink, gap, -gap) * 5
    return x


def _distinct(rng, shape):
    """Values pairwise separated by at least 0.01, for max-pooling."""
    return (rng.permutation(int(np.prod(shape))).reshape(shape) * 0.01 + rng.uniform(-0.5, 0.5))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_gradients(fn: Callable, inputs: dict, seed: int, name: str = "",
                    h: float = STEP, max_elements: int = MAX_ELEMENTS) -> CheckResult:
    """``fn(**tensors) -> Tensor``; all ``inputs`` (float64 arrays) are differentiated."""
    rng = np.random.default_rng([seed, 7])
    tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in inputs.items()}
    out = fn(**tensors)
    weight = rng.standard_normal(out.shape) if out.shape else np.ones(())
    (out * weight).sum().backward()

    def scalar() -> float:
        with_grad_off = {k: Tensor(t.data) for k, t in tensors.items()}
        return float((fn(**with_grad_off).data * weight).sum())

    worst, count = 0.0, 0
    for key, t in tensors.items():
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        picks = np.arange(flat.size)
        if flat.size > max_elements:
            picks = rng.choice(flat.size, max_elements, replace=False)
        numeric = np.empty(len(picks))
        for j, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + h
            up = scalar()
            flat[i] = orig - h
            down = scalar()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        err = relative_error(grad.reshape(-1)[picks], numeric)
        worst = max(worst, float(err.max()))
        count += len(picks)
    return CheckResult(name, seed, worst, count)


# -- cases -----------------------------------------------------------------------------
# Each case maps a generator to (fn, inputs).

def _binary(op):
    def case(rng):
        return op, {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4,))}
    return case


def _case_div(rng):
    return (lambda a, b: a / b), {"a": rng.standard_normal((3, 4)), "b": rng.uniform(0.5, 2.0, (3, 1))}


def _case_power(rng):
    return (lambda a: a ** 3.0), {"a": rng.standard_normal((2, 5))}


def _case_exp(rng):
    return exp, {"a": rng.standard_normal((3, 3))}


def _case_log(rng):
    return log, {"a": rng.uniform(0.2, 3.0, (3, 3))}


def _case_sqrt(rng):
    return sqrt, {"a": rng.uniform(0.2, 3.0, (3, 3))}


def _case_abs(rng):
    return tabs, {"a": _away_from(rng, (3, 4))}


def _case_clip(rng):
    return (lambda a: clip_min(a, 0.1)), {"a": _away_from(rng, (3, 4), kink=0.1)}


def _case_relu(rng):
    return relu, {"a": _away_from(rng, (2, 3, 4))}


def _case_sum_mean(rng):
    return (lambda a: a.sum(axis=1) * 2.0 + a.mean(axis=(0, 2), keepdims=True).sum()), \
        {"a": rng.standard_normal((2, 3, 4))}


def _case_reshape_getitem(rng):
    return (lambda a: a.reshape(4, 6)[1:3, ::2] * a.reshape(24)[:1].sum()), {"a": rng.standard_normal((2, 3, 4))}


def _case_concat_index(rng):
    idx = np.array([2, 0, 2, 1])
    return (lambda a, b: index_select(concat([a, b], axis=1), idx, axis=1)), \
        {"a": rng.standard_normal((2, 2, 3)), "b": rng.standard_normal((2, 1, 3))}


def _case_conv(rng):
    groups = int(rng.choice([1, 2]))
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    k = int(rng.choice([1, 3]))
    return (lambda x, w, b: F.conv2d(x, w, b, stride, padding, groups)), {
        "x": rng.standard_normal((2, 4, 5, 5)), "w": rng.standard_normal((4, 4 // groups, k, k)),
        "b": rng.standard_normal(4)}


def _case_conv_transpose(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    op = int(rng.integers(0, stride))
    return (lambda x, w, b: F.conv_transpose2d(x, w, b, stride, padding, op)), {
        "x": rng.standard_normal((2, 3, 3, 3)), "w": rng.standard_normal((3, 2, 3, 3)),
        "b": rng.standard_normal(2)}


def _case_maxpool(rng):
    return (lambda x: F.maxpool2d(x, 2, 2)), {"x": _distinct(rng, (2, 2, 4, 4))}


def _case_batchnorm_train(rng):
    return (lambda x, g, b: F.batchnorm2d(x, g, b, None, None, True)), {
        "x": rng.standard_normal((3, 2, 3, 3)) * 2 + 1, "g": rng.uniform(0.5, 1.5, 2),
        "b": rng.standard_normal(2)}


def _case_batchnorm_eval(rng):
    mean, var = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
    return (lambda x, g, b: F.batchnorm2d(x, g, b, mean, var, False)), {
        "x": rng.standard_normal((2, 2, 3, 3)), "g": rng.uniform(0.5, 1.5, 2), "b": rng.standard_normal(2)}


def _case_softmax(rng):
    return F.softmax_channels, {"x": rng.standard_normal((2, 4, 3, 3)) * 2}


def _case_add_same(rng):
    return F.add_same, {"a": rng.standard_normal((2, 3, 2, 2)), "b": rng.standard_normal((2, 3, 2, 2))}


def _labels(rng, shape=(2, 5, 5)):
    return rng.integers(0, 4, shape)


def _case_cross_entropy(rng):
    target = _labels(rng)
    return (lambda z: cross_entropy(F.softmax_channels(z), target)), {"z": rng.standard_normal((2, 4, 5, 5))}


def _case_dice(rng):
    target = _labels(rng)
    return (lambda z: soft_dice_loss(F.softmax_channels(z), target)), {"z": rng.standard_normal((2, 4, 5, 5))}


def _case_dual(rng):
    target = _labels(rng)
    weights = LossWeights(*rng.uniform(0.1, 1.0, 2))
    return (lambda z: dual_loss(F.softmax_channels(z), target, weights)), {"z": rng.standard_normal((2, 4, 5, 5))}


def _case_lgconv(rng):
    layer = LearnedGroupConv(8, 8, groups=4, condensation_factor=4, rng=rng)
    for _ in range(int(rng.integers(0, 4))):
        condense_stage(layer)

    def fn(x, w):
        layer.weight = w
        return layer(x)

    return fn, {"x": rng.standard_normal((2, 8, 3, 3)), "w": layer.weight.data.copy()}


def _case_group_lasso(rng):
    layer = LearnedGroupConv(8, 8, groups=4, condensation_factor=4, rng=rng)
    condense_stage(layer)

    def fn(w):
        layer.weight = w
        return group_lasso_penalty(layer)

    return fn, {"w": layer.weight.data.copy()}


MICRO_CONFIG = NetworkConfig(layers_per_block=[1, 1, 1], growth_rate=4, initial_features=8,
                             condensation_factor=2, groups=2, num_classes=4, bottleneck_width=2)


def _case_network(rng):
    """Whole micro CondenseUNet plus dual loss, differentiated w.r.t. input and all parameters."""
    seed = int(rng.integers(1 << 31))
    net = CondenseUNet(MICRO_CONFIG, seed=seed)
    if rng.uniform() < 0.5:
        for layer in net.lg_layers():
            condense_stage(layer)
    target = _labels(rng, (2, 4, 4))
    named = dict(net.named_parameters())
    keys = {name: f"p{i}" for i, name in enumerate(named)}

    def fn(x, **params):
        for name, key in keys.items():
            _assign(net, name, params[key])
        return dual_loss(net(x), target)

    inputs = {"x": rng.standard_normal((2, 1, 4, 4))}
    inputs.update({keys[n]: p.data.copy() for n, p in named.items()})
    return fn, inputs


def _assign(module, dotted: str, value: Tensor) -> None:
    *path, leaf = dotted.split(".")
    for part in path:
        module = getattr(module, part)
    setattr(module, leaf, value)


CASES = {
    "add": _binary(lambda a, b: a + b),
    "sub": _binary(lambda a, b: a - b),
    "mul": _binary(lambda a, b: a * b),
    "div": _case_div,
    "power": _case_power,
    "exp": _case_exp,
    "log": _case_log,
    "sqrt": _case_sqrt,
    "abs": _case_abs,
    "clip_min": _case_clip,
    "relu": _case_relu,
    "sum_mean": _case_sum_mean,
    "reshape_getitem": _case_reshape_getitem,
    "concat_index_select": _case_concat_index,
    "conv2d": _case_conv,
    "conv_transpose2d": _case_conv_transpose,
    "maxpool2d": _case_maxpool,
    "batchnorm2d_train": _case_batchnorm_train,
    "batchnorm2d_eval": _case_batchnorm_eval,
    "softmax_channels": _case_softmax,
    "add_same": _case_add_same,
    "cross_entropy": _case_cross_entropy,
    "soft_dice_loss": _case_dice,
    "dual_loss": _case_dual,
    "lgconv": _case_lgconv,
    "group_lasso": _case_group_lasso,
    "micro_network": _case_network,
}


def run_case(name: str, seed: int) -> CheckResult:
    fn, inputs = CASES[name](np.random.default_rng([seed, len(name)]))
    return check_gradients(fn, inputs, seed, name)


def run_suite(seeds: int = 10, names: Optional[list] = None, log=None) -> list:
    """Run every case for seeds ``0 .. seeds-1``; returns the list of results."""
    results = []
    for name in names or list(CASES):
        t0 = time.perf_counter()
        batch = [run_case(name, s) for s in range(seeds)]
        results.extend(batch)
        if log is not None:
            worst = max(r.max_rel_error for r in batch)
            status = "ok" if all(r.passed for r in batch) else "FAIL"
            log(f"{name:<22} seeds={seeds:<3} max_rel_err={worst:.2e} {status} ({time.perf_counter() - t0:.1f}s)")
    return results
