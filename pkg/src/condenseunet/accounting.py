"""Analytic parameter and multiply-accumulate counts.

Counts are derived from a ``NetworkConfig`` alone and can be cross-checked
against the parameters of an instantiated network.  Batchnorm affine
parameters (gamma, beta) are included; running statistics are not.
MACs are reported for a square input of ``input_size`` pixels and count
only convolutions.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

from .network import CondenseUNet, NetworkConfig
from .nn import Parameter

STATES = ("dense", "condensed")
UNET_WIDTHS = (64, 128, 256, 512, 1024)


@dataclass
class CostRow:
    name: str
    kind: str
    weights: int
    extra: int  # biases and batchnorm affine parameters
    macs: int
    out_channels: int = 0
    out_size: int = 0

    @property
    def params(self) -> int:
        return self.weights + self.extra


@dataclass
class CostReport:
    model: str
    state: str
    input_size: int
    rows: list = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_weights(self) -> int:
        return sum(r.weights for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def by_name(self) -> dict:
        return {r.name: r for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "state", "layer", "kind", "weights", "bias_affine", "params", "macs"])
        for r in self.rows:
            w.writerow([self.model, self.state, r.name, r.kind, r.weights, r.extra, r.params, r.macs])
        return buf.getvalue()


def conv_weights(in_channels: int, out_channels: int, kernel: int, groups: int = 1) -> int:
    if in_channels % groups or out_channels % groups:
        raise ValueError(f"groups={groups} must divide {in_channels} and {out_channels}")
    return out_channels * (in_channels // groups) * kernel * kernel


def lgconv_weights(in_channels: int, out_channels: int, condensation_factor: int, condensed: bool) -> int:
    """1x1 LG-Conv: every connection when dense, ``I/C`` inputs per filter when condensed."""
    if in_channels % condensation_factor:
        raise ValueError(f"C={condensation_factor} must divide in_channels={in_channels}")
    return out_channels * (in_channels // condensation_factor if condensed else in_channels)


class _Builder:
    def __init__(self, report: CostReport):
        self.report = report

    def conv(self, name, cin, cout, k, size, groups=1, bias=False, kind="conv"):
        w = conv_weights(cin, cout, k, groups)
        # a stride-2 transposed conv does its work once per input position
        positions = (size // 2) ** 2 if kind == "conv_transpose" else size * size
        self.report.rows.append(CostRow(name, kind, w, cout if bias else 0, w * positions, cout, size))

    def lg(self, name, cin, cout, c, size, condensed):
        w = lgconv_weights(cin, cout, c, condensed)
        self.report.rows.append(CostRow(name, "lgconv", w, 0, w * size * size, cout, size))

    def bn(self, name, ch, size):
        self.report.rows.append(CostRow(name, "batchnorm", 0, 2 * ch, 0, ch, size))


def _condense_plan(cfg: NetworkConfig, report: CostReport, condensed: bool, learned: bool,
                   grouped_3x3: bool) -> CostReport:
    """Rows for the CondenseUNet graph.  ``learned=False`` replaces each LG-Conv
    by an ordinary dense 1x1 conv (the DenseNet analog)."""
    b = _Builder(report)
    size = report.input_size
    n = cfg.num_pools
    k, width = cfg.growth_rate, cfg.bottleneck_width * cfg.growth_rate
    g3 = cfg.groups if grouped_3x3 else 1

    def block(prefix, cin, n_layers, s):
        c = cin
        for j in range(n_layers):
            p = f"{prefix}.layers.{j}"
            b.bn(f"{p}.bn1", c, s)
            if learned:
                b.lg(f"{p}.lgconv", c, width, cfg.condensation_factor, s, condensed)
            else:
                b.conv(f"{p}.lgconv", c, width, 1, s)
            b.bn(f"{p}.bn2", width, s)
            b.conv(f"{p}.conv", width, k, 3, s, groups=g3)
            c += k
        return c

    b.conv("stem", cfg.input_channels, cfg.initial_features, 3, size)
    c = cfg.initial_features
    skips = []
    for i in range(n):
        s = size >> i
        c = block(f"down.{i}", c, cfg.layers_per_block[i], s)
        b.bn(f"tdown.{i}.bn", c, s)
        b.conv(f"tdown.{i}.conv", c, c // 2, 1, s)
        c //= 2
        skips.append(c)
    c = block("bottleneck", c, cfg.layers_per_block[n], size >> n)
    for i in range(n):
        target = skips[n - 1 - i]
        s = size >> (n - 1 - i)
        b.conv(f"tup.{i}.conv", c, target, 3, s, bias=True, kind="conv_transpose")
        c = block(f"up.{i}", target, cfg.layers_per_block[n + 1 + i], s)
    b.conv("head", c, cfg.num_classes, 1, size, bias=True)
    return report


def count_params(cfg: Optional[NetworkConfig] = None, state: str = "dense", input_size: int = 128) -> CostReport:
    """CondenseUNet cost; ``state`` is "dense" (masks all ones) or "condensed"."""
    if state not in STATES:
        raise ValueError(f"state must be one of {STATES}, got {state!r}")
    cfg = cfg if cfg is not None else NetworkConfig()
    report = CostReport("condenseunet", state, input_size)
    return _condense_plan(cfg, report, state == "condensed", learned=True, grouped_3x3=True)


def densenet_analog(cfg: Optional[NetworkConfig] = None, input_size: int = 128) -> CostReport:
    """Same graph without learned grouping: dense 1x1 and ungrouped 3x3 convs."""
    cfg = cfg if cfg is not None else NetworkConfig()
    report = CostReport("densenet_analog", "dense", input_size)
    return _condense_plan(cfg, report, False, learned=False, grouped_3x3=False)


def unet_analog(num_classes: int = 4, input_channels: int = 1, widths=UNET_WIDTHS,
                input_size: int = 128) -> CostReport:
    """Classic encoder-decoder: two 3x3 conv+BN per level with channel doubling,
    2x2 up-convs and concatenation skips, 1x1 head."""
    report = CostReport("unet_analog", "dense", input_size)
    b = _Builder(report)
    c = input_channels
    for i, w in enumerate(widths):
        s = input_size >> i
        for j in range(2):
            b.conv(f"enc{i}.conv{j}", c, w, 3, s, bias=True)
            b.bn(f"enc{i}.bn{j}", w, s)
            c = w
    for i in range(len(widths) - 2, -1, -1):
        w, s = widths[i], input_size >> i
        b.conv(f"dec{i}.up", c, w, 2, s, bias=True, kind="conv_transpose")
        c = 2 * w  # concatenated with the encoder feature map
        for j in range(2):
            b.conv(f"dec{i}.conv{j}", c, w, 3, s, bias=True)
            b.bn(f"dec{i}.bn{j}", w, s)
            c = w
    b.conv("head", c, num_classes, 1, input_size, bias=True)
    return report


def compare_architectures(cfg: Optional[NetworkConfig] = None, input_size: int = 128) -> dict:
    """Totals for the three architectures and the headline ratios (condensed state)."""
    cfg = cfg if cfg is not None else NetworkConfig()
    reports = {
        "condenseunet_dense": count_params(cfg, "dense", input_size),
        "condenseunet_condensed": count_params(cfg, "condensed", input_size),
        "densenet_analog": densenet_analog(cfg, input_size),
        "unet_analog": unet_analog(cfg.num_classes, cfg.input_channels, input_size=input_size),
    }
    totals = {k: r.total_params for k, r in reports.items()}
    macs = {k: r.total_macs for k, r in reports.items()}
    cond, dense = totals["condenseunet_condensed"], totals["condenseunet_dense"]
    return {
        "input_size": input_size,
        "config": cfg.to_dict(),
        "params": totals,
        "macs": macs,
        "ratio_vs_densenet": cond / totals["densenet_analog"],
        "ratio_vs_unet": cond / totals["unet_analog"],
        "dense_ratio_vs_densenet": dense / totals["densenet_analog"],
        "dense_ratio_vs_unet": dense / totals["unet_analog"],
        "reports": reports,
    }


def comparison_csv(comparison: dict) -> str:
    """One row per architecture: the bar-chart data."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "params", "params_millions", "macs"])
    for name, total in comparison["params"].items():
        w.writerow([name, total, f"{total / 1e6:.6f}", comparison["macs"][name]])
    return buf.getvalue()


def comparison_json(comparison: dict) -> str:
    out = {k: v for k, v in comparison.items() if k != "reports"}
    return json.dumps(out, indent=2, sort_keys=True) + "\n"


def registry_counts(net: CondenseUNet) -> dict:
    """Parameter count per leaf module of an instantiated network."""
    out = {}
    for name, module in net.named_modules():
        own = sum(v.size for v in vars(module).values() if isinstance(v, Parameter))
        if own:
            out[name] = int(own)
    return out


def cross_check(net: CondenseUNet, state: str) -> list:
    """Layers whose analytic count differs from the registry; empty when consistent.

    For ``state="condensed"`` pass a network produced by ``condensed_copy``.
    """
    analytic = {r.name: r.params for r in count_params(net.config, state).rows if r.params}
    actual = registry_counts(net)
    names = sorted(set(analytic) | set(actual))
    return [(n, analytic.get(n), actual.get(n)) for n in names if analytic.get(n) != actual.get(n)]
