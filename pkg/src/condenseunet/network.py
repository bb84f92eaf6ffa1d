"""CondenseUNet: condense blocks on a U-shaped encoder-decoder.

Down path: stem 3x3 conv, then per level a condense block and a transition
down (BN, ReLU, 1x1 conv halving the width, 2x2 max-pool).  The deepest
block is the bottleneck.  Up path: per level a 3x3 stride-2 transposed conv
to the width of the matching transition-down output, element-wise addition
with that output, and a condense block.  A 1x1 conv and a channel softmax
produce the per-pixel class distribution.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import functional as F
from . import nn
from .lgconv import CondensedConv, CondenseError, LearnedGroupConv, lg_layers, to_condensed
from .tensor import Tensor, concat, no_grad, relu


class ConfigError(ValueError):
    """Network configuration cannot be instantiated."""


@dataclass
class NetworkConfig:
    layers_per_block: list = field(default_factory=lambda: [2, 3, 4, 5, 4, 3, 2])
    growth_rate: int = 16
    initial_features: int = 32
    condensation_factor: int = 4
    groups: int = 4
    num_classes: int = 4
    input_channels: int = 1
    bottleneck_width: int = 4

    def __post_init__(self):
        self.layers_per_block = [int(n) for n in self.layers_per_block]
        if not self.layers_per_block or len(self.layers_per_block) % 2 == 0:
            raise ConfigError(f"layers_per_block must have odd length, got {self.layers_per_block}")
        if min(self.layers_per_block) < 1:
            raise ConfigError("every block needs at least one layer")
        for key in ("growth_rate", "initial_features", "condensation_factor", "groups",
                    "num_classes", "input_channels", "bottleneck_width"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")

    @property
    def num_pools(self) -> int:
        return (len(self.layers_per_block) - 1) // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


class CondenseLayer(nn.Module):
    """BN-ReLU-LGConv(1x1, to width*k)-BN-ReLU-GroupConv(3x3, to k)."""

    def __init__(self, in_channels: int, cfg: NetworkConfig, rng, dtype, name: str):
        super().__init__()
        k, width = cfg.growth_rate, cfg.bottleneck_width * cfg.growth_rate
        self.name = name
        self.in_channels, self.out_channels = in_channels, k
        self.bn1 = nn.BatchNorm2d(in_channels, dtype=dtype)
        self.lgconv = LearnedGroupConv(in_channels, width, cfg.groups, cfg.condensation_factor,
                                       rng=rng, dtype=dtype, name=f"{name}.lgconv")
        self.bn2 = nn.BatchNorm2d(width, dtype=dtype)
        if width % cfg.groups or k % cfg.groups:
            raise ConfigError(f"{name}.conv: groups M={cfg.groups} must divide {width} and {k}")
        self.conv = nn.Conv2d(width, k, 3, padding=1, groups=cfg.groups, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = self.lgconv(relu(self.bn1(x)))
        return self.conv(relu(self.bn2(h)))


class CondenseBlock(nn.Module):
    """Densely connected: layer j sees the block input and all earlier outputs."""

    def __init__(self, in_channels: int, n_layers: int, cfg: NetworkConfig, rng, dtype, name: str):
        super().__init__()
        self.name = name
        self.in_channels = in_channels
        self.layers = nn.ModuleList()
        c = in_channels
        for j in range(n_layers):
            try:
                self.layers.append(CondenseLayer(c, cfg, rng, dtype, f"{name}.layer{j + 1}"))
            except CondenseError as exc:
                raise ConfigError(str(exc)) from exc
            c += cfg.growth_rate
        self.out_channels = c

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for layer in self.layers:
            inp = feats[0] if len(feats) == 1 else concat(feats, axis=1)
            feats.append(layer(inp))
        return concat(feats, axis=1)


class TransitionDown(nn.Module):
    def __init__(self, in_channels: int, rng, dtype):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, in_channels // 2
        self.bn = nn.BatchNorm2d(in_channels, dtype=dtype)
        self.conv = nn.Conv2d(in_channels, self.out_channels, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> tuple:
        skip = self.conv(relu(self.bn(x)))
        return skip, F.maxpool2d(skip, 2, 2)


class TransitionUp(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, rng, dtype):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.conv = nn.ConvTranspose2d(in_channels, out_channels, 3, stride=2, padding=1,
                                       output_padding=1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class SkipJoin(nn.Module):
    """Element-wise addition of the up-path and skip features; a 1x1 projection
    maps the skip to the up-path width when they differ."""

    def __init__(self, up_channels: int, skip_channels: int, rng, dtype):
        super().__init__()
        self.proj = (nn.Conv2d(skip_channels, up_channels, 1, rng=rng, dtype=dtype)
                     if skip_channels != up_channels else None)

    def forward(self, up: Tensor, skip: Tensor) -> Tensor:
        if self.proj is not None:
            skip = self.proj(skip)
        return F.add_same(up, skip)


class CondenseUNet(nn.Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float64):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(seed)
        n = cfg.num_pools
        lpb = cfg.layers_per_block
        self.stem = nn.Conv2d(cfg.input_channels, cfg.initial_features, 3, padding=1, rng=rng, dtype=dtype)
        self.down = nn.ModuleList()
        self.tdown = nn.ModuleList()
        c = cfg.initial_features
        skip_channels = []
        for i in range(n):
            block = CondenseBlock(c, lpb[i], cfg, rng, dtype, f"down{i + 1}")
            self.down.append(block)
            td = TransitionDown(block.out_channels, rng, dtype)
            self.tdown.append(td)
            skip_channels.append(td.out_channels)
            c = td.out_channels
        self.bottleneck = CondenseBlock(c, lpb[n], cfg, rng, dtype, "bottleneck")
        c = self.bottleneck.out_channels
        self.tup = nn.ModuleList()
        self.joins = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in range(n):
            target = skip_channels[n - 1 - i]
            self.tup.append(TransitionUp(c, target, rng, dtype))
            self.joins.append(SkipJoin(target, target, rng, dtype))
            block = CondenseBlock(target, lpb[n + 1 + i], cfg, rng, dtype, f"up{i + 1}")
            self.up.append(block)
            c = block.out_channels
        self.head = nn.Conv2d(c, cfg.num_classes, 1, bias=True, rng=rng, dtype=dtype)

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise F.ShapeError(
                f"expected input (N, {self.config.input_channels}, H, W), got {x.shape}")
        div = 2 ** self.config.num_pools
        if x.shape[2] % div or x.shape[3] % div:
            raise F.ShapeError(f"spatial size {x.shape[2:]} must be divisible by {div}")

    def logits(self, x: Tensor) -> Tensor:
        self.check_input(x)
        h = self.stem(x)
        skips = []
        for block, td in zip(self.down, self.tdown):
            skip, h = td(block(h))
            skips.append(skip)
        h = self.bottleneck(h)
        for tu, join, block in zip(self.tup, self.joins, self.up):
            h = block(join(tu(h), skips.pop()))
        return self.head(h)

    def forward(self, x: Tensor) -> Tensor:
        return F.softmax_channels(self.logits(x))

    # -- condensation helpers ------------------------------------------------------
    def lg_layers(self) -> list:
        return lg_layers(self)

    def active_fraction(self) -> float:
        """Fraction of LG-Conv connections still active, over all LG-Conv weights."""
        layers = self.lg_layers()
        total = sum(l.mask.size for l in layers)
        return float(sum(l.mask.sum() for l in layers) / total) if total else 1.0

    def apply_masks(self) -> None:
        for layer in self.lg_layers():
            layer.apply_mask()


def build_condenseunet(cfg: Optional[NetworkConfig] = None, seed: int = 0, dtype=np.float64) -> CondenseUNet:
    return CondenseUNet(cfg if cfg is not None else NetworkConfig(), seed=seed, dtype=dtype)


def condensed_copy(net: CondenseUNet) -> CondenseUNet:
    """Deep copy of ``net`` with every LG-Conv replaced by its packed inference form."""
    out = copy.deepcopy(net)
    for _, module in list(out.named_modules()):
        for attr, child in list(vars(module).items()):
            if isinstance(child, LearnedGroupConv):
                setattr(module, attr, to_condensed(child))
    return out


_LEAF_TYPES = (nn.Conv2d, nn.ConvTranspose2d, nn.BatchNorm2d, LearnedGroupConv, CondensedConv)


def layer_table(net: CondenseUNet, input_hw: tuple = (128, 128)) -> list:
    """One row per parametrized layer: name, output shape, parameter count, mask density."""
    names = {id(m): name for name, m in net.named_modules()}
    rows = []

    def hook(module, out):
        if isinstance(module, _LEAF_TYPES):
            density = module.active_fraction() if isinstance(module, LearnedGroupConv) else None
            rows.append({
                "layer": names.get(id(module), "?"),
                "type": type(module).__name__,
                "output_shape": tuple(out.shape),
                "params": int(sum(p.size for p in module.parameters())),
                "mask_density": density,
            })

    was_training = net.training
    nn.add_forward_hook(hook)
    try:
        with no_grad():
            net.train()
            x = Tensor(np.zeros((2, net.config.input_channels) + tuple(input_hw),
                                dtype=net.stem.weight.dtype))
            state = copy.deepcopy(net.state_dict())
            net(x)
            net.load_state_dict(state)
    finally:
        nn.remove_forward_hook(hook)
        net.train(was_training)
    return rows


def format_summary(rows: list) -> str:
    lines = [f"{'layer':<34} {'type':<18} {'output shape':<22} {'params':>9} {'density':>8}"]
    for r in rows:
        d = "" if r["mask_density"] is None else f"{r['mask_density']:.3f}"
        lines.append(f"{r['layer']:<34} {r['type']:<18} {str(r['output_shape']):<22} {r['params']:>9} {d:>8}")
    lines.append(f"{'total':<34} {'':<18} {'':<22} {sum(r['params'] for r in rows):>9}")
    return "\n".join(lines)
