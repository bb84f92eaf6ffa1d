"""Learned group convolution (LG-Conv).

A 1x1 convolution whose output filters are split into ``groups`` equal
blocks.  Each block shares a binary input-channel mask.  Training runs
``C - 1`` condensing stages; at the end of each one every group drops the
``in_channels / C`` still-active input channels with the smallest mean
absolute weight, so a fully condensed layer keeps ``1/C`` of its inputs
per group.  A group-lasso penalty over (group, input channel) weight
columns pushes whole columns towards zero before they are cut.

Once all stages are done the layer can be re-packed (``to_condensed``) into
a channel gather followed by an ordinary grouped convolution, which
computes the same function with ``1/C`` of the weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import functional as F
from .nn import Module, Parameter, he_normal
from .tensor import Tensor, index_select, sqrt


class CondenseError(ValueError):
    """Invalid LG-Conv geometry or an out-of-order condensation request."""


class LearnedGroupConv(Module):
    def __init__(self, in_channels: int, out_channels: int, groups: int = 4,
                 condensation_factor: int = 4, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64, name: str = "lgconv"):
        super().__init__()
        if condensation_factor < 1 or in_channels % condensation_factor:
            raise CondenseError(
                f"{name}: condensation factor C={condensation_factor} must divide in_channels={in_channels}")
        if groups < 1 or out_channels % groups:
            raise CondenseError(f"{name}: groups M={groups} must divide out_channels={out_channels}")
        if in_channels % groups:
            raise CondenseError(f"{name}: groups M={groups} must divide in_channels={in_channels}")
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.groups, self.condensation_factor = groups, condensation_factor
        self.name = name
        self.weight = Parameter(he_normal(rng, (out_channels, in_channels, 1, 1), in_channels, dtype))
        self.register_buffer("mask", np.ones((out_channels, in_channels), dtype=dtype))
        self.register_buffer("stage", np.zeros(1, dtype=np.int64))

    @property
    def mask(self) -> np.ndarray:
        return self._buffers["mask"]

    @property
    def completed_stages(self) -> int:
        return int(self._buffers["stage"][0])

    @property
    def max_stages(self) -> int:
        return self.condensation_factor - 1

    @property
    def fully_condensed(self) -> bool:
        return self.completed_stages == self.max_stages

    def active_fraction(self) -> float:
        return float(self.mask.mean())

    def group_masks(self) -> np.ndarray:
        """(groups, in_channels) boolean view of the shared per-group mask."""
        per = self.out_channels // self.groups
        return self.mask[::per].astype(bool)

    def apply_mask(self) -> None:
        """Zero weights at pruned positions (idempotent)."""
        self.weight.data *= self.mask[:, :, None, None]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise F.ShapeError(f"{self.name}: expected {self.in_channels} input channels, got shape {x.shape}")
        w = self.weight * self.mask[:, :, None, None]
        return F.conv2d(x, w)


def lg_forward(layer: LearnedGroupConv, x: Tensor) -> Tensor:
    return layer(x)


def importance_scores(layer: LearnedGroupConv) -> np.ndarray:
    """Mean |weight| of each input channel over the filters of each group.

    Returns an array of shape (groups, in_channels); pruned columns score 0.
    """
    w = np.abs(layer.weight.data[:, :, 0, 0] * layer.mask)
    per = layer.out_channels // layer.groups
    return w.reshape(layer.groups, per, layer.in_channels).mean(axis=1)


def condense_stage(layer: LearnedGroupConv) -> dict:
    """Run one condensing stage in place and report what was removed.

    Each group drops ``in_channels / C`` of its active input channels with
    the lowest importance; ties go to the lowest channel index.
    """
    if layer.completed_stages >= layer.max_stages:
        raise CondenseError(
            f"{layer.name}: all {layer.max_stages} condensing stages already done")
    scores = importance_scores(layer)
    active = layer.group_masks()
    n_drop = layer.in_channels // layer.condensation_factor
    per = layer.out_channels // layer.groups
    removed = []
    for g in range(layer.groups):
        ranked = np.where(active[g], scores[g], np.inf)
        drop = np.sort(np.argsort(ranked, kind="stable")[:n_drop])
        layer.mask[g * per:(g + 1) * per, drop] = 0.0
        removed.append(drop.tolist())
    layer.apply_mask()
    layer._buffers["stage"][0] += 1
    return {"layer": layer.name, "stage": layer.completed_stages, "removed": removed}


def group_lasso_penalty(layer: LearnedGroupConv) -> Tensor:
    """Sum over (group, input channel) of the L2 norm of that weight column.

    Differentiable; the gradient of a column with norm exactly zero is 0.
    """
    per = layer.out_channels // layer.groups
    w = (layer.weight * layer.mask[:, :, None, None]).reshape(layer.groups, per, layer.in_channels)
    return sqrt((w * w).sum(axis=1)).sum()


class CondensedConv(Module):
    """Inference form of a fully condensed LG-Conv: gather, then grouped 1x1 conv."""

    def __init__(self, index: np.ndarray, packed_weight: np.ndarray, in_channels: int, name: str = ""):
        super().__init__()
        self.groups = index.shape[0]
        self.in_channels = in_channels
        self.out_channels = packed_weight.shape[0]
        self.name = name
        self.register_buffer("index", np.asarray(index, dtype=np.int64))
        self.weight = Parameter(packed_weight)

    @property
    def index_select(self) -> np.ndarray:
        return self._buffers["index"]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise F.ShapeError(f"{self.name}: expected {self.in_channels} input channels, got shape {x.shape}")
        gathered = index_select(x, self._buffers["index"].ravel(), axis=1)
        return F.conv2d(gathered, self.weight, groups=self.groups)


def to_condensed(layer: LearnedGroupConv) -> CondensedConv:
    if not layer.fully_condensed:
        raise CondenseError(
            f"{layer.name}: {layer.completed_stages}/{layer.max_stages} stages done; condense fully first")
    active = layer.group_masks()
    per = layer.out_channels // layer.groups
    index = np.stack([np.flatnonzero(row) for row in active])
    w = layer.weight.data[:, :, 0, 0]
    packed = np.empty((layer.out_channels, index.shape[1], 1, 1), dtype=w.dtype)
    for g in range(layer.groups):
        packed[g * per:(g + 1) * per, :, 0, 0] = w[g * per:(g + 1) * per][:, index[g]]
    return CondensedConv(index, packed, layer.in_channels, name=layer.name)


@dataclass
class CondenseSchedule:
    """When the condensing stages end.

    ``stage_boundaries[s]`` is the epoch at whose start stage ``s + 1`` fires.
    """

    total_epochs: int
    stage_boundaries: list = field(default_factory=list)
    lasso_coefficient: float = 1e-5

    def __post_init__(self):
        b = list(self.stage_boundaries)
        if any(x < 1 or x >= self.total_epochs for x in b):
            raise CondenseError(f"stage boundaries {b} must lie in [1, {self.total_epochs})")
        if any(x2 <= x1 for x1, x2 in zip(b, b[1:])):
            raise CondenseError(f"stage boundaries {b} must be strictly increasing")
        if self.lasso_coefficient < 0:
            raise CondenseError("lasso coefficient must be non-negative")
        self.stage_boundaries = [int(x) for x in b]

    @classmethod
    def halves(cls, total_epochs: int, condensation_factor: int,
               lasso_coefficient: float = 1e-5) -> "CondenseSchedule":
        """C-1 equal condensing stages in the first half, optimization in the second."""
        n = condensation_factor - 1
        bounds = [s * total_epochs // (2 * n) for s in range(1, n + 1)] if n else []
        return cls(total_epochs, bounds, lasso_coefficient)

    def stages_due(self, epoch: int) -> int:
        """Number of condensing stages that must be complete before ``epoch`` runs."""
        return sum(1 for b in self.stage_boundaries if b <= epoch)

    def fires_at(self, epoch: int) -> bool:
        return epoch in self.stage_boundaries


def lg_layers(module: Module) -> list:
    return [m for _, m in module.named_modules() if isinstance(m, LearnedGroupConv)]
