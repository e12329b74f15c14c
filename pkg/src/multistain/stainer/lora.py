"""Low-rank adapters for frozen ``nn.Linear`` / ``nn.Conv2d`` layers."""

from __future__ import annotations

import math

import torch
from torch import nn

from ..errors import ConfigError


class _LoRABase(nn.Module):
    def __init__(self, base: nn.Module, rank: int, alpha: float, in_dim: int, out_dim: int):
        super().__init__()
        if rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
        if rank > min(in_dim, out_dim):
            raise ConfigError(
                f"LoRA rank {rank} exceeds layer dimension min({in_dim}, {out_dim})"
            )
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = alpha / rank
        self.enabled = True

    def forward(self, x):
        out = self.base(x)
        if self.enabled:
            out = out + self.scale * self.up(self.down(x))
        return out


class LoRALinear(_LoRABase):
    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__(base, rank, alpha, base.in_features, base.out_features)
        self.down = nn.Linear(base.in_features, rank, bias=False)
        self.up = nn.Linear(rank, base.out_features, bias=False)
        nn.init.kaiming_uniform_(self.down.weight, a=math.sqrt(5))
        nn.init.zeros_(self.up.weight)


class LoRAConv2d(_LoRABase):
    """Rank-r pair: a ``k x k`` conv down to ``rank`` channels, then a 1x1 up."""

    def __init__(self, base: nn.Conv2d, rank: int, alpha: float):
        super().__init__(base, rank, alpha, base.in_channels, base.out_channels)
        self.down = nn.Conv2d(
            base.in_channels,
            rank,
            base.kernel_size,
            stride=base.stride,
            padding=base.padding,
            bias=False,
        )
        self.up = nn.Conv2d(rank, base.out_channels, 1, bias=False)
        nn.init.kaiming_uniform_(self.down.weight, a=math.sqrt(5))
        nn.init.zeros_(self.up.weight)


def wrap(layer: nn.Module, rank: int, alpha: float) -> nn.Module:
    if isinstance(layer, nn.Conv2d):
        return LoRAConv2d(layer, rank, alpha)
    if isinstance(layer, nn.Linear):
        return LoRALinear(layer, rank, alpha)
    raise ConfigError(f"cannot attach LoRA to {type(layer).__name__}")


def inject(module: nn.Module, names: list[str], rank: int, alpha: float) -> list[str]:
    """Replace the named sub-layers of ``module`` with LoRA wrappers in place."""
    if not names:
        raise ConfigError(f"no LoRA target layers designated for {type(module).__name__}")
    for name in names:
        parent_name, _, attr = name.rpartition(".")
        parent = module.get_submodule(parent_name) if parent_name else module
        setattr(parent, attr, wrap(getattr(parent, attr), rank, alpha))
    return names


def lora_layers(module: nn.Module):
    return [m for m in module.modules() if isinstance(m, _LoRABase)]


def set_enabled(module: nn.Module, enabled: bool):
    for layer in lora_layers(module):
        layer.enabled = enabled
