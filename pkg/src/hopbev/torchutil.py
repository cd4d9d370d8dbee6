"""Torch helpers: reproducible parameter init and state flattening.

All modules in this package are initialized from explicit ``torch.Generator``
streams derived from ``(seed, module name)`` so that the same submodule gets
bit-identical weights regardless of which sibling branches exist in the
model. That is what makes the with/without-auxiliary-branch equivalence
checks exact.
"""

from __future__ import annotations

import hashlib
import math

import torch
from torch import nn


def seeded_generator(seed: int, name: str) -> torch.Generator:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    g = torch.Generator()
    g.manual_seed(int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF)
    return g


def uniform_(tensor: torch.Tensor, bound: float, generator: torch.Generator):
    with torch.no_grad():
        tensor.copy_((torch.rand(tensor.shape, generator=generator, dtype=tensor.dtype) * 2.0 - 1.0) * bound)
    return tensor


def normal_(tensor: torch.Tensor, std: float, generator: torch.Generator):
    with torch.no_grad():
        tensor.copy_(torch.randn(tensor.shape, generator=generator, dtype=tensor.dtype) * std)
    return tensor


def init_linear(layer: nn.Linear, generator: torch.Generator, zero=False, identity=False):
    """Default torch-style fan-in uniform init, or all-zero, or identity."""
    with torch.no_grad():
        if zero:
            layer.weight.zero_()
            if layer.bias is not None:
                layer.bias.zero_()
        elif identity:
            if layer.weight.shape[0] != layer.weight.shape[1]:
                raise ValueError("identity init needs a square weight")
            layer.weight.copy_(torch.eye(layer.weight.shape[0], dtype=layer.weight.dtype))
            if layer.bias is not None:
                layer.bias.zero_()
        else:
            bound = 1.0 / math.sqrt(layer.in_features)
            uniform_(layer.weight, bound, generator)
            if layer.bias is not None:
                uniform_(layer.bias, bound, generator)
    return layer


def init_conv(layer: nn.Conv2d, generator: torch.Generator, zero_bias=False):
    fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
    bound = 1.0 / math.sqrt(fan_in)
    uniform_(layer.weight, bound, generator)
    if layer.bias is not None:
        if zero_bias:
            with torch.no_grad():
                layer.bias.zero_()
        else:
            uniform_(layer.bias, bound, generator)
    return layer


def flat_state(module: nn.Module):
    """Hierarchically named parameter arrays (name -> detached tensor)."""
    return {name: p.detach() for name, p in module.named_parameters()}
