"""Seeded parameter initialization and small tensor helpers shared by all networks."""

from __future__ import annotations

import math

import torch
import torch.nn as nn


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def _uniform_(tensor: torch.Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        tensor.copy_((torch.rand(tensor.shape, generator=gen, dtype=tensor.dtype) * 2.0 - 1.0) * bound)


def init_module_params(module: nn.Module, seed: int) -> None:
    """Deterministically initialize a module's parameters from a seed.

    Linear weights draw from U(-b, b) with b = sqrt(6 / fan_in); biases are
    zero. LayerNorm resets to identity. Embeddings draw from U(-b, b) with
    b = sqrt(6 / dim). Traversal follows module definition order, so the same
    seed always yields the same bytes.
    """
    gen = seeded_generator(seed)
    for m in module.modules():
        if isinstance(m, nn.Linear):
            fan_in = m.weight.shape[1]
            _uniform_(m.weight, math.sqrt(6.0 / fan_in), gen)
            if m.bias is not None:
                with torch.no_grad():
                    m.bias.zero_()
        elif isinstance(m, nn.LayerNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
        elif isinstance(m, nn.Embedding):
            _uniform_(m.weight, math.sqrt(6.0 / m.weight.shape[1]), gen)


def module_tensors(module: nn.Module) -> list[tuple[str, torch.Tensor]]:
    """Named parameters in deterministic definition order."""
    return list(module.named_parameters())


def clone_state(module: nn.Module) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in module.named_parameters()}


def states_equal(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor]) -> bool:
    """Bit-exact equality of two parameter snapshots."""
    if a.keys() != b.keys():
        return False
    return all(torch.equal(a[k], b[k]) for k in a)
