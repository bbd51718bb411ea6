"""Message-passing encoder over residue graphs producing per-residue structure features.

Node states start at zero, so all signal enters through the geometric edge
features; aggregation is a masked mean so the padding rule for short chains
cannot change results. The relational variant swaps in distance-bucket edge
types with per-type message weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn_utils import init_module_params
from .protein_io import ResidueGraph

# Distance buckets (in Angstrom) for the relational variant.
RELATIONAL_BUCKETS = (6.0, 12.0)


@dataclass
class StructureEncoderConfig:
    d_struct: int = 32
    num_layers: int = 3
    variant: str = "mpnn_style"  # or "relational_style"
    edge_dim: int = 16           # must equal the graph's rbf_count

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.variant not in ("mpnn_style", "relational_style"):
            raise ValueError(f"unknown variant {self.variant!r}")


class _MessageMlp(nn.Module):
    """Two-layer feedforward transform over (node_i, node_j, edge_ij)."""

    def __init__(self, d_struct: int, edge_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(2 * d_struct + edge_dim, d_struct)
        self.fc2 = nn.Linear(d_struct, d_struct)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class _MessagePassingLayer(nn.Module):
    def __init__(self, cfg: StructureEncoderConfig):
        super().__init__()
        self.variant = cfg.variant
        if cfg.variant == "mpnn_style":
            self.message = _MessageMlp(cfg.d_struct, cfg.edge_dim)
        else:
            self.messages = nn.ModuleList(
                _MessageMlp(cfg.d_struct, cfg.edge_dim) for _ in range(len(RELATIONAL_BUCKETS) + 1)
            )
        self.norm = nn.LayerNorm(cfg.d_struct)

    def forward(self, h, edge_feats, neighbor_index, mask, distances):
        # h: (L, d); edge_feats: (L, k, e); neighbor_index/mask/distances: (L, k)
        h_j = h[neighbor_index]                       # (L, k, d)
        h_i = h.unsqueeze(1).expand_as(h_j)           # (L, k, d)
        m_in = torch.cat([h_i, h_j, edge_feats], dim=-1)
        if self.variant == "mpnn_style":
            m = self.message(m_in)
        else:
            bucket = torch.bucketize(distances, torch.tensor(RELATIONAL_BUCKETS, dtype=distances.dtype))
            m = torch.zeros(h_j.shape, dtype=h.dtype)
            for b, mlp in enumerate(self.messages):
                sel = (bucket == b).unsqueeze(-1).to(h.dtype)
                m = m + mlp(m_in) * sel
        m = m * mask.unsqueeze(-1).to(h.dtype)
        agg = m.sum(dim=1) / mask.sum(dim=1, keepdim=True).to(h.dtype)
        return self.norm(h + agg)


class StructureEncoder(nn.Module):
    def __init__(self, cfg: StructureEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(_MessagePassingLayer(cfg) for _ in range(cfg.num_layers))

    def forward(self, graph: ResidueGraph) -> torch.Tensor:
        """Encode a residue graph into an (L, d_struct) feature matrix."""
        if graph.edge_dim != self.cfg.edge_dim:
            raise ValueError(
                f"graph edge features have width {graph.edge_dim}, encoder expects {self.cfg.edge_dim}"
            )
        dtype = self.layers[0].norm.weight.dtype
        edge_feats = torch.from_numpy(graph.edge_features).to(dtype)
        neighbor_index = torch.from_numpy(graph.neighbor_index)
        mask = torch.from_numpy(graph.neighbor_mask)
        distances = torch.from_numpy(graph.distances).to(dtype)
        h = torch.zeros((graph.num_residues, self.cfg.d_struct), dtype=dtype)
        for layer in self.layers:
            h = layer(h, edge_feats, neighbor_index, mask, distances)
        return h


def init_structure_params(cfg: StructureEncoderConfig, seed: int) -> StructureEncoder:
    """Build a structure encoder with deterministic seeded initialization."""
    enc = StructureEncoder(cfg)
    init_module_params(enc, seed)
    return enc


def encode_structure(graph: ResidueGraph, encoder: StructureEncoder) -> torch.Tensor:
    return encoder(graph)
