"""Per-modality MLP projection into the decoder embedding space, plus fusion.

Fusion modes: element-wise addition (the default), token-axis concatenation
(the unfused ablation, structure tokens first), or single-modality
pass-through. The MLP nonlinearity is tanh so an all-zero input with zero
biases projects exactly to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .nn_utils import init_module_params

FUSION_MODES = ("add", "concat_tokens", "seq_only", "struct_only")


class FusionError(ValueError):
    pass


class LengthMismatchError(FusionError):
    """Sequence and structure features disagree on residue count; upstream pairing bug."""


class MissingModalityError(FusionError):
    pass


class WidthMismatchError(ValueError):
    pass


@dataclass
class ProjectorConfig:
    d_in_seq: int = 32
    d_in_struct: int = 32
    d_model: int = 64
    hidden: int = 64
    depth: int = 2

    def __post_init__(self):
        for name in ("d_in_seq", "d_in_struct", "d_model", "hidden", "depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class FusedProteinEmbedding:
    values: torch.Tensor          # (tokens, d_model)
    length: int                   # source residue count L
    modality_flags: tuple[str, ...]

    @property
    def num_tokens(self) -> int:
        return self.values.shape[0]


class ProjectionMlp(nn.Module):
    """Row-wise MLP: `depth` linear layers with tanh between consecutive ones."""

    def __init__(self, d_in: int, d_model: int, hidden: int, depth: int = 2):
        super().__init__()
        self.d_in = d_in
        widths = [d_in] + [hidden] * (depth - 1) + [d_model]
        self.linears = nn.ModuleList(
            nn.Linear(widths[i], widths[i + 1]) for i in range(depth)
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.d_in:
            raise WidthMismatchError(f"expected (L, {self.d_in}) input, got {tuple(z.shape)}")
        h = z
        for i, lin in enumerate(self.linears):
            if i > 0:
                h = torch.tanh(h)
            h = lin(h)
        return h


def build_projectors(cfg: ProjectorConfig, seed_seq: int, seed_struct: int):
    """Separate (seq, struct) projection MLPs with independent seeded params."""
    proj_seq = ProjectionMlp(cfg.d_in_seq, cfg.d_model, cfg.hidden, cfg.depth)
    proj_struct = ProjectionMlp(cfg.d_in_struct, cfg.d_model, cfg.hidden, cfg.depth)
    init_module_params(proj_seq, seed_seq)
    init_module_params(proj_struct, seed_struct)
    return proj_seq, proj_struct


def project_seq(z: torch.Tensor, projector: ProjectionMlp) -> torch.Tensor:
    return projector(z)


def project_struct(z: torch.Tensor, projector: ProjectionMlp) -> torch.Tensor:
    return projector(z)


def fuse(h_seq: torch.Tensor | None, h_struct: torch.Tensor | None,
         mode: str = "add") -> FusedProteinEmbedding:
    """Combine projected modality features into protein embedding tokens.

    add          -> H_p[i] = H_seq[i] + H_struct[i], L tokens
    concat_tokens-> [H_struct; H_seq] along the token axis, 2L tokens
    seq_only / struct_only -> pass-through of one modality, L tokens
    """
    if mode not in FUSION_MODES:
        raise FusionError(f"unknown fusion mode {mode!r}")
    if mode in ("add", "concat_tokens"):
        if h_seq is None or h_struct is None:
            raise MissingModalityError(f"mode {mode!r} needs both modalities")
        if h_seq.shape[0] != h_struct.shape[0]:
            raise LengthMismatchError(
                f"sequence has {h_seq.shape[0]} rows but structure has {h_struct.shape[0]}"
            )
        if h_seq.shape[1] != h_struct.shape[1]:
            raise WidthMismatchError("modalities project to different widths")
        L = h_seq.shape[0]
        if mode == "add":
            return FusedProteinEmbedding(h_seq + h_struct, L, ("seq", "struct"))
        return FusedProteinEmbedding(torch.cat([h_struct, h_seq], dim=0), L, ("seq", "struct"))
    if mode == "seq_only":
        if h_seq is None:
            raise MissingModalityError("seq_only requires sequence features")
        return FusedProteinEmbedding(h_seq, h_seq.shape[0], ("seq",))
    if h_struct is None:
        raise MissingModalityError("struct_only requires structure features")
    return FusedProteinEmbedding(h_struct, h_struct.shape[0], ("struct",))
