"""Full model assembly: partitioned parameters and the protein-to-loss forward path.

Parameters are grouped into six named partitions so the two training stages
can freeze and thaw them wholesale: struct_encoder, seq_encoder, proj_struct,
proj_seq, decoder, embed_table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from . import text_decoder
from .projector_fusion import (FUSION_MODES, FusedProteinEmbedding, ProjectionMlp,
                               ProjectorConfig, fuse)
from .protein_io import ProteinStructure, ResidueGraph, build_residue_graph, derive_sequence
from .sequence_encoder import SequenceEncoder, SequenceEncoderConfig, tokenize_residues
from .structure_encoder import StructureEncoder, StructureEncoderConfig
from .nn_utils import init_module_params
from .text_decoder import DecoderConfig, SplicedInput, TextDecoder, assemble, forward_loss

PARTITIONS = ("struct_encoder", "seq_encoder", "proj_struct", "proj_seq", "decoder", "embed_table")

# Fusion modes that require each encoder to run.
_NEEDS_STRUCT = ("add", "concat_tokens", "struct_only")
_NEEDS_SEQ = ("add", "concat_tokens", "seq_only")


@dataclass
class ModelConfig:
    struct: StructureEncoderConfig = field(default_factory=StructureEncoderConfig)
    seq: SequenceEncoderConfig = field(default_factory=SequenceEncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    fusion_mode: str = "add"
    graph_k: int = 16
    rbf_count: int = 16

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.projector.d_model != self.decoder.d_model:
            raise ValueError("projector d_model must match decoder d_model")
        if self.projector.d_in_seq != self.seq.d_seq:
            raise ValueError("projector d_in_seq must match sequence encoder width")
        if self.projector.d_in_struct != self.struct.d_struct:
            raise ValueError("projector d_in_struct must match structure encoder width")
        if self.struct.edge_dim != self.rbf_count:
            raise ValueError("structure encoder edge_dim must match rbf_count")

    def to_dict(self) -> dict:
        return {
            "struct": vars(self.struct).copy(),
            "seq": vars(self.seq).copy(),
            "projector": vars(self.projector).copy(),
            "decoder": vars(self.decoder).copy(),
            "fusion_mode": self.fusion_mode,
            "graph_k": self.graph_k,
            "rbf_count": self.rbf_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            struct=StructureEncoderConfig(**d["struct"]),
            seq=SequenceEncoderConfig(**d["seq"]),
            projector=ProjectorConfig(**d["projector"]),
            decoder=DecoderConfig(**d["decoder"]),
            fusion_mode=d["fusion_mode"],
            graph_k=d["graph_k"],
            rbf_count=d["rbf_count"],
        )


class ModelParams:
    """The six parameter partitions plus freeze control and snapshotting."""

    def __init__(self, struct_encoder: StructureEncoder, seq_encoder: SequenceEncoder,
                 proj_struct: ProjectionMlp, proj_seq: ProjectionMlp,
                 decoder: TextDecoder, embed_table: nn.Embedding):
        self.modules: dict[str, nn.Module] = {
            "struct_encoder": struct_encoder,
            "seq_encoder": seq_encoder,
            "proj_struct": proj_struct,
            "proj_seq": proj_seq,
            "decoder": decoder,
            "embed_table": embed_table,
        }

    def __getitem__(self, partition: str) -> nn.Module:
        return self.modules[partition]

    def named_arrays(self):
        """(partition, name, tensor) triples in fixed declared order."""
        for partition in PARTITIONS:
            for name, p in self.modules[partition].named_parameters():
                yield partition, name, p

    def set_trainable(self, trainable: set[str] | frozenset[str]) -> None:
        unknown = set(trainable) - set(PARTITIONS)
        if unknown:
            raise ValueError(f"unknown partitions {sorted(unknown)}")
        for partition in PARTITIONS:
            flag = partition in trainable
            for p in self.modules[partition].parameters():
                p.requires_grad_(flag)

    def trainable_parameters(self, trainable: set[str] | frozenset[str]):
        for partition in sorted(trainable):
            yield from self.modules[partition].parameters()

    def snapshot(self, partitions=PARTITIONS) -> dict[str, dict[str, torch.Tensor]]:
        return {
            part: {name: p.detach().clone() for name, p in self.modules[part].named_parameters()}
            for part in partitions
        }

    def check_finite(self) -> bool:
        return all(torch.isfinite(p).all() for _, _, p in self.named_arrays())


def build_model(cfg: ModelConfig, seed: int) -> ModelParams:
    """Instantiate all partitions with deterministic per-partition sub-seeds."""
    struct_enc = StructureEncoder(cfg.struct)
    seq_enc = SequenceEncoder(cfg.seq)
    proj_struct = ProjectionMlp(cfg.projector.d_in_struct, cfg.projector.d_model,
                                cfg.projector.hidden, cfg.projector.depth)
    proj_seq = ProjectionMlp(cfg.projector.d_in_seq, cfg.projector.d_model,
                             cfg.projector.hidden, cfg.projector.depth)
    decoder = TextDecoder(cfg.decoder)
    embed_table = nn.Embedding(cfg.decoder.vocab_size, cfg.decoder.d_model)
    params = ModelParams(struct_enc, seq_enc, proj_struct, proj_seq, decoder, embed_table)
    for i, partition in enumerate(PARTITIONS):
        init_module_params(params[partition], seed * 1000 + i)
    return params


class ProteinEncodingCache:
    """Per-structure graph and token-id cache; graphs depend only on (id, k, rbf)."""

    def __init__(self, graph_k: int, rbf_count: int):
        self.graph_k = graph_k
        self.rbf_count = rbf_count
        self._graphs: dict[str, ResidueGraph] = {}
        self._tokens: dict[str, list[int]] = {}

    def graph(self, structure: ProteinStructure) -> ResidueGraph:
        if structure.id not in self._graphs:
            self._graphs[structure.id] = build_residue_graph(structure, self.graph_k, self.rbf_count)
        return self._graphs[structure.id]

    def tokens(self, structure: ProteinStructure) -> list[int]:
        if structure.id not in self._tokens:
            self._tokens[structure.id] = tokenize_residues(derive_sequence(structure))
        return self._tokens[structure.id]


def encode_protein(params: ModelParams, cfg: ModelConfig, structure: ProteinStructure,
                   cache: ProteinEncodingCache | None = None,
                   fusion_mode: str | None = None) -> FusedProteinEmbedding:
    """Run the enabled encoder paths and fuse into decoder-space tokens."""
    mode = fusion_mode or cfg.fusion_mode
    if cache is None:
        cache = ProteinEncodingCache(cfg.graph_k, cfg.rbf_count)
    h_seq = None
    h_struct = None
    if mode in _NEEDS_SEQ:
        z_seq = params["seq_encoder"](cache.tokens(structure))
        h_seq = params["proj_seq"](z_seq)
    if mode in _NEEDS_STRUCT:
        z_struct = params["struct_encoder"](cache.graph(structure))
        h_struct = params["proj_struct"](z_struct)
    return fuse(h_seq, h_struct, mode)


def assemble_example(params: ModelParams, cfg: ModelConfig, question: str, answer: str,
                     structures: list[ProteinStructure],
                     cache: ProteinEncodingCache | None = None,
                     fusion_mode: str | None = None) -> SplicedInput:
    """Tokenize, encode, and splice one instruction example."""
    question_ids = text_decoder.tokenize_text(question)
    answer_ids = text_decoder.strip_specials(text_decoder.tokenize_text(answer))
    proteins = [encode_protein(params, cfg, s, cache, fusion_mode) for s in structures]
    return assemble(question_ids, proteins, answer_ids, params["embed_table"])


def example_loss(params: ModelParams, cfg: ModelConfig, question: str, answer: str,
                 structures: list[ProteinStructure],
                 cache: ProteinEncodingCache | None = None,
                 fusion_mode: str | None = None) -> torch.Tensor:
    spliced = assemble_example(params, cfg, question, answer, structures, cache, fusion_mode)
    return forward_loss(spliced, params["decoder"], params["embed_table"])


def generate_answer(params: ModelParams, cfg: ModelConfig, question: str,
                    structures: list[ProteinStructure], max_new_tokens: int = 96,
                    cache: ProteinEncodingCache | None = None,
                    fusion_mode: str | None = None) -> str:
    """Greedy-decode an answer string for a question about the given protein(s)."""
    question_ids = text_decoder.tokenize_text(question)
    proteins = [encode_protein(params, cfg, s, cache, fusion_mode) for s in structures]
    ids = text_decoder.generate(question_ids, proteins, params["decoder"],
                                params["embed_table"], max_new_tokens)
    return text_decoder.detokenize_text(ids)
