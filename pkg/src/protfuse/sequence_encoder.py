"""Bidirectional transformer over amino-acid tokens with an optional MLM objective.

Emits exactly one feature row per residue (no begin/end specials), so outputs
align position-for-position with structure features downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn_utils import init_module_params, seeded_generator

CANONICAL_AAS = "ACDEFGHIKLMNPQRSTVWY"
UNKNOWN_AA = "X"
AA_TO_ID = {aa: i for i, aa in enumerate(CANONICAL_AAS)}
UNKNOWN_ID = len(CANONICAL_AAS)          # 20
MASK_ID = UNKNOWN_ID + 1                 # 21
PAD_ID = MASK_ID + 1                     # 22
RESIDUE_VOCAB_SIZE = PAD_ID + 1          # 23

# Width presets for encoder-size scaling runs.
SIZE_PRESETS = {
    "esm-xs": dict(d_seq=32, num_layers=2, num_heads=4),
    "esm-s": dict(d_seq=64, num_layers=3, num_heads=4),
    "esm-m": dict(d_seq=128, num_layers=4, num_heads=8),
}


class EmptySequenceError(ValueError):
    pass


@dataclass
class SequenceEncoderConfig:
    d_seq: int = 32
    num_layers: int = 2
    num_heads: int = 4

    def __post_init__(self):
        if self.d_seq % self.num_heads != 0:
            raise ValueError("d_seq must be divisible by num_heads")

    @classmethod
    def preset(cls, name: str) -> "SequenceEncoderConfig":
        if name not in SIZE_PRESETS:
            raise ValueError(f"unknown preset {name!r}, expected one of {sorted(SIZE_PRESETS)}")
        return cls(**SIZE_PRESETS[name])


def tokenize_residues(seq: str) -> list[int]:
    """One token id per residue; characters outside the canonical 20 map to 'X'."""
    if not seq:
        raise EmptySequenceError("cannot tokenize an empty sequence")
    return [AA_TO_ID.get(c, UNKNOWN_ID) for c in seq.upper()]


def detokenize_residues(ids: list[int]) -> str:
    out = []
    for i in ids:
        if i < len(CANONICAL_AAS):
            out.append(CANONICAL_AAS[i])
        elif i == UNKNOWN_ID:
            out.append(UNKNOWN_AA)
        else:
            raise ValueError(f"id {i} is not a residue token")
    return "".join(out)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Standard fixed sin/cos position encodings, shape (length, dim)."""
    pos = torch.arange(length, dtype=dtype).unsqueeze(1)
    half = torch.arange(0, dim, 2, dtype=dtype)
    freq = torch.exp(-math.log(10000.0) * half / dim)
    angles = pos * freq
    enc = torch.zeros((length, dim), dtype=dtype)
    enc[:, 0::2] = torch.sin(angles)
    enc[:, 1::2] = torch.cos(angles[:, : enc[:, 1::2].shape[1]])
    return enc


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None = None,
                return_weights: bool = False):
        # x: (T, d). Explicit softmax attention so weights can be inspected.
        T, d = x.shape
        qkv = self.qkv(x).reshape(T, 3, self.num_heads, self.head_dim)
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]           # (T, H, hd)
        scores = torch.einsum("qhd,khd->hqk", q, k) / math.sqrt(self.head_dim)
        if attn_mask is not None:
            scores = scores.masked_fill(~attn_mask, float("-inf"))
        weights = F.softmax(scores, dim=-1)                  # (H, T, T)
        ctx = torch.einsum("hqk,khd->qhd", weights, v).reshape(T, d)
        out = self.out(ctx)
        if return_weights:
            return out, weights
        return out


class _EncoderBlock(nn.Module):
    """Pre-norm bidirectional block with 4x feedforward expansion."""

    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, num_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )

    def forward(self, x, return_weights: bool = False):
        if return_weights:
            attn_out, weights = self.attn(self.norm1(x), return_weights=True)
            x = x + attn_out
            x = x + self.ff(self.norm2(x))
            return x, weights
        x = x + self.attn(self.norm1(x))
        x = x + self.ff(self.norm2(x))
        return x


class SequenceEncoder(nn.Module):
    def __init__(self, cfg: SequenceEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(RESIDUE_VOCAB_SIZE, cfg.d_seq)
        self.blocks = nn.ModuleList(
            _EncoderBlock(cfg.d_seq, cfg.num_heads) for _ in range(cfg.num_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.d_seq)
        self.mlm_head = nn.Linear(cfg.d_seq, RESIDUE_VOCAB_SIZE)

    def forward(self, token_ids: list[int] | torch.Tensor,
                return_weights: bool = False) -> torch.Tensor:
        """Per-residue features, shape (L, d_seq)."""
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.ndim != 1 or ids.numel() == 0:
            raise ValueError("token_ids must be a non-empty 1-D sequence")
        if int(ids.max()) >= RESIDUE_VOCAB_SIZE:
            raise ValueError("token id out of vocabulary")
        dtype = self.embed.weight.dtype
        x = self.embed(ids) + sinusoidal_positions(len(ids), self.cfg.d_seq, dtype=dtype)
        all_weights = []
        for block in self.blocks:
            if return_weights:
                x, w = block(x, return_weights=True)
                all_weights.append(w)
            else:
                x = block(x)
        x = self.final_norm(x)
        if return_weights:
            return x, all_weights
        return x

    def mlm_logits(self, features: torch.Tensor) -> torch.Tensor:
        return self.mlm_head(features)


def init_sequence_params(cfg: SequenceEncoderConfig, seed: int) -> SequenceEncoder:
    enc = SequenceEncoder(cfg)
    init_module_params(enc, seed)
    return enc


def encode_sequence(token_ids: list[int], encoder: SequenceEncoder) -> torch.Tensor:
    return encoder(token_ids)


def mlm_loss(encoder: SequenceEncoder, batch: list[list[int]], mask_rate: float,
             gen: torch.Generator) -> torch.Tensor:
    """Masked-token cross-entropy, averaged per sequence then over the batch.

    ceil(mask_rate * L) positions per sequence are replaced by the mask token,
    so at least one position is always masked.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must lie strictly between 0 and 1")
    losses = []
    for ids in batch:
        L = len(ids)
        if L == 0:
            raise EmptySequenceError("cannot mask an empty sequence")
        n_mask = math.ceil(mask_rate * L)
        positions = torch.randperm(L, generator=gen)[:n_mask]
        masked = torch.as_tensor(ids, dtype=torch.long).clone()
        masked[positions] = MASK_ID
        feats = encoder(masked)
        logits = encoder.mlm_logits(feats[positions])
        targets = torch.as_tensor(ids, dtype=torch.long)[positions]
        losses.append(F.cross_entropy(logits, targets))
    return torch.stack(losses).mean()


def pretrain_mlm(encoder: SequenceEncoder, corpus: list[list[int]], steps: int,
                 lr: float, seed: int, batch_size: int = 8,
                 mask_rate: float = 0.15) -> list[float]:
    """Optional MLM warm-up; returns the per-step loss history."""
    gen = seeded_generator(seed)
    opt = torch.optim.AdamW(encoder.parameters(), lr=lr, weight_decay=0.0)
    history = []
    for step in range(steps):
        pick = torch.randint(0, len(corpus), (min(batch_size, len(corpus)),), generator=gen)
        batch = [corpus[int(i)] for i in pick]
        loss = mlm_loss(encoder, batch, mask_rate, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return history
