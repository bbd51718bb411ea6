"""Causal decoder over byte-level text with protein embeddings spliced at placeholders.

The question's `<protein>` literals are replaced in place by the protein
embedding rows, the answer (plus its terminating EOS) carries the loss, and a
causal mask covers the whole spliced sequence, protein rows included.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn_utils import init_module_params
from .projector_fusion import FusedProteinEmbedding

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
PROTEIN_PLACEHOLDER_ID = 259
TEXT_VOCAB_SIZE = 260
SPECIAL_IDS = (BOS_ID, EOS_ID, PAD_ID, PROTEIN_PLACEHOLDER_ID)
PLACEHOLDER_LITERAL = "<protein>"


class PlaceholderCountError(ValueError):
    pass


class ContextOverflowError(ValueError):
    pass


@dataclass
class DecoderConfig:
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    vocab_size: int = TEXT_VOCAB_SIZE
    max_positions: int = 512

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")


@dataclass
class SplicedInput:
    embedding_rows: torch.Tensor   # (T, d_model)
    token_ids: torch.Tensor        # (T,) long, -1 at protein rows
    loss_mask: torch.Tensor        # (T,) bool, True only on answer tokens + final EOS
    segment_tags: tuple[str, ...]  # per-position: question_text | protein | answer_text
    protein_token_count: int

    def __post_init__(self):
        T = self.embedding_rows.shape[0]
        if not (self.token_ids.shape[0] == self.loss_mask.shape[0] == len(self.segment_tags) == T):
            raise ValueError("spliced input fields disagree on length")


def tokenize_text(text: str) -> list[int]:
    """Byte-level ids wrapped in BOS/EOS; each `<protein>` literal becomes one reserved id."""
    ids = [BOS_ID]
    parts = text.split(PLACEHOLDER_LITERAL)
    for i, part in enumerate(parts):
        if i > 0:
            ids.append(PROTEIN_PLACEHOLDER_ID)
        ids.extend(part.encode("utf-8"))
    ids.append(EOS_ID)
    return ids


def detokenize_text(ids: list[int]) -> str:
    """Bytes back to text; the placeholder renders as its literal, other specials drop."""
    out: list[str] = []
    buf = bytearray()
    for t in ids:
        if t < 256:
            buf.append(t)
        else:
            if buf:
                out.append(buf.decode("utf-8", errors="replace"))
                buf = bytearray()
            if t == PROTEIN_PLACEHOLDER_ID:
                out.append(PLACEHOLDER_LITERAL)
    if buf:
        out.append(buf.decode("utf-8", errors="replace"))
    return "".join(out)


def strip_specials(ids: list[int]) -> list[int]:
    return [t for t in ids if t not in SPECIAL_IDS]


class _CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, past_kv=None):
        # x: (T_new, d); past_kv: optional (k, v) each (T_past, H, hd)
        T, d = x.shape
        qkv = self.qkv(x).reshape(T, 3, self.num_heads, self.head_dim)
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]
        if past_kv is not None:
            k = torch.cat([past_kv[0], k], dim=0)
            v = torch.cat([past_kv[1], v], dim=0)
        total = k.shape[0]
        offset = total - T
        scores = torch.einsum("qhd,khd->hqk", q, k) / math.sqrt(self.head_dim)
        # Query at absolute position offset+i may attend keys 0..offset+i.
        q_pos = torch.arange(T).unsqueeze(1) + offset
        k_pos = torch.arange(total).unsqueeze(0)
        causal = (k_pos <= q_pos).unsqueeze(0)
        scores = scores.masked_fill(~causal, float("-inf"))
        weights = F.softmax(scores, dim=-1)
        ctx = torch.einsum("hqk,khd->qhd", weights, v).reshape(T, d)
        return self.out(ctx), (k, v)


class _DecoderBlock(nn.Module):
    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = _CausalSelfAttention(d_model, num_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )

    def forward(self, x, past_kv=None):
        attn_out, kv = self.attn(self.norm1(x), past_kv)
        x = x + attn_out
        x = x + self.ff(self.norm2(x))
        return x, kv


class TextDecoder(nn.Module):
    """Pre-norm causal transformer from embedding rows to hidden states.

    The token embedding table lives outside this module (its own parameter
    partition); logits come from the tied table, h @ E^T.
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.pos_embed = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.blocks = nn.ModuleList(
            _DecoderBlock(cfg.d_model, cfg.num_heads) for _ in range(cfg.num_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.d_model)

    def forward(self, rows: torch.Tensor, past=None):
        """rows: (T_new, d_model). Returns (hidden, new_past) with KV caching."""
        T = rows.shape[0]
        offset = 0 if past is None else past[0][0].shape[0]
        if offset + T > self.cfg.max_positions:
            raise ContextOverflowError(
                f"sequence length {offset + T} exceeds max_positions {self.cfg.max_positions}"
            )
        positions = torch.arange(offset, offset + T)
        x = rows + self.pos_embed(positions)
        new_past = []
        for i, block in enumerate(self.blocks):
            x, kv = block(x, None if past is None else past[i])
            new_past.append(kv)
        return self.final_norm(x), new_past


def make_embed_table(cfg: DecoderConfig, seed: int) -> nn.Embedding:
    table = nn.Embedding(cfg.vocab_size, cfg.d_model)
    init_module_params(table, seed)
    return table


def init_decoder_params(cfg: DecoderConfig, seed: int) -> TextDecoder:
    dec = TextDecoder(cfg)
    init_module_params(dec, seed)
    return dec


def assemble(question_ids: list[int],
             protein_embeddings: list[FusedProteinEmbedding | torch.Tensor],
             answer_ids: list[int],
             embed_table: nn.Embedding) -> SplicedInput:
    """Splice protein embedding rows into the question at placeholder positions.

    `question_ids` is a full tokenization (BOS ... EOS); its trailing EOS is
    replaced by the answer. `answer_ids` must be bare content ids; a single
    EOS is appended after a non-empty answer and included in the loss span.
    An empty answer produces a generation-time prefix with no loss positions.
    """
    n_placeholders = sum(1 for t in question_ids if t == PROTEIN_PLACEHOLDER_ID)
    if n_placeholders != len(protein_embeddings):
        raise PlaceholderCountError(
            f"question has {n_placeholders} placeholder(s) but {len(protein_embeddings)} protein(s) given"
        )
    if any(t in SPECIAL_IDS for t in answer_ids):
        raise ValueError("answer_ids must not contain special tokens")

    q_ids = list(question_ids)
    if q_ids and q_ids[-1] == EOS_ID:
        q_ids = q_ids[:-1]

    dtype = embed_table.weight.dtype
    rows: list[torch.Tensor] = []
    ids: list[int] = []
    mask: list[bool] = []
    tags: list[str] = []
    protein_token_count = 0

    next_protein = 0
    for t in q_ids:
        if t == PROTEIN_PLACEHOLDER_ID:
            emb = protein_embeddings[next_protein]
            values = emb.values if isinstance(emb, FusedProteinEmbedding) else emb
            next_protein += 1
            rows.append(values.to(dtype))
            n = values.shape[0]
            protein_token_count += n
            ids.extend([-1] * n)
            mask.extend([False] * n)
            tags.extend(["protein"] * n)
        else:
            rows.append(embed_table(torch.tensor([t])))
            ids.append(t)
            mask.append(False)
            tags.append("question_text")

    answer_span = list(answer_ids) + ([EOS_ID] if answer_ids else [])
    for t in answer_span:
        rows.append(embed_table(torch.tensor([t])))
        ids.append(t)
        mask.append(True)
        tags.append("answer_text")

    return SplicedInput(
        embedding_rows=torch.cat(rows, dim=0),
        token_ids=torch.tensor(ids, dtype=torch.long),
        loss_mask=torch.tensor(mask, dtype=torch.bool),
        segment_tags=tuple(tags),
        protein_token_count=protein_token_count,
    )


def forward_loss(x: SplicedInput, decoder: TextDecoder, embed_table: nn.Embedding) -> torch.Tensor:
    """Mean negative log-likelihood over loss-mask positions (next-token objective)."""
    if not bool(x.loss_mask.any()):
        raise ValueError("spliced input has no loss positions")
    hidden, _ = decoder(x.embedding_rows)
    logits = hidden @ embed_table.weight.t()
    # token at position t is predicted from hidden state t-1; BOS is never masked
    positions = torch.nonzero(x.loss_mask, as_tuple=False).squeeze(1)
    if int(positions.min()) == 0:
        raise ValueError("loss mask must not cover position 0")
    return F.cross_entropy(logits[positions - 1], x.token_ids[positions])


def _greedy_pick(logits: torch.Tensor) -> int:
    """Argmax with ties broken toward the lower token id.

    Non-terminal specials (BOS, PAD, placeholder) are suppressed; generated
    text is bytes plus an optional terminating EOS.
    """
    masked = logits.clone()
    masked[BOS_ID] = float("-inf")
    masked[PAD_ID] = float("-inf")
    masked[PROTEIN_PLACEHOLDER_ID] = float("-inf")
    max_val = masked.max()
    return int(torch.nonzero(masked == max_val, as_tuple=False).min())


def generate(question_ids: list[int],
             protein_embeddings: list[FusedProteinEmbedding | torch.Tensor],
             decoder: TextDecoder, embed_table: nn.Embedding,
             max_new_tokens: int, mode: str = "greedy") -> list[int]:
    """Greedy continuation of the assembled prefix until EOS or the token budget."""
    if mode != "greedy":
        raise ValueError(f"unsupported decoding mode {mode!r}")
    prefix = assemble(question_ids, protein_embeddings, [], embed_table)
    T0 = prefix.embedding_rows.shape[0]
    if T0 + max_new_tokens > decoder.cfg.max_positions:
        raise ContextOverflowError(
            f"prefix of {T0} rows + {max_new_tokens} new tokens exceeds "
            f"max_positions {decoder.cfg.max_positions}"
        )
    with torch.no_grad():
        hidden, past = decoder(prefix.embedding_rows)
        out: list[int] = []
        last_hidden = hidden[-1]
        for _ in range(max_new_tokens):
            logits = last_hidden @ embed_table.weight.t()
            token = _greedy_pick(logits)
            if token == EOS_ID:
                break
            out.append(token)
            row = embed_table(torch.tensor([token]))
            hidden, past = decoder(row, past)
            last_hidden = hidden[-1]
    return out
