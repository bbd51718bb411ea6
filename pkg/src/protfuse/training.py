"""Two-stage training with stage-dependent freezing, plus checkpointing.

Stage 1 (projection_tuning) trains exactly the two projection MLPs; stage 2
(supervised_finetune) trains projectors and both protein encoders. The text
decoder and embedding table are frozen in both stages, standing in for a
pre-trained language model; an explicit text-only warm-up recipe
(`pretrain_decoder`) plays the role of that pre-training at desk scale.

Checkpoints are a single self-describing binary file: magic + version, a JSON
header, named float32 little-endian arrays in declared order, and a SHA-256
trailer.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from random import Random

import numpy as np
import torch

from . import text_decoder as td
from .instruction_data import InstructionExample
from .model import (ModelConfig, ModelParams, ProteinEncodingCache,
                    build_model, example_loss)
from .protein_io import ProteinStructure

STAGE_TRAINABLE = {
    "projection_tuning": frozenset({"proj_struct", "proj_seq"}),
    "supervised_finetune": frozenset({"proj_struct", "proj_seq", "struct_encoder", "seq_encoder"}),
}

# Published defaults for the two stages; the desk preset shrinks duration and
# batch so a full run fits a laptop CPU.
PAPER_DEFAULTS = {
    "projection_tuning": dict(lr=2e-4, batch_size=64, duration_steps=None, duration_epochs=2),
    "supervised_finetune": dict(lr=2e-5, batch_size=32, duration_steps=25000, duration_epochs=None),
}
DESK_DEFAULTS = {
    "projection_tuning": dict(lr=5e-3, batch_size=8, duration_steps=300, duration_epochs=None),
    "supervised_finetune": dict(lr=5e-3, batch_size=8, duration_steps=300, duration_epochs=None),
}

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1


class InvalidOverrideError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, batch_indices: list[int]):
        super().__init__(f"non-finite loss at step {step} on batch examples {batch_indices}")
        self.step = step
        self.batch_indices = batch_indices


class CheckpointVersionError(ValueError):
    pass


class CheckpointCorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class StagePlan:
    stage: str
    trainable: frozenset[str]
    lr: float
    batch_size: int
    schedule: str = "cosine"
    duration_steps: int | None = None
    duration_epochs: int | None = None
    weight_decay: float = 0.0
    grad_clip: float = 1.0

    def total_steps(self, corpus_size: int) -> int:
        if self.duration_steps is not None:
            return self.duration_steps
        steps_per_epoch = math.ceil(corpus_size / self.batch_size)
        return self.duration_epochs * steps_per_epoch


def make_stage_plan(stage: str, overrides: dict | None = None, preset: str = "paper") -> StagePlan:
    """Stage plan from published defaults (or the desk preset) plus overrides.

    The trainable set is pinned per stage and cannot be overridden.
    """
    if stage not in STAGE_TRAINABLE:
        raise InvalidOverrideError(f"unknown stage {stage!r}")
    if preset == "paper":
        defaults = dict(PAPER_DEFAULTS[stage])
    elif preset == "desk":
        defaults = dict(DESK_DEFAULTS[stage])
    else:
        raise InvalidOverrideError(f"unknown preset {preset!r}")
    plan = StagePlan(stage=stage, trainable=STAGE_TRAINABLE[stage], **defaults)
    for key, value in (overrides or {}).items():
        if key in ("stage", "trainable"):
            raise InvalidOverrideError(f"{key} cannot be overridden")
        if not hasattr(plan, key):
            raise InvalidOverrideError(f"unknown stage-plan field {key!r}")
        plan = replace(plan, **{key: value})
    if plan.duration_steps is None and plan.duration_epochs is None:
        raise InvalidOverrideError("one of duration_steps/duration_epochs must be set")
    if plan.lr <= 0 or plan.batch_size < 1:
        raise InvalidOverrideError("lr must be positive and batch_size at least 1")
    return plan


@dataclass
class TrainState:
    params: ModelParams
    model_cfg: ModelConfig
    seed: int
    stage: str | None = None
    step: int = 0
    loss_history: list[float] = field(default_factory=list)
    opt_state: dict = field(default_factory=dict)  # (partition, name) -> moment tensors

    def reset_for_stage(self, stage: str) -> None:
        self.stage = stage
        self.step = 0
        self.opt_state = {}


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr at step 0 to 0 at total_steps."""
    if total_steps <= 0:
        return base_lr
    t = min(step, total_steps) / total_steps
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t))


def _batch_indices(seed: int, stage: str, corpus_size: int, batch_size: int, step: int) -> list[int]:
    """Deterministic batch schedule: per-epoch shuffles, contiguous chunks.

    A pure function of (seed, stage, step) so interrupted runs resume on the
    exact batch they would have seen.
    """
    batches_per_epoch = math.ceil(corpus_size / batch_size)
    epoch = step // batches_per_epoch
    slot = step % batches_per_epoch
    order = list(range(corpus_size))
    Random(seed * 1_000_003 + epoch * 7919 + len(stage)).shuffle(order)
    chunk = order[slot * batch_size:(slot + 1) * batch_size]
    if not chunk:
        chunk = order[-batch_size:]
    return chunk


def _optimizer_with_state(params: ModelParams, plan: StagePlan, state: TrainState):
    named = []
    tensors = []
    for partition in sorted(plan.trainable):
        for name, p in params[partition].named_parameters():
            named.append((partition, name))
            tensors.append(p)
    opt = torch.optim.AdamW(tensors, lr=plan.lr, weight_decay=plan.weight_decay)
    if state.opt_state:
        for (partition, name), p in zip(named, tensors):
            saved = state.opt_state.get((partition, name))
            if saved is None:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(saved["step"])),
                "exp_avg": saved["exp_avg"].clone(),
                "exp_avg_sq": saved["exp_avg_sq"].clone(),
            }
    return opt, named, tensors


def _extract_opt_state(opt, named, tensors) -> dict:
    out = {}
    for (partition, name), p in zip(named, tensors):
        s = opt.state.get(p)
        if not s:
            continue
        out[(partition, name)] = {
            "step": float(s["step"]),
            "exp_avg": s["exp_avg"].detach().clone(),
            "exp_avg_sq": s["exp_avg_sq"].detach().clone(),
        }
    return out


def train_stage(plan: StagePlan, corpus: list[InstructionExample], state: TrainState,
                structures: dict[str, ProteinStructure],
                max_steps: int | None = None, log_fn=None) -> TrainState:
    """Run (the remainder of) one stage; only plan.trainable partitions change.

    Gradients flow through frozen partitions but the optimizer never touches
    them; frozen arrays therefore stay bit-identical across the stage.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    if state.stage != plan.stage:
        state.reset_for_stage(plan.stage)
    state.params.set_trainable(plan.trainable)
    opt, named, tensors = _optimizer_with_state(state.params, plan, state)
    cache = ProteinEncodingCache(state.model_cfg.graph_k, state.model_cfg.rbf_count)
    total = plan.total_steps(len(corpus))
    end_step = total if max_steps is None else min(total, state.step + max_steps)

    while state.step < end_step:
        step = state.step
        lr = cosine_lr(plan.lr, step, total)
        for group in opt.param_groups:
            group["lr"] = lr
        idxs = _batch_indices(state.seed, plan.stage, len(corpus), plan.batch_size, step)
        losses = []
        for i in idxs:
            ex = corpus[i]
            structs = [structures[pid] for pid in ex.protein_ids]
            losses.append(example_loss(state.params, state.model_cfg, ex.question,
                                       ex.answer, structs, cache))
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            raise NonFiniteLossError(step, idxs)
        opt.zero_grad()
        loss.backward()
        if plan.grad_clip:
            torch.nn.utils.clip_grad_norm_(tensors, plan.grad_clip)
        opt.step()
        state.step += 1
        value = float(loss.detach())
        state.loss_history.append(value)
        if log_fn is not None:
            log_fn(step, value, lr)

    state.opt_state = _extract_opt_state(opt, named, tensors)
    return state


def warmup_text_ids(example: InstructionExample,
                    placeholder_runs: list[int] | None = None) -> list[int]:
    """Token ids for decoder warm-up: question + answer as pure text.

    With ``placeholder_runs`` the i-th placeholder expands to that many copies
    of the reserved token, so every text token sits at the position it will
    occupy once real protein rows are spliced in. Without it the placeholder
    stays a single token.
    """
    q_ids = td.tokenize_text(example.question)[:-1]
    if placeholder_runs is not None:
        expanded: list[int] = []
        runs = iter(placeholder_runs)
        for t in q_ids:
            if t == td.PROTEIN_PLACEHOLDER_ID:
                expanded.extend([t] * next(runs))
            else:
                expanded.append(t)
        q_ids = expanded
    a_ids = td.strip_specials(td.tokenize_text(example.answer))
    return q_ids + a_ids + [td.EOS_ID]


def protein_token_counts(example: InstructionExample,
                         structures: dict[str, ProteinStructure],
                         fusion_mode: str) -> list[int]:
    """Spliced token count per referenced protein (2L for the unfused ablation)."""
    factor = 2 if fusion_mode == "concat_tokens" else 1
    return [factor * len(structures[pid]) for pid in example.protein_ids]


def pretrain_decoder(state: TrainState, corpus: list[InstructionExample], steps: int,
                     lr: float = 3e-3, batch_size: int = 8,
                     structures: dict[str, ProteinStructure] | None = None,
                     fusion_mode: str = "add", log_fn=None) -> list[float]:
    """Text-only LM warm-up of the decoder and embedding table.

    Plays the role of the pre-trained language model the stages build on; both
    partitions are frozen again afterwards for the actual training stages.
    When structures are given, placeholders expand to length-matched filler
    runs so the warm-up sees the exact positional layout of spliced inputs.
    """
    params = state.params
    decoder, table = params["decoder"], params["embed_table"]
    tensors = list(decoder.parameters()) + list(table.parameters())
    for p in tensors:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(tensors, lr=lr, weight_decay=0.0)
    rng = Random(state.seed * 31 + 17)
    if structures is None:
        token_cache = [warmup_text_ids(ex) for ex in corpus]
    else:
        token_cache = [
            warmup_text_ids(ex, protein_token_counts(ex, structures, fusion_mode))
            for ex in corpus
        ]
    history = []
    for step in range(steps):
        current = cosine_lr(lr, step, steps)
        for group in opt.param_groups:
            group["lr"] = current
        picks = [rng.randrange(len(token_cache)) for _ in range(min(batch_size, len(token_cache)))]
        losses = []
        for i in picks:
            ids = token_cache[i]
            rows = table(torch.tensor(ids, dtype=torch.long))
            hidden, _ = decoder(rows)
            logits = hidden @ table.weight.t()
            targets = torch.tensor(ids[1:], dtype=torch.long)
            # placeholder filler positions stay out of the loss: the decoder
            # must condition on them, never learn to emit them
            keep = targets != td.PROTEIN_PLACEHOLDER_ID
            losses.append(torch.nn.functional.cross_entropy(logits[:-1][keep], targets[keep]))
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            raise NonFiniteLossError(step, picks)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(tensors, 1.0)
        opt.step()
        value = float(loss.detach())
        history.append(value)
        if log_fn is not None:
            log_fn(step, value, current)
    for p in tensors:
        p.requires_grad_(False)
    return history


def _config_hash(model_cfg: ModelConfig) -> str:
    blob = json.dumps(model_cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Single-file binary checkpoint; see module docstring for the layout."""
    arrays: list[tuple[str, str, np.ndarray]] = []
    array_index = []
    for partition, name, p in state.params.named_arrays():
        arr = p.detach().numpy().astype("<f4", copy=True)
        arrays.append((partition, name, arr))
        array_index.append([partition, name, list(arr.shape)])
    moment_index = []
    moment_steps = {}
    for (partition, name), s in sorted(state.opt_state.items()):
        for kind in ("exp_avg", "exp_avg_sq"):
            arr = s[kind].detach().numpy().astype("<f4", copy=True)
            arrays.append((partition, name, arr))
            moment_index.append([partition, name, kind, list(arr.shape)])
        moment_steps[f"{partition}/{name}"] = s["step"]
    header = {
        "model_config": state.model_cfg.to_dict(),
        "config_hash": _config_hash(state.model_cfg),
        "seed": state.seed,
        "stage": state.stage,
        "step": state.step,
        "loss_history": state.loss_history,
        "arrays": array_index,
        "moments": moment_index,
        "moment_steps": moment_steps,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    payload = b"".join(arr.tobytes(order="C") for _, _, arr in arrays)
    body = (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<Q", len(header_bytes)) + header_bytes + payload)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)


def load_checkpoint(path: str | Path) -> TrainState:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 + 8 + 32:
        raise CheckpointCorruptionError("file too short to be a checkpoint")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError("bad magic; not a protfuse checkpoint")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} unsupported")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptionError("checksum mismatch; file truncated or altered")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header_end = 16 + header_len
    header = json.loads(raw[16:header_end].decode("utf-8"))
    model_cfg = ModelConfig.from_dict(header["model_config"])
    if _config_hash(model_cfg) != header["config_hash"]:
        raise CheckpointCorruptionError("config hash mismatch")
    params = build_model(model_cfg, seed=header["seed"])

    offset = header_end
    payload = body

    def take(shape) -> torch.Tensor:
        nonlocal offset
        numel = int(np.prod(shape)) if shape else 1
        nbytes = numel * 4
        if offset + nbytes > len(payload):
            raise CheckpointCorruptionError("payload shorter than array index")
        arr = np.frombuffer(payload, dtype="<f4", count=numel, offset=offset).reshape(shape)
        offset += nbytes
        return torch.from_numpy(arr.copy())

    lookup = {(p, n): param for p, n, param in params.named_arrays()}
    for partition, name, shape in header["arrays"]:
        key = (partition, name)
        if key not in lookup:
            raise CheckpointCorruptionError(f"unknown array {partition}/{name}")
        value = take(shape)
        if tuple(lookup[key].shape) != tuple(value.shape):
            raise CheckpointCorruptionError(f"shape mismatch for {partition}/{name}")
        with torch.no_grad():
            lookup[key].copy_(value)
    opt_state: dict = {}
    for partition, name, kind, shape in header["moments"]:
        entry = opt_state.setdefault((partition, name), {})
        entry[kind] = take(shape)
    for key, entry in opt_state.items():
        entry["step"] = header["moment_steps"][f"{key[0]}/{key[1]}"]

    state = TrainState(
        params=params,
        model_cfg=model_cfg,
        seed=header["seed"],
        stage=header["stage"],
        step=header["step"],
        loss_history=list(header["loss_history"]),
        opt_state=opt_state,
    )
    return state


def smoothed(values: list[float], window: int = 10) -> float:
    """Trailing-window mean used by the loss-halving smoke checks."""
    if not values:
        raise ValueError("no values to smooth")
    w = values[-window:]
    return sum(w) / len(w)
