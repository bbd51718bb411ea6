"""Run configuration: one key-value file drives every subcommand.

Format: ``dotted.key = value`` lines, ``#`` comments. CLI flags override
individual keys with the same dotted paths. Unknown keys are rejected so typos
fail fast.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .fixtures import FixtureConfig
from .model import ModelConfig
from .projector_fusion import FUSION_MODES, ProjectorConfig
from .sequence_encoder import SIZE_PRESETS, SequenceEncoderConfig
from .structure_encoder import StructureEncoderConfig
from .text_decoder import DecoderConfig
from .training import StagePlan, make_stage_plan


class ConfigError(ValueError):
    pass


# Canonical defaults; the value's python type drives parsing of overrides.
DEFAULTS: dict[str, object] = {
    "model.d_struct": 32,
    "model.struct_layers": 3,
    "model.struct_variant": "mpnn_style",
    "model.seq_preset": "",          # optional: esm-xs / esm-s / esm-m
    "model.d_seq": 32,
    "model.seq_layers": 2,
    "model.seq_heads": 4,
    "model.d_model": 64,
    "model.proj_hidden": 64,
    "model.proj_depth": 2,
    "model.decoder_layers": 2,
    "model.decoder_heads": 4,
    "model.max_positions": 512,
    "model.fusion_mode": "add",
    "model.graph_k": 16,
    "model.rbf_count": 16,
    "data.dir": "out/fixtures",
    "data.out": "out/run",
    "data.tasks": ["solubility", "subcellular_localization", "binary_localization",
                   "fold", "yeast_ppi", "human_ppi", "protein_function",
                   "catalytic_activity", "domain_motif", "functional_description"],
    "data.seed": 0,
    "data.check_peer_counts": False,
    "train.seeds": [0, 1, 2],
    "train.pipeline": "stage2",      # stage1 | stage2 | stage1+stage2
    "train.preset": "desk",          # desk | paper
    "train.warmup_steps": 1200,
    "train.warmup_lr": 3e-3,
    "train.warmup_batch": 8,
    "train.stage1.lr": 0.0,          # 0 means: use preset default
    "train.stage1.batch_size": 0,
    "train.stage1.duration_steps": 0,
    "train.stage2.lr": 0.0,
    "train.stage2.batch_size": 0,
    "train.stage2.duration_steps": 0,
    "eval.max_new_tokens": 96,
    "eval.max_examples_per_task": 24,
    "ablate.variants": ["full", "seq_only", "struct_only", "concat_tokens", "full+stage1"],
    "fixtures.num_proteins": 48,
    "fixtures.num_ppi_pairs": 24,
    "fixtures.min_length": 12,
    "fixtures.max_length": 28,
    "fixtures.seed": 0,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"expected boolean, got {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [v.strip() for v in raw.split(",") if v.strip()]
            if default and isinstance(default[0], int):
                return [int(v) for v in items]
            return items
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


@dataclass
class RunConfig:
    values: dict[str, object]

    def __getitem__(self, key: str):
        return self.values[key]

    # -- derived objects ----------------------------------------------------

    def model_config(self) -> ModelConfig:
        v = self.values
        if v["model.seq_preset"]:
            preset = v["model.seq_preset"]
            if preset not in SIZE_PRESETS:
                raise ConfigError(f"unknown seq preset {preset!r}")
            seq = SequenceEncoderConfig.preset(preset)
        else:
            seq = SequenceEncoderConfig(d_seq=v["model.d_seq"], num_layers=v["model.seq_layers"],
                                        num_heads=v["model.seq_heads"])
        if v["model.fusion_mode"] not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {v['model.fusion_mode']!r}")
        try:
            return ModelConfig(
                struct=StructureEncoderConfig(
                    d_struct=v["model.d_struct"], num_layers=v["model.struct_layers"],
                    variant=v["model.struct_variant"], edge_dim=v["model.rbf_count"]),
                seq=seq,
                projector=ProjectorConfig(
                    d_in_seq=seq.d_seq, d_in_struct=v["model.d_struct"],
                    d_model=v["model.d_model"], hidden=v["model.proj_hidden"],
                    depth=v["model.proj_depth"]),
                decoder=DecoderConfig(
                    d_model=v["model.d_model"], num_layers=v["model.decoder_layers"],
                    num_heads=v["model.decoder_heads"], max_positions=v["model.max_positions"]),
                fusion_mode=v["model.fusion_mode"],
                graph_k=v["model.graph_k"],
                rbf_count=v["model.rbf_count"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def fixture_config(self) -> FixtureConfig:
        v = self.values
        return FixtureConfig(
            num_proteins=v["fixtures.num_proteins"],
            num_ppi_pairs=v["fixtures.num_ppi_pairs"],
            min_length=v["fixtures.min_length"],
            max_length=v["fixtures.max_length"],
            seed=v["fixtures.seed"],
        )

    def stage_plan(self, stage: str) -> StagePlan:
        short = "stage1" if stage == "projection_tuning" else "stage2"
        overrides = {}
        for field, key in (("lr", f"train.{short}.lr"),
                           ("batch_size", f"train.{short}.batch_size"),
                           ("duration_steps", f"train.{short}.duration_steps")):
            value = self.values[key]
            if value:
                overrides[field] = value
        return make_stage_plan(stage, overrides, preset=self.values["train.preset"])

    def pipeline_stages(self) -> list[str]:
        pipeline = self.values["train.pipeline"]
        if pipeline == "stage1":
            return ["projection_tuning"]
        if pipeline == "stage2":
            return ["supervised_finetune"]
        if pipeline == "stage1+stage2":
            return ["projection_tuning", "supervised_finetune"]
        raise ConfigError(f"unknown pipeline {pipeline!r} (stage1, stage2, or stage1+stage2)")

    @property
    def seeds(self) -> list[int]:
        return list(self.values["train.seeds"])

    @property
    def data_dir(self) -> Path:
        return Path(self.values["data.dir"])

    @property
    def out_dir(self) -> Path:
        return Path(self.values["data.out"])

    @property
    def tasks(self) -> list[str]:
        return list(self.values["data.tasks"])


def load_run_config(path: str | Path | None = None,
                    overrides: list[str] | None = None) -> RunConfig:
    values = dict(DEFAULTS)
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for key, raw in parse_config_text(text).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return RunConfig(values)


def default_config_text() -> str:
    """A commented example config suitable for a fresh desk run."""
    lines = [
        "# protfuse run configuration (key = value; '#' starts a comment)",
        "# -- model sizes ------------------------------------------------",
    ]
    section = None
    for key, value in DEFAULTS.items():
        head = key.split(".", 1)[0]
        if head != section:
            section = head
            lines.append(f"# -- {section} settings")
        if isinstance(value, list):
            rendered = ",".join(str(v) for v in value)
        else:
            rendered = str(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"
