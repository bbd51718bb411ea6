"""End-to-end drivers behind the CLI subcommands.

Builds datasets from the fixture corpus, runs the warm-up + stage pipeline per
seed, evaluates checkpoints with greedy generation, and executes the ablation
grid. All outputs land under the configured output directory.
"""

from __future__ import annotations

import json
from pathlib import Path
from random import Random

from . import evaluation, reports
from .config import RunConfig
from .instruction_data import (DESCRIPTION_TASK, PROPERTY_TASKS,
                               UNDERSTANDING_TASKS, InstructionExample,
                               adapt_molinst_prompt, filter_annotations,
                               load_peer_splits, read_annotations,
                               read_examples_jsonl, split_dataset,
                               verbalize_description, verbalize_peer,
                               write_examples_jsonl)
from .model import ModelConfig, build_model, generate_answer
from .protein_io import ProteinStore
from .training import (TrainState, load_checkpoint, pretrain_decoder,
                       save_checkpoint, smoothed, train_stage)


class MissingInputError(FileNotFoundError):
    pass


# --- dataset building -------------------------------------------------------


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"{what} not found at {path}")
    return path


def build_datasets(cfg: RunConfig) -> dict:
    """Build projection-tuning and fine-tuning datasets from the fixture corpus.

    Deterministic for a fixed data seed: template assignment comes from one
    seeded stream over stable orderings, and outputs are written sorted.
    """
    data_dir = _require(cfg.data_dir, "fixture directory")
    out = cfg.out_dir
    datasets_dir = out / "datasets"
    datasets_dir.mkdir(parents=True, exist_ok=True)

    pdb_dir = _require(data_dir / "pdb", "structure directory")
    store = ProteinStore.from_pdb_dir(pdb_dir, out / "store")

    seed = cfg["data.seed"]
    rng = Random(seed)
    tasks = cfg.tasks
    sft_train: list[InstructionExample] = []
    sft_valid: list[InstructionExample] = []
    sft_test: list[InstructionExample] = []
    counts: dict[str, dict[str, int]] = {}
    test_protein_ids: set[str] = set()

    for task in PROPERTY_TASKS:
        if task not in tasks:
            continue
        manifest = _require(data_dir / "peer" / f"{task}.tsv", f"{task} manifest")
        splits = load_peer_splits(task, manifest,
                                  check_official_counts=cfg["data.check_peer_counts"])
        per_split = {}
        for split_name, bucket in (("train", sft_train), ("valid", sft_valid),
                                   ("test", sft_test)):
            items = splits[split_name]
            for inst in items:
                bucket.append(verbalize_peer(task, inst, rng.randrange(10)))
            per_split[split_name] = len(items)
            if split_name == "test":
                for inst in items:
                    test_protein_ids.update(inst.protein_ids)
        counts[task] = per_split

    molinst_path = data_dir / "molinst.jsonl"
    wanted_understanding = [t for t in UNDERSTANDING_TASKS if t in tasks]
    if wanted_understanding:
        _require(molinst_path, "external prompt file")
        by_task: dict[str, list[InstructionExample]] = {t: [] for t in wanted_understanding}
        for line in molinst_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["task_tag"] not in by_task:
                continue
            question = adapt_molinst_prompt(rec["prompt"])
            by_task[rec["task_tag"]].append(InstructionExample(
                protein_ids=(rec["protein_id"],),
                question=question,
                answer=rec["answer"],
                task_tag=rec["task_tag"],
            ))
        for task, examples in by_task.items():
            train, valid, test = split_dataset(examples, seed=seed)
            sft_train.extend(train)
            sft_valid.extend(valid)
            sft_test.extend(test)
            counts[task] = {"train": len(train), "valid": len(valid), "test": len(test)}
            test_protein_ids.update(pid for ex in test for pid in ex.protein_ids)

    annotations = read_annotations(_require(data_dir / "annotations.tsv", "annotation file"))
    kept = filter_annotations(annotations, test_protein_ids)
    projection = [verbalize_description(rec, rng.randrange(10)) for rec in kept
                  if rec.protein_id in store]
    counts[DESCRIPTION_TASK] = {"train": len(projection), "excluded": len(annotations) - len(kept)}

    def stable(examples):
        return sorted(examples, key=lambda e: (e.task_tag, e.protein_ids, e.question))

    write_examples_jsonl(datasets_dir / "projection_tuning.jsonl", stable(projection))
    write_examples_jsonl(datasets_dir / "sft_train.jsonl", stable(sft_train))
    write_examples_jsonl(datasets_dir / "sft_valid.jsonl", stable(sft_valid))
    write_examples_jsonl(datasets_dir / "sft_test.jsonl", stable(sft_test))
    with open(datasets_dir / "counts.json", "w", encoding="utf-8") as fh:
        json.dump(counts, fh, indent=2, sort_keys=True)
    return counts


# --- training ----------------------------------------------------------------


def _load_corpora(cfg: RunConfig):
    datasets_dir = cfg.out_dir / "datasets"
    projection = read_examples_jsonl(_require(datasets_dir / "projection_tuning.jsonl",
                                              "projection-tuning dataset"))
    sft_train = read_examples_jsonl(_require(datasets_dir / "sft_train.jsonl",
                                             "fine-tuning dataset"))
    store = ProteinStore(_require(cfg.out_dir / "store", "structure store"))
    return projection, sft_train, store


def train_pipeline(cfg: RunConfig, model_cfg: ModelConfig | None = None) -> list[Path]:
    """Warm-up + configured stage sequence for every seed; one checkpoint per seed."""
    model_cfg = model_cfg or cfg.model_config()
    projection, sft_train, store = _load_corpora(cfg)
    structures = store.as_dict()
    stage_corpora = {"projection_tuning": projection, "supervised_finetune": sft_train}
    checkpoint_paths = []
    for seed in cfg.seeds:
        state = TrainState(params=build_model(model_cfg, seed), model_cfg=model_cfg, seed=seed)
        warmup_steps = cfg["train.warmup_steps"]
        if warmup_steps:
            warm_records = []
            pretrain_decoder(
                state, projection + sft_train, steps=warmup_steps,
                lr=cfg["train.warmup_lr"], batch_size=cfg["train.warmup_batch"],
                structures=structures, fusion_mode=model_cfg.fusion_mode,
                log_fn=lambda s, l, r: warm_records.append({"step": s, "loss": l, "lr": r}))
            reports.write_metrics_log(cfg.out_dir / f"warmup_seed{seed}.jsonl", warm_records)
        for stage in cfg.pipeline_stages():
            plan = cfg.stage_plan(stage)
            corpus = stage_corpora[stage]
            records = []
            state = train_stage(
                plan, corpus, state, structures,
                log_fn=lambda s, l, r: records.append({"step": s, "loss": l, "lr": r}))
            reports.write_metrics_log(cfg.out_dir / f"metrics_seed{seed}_{stage}.jsonl", records)
        path = cfg.out_dir / f"ckpt_seed{seed}.bin"
        save_checkpoint(state, path)
        checkpoint_paths.append(path)
    return checkpoint_paths


# --- evaluation --------------------------------------------------------------


def _score_task(task: str, golds: list[str], gens: list[str]) -> dict[str, float]:
    scores: dict[str, float] = {}
    if task in PROPERTY_TASKS:
        gold_labels = [evaluation.parse_classification(g, task) for g in golds]
        pred_labels = [evaluation.parse_classification(g, task) for g in gens]
        scores["accuracy"] = evaluation.accuracy(pred_labels, gold_labels)
        return scores
    rouges = [evaluation.rouge_l(ref, hyp) for ref, hyp in zip(golds, gens)]
    scores["rouge_l"] = sum(rouges) / len(rouges)
    if task in evaluation.CRITICAL_TASKS:
        crit = [evaluation.rouge_l(evaluation.extract_critical(ref, task),
                                   evaluation.extract_critical(hyp, task))
                for ref, hyp in zip(golds, gens)]
        scores["rouge_l_critical"] = sum(crit) / len(crit)
    return scores


def evaluate_pipeline(cfg: RunConfig, checkpoint_paths: list[Path] | None = None) -> list:
    """Greedy generation + scoring per task, aggregated over the seed checkpoints."""
    datasets_dir = cfg.out_dir / "datasets"
    test_examples = read_examples_jsonl(_require(datasets_dir / "sft_test.jsonl", "test split"))
    store = ProteinStore(_require(cfg.out_dir / "store", "structure store"))
    if checkpoint_paths is None:
        checkpoint_paths = [cfg.out_dir / f"ckpt_seed{seed}.bin" for seed in cfg.seeds]
    for path in checkpoint_paths:
        _require(Path(path), "checkpoint")

    cap = cfg["eval.max_examples_per_task"]
    by_task: dict[str, list[InstructionExample]] = {}
    for ex in test_examples:
        bucket = by_task.setdefault(ex.task_tag, [])
        if len(bucket) < cap:
            bucket.append(ex)

    per_seed_scores: dict[tuple[str, str], list[float]] = {}
    n_examples: dict[str, int] = {}
    for path in checkpoint_paths:
        state = load_checkpoint(path)
        predictions = []
        for task, examples in sorted(by_task.items()):
            golds, gens = [], []
            for ex in examples:
                structures = [store.get(pid) for pid in ex.protein_ids]
                gen = generate_answer(state.params, state.model_cfg, ex.question, structures,
                                      max_new_tokens=cfg["eval.max_new_tokens"])
                golds.append(ex.answer)
                gens.append(gen)
                predictions.append({"task_tag": task, "protein_ids": list(ex.protein_ids),
                                    "question": ex.question, "gold": ex.answer, "generated": gen})
            for metric, value in _score_task(task, golds, gens).items():
                per_seed_scores.setdefault((task, metric), []).append(value)
            n_examples[task] = len(examples)
        reports.write_jsonl(cfg.out_dir / f"predictions_seed{state.seed}.jsonl", predictions)

    eval_reports = [
        evaluation.aggregate_runs(scores, task_tag=task, metric=metric,
                                  num_examples=n_examples[task],
                                  expected_runs=len(checkpoint_paths))
        for (task, metric), scores in sorted(per_seed_scores.items())
    ]
    reports.write_eval_report(eval_reports, cfg.out_dir)
    return eval_reports


# --- generation --------------------------------------------------------------


def generate_one(cfg: RunConfig, checkpoint: Path, protein_ids: list[str],
                 question: str) -> str:
    state = load_checkpoint(_require(Path(checkpoint), "checkpoint"))
    store = ProteinStore(_require(cfg.out_dir / "store", "structure store"))
    structures = [store.get(pid) for pid in protein_ids]
    return generate_answer(state.params, state.model_cfg, question, structures,
                           max_new_tokens=cfg["eval.max_new_tokens"])


# --- ablation ----------------------------------------------------------------

ABLATION_VARIANTS = {
    "full": ("add", "stage2"),
    "full+stage1": ("add", "stage1+stage2"),
    "seq_only": ("seq_only", "stage2"),
    "struct_only": ("struct_only", "stage2"),
    "concat_tokens": ("concat_tokens", "stage2"),
}


def _protein_token_count(examples, store, fusion_mode: str) -> int:
    """Total protein tokens the decoder would see across the examples."""
    total = 0
    for ex in examples:
        for pid in ex.protein_ids:
            L = len(store.get(pid))
            total += 2 * L if fusion_mode == "concat_tokens" else L
    return total


def ablate_pipeline(cfg: RunConfig) -> list[dict]:
    """Train + evaluate the configured ablation grid with shared seeds and data."""
    base_model = cfg.model_config()
    datasets_dir = cfg.out_dir / "datasets"
    test_examples = read_examples_jsonl(_require(datasets_dir / "sft_test.jsonl", "test split"))
    store = ProteinStore(_require(cfg.out_dir / "store", "structure store"))
    rows = []
    for variant in cfg["ablate.variants"]:
        if variant not in ABLATION_VARIANTS:
            raise MissingInputError(f"unknown ablation variant {variant!r}")
        fusion_mode, pipeline = ABLATION_VARIANTS[variant]
        sub_values = dict(cfg.values)
        sub_values["model.fusion_mode"] = fusion_mode
        sub_values["train.pipeline"] = pipeline
        sub_values["data.out"] = str(cfg.out_dir / "ablate" / variant)
        sub_cfg = RunConfig(sub_values)
        sub_cfg.out_dir.mkdir(parents=True, exist_ok=True)
        # share data: reuse the base datasets/store rather than rebuilding
        _link_datasets(cfg.out_dir, sub_cfg.out_dir)
        checkpoints = train_pipeline(sub_cfg)
        final_losses = []
        for path in checkpoints:
            state = load_checkpoint(path)
            final_losses.append(smoothed(state.loss_history))
        eval_reports = evaluate_pipeline(sub_cfg, checkpoints)
        primary = {f"{r.task_tag}/{r.metric}": r.mean for r in eval_reports
                   if not r.metric.endswith("critical")}
        rows.append({
            "variant": variant,
            "fusion_mode": fusion_mode,
            "pipeline": pipeline,
            "final_loss": round(sum(final_losses) / len(final_losses), 4),
            "protein_tokens": _protein_token_count(test_examples, store, fusion_mode),
            "mean_eval_score": round(sum(primary.values()) / len(primary), 4) if primary else 0.0,
        })
    reports.write_ablation_table(rows, cfg.out_dir)
    return rows


def _link_datasets(base_out: Path, variant_out: Path) -> None:
    import shutil
    for name in ("datasets", "store"):
        src = base_out / name
        dst = variant_out / name
        if dst.exists():
            continue
        if not src.exists():
            raise MissingInputError(f"{src} missing; run build-data first")
        shutil.copytree(src, dst)
