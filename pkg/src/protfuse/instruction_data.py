"""Verbalize protein records into instruction-following examples.

Three sources feed the two training stages: annotation records rendered
through description templates (stage 1), property-prediction instances
rendered through per-task template sets, and externally-authored prompts
adapted by stripping trailing FASTA blocks and rewriting listed expressions.
Template texts ship as versioned data files under ``protfuse/data``.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from random import Random

from .text_decoder import PLACEHOLDER_LITERAL

DESCRIPTION_TASK = "protein_description"
UNDERSTANDING_TASKS = ("protein_function", "catalytic_activity", "domain_motif",
                       "functional_description")
PROPERTY_TASKS = ("solubility", "subcellular_localization", "binary_localization",
                  "fold", "yeast_ppi", "human_ppi")
PPI_TASKS = ("yeast_ppi", "human_ppi")
ALL_TASKS = (DESCRIPTION_TASK,) + UNDERSTANDING_TASKS + PROPERTY_TASKS

FOLD_NUM_CLASSES = 1195

# Natural-language category words per classification task, indexed by label id.
LABEL_WORDS = {
    "solubility": ("insoluble", "soluble"),
    "binary_localization": ("membrane-bound", "soluble"),
    "subcellular_localization": (
        "nucleus", "cytoplasm", "extracellular space", "mitochondrion",
        "cell membrane", "endoplasmic reticulum", "chloroplast",
        "golgi apparatus", "lysosome", "peroxisome",
    ),
    "yeast_ppi": ("do not interact", "interact"),
    "human_ppi": ("do not interact", "interact"),
}

# Official split sizes (train, valid, test) for the property-prediction tasks;
# loaders can check counts against these when pointed at real manifests.
PEER_OFFICIAL_COUNTS = {
    "solubility": (62478, 6942, 1999),
    "subcellular_localization": (8420, 2811, 2773),
    "binary_localization": (5184, 1749, 1749),
    "fold": (12312, 736, 718),
    "yeast_ppi": (9890, 190, 788),
    "human_ppi": (71338, 630, 474),
}

_DESCRIPTION_ANCHORS = (
    ("name", "The name of this protein is ", "."),
    ("subcellular_location", "It is located in the ", "."),
    ("function_text", "Its function is described as follows: ", None),
    ("families", "It belongs to the ", "."),
)


class TemplateError(ValueError):
    pass


class EmptyRecordError(ValueError):
    pass


class UnknownLabelError(ValueError):
    pass


class ManifestSchemaError(ValueError):
    pass


class DatasetSplitError(ValueError):
    pass


class PeerCountMismatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class InstructionExample:
    protein_ids: tuple[str, ...]
    question: str
    answer: str
    task_tag: str

    def __post_init__(self):
        n = self.question.count(PLACEHOLDER_LITERAL)
        if n != len(self.protein_ids):
            raise ValueError(
                f"question has {n} placeholder(s) for {len(self.protein_ids)} protein id(s)"
            )
        if not self.answer:
            raise ValueError("answer must be non-empty")


@dataclass(frozen=True)
class AnnotationRecord:
    protein_id: str
    name: str = ""
    subcellular_location: str = ""
    function_text: str = ""
    families: str = ""


@dataclass(frozen=True)
class PeerInstance:
    protein_ids: tuple[str, ...]
    label: int


@dataclass(frozen=True)
class TaskTemplateSet:
    task_tag: str
    protein_arity: int
    question_templates: tuple[str, ...]
    answer_template: str

    def __post_init__(self):
        if len(self.question_templates) != 10:
            raise TemplateError(f"{self.task_tag}: expected 10 question templates")
        for t in self.question_templates:
            if t.count(PLACEHOLDER_LITERAL) != self.protein_arity:
                raise TemplateError(
                    f"{self.task_tag}: template {t!r} must contain {self.protein_arity} placeholder(s)"
                )


def _load_json_data(filename: str) -> dict:
    with resources.files("protfuse.data").joinpath(filename).open("r", encoding="utf-8") as fh:
        return json.load(fh)


_template_cache: dict[str, TaskTemplateSet] | None = None


def load_template_sets() -> dict[str, TaskTemplateSet]:
    global _template_cache
    if _template_cache is None:
        raw = _load_json_data("templates.json")
        _template_cache = {
            tag: TaskTemplateSet(
                task_tag=tag,
                protein_arity=entry["protein_arity"],
                question_templates=tuple(entry["question_templates"]),
                answer_template=entry["answer_template"],
            )
            for tag, entry in raw.items()
        }
    return _template_cache


def task_templates(task_tag: str) -> TaskTemplateSet:
    sets = load_template_sets()
    if task_tag not in sets:
        raise TemplateError(f"no template set for task {task_tag!r}")
    return sets[task_tag]


def verbalize_description(rec: AnnotationRecord, template_id: int) -> InstructionExample:
    """Render an annotation record into a describe-this-protein example.

    The answer fills name, location, function, and families clauses in fixed
    order; a missing field omits its clause rather than the whole answer.
    """
    tset = task_templates(DESCRIPTION_TASK)
    if not 0 <= template_id < 10:
        raise TemplateError(f"template_id {template_id} out of range")
    clauses = []
    if rec.name:
        clauses.append(f"The name of this protein is {rec.name}.")
    if rec.subcellular_location:
        clauses.append(f"It is located in the {rec.subcellular_location}.")
    if rec.function_text:
        func = rec.function_text.strip()
        if not func.endswith("."):
            func += "."
        clauses.append(f"Its function is described as follows: {func}")
    if rec.families:
        clauses.append(f"It belongs to the {rec.families}.")
    if not clauses:
        raise EmptyRecordError(f"annotation record {rec.protein_id} has no usable fields")
    return InstructionExample(
        protein_ids=(rec.protein_id,),
        question=tset.question_templates[template_id],
        answer=" ".join(clauses),
        task_tag=DESCRIPTION_TASK,
    )


def extract_description_fields(answer: str) -> dict[str, str | None]:
    """Inverse of the description answer template; None for omitted clauses."""
    fields: dict[str, str | None] = {}
    spans = []
    for key, anchor, _end in _DESCRIPTION_ANCHORS:
        pos = answer.find(anchor)
        spans.append((key, anchor, pos))
    for i, (key, anchor, pos) in enumerate(spans):
        if pos < 0:
            fields[key] = None
            continue
        start = pos + len(anchor)
        following = [p for _, _, p in spans[i + 1:] if p >= 0]
        end = min(following) if following else len(answer)
        value = answer[start:end].strip()
        _, _, tail = _DESCRIPTION_ANCHORS[i]
        if tail and value.endswith(tail):
            value = value[: -len(tail)]
        fields[key] = value
    return fields


def label_word(task_tag: str, label: int) -> str:
    """Canonical answer rendering of a classification label."""
    if task_tag == "fold":
        if not 0 <= label < FOLD_NUM_CLASSES:
            raise UnknownLabelError(f"fold label {label} outside [0, {FOLD_NUM_CLASSES - 1}]")
        return str(label)
    words = LABEL_WORDS.get(task_tag)
    if words is None:
        raise UnknownLabelError(f"{task_tag!r} is not a classification task")
    if not 0 <= label < len(words):
        raise UnknownLabelError(f"label {label} out of range for {task_tag}")
    return words[label]


def verbalize_peer(task_tag: str, instance: PeerInstance, template_id: int) -> InstructionExample:
    """Render a property-prediction instance; PPI questions carry two placeholders."""
    if task_tag not in PROPERTY_TASKS:
        raise TemplateError(f"{task_tag!r} is not a property-prediction task")
    tset = task_templates(task_tag)
    if not 0 <= template_id < 10:
        raise TemplateError(f"template_id {template_id} out of range")
    expected_arity = 2 if task_tag in PPI_TASKS else 1
    if len(instance.protein_ids) != expected_arity:
        raise ManifestSchemaError(
            f"{task_tag} instance needs {expected_arity} protein id(s), got {len(instance.protein_ids)}"
        )
    answer = tset.answer_template.format(label=label_word(task_tag, instance.label))
    return InstructionExample(
        protein_ids=instance.protein_ids,
        question=tset.question_templates[template_id],
        answer=answer,
        task_tag=task_tag,
    )


_molinst_rules_cache: dict | None = None


def load_molinst_rules() -> dict:
    global _molinst_rules_cache
    if _molinst_rules_cache is None:
        _molinst_rules_cache = _load_json_data("molinst_rules.json")
    return _molinst_rules_cache


def adapt_molinst_prompt(prompt: str, rules: dict | None = None) -> str:
    """Adapt an externally-authored prompt to the placeholder convention.

    Removes a trailing FASTA-like residue block (runs of the 21-letter
    amino-acid alphabet), rewrites expressions listed in the editable rule
    table, and appends a single placeholder literal where the sequence was.
    """
    rules = rules or load_molinst_rules()
    min_len = rules.get("min_fasta_length", 10)
    fasta_re = re.compile(
        r"[\s:]*(?:[ACDEFGHIKLMNPQRSTVWYX]{%d,}(?:\s+|$))+$" % min_len
    )
    text = fasta_re.sub("", prompt)
    for old, new in rules.get("rewrites", []):
        text = text.replace(old, new)
    text = text.rstrip(" \t\n:")
    if not text:
        return PLACEHOLDER_LITERAL
    return f"{text} {PLACEHOLDER_LITERAL}"


def split_dataset(examples: list, seed: int, ratios: tuple[int, int, int] = (8, 1, 1)):
    """Deterministic shuffle then contiguous 8:1:1 slices; an exact partition."""
    if len(examples) < 10:
        raise DatasetSplitError(f"need at least 10 examples to split, got {len(examples)}")
    total = sum(ratios)
    shuffled = list(examples)
    Random(seed).shuffle(shuffled)
    n = len(shuffled)
    n_train = n * ratios[0] // total
    n_valid = n * ratios[1] // total
    return (
        shuffled[:n_train],
        shuffled[n_train:n_train + n_valid],
        shuffled[n_train + n_valid:],
    )


def load_peer_splits(task_tag: str, manifest_path: str | Path,
                     check_official_counts: bool = False) -> dict[str, list[PeerInstance]]:
    """Read a tab-separated manifest of (protein_id(s), label, split) rows.

    Splits are taken as given by the manifest. With ``check_official_counts``
    the loaded sizes are compared to the published split sizes and a
    PeerCountMismatchWarning is emitted on disagreement.
    """
    if task_tag not in PROPERTY_TASKS:
        raise ManifestSchemaError(f"{task_tag!r} is not a property-prediction task")
    expected_arity = 2 if task_tag in PPI_TASKS else 1
    splits: dict[str, list[PeerInstance]] = {"train": [], "valid": [], "test": []}
    path = Path(manifest_path)
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestSchemaError(f"{path}:{line_no}: expected 3 tab-separated fields")
        ids = tuple(p.strip() for p in parts[0].split(","))
        if len(ids) != expected_arity or not all(ids):
            raise ManifestSchemaError(
                f"{path}:{line_no}: expected {expected_arity} protein id(s), got {parts[0]!r}"
            )
        try:
            label = int(parts[1])
        except ValueError as exc:
            raise ManifestSchemaError(f"{path}:{line_no}: label must be an integer") from exc
        split = parts[2].strip()
        if split not in splits:
            raise ManifestSchemaError(f"{path}:{line_no}: unknown split {split!r}")
        # validates label range
        label_word(task_tag, label)
        splits[split].append(PeerInstance(protein_ids=ids, label=label))
    if check_official_counts:
        counts = tuple(len(splits[s]) for s in ("train", "valid", "test"))
        official = PEER_OFFICIAL_COUNTS[task_tag]
        if counts != official:
            warnings.warn(
                f"{task_tag}: manifest splits {counts} differ from official sizes {official}",
                PeerCountMismatchWarning,
            )
    return splits


def filter_annotations(records: list[AnnotationRecord],
                       excluded_ids: set[str]) -> list[AnnotationRecord]:
    """Leakage guard: drop annotation records whose protein id appears downstream."""
    return [r for r in records if r.protein_id not in excluded_ids]


def read_annotations(path: str | Path) -> list[AnnotationRecord]:
    """Tab-separated annotation schema: id, name, location, function, families."""
    records = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestSchemaError(f"{path}:{line_no}: expected 5 tab-separated fields")
        records.append(AnnotationRecord(*[p.strip() for p in parts]))
    return records


def write_examples_jsonl(path: str | Path, examples: list[InstructionExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({
                "protein_ids": list(ex.protein_ids),
                "question": ex.question,
                "answer": ex.answer,
                "task_tag": ex.task_tag,
            }) + "\n")


def read_examples_jsonl(path: str | Path) -> list[InstructionExample]:
    examples = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        examples.append(InstructionExample(
            protein_ids=tuple(d["protein_ids"]),
            question=d["question"],
            answer=d["answer"],
            task_tag=d["task_tag"],
        ))
    return examples
