"""Synthetic desk-scale corpus: coil-like structures, annotations, and task labels.

Labels derive from simple sequence/structure statistics (hydrophobic fraction,
first-residue identity, radius of gyration, chain length) so that training on
the fixture corpus has real signal to find. Structures are written as
PDB-subset files to exercise the parser end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .instruction_data import LABEL_WORDS
from .protein_io import AA1_TO_3, ProteinStructure, ResidueRecord

AAS = "ACDEFGHIKLMNPQRSTVWY"
HYDROPHOBIC = set("AVLIMFWYC")

AA_NAMES = {
    "A": "L-alanine", "C": "L-cysteine", "D": "L-aspartate", "E": "L-glutamate",
    "F": "L-phenylalanine", "G": "glycine", "H": "L-histidine", "I": "L-isoleucine",
    "K": "L-lysine", "L": "L-leucine", "M": "L-methionine", "N": "L-asparagine",
    "P": "L-proline", "Q": "L-glutamine", "R": "L-arginine", "S": "L-serine",
    "T": "L-threonine", "V": "L-valine", "W": "L-tryptophan", "Y": "L-tyrosine",
}

DOMAIN_NAMES = ("helix-turn-helix", "zinc finger", "beta-barrel", "coiled-coil",
                "EF-hand", "SH3", "WD40", "leucine zipper")
MOTIF_NAMES = ("nuclear localization", "glycosylation", "phosphorylation", "ATP-binding")
PROCESS_NAMES = ("protein folding", "signal transduction", "metabolic regulation",
                 "transmembrane transport")

# Radius-of-gyration thresholds (Angstrom) bucketing desk fold classes.
FOLD_RG_THRESHOLDS = (7.0, 9.0, 11.0)

PPI_HYDRO_THRESHOLD = 0.25


@dataclass
class FixtureConfig:
    num_proteins: int = 48
    num_ppi_pairs: int = 24
    min_length: int = 12
    max_length: int = 28
    seed: int = 0


def hydrophobic_fraction(seq: str) -> float:
    return sum(1 for c in seq if c in HYDROPHOBIC) / len(seq)


def radius_of_gyration(structure: ProteinStructure) -> float:
    ca = structure.ca_coords()
    centered = ca - ca.mean(axis=0)
    return float(np.sqrt((centered ** 2).sum(axis=1).mean()))


def most_frequent_aa(seq: str) -> str:
    counts = {aa: seq.count(aa) for aa in set(seq)}
    return max(counts, key=lambda a: (counts[a], -ord(a)))


def least_frequent_aa(seq: str) -> str:
    counts = {aa: seq.count(aa) for aa in set(seq)}
    return min(counts, key=lambda a: (counts[a], ord(a)))


def synth_structure(pid: str, length: int, rng: np.random.Generator,
                    hydro_bias: float) -> ProteinStructure:
    """Coil-like backbone: CA random walk with ~3.8 A steps and persistence."""
    hydro = [a for a in AAS if a in HYDROPHOBIC]
    polar = [a for a in AAS if a not in HYDROPHOBIC]
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    pos = np.zeros(3)
    residues = []
    for _ in range(length):
        step = 0.8 * direction + 0.6 * rng.normal(size=3)
        step = 3.8 * step / np.linalg.norm(step)
        direction = step / 3.8
        pos = pos + step
        aa = str(rng.choice(hydro) if rng.random() < hydro_bias else rng.choice(polar))

        def offset(base, scale):
            u = rng.normal(size=3)
            return tuple(base + scale * u / np.linalg.norm(u))

        n_xyz = offset(pos, 1.46)
        c_xyz = offset(pos, 1.52)
        o_xyz = offset(np.array(c_xyz), 1.23)
        residues.append(ResidueRecord(aa, n_xyz, tuple(pos), c_xyz, o_xyz))
    return ProteinStructure(pid, tuple(residues))


def write_pdb(structure: ProteinStructure) -> str:
    """Render a structure as PDB-subset text (single chain A, backbone atoms only)."""
    lines = []
    serial = 1
    for i, r in enumerate(structure.residues, start=1):
        res3 = AA1_TO_3.get(r.aa_code, "UNK")
        for atom, xyz in (("N", r.n_xyz), ("CA", r.ca_xyz), ("C", r.c_xyz), ("O", r.o_xyz)):
            lines.append(
                f"ATOM  {serial:>5d}  {atom:<3s} {res3:>3s} A{i:>4d}    "
                f"{xyz[0]:8.3f}{xyz[1]:8.3f}{xyz[2]:8.3f}  1.00  0.00"
            )
            serial += 1
    lines.append("TER")
    lines.append("END")
    return "\n".join(lines) + "\n"


# --- label rules -----------------------------------------------------------

def solubility_label(seq: str) -> int:
    return 1 if hydrophobic_fraction(seq) < 0.5 else 0          # 1 = soluble


def binary_localization_label(seq: str) -> int:
    return 0 if hydrophobic_fraction(seq) >= 0.5 else 1         # 0 = membrane-bound


def subcellular_label(seq: str) -> int:
    return AAS.index(seq[0]) % 10


def fold_label(structure: ProteinStructure) -> int:
    rg = radius_of_gyration(structure)
    return int(sum(rg >= t for t in FOLD_RG_THRESHOLDS))


def ppi_label(seq_a: str, seq_b: str) -> int:
    return 1 if abs(hydrophobic_fraction(seq_a) - hydrophobic_fraction(seq_b)) < PPI_HYDRO_THRESHOLD else 0


# --- annotation + understanding-answer synthesis ---------------------------

def make_annotation(structure: ProteinStructure) -> dict:
    seq = "".join(r.aa_code for r in structure.residues)
    common = AA_NAMES[most_frequent_aa(seq)]
    rare = AA_NAMES[least_frequent_aa(seq)]
    location = LABEL_WORDS["subcellular_localization"][subcellular_label(seq)]
    return {
        "protein_id": structure.id,
        "name": f"PROT-{structure.id}",
        "subcellular_location": location,
        "function_text": f"Catalyzes the conversion of {common} into {rare}.",
        "families": f"{common}-rich protein family",
    }


def make_understanding_answers(structure: ProteinStructure) -> dict[str, str]:
    seq = "".join(r.aa_code for r in structure.residues)
    L = len(seq)
    common = AA_NAMES[most_frequent_aa(seq)]
    rare = AA_NAMES[least_frequent_aa(seq)]
    location = LABEL_WORDS["subcellular_localization"][subcellular_label(seq)]
    domain = DOMAIN_NAMES[AAS.index(most_frequent_aa(seq)) % len(DOMAIN_NAMES)]
    motif = MOTIF_NAMES[L % len(MOTIF_NAMES)]
    process = PROCESS_NAMES[L % len(PROCESS_NAMES)]
    reaction = f"{common} + H2O = {rare} + H(+)"
    return {
        "protein_function": (
            f"This protein enables {common} binding activity and participates in {process}."
        ),
        "catalytic_activity": (
            f"This enzyme catalyzes the following reaction: {reaction}."
        ),
        "domain_motif": (
            f"This protein contains the {domain} domain and a {motif} motif."
        ),
        "functional_description": (
            f"This protein functions as a {common}-dependent enzyme and participates in "
            f"{process}. It is located in the {location}."
        ),
    }


MOLINST_RAW_PATTERNS = {
    "protein_function": (
        "What is the function of the protein with the amino acid sequence below?",
        "Could you analyze the following protein sequence and describe its function?",
    ),
    "catalytic_activity": (
        "State the catalytic activity of the protein with the amino acid sequence",
        "Which chemical reaction does this amino acid sequence catalyze?",
    ),
    "domain_motif": (
        "List the domains or motifs of the protein with the amino acid sequence",
        "What domains may the following protein sequence contain?",
    ),
    "functional_description": (
        "Generate a functional description of the protein with the amino acid sequence",
        "Describe the function and localization of the following protein sequence:",
    ),
}


def generate_fixture_corpus(out_dir: str | Path, cfg: FixtureConfig) -> dict:
    """Write the synthetic corpus; returns bookkeeping counts.

    Layout under out_dir: pdb/*.pdb, annotations.tsv, peer/<task>.tsv,
    molinst.jsonl.
    """
    out = Path(out_dir)
    (out / "pdb").mkdir(parents=True, exist_ok=True)
    (out / "peer").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    structures = []
    for i in range(cfg.num_proteins):
        bias = 0.2 if i % 2 == 0 else 0.8
        length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        s = synth_structure(f"p{i:04d}", length, rng, hydro_bias=bias)
        structures.append(s)
        (out / "pdb" / f"{s.id}.pdb").write_text(write_pdb(s), encoding="utf-8")

    with open(out / "annotations.tsv", "w", encoding="utf-8") as fh:
        for s in structures:
            a = make_annotation(s)
            fh.write("\t".join([a["protein_id"], a["name"], a["subcellular_location"],
                                a["function_text"], a["families"]]) + "\n")

    def split_of(index: int) -> str:
        r = index % 10
        return "train" if r < 8 else ("valid" if r == 8 else "test")

    counts: dict[str, int] = {"proteins": len(structures)}
    seqs = {s.id: "".join(r.aa_code for r in s.residues) for s in structures}

    single_tasks = {
        "solubility": lambda s: solubility_label(seqs[s.id]),
        "subcellular_localization": lambda s: subcellular_label(seqs[s.id]),
        "binary_localization": lambda s: binary_localization_label(seqs[s.id]),
        "fold": lambda s: fold_label(s),
    }
    for task, rule in single_tasks.items():
        with open(out / "peer" / f"{task}.tsv", "w", encoding="utf-8") as fh:
            for i, s in enumerate(structures):
                fh.write(f"{s.id}\t{rule(s)}\t{split_of(i)}\n")
        counts[task] = len(structures)

    for task in ("yeast_ppi", "human_ppi"):
        with open(out / "peer" / f"{task}.tsv", "w", encoding="utf-8") as fh:
            for j in range(cfg.num_ppi_pairs):
                a, b = rng.choice(len(structures), size=2, replace=False)
                sa, sb = structures[int(a)], structures[int(b)]
                label = ppi_label(seqs[sa.id], seqs[sb.id])
                fh.write(f"{sa.id},{sb.id}\t{label}\t{split_of(j)}\n")
        counts[task] = cfg.num_ppi_pairs

    n_molinst = 0
    with open(out / "molinst.jsonl", "w", encoding="utf-8") as fh:
        for i, s in enumerate(structures):
            answers = make_understanding_answers(s)
            for task, patterns in MOLINST_RAW_PATTERNS.items():
                prompt = f"{patterns[i % len(patterns)]} {seqs[s.id]}"
                fh.write(json.dumps({
                    "protein_id": s.id,
                    "task_tag": task,
                    "prompt": prompt,
                    "answer": answers[task],
                }) + "\n")
                n_molinst += 1
    counts["molinst_records"] = n_molinst
    return counts
