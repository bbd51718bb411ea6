"""Structure file parsing, sequence recovery, and residue graph construction.

Input structures are a PDB subset: single chain, ATOM records only, the four
backbone atoms N/CA/C/O per residue. Residue graphs are k-nearest-neighbor
over CA positions with Gaussian radial-basis edge features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Three-letter residue names for the 20 canonical amino acids. Anything else
# maps to the unknown code 'X'.
AA3_TO_1 = {
    "ALA": "A", "ARG": "R", "ASN": "N", "ASP": "D", "CYS": "C",
    "GLN": "Q", "GLU": "E", "GLY": "G", "HIS": "H", "ILE": "I",
    "LEU": "L", "LYS": "K", "MET": "M", "PHE": "F", "PRO": "P",
    "SER": "S", "THR": "T", "TRP": "W", "TYR": "Y", "VAL": "V",
}
AA1_TO_3 = {v: k for k, v in AA3_TO_1.items()}

BACKBONE_ATOMS = ("N", "CA", "C", "O")

RBF_D_MIN = 2.0
RBF_D_MAX = 22.0


class StructureParseError(ValueError):
    """Base class for structure parsing failures."""


class EmptyStructureError(StructureParseError):
    """No residue with a complete backbone could be parsed."""


class MalformedRecordError(StructureParseError):
    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class MultiChainError(StructureParseError):
    """More than one chain identifier in the input; only single-chain files are supported."""


Vec3 = tuple[float, float, float]


@dataclass(frozen=True)
class ResidueRecord:
    aa_code: str
    n_xyz: Vec3
    ca_xyz: Vec3
    c_xyz: Vec3
    o_xyz: Vec3

    def __post_init__(self):
        for name in ("n_xyz", "ca_xyz", "c_xyz", "o_xyz"):
            coords = getattr(self, name)
            if len(coords) != 3 or not all(math.isfinite(v) for v in coords):
                raise ValueError(f"{name} must be three finite floats, got {coords!r}")


@dataclass(frozen=True)
class ProteinStructure:
    id: str
    residues: tuple[ResidueRecord, ...]
    dropped_residues: int = 0

    def __post_init__(self):
        if not self.residues:
            raise ValueError("structures must contain at least one residue")

    def __len__(self) -> int:
        return len(self.residues)

    def ca_coords(self) -> np.ndarray:
        """L x 3 float64 array of CA positions."""
        return np.array([r.ca_xyz for r in self.residues], dtype=np.float64)


@dataclass
class ResidueGraph:
    num_residues: int
    neighbor_index: np.ndarray  # (L, k) int64
    edge_features: np.ndarray   # (L, k, rbf_count) float32, zero at padded slots
    neighbor_mask: np.ndarray   # (L, k) bool, False at padded slots
    distances: np.ndarray       # (L, k) float32, 0 at padded slots

    @property
    def k(self) -> int:
        return self.neighbor_index.shape[1]

    @property
    def edge_dim(self) -> int:
        return self.edge_features.shape[2]


def _parse_atom_line(line: str, line_number: int):
    """Parse one fixed-column ATOM record into (atom, resname, chain, resseq, xyz)."""
    if len(line) < 54:
        raise MalformedRecordError(line_number, "ATOM record shorter than coordinate columns")
    alt_loc = line[16]
    if alt_loc not in (" ", ""):
        raise MalformedRecordError(line_number, f"altLoc {alt_loc!r} not supported")
    if len(line) > 26 and line[26] not in (" ", ""):
        raise MalformedRecordError(line_number, f"insertion code {line[26]!r} not supported")
    atom_name = line[12:16].strip()
    res_name = line[17:20].strip()
    chain_id = line[21]
    try:
        res_seq = int(line[22:26])
        x = float(line[30:38])
        y = float(line[38:46])
        z = float(line[46:54])
    except ValueError as exc:
        raise MalformedRecordError(line_number, f"unparseable ATOM fields ({exc})") from exc
    if not all(math.isfinite(v) for v in (x, y, z)):
        raise MalformedRecordError(line_number, "non-finite coordinate")
    return atom_name, res_name, chain_id, res_seq, (x, y, z)


def parse_structure(text: str, structure_id: str = "") -> ProteinStructure:
    """Parse PDB-subset text into a ProteinStructure.

    Residues appear in file order. A residue missing any of the four backbone
    atoms is dropped and counted in ``dropped_residues``. Raises
    EmptyStructureError when no complete residue remains, MalformedRecordError
    for unparseable ATOM lines, and MultiChainError for multi-chain input.
    """
    chains: set[str] = set()
    order: list[int] = []
    atoms: dict[int, dict[str, Vec3]] = {}
    names: dict[int, str] = {}

    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.startswith("ATOM"):
            continue
        atom_name, res_name, chain_id, res_seq, xyz = _parse_atom_line(line, line_number)
        chains.add(chain_id)
        if len(chains) > 1:
            raise MultiChainError(f"multiple chains found: {sorted(chains)}")
        if res_seq not in atoms:
            atoms[res_seq] = {}
            names[res_seq] = res_name
            order.append(res_seq)
        elif names[res_seq] != res_name:
            raise MalformedRecordError(line_number, f"residue {res_seq} has conflicting names")
        if atom_name in BACKBONE_ATOMS:
            if atom_name in atoms[res_seq]:
                raise MalformedRecordError(line_number, f"duplicate atom {atom_name} in residue {res_seq}")
            atoms[res_seq][atom_name] = xyz

    residues: list[ResidueRecord] = []
    dropped = 0
    for res_seq in order:
        rec_atoms = atoms[res_seq]
        if any(a not in rec_atoms for a in BACKBONE_ATOMS):
            dropped += 1
            continue
        residues.append(ResidueRecord(
            aa_code=AA3_TO_1.get(names[res_seq], "X"),
            n_xyz=rec_atoms["N"],
            ca_xyz=rec_atoms["CA"],
            c_xyz=rec_atoms["C"],
            o_xyz=rec_atoms["O"],
        ))
    if not residues:
        raise EmptyStructureError("no residue with a complete N/CA/C/O backbone")
    return ProteinStructure(id=structure_id, residues=tuple(residues), dropped_residues=dropped)


def derive_sequence(structure: ProteinStructure) -> str:
    """Amino-acid string of the structure, one letter per residue."""
    return "".join(r.aa_code for r in structure.residues)


def serialize_structure(structure: ProteinStructure) -> str:
    """Line-oriented cache format: one residue per line, aa code + 12 coords at 3 decimals."""
    lines = [f"#protein {structure.id} {structure.dropped_residues}"]
    for r in structure.residues:
        coords = [*r.n_xyz, *r.ca_xyz, *r.c_xyz, *r.o_xyz]
        lines.append(r.aa_code + " " + " ".join(f"{v:.3f}" for v in coords))
    return "\n".join(lines) + "\n"


def deserialize_structure(text: str) -> ProteinStructure:
    """Inverse of serialize_structure."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#protein"):
        raise StructureParseError("missing '#protein' header line")
    header = lines[0].split()
    structure_id = header[1] if len(header) > 1 else ""
    dropped = int(header[2]) if len(header) > 2 else 0
    residues = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 13:
            raise StructureParseError(f"expected aa code + 12 floats, got {len(parts)} fields")
        vals = [float(v) for v in parts[1:]]
        residues.append(ResidueRecord(
            aa_code=parts[0],
            n_xyz=tuple(vals[0:3]),
            ca_xyz=tuple(vals[3:6]),
            c_xyz=tuple(vals[6:9]),
            o_xyz=tuple(vals[9:12]),
        ))
    if not residues:
        raise EmptyStructureError("serialized structure has no residues")
    return ProteinStructure(id=structure_id, residues=tuple(residues), dropped_residues=dropped)


def rbf_encode(distances: np.ndarray, rbf_count: int) -> np.ndarray:
    """Gaussian radial basis features of distances, centers uniform on [2, 22] A.

    Width equals the center spacing, so a distance exactly at a center scores 1.0
    on that component.
    """
    if rbf_count < 1:
        raise ValueError("rbf_count must be >= 1")
    if rbf_count == 1:
        centers = np.array([RBF_D_MIN], dtype=np.float64)
        width = RBF_D_MAX - RBF_D_MIN
    else:
        centers = np.linspace(RBF_D_MIN, RBF_D_MAX, rbf_count)
        width = (RBF_D_MAX - RBF_D_MIN) / (rbf_count - 1)
    z = (np.asarray(distances, dtype=np.float64)[..., None] - centers) / width
    return np.exp(-(z ** 2)).astype(np.float32)


def build_residue_graph(structure: ProteinStructure, k: int = 16, rbf_count: int = 16) -> ResidueGraph:
    """k-NN residue graph by CA-CA distance with RBF edge features.

    Self is always the nearest neighbor; remaining ties break toward the lower
    residue index. When L <= k the neighbor list is the full residue set padded
    by repeating the last valid neighbor, with the padding masked out and its
    edge features zeroed.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ca = structure.ca_coords()
    L = ca.shape[0]
    diff = ca[:, None, :] - ca[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))

    n_valid = min(k, L)
    neighbor_index = np.zeros((L, k), dtype=np.int64)
    neighbor_mask = np.zeros((L, k), dtype=bool)
    nbr_dist = np.zeros((L, k), dtype=np.float64)
    idx = np.arange(L)
    for i in range(L):
        not_self = (idx != i).astype(np.int64)
        # lexsort: last key is primary -> distance, then non-self flag, then index
        order = np.lexsort((idx, not_self, dist[i]))
        chosen = order[:n_valid]
        neighbor_index[i, :n_valid] = chosen
        neighbor_index[i, n_valid:] = chosen[-1]
        neighbor_mask[i, :n_valid] = True
        nbr_dist[i, :n_valid] = dist[i, chosen]

    edge_features = rbf_encode(nbr_dist, rbf_count)
    edge_features[~neighbor_mask] = 0.0
    return ResidueGraph(
        num_residues=L,
        neighbor_index=neighbor_index,
        edge_features=edge_features,
        neighbor_mask=neighbor_mask,
        distances=nbr_dist.astype(np.float32),
    )


class MissingStructureError(KeyError):
    pass


class ProteinStore:
    """Directory of serialized structures keyed by protein id, loaded lazily."""

    SUFFIX = ".res"

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._cache: dict[str, ProteinStructure] = {}

    def ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob(f"*{self.SUFFIX}"))

    def __contains__(self, protein_id: str) -> bool:
        return protein_id in self._cache or (self.root / f"{protein_id}{self.SUFFIX}").exists()

    def get(self, protein_id: str) -> ProteinStructure:
        if protein_id not in self._cache:
            path = self.root / f"{protein_id}{self.SUFFIX}"
            if not path.exists():
                raise MissingStructureError(f"no structure for protein id {protein_id!r}")
            self._cache[protein_id] = deserialize_structure(path.read_text(encoding="utf-8"))
        return self._cache[protein_id]

    def put(self, structure: ProteinStructure) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / f"{structure.id}{self.SUFFIX}"
        path.write_text(serialize_structure(structure), encoding="utf-8")
        self._cache[structure.id] = structure

    def as_dict(self) -> dict[str, ProteinStructure]:
        return {pid: self.get(pid) for pid in self.ids()}

    @classmethod
    def from_pdb_dir(cls, pdb_dir: str | Path, store_root: str | Path) -> "ProteinStore":
        """Parse every .pdb file in a directory into a fresh store (id = file stem)."""
        store = cls(store_root)
        pdb_paths = sorted(Path(pdb_dir).glob("*.pdb"))
        if not pdb_paths:
            raise EmptyStructureError(f"no .pdb files under {pdb_dir}")
        for path in pdb_paths:
            structure = parse_structure(path.read_text(encoding="utf-8"), structure_id=path.stem)
            store.put(structure)
        return store
