"""Backbone-only PDB reading/writing and paired-corpus manifests.

Only the fixed-column ATOM layout is understood.  Four atoms are kept per
residue, in the order N, CA, C, O; everything else in the file is ignored.
"""

from __future__ import annotations

import csv
import gzip
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicatePairId,
    EmptyChain,
    IoFailure,
    LengthMismatch,
    MalformedRecord,
    MissingPlddt,
    UnknownSplit,
)

logger = logging.getLogger(__name__)

BACKBONE_ATOMS = ("N", "CA", "C", "O")
ATOM_INDEX = {name: i for i, name in enumerate(BACKBONE_ATOMS)}
ELEMENTS = ("N", "C", "C", "O")

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
THREE_TO_ONE = {
    "ALA": "A", "CYS": "C", "ASP": "D", "GLU": "E", "PHE": "F",
    "GLY": "G", "HIS": "H", "ILE": "I", "LYS": "K", "LEU": "L",
    "MET": "M", "ASN": "N", "PRO": "P", "GLN": "Q", "ARG": "R",
    "SER": "S", "THR": "T", "VAL": "V", "TRP": "W", "TYR": "Y",
}
ONE_TO_THREE = {v: k for k, v in THREE_TO_ONE.items()}
ONE_TO_THREE["X"] = "UNK"

SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("pair_id", "predicted_path", "experimental_path", "split")


@dataclass
class BackboneStructure:
    """Backbone coordinates of one chain.

    ``coords`` has shape (L, 4, 3) with atoms ordered N, CA, C, O and
    ``atom_mask`` marks which of those were observed.  ``plddt`` is only set
    for predicted models, where the B-factor column carries confidence.
    """

    id: str
    sequence: str
    coords: np.ndarray
    atom_mask: np.ndarray
    plddt: np.ndarray | None = None
    chain_id: str = "A"
    residue_numbers: list[str] | None = None
    dropped_residues: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.atom_mask = np.asarray(self.atom_mask, dtype=bool)
        if self.plddt is not None:
            self.plddt = np.asarray(self.plddt, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.sequence)

    @property
    def ca(self) -> np.ndarray:
        return self.coords[:, 1]

    def validate(self, min_length: int = 1) -> None:
        n = len(self.sequence)
        if self.coords.shape != (n, 4, 3):
            raise LengthMismatch(
                f"{self.id}: coords shape {self.coords.shape} does not match sequence length {n}"
            )
        if self.atom_mask.shape != (n, 4):
            raise LengthMismatch(f"{self.id}: atom_mask shape {self.atom_mask.shape}")
        if self.plddt is not None and self.plddt.shape != (n,):
            raise LengthMismatch(f"{self.id}: plddt shape {self.plddt.shape}")
        if n < min_length:
            raise EmptyChain(f"{self.id}: {n} residues, need at least {min_length}")
        if not np.all(np.isfinite(self.coords[self.atom_mask])):
            raise MalformedRecord(f"{self.id}: non-finite coordinates on observed atoms")

    def with_coords(self, coords: np.ndarray, id: str | None = None) -> "BackboneStructure":
        """Copy carrying new coordinates but the same sequence, masks and labels."""
        return BackboneStructure(
            id=self.id if id is None else id,
            sequence=self.sequence,
            coords=np.array(coords, dtype=np.float64),
            atom_mask=self.atom_mask.copy(),
            plddt=None if self.plddt is None else self.plddt.copy(),
            chain_id=self.chain_id,
            residue_numbers=None if self.residue_numbers is None else list(self.residue_numbers),
        )


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt")
    return open(path, "r")


def _field_float(line: str, start: int, stop: int, name: str, lineno: int,
                 default: float | None = None) -> float:
    text = line[start:stop].strip()
    if not text:
        if default is not None:
            return default
        raise MalformedRecord(f"missing {name} field", lineno)
    try:
        value = float(text)
    except ValueError:
        raise MalformedRecord(f"non-numeric {name} field {text!r}", lineno) from None
    if not np.isfinite(value):
        raise MalformedRecord(f"non-finite {name} field {text!r}", lineno)
    return value


def parse_pdb_lines(lines, chain: str | None = None, predicted: bool = False,
                    structure_id: str = "structure") -> BackboneStructure:
    """Parse ATOM records from an iterable of text lines.

    Only the first model is read.  When ``chain`` is None the first chain
    carrying ATOM records is used.  For each (residue, atom) the first
    alternate location encountered wins.
    """
    residues: dict[tuple[str, str], dict] = {}
    order: list[tuple[str, str]] = []
    selected = chain
    seen_atom = False

    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        record = line[:6]
        if record.startswith("ENDMDL"):
            if seen_atom:
                break
            continue
        if record != "ATOM  ":
            continue
        if len(line) < 54:
            raise MalformedRecord(f"ATOM record too short ({len(line)} columns)", lineno)
        seen_atom = True
        chain_id = line[21]
        if selected is None:
            selected = chain_id
        if chain_id != selected:
            continue
        atom_name = line[12:16].strip()
        if atom_name not in ATOM_INDEX:
            continue
        res_seq = line[22:26].strip()
        icode = line[26].strip()
        try:
            int(res_seq)
        except ValueError:
            raise MalformedRecord(f"non-integer residue number {res_seq!r}", lineno) from None
        x = _field_float(line, 30, 38, "x", lineno)
        y = _field_float(line, 38, 46, "y", lineno)
        z = _field_float(line, 46, 54, "z", lineno)
        bfactor = _field_float(line, 60, 66, "B-factor", lineno, default=0.0) if len(line) > 60 else 0.0

        key = (res_seq, icode)
        res = residues.get(key)
        if res is None:
            res = {"name": line[17:20].strip(), "atoms": {}, "bfactor": {}}
            residues[key] = res
            order.append(key)
        if atom_name in res["atoms"]:
            continue  # later altLoc of an atom already taken
        res["atoms"][atom_name] = (x, y, z)
        res["bfactor"][atom_name] = bfactor

    if selected is None or not order:
        raise EmptyChain(f"{structure_id}: no backbone atoms for chain {chain!r}")

    kept = [key for key in order if "CA" in residues[key]["atoms"]]
    dropped = ["".join(key) for key in order if "CA" not in residues[key]["atoms"]]
    if not kept:
        raise EmptyChain(f"{structure_id}: no residue with a CA atom in chain {selected!r}")

    n = len(kept)
    coords = np.zeros((n, 4, 3))
    mask = np.zeros((n, 4), dtype=bool)
    plddt = np.zeros(n) if predicted else None
    seq = []
    for i, key in enumerate(kept):
        res = residues[key]
        seq.append(THREE_TO_ONE.get(res["name"], "X"))
        for name, xyz in res["atoms"].items():
            coords[i, ATOM_INDEX[name]] = xyz
            mask[i, ATOM_INDEX[name]] = True
        if plddt is not None:
            plddt[i] = res["bfactor"]["CA"]

    if dropped:
        logger.debug("%s: dropped %d residues without CA", structure_id, len(dropped))
    return BackboneStructure(
        id=structure_id,
        sequence="".join(seq),
        coords=coords,
        atom_mask=mask,
        plddt=plddt,
        chain_id=selected,
        residue_numbers=["".join(key) for key in kept],
        dropped_residues=dropped,
    )


def _structure_id(path: Path) -> str:
    name = path.name
    for suffix in (".gz", ".pdb", ".ent"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return name


def parse_structure(path, chain: str | None = None, predicted: bool = False) -> BackboneStructure:
    """Read one chain's backbone from a PDB file (optionally gzip-compressed).

    With ``predicted=True`` the B-factor of each CA is read as pLDDT.
    """
    path = Path(path)
    try:
        with _open_text(path) as handle:
            return parse_pdb_lines(handle, chain=chain, predicted=predicted,
                                   structure_id=_structure_id(path))
    except (OSError, EOFError, UnicodeDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def format_structure(s: BackboneStructure) -> str:
    s.validate()
    lines = []
    serial = 1
    numbers = s.residue_numbers or [str(i + 1) for i in range(len(s))]
    chain = (s.chain_id or "A")[:1]
    for i, aa in enumerate(s.sequence):
        resname = ONE_TO_THREE.get(aa, "UNK")
        label = numbers[i]
        icode = label[-1] if label and not label[-1].isdigit() else " "
        resseq = label[:-1] if icode != " " else label
        bfactor = 0.0 if s.plddt is None else float(s.plddt[i])
        for a, name in enumerate(BACKBONE_ATOMS):
            if not s.atom_mask[i, a]:
                continue
            x, y, z = s.coords[i, a]
            if max(x, y, z) >= 9999.9995 or min(x, y, z) <= -999.9995:
                raise IoFailure(f"{s.id}: coordinate out of PDB field range at residue {i}")
            lines.append(
                f"ATOM  {serial % 100000:5d}  {name:<3s} {resname:>3s} {chain}{resseq:>4s}{icode}   "
                f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{bfactor:6.2f}          {ELEMENTS[a]:>2s}"
            )
            serial += 1
    last = len(s) - 1
    lines.append(f"TER   {serial % 100000:5d}      {ONE_TO_THREE.get(s.sequence[last], 'UNK'):>3s} {chain}")
    lines.append("END")
    return "\n".join(lines) + "\n"


def write_structure(s: BackboneStructure, path) -> None:
    """Write ATOM records for every observed atom (occupancy 1.00, pLDDT as B-factor)."""
    text = format_structure(s)
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "wt") as handle:
                handle.write(text)
        else:
            path.write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


@dataclass(frozen=True)
class PairRow:
    pair_id: str
    predicted_path: Path
    experimental_path: Path
    split: str


@dataclass
class PairManifest:
    rows: list[PairRow]

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def split(self, name: str) -> list[PairRow]:
        return [row for row in self.rows if row.split == name]


def load_pair_manifest(path) -> PairManifest:
    """Read a ``pair_id,predicted_path,experimental_path,split`` CSV.

    Relative paths are resolved against the manifest's directory.  Structure
    files are not opened here; see :func:`load_pair`.
    """
    path = Path(path)
    base = path.parent
    try:
        with open(path, newline="") as handle:
            reader = csv.DictReader(handle)
            missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise MalformedRecord(f"{path}: manifest header lacks {', '.join(missing)}", 1)
            rows = []
            seen = set()
            for lineno, rec in enumerate(reader, start=2):
                pair_id = (rec["pair_id"] or "").strip()
                if not pair_id:
                    raise MalformedRecord("empty pair_id", lineno)
                if pair_id in seen:
                    raise DuplicatePairId(f"{path}: pair_id {pair_id!r} repeated at line {lineno}")
                seen.add(pair_id)
                split = (rec["split"] or "").strip().lower()
                if split not in SPLITS:
                    raise UnknownSplit(f"{path}: line {lineno}: unknown split {rec['split']!r}")
                rows.append(PairRow(
                    pair_id=pair_id,
                    predicted_path=base / rec["predicted_path"].strip(),
                    experimental_path=base / rec["experimental_path"].strip(),
                    split=split,
                ))
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    return PairManifest(rows)


def load_pair(row: PairRow, chain: str | None = None) -> tuple[BackboneStructure, BackboneStructure]:
    """Parse both members of a pair; their residue counts must agree."""
    pred = parse_structure(row.predicted_path, chain=chain, predicted=True)
    exp = parse_structure(row.experimental_path, chain=chain)
    if len(pred) != len(exp):
        raise LengthMismatch(
            f"pair {row.pair_id}: predicted has {len(pred)} residues, experimental {len(exp)}"
        )
    return pred, exp


@dataclass(frozen=True)
class FilterResult:
    accepted: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.accepted


def filter_pair(pred: BackboneStructure, exp: BackboneStructure,
                min_plddt: float = 70.0) -> FilterResult:
    """Curation filter: mean pLDDT strictly above ``min_plddt`` and equal lengths."""
    if pred.plddt is None:
        raise MissingPlddt(f"{pred.id}: predicted structure carries no pLDDT")
    if len(pred) != len(exp):
        return FilterResult(False, "LengthMismatch")
    if not float(np.mean(pred.plddt)) > min_plddt:
        return FilterResult(False, "LowPlddt")
    return FilterResult(True)


def list_structure_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise IoFailure(f"not a directory: {directory}")
    exts = (".pdb", ".ent", ".pdb.gz", ".ent.gz")
    return sorted(p for p in directory.iterdir() if p.is_file() and p.name.endswith(exts))


def load_directory(directory, predicted: bool = False) -> list[BackboneStructure]:
    return [parse_structure(p, predicted=predicted) for p in list_structure_files(directory)]


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {path}: {exc}") from exc
    return path
